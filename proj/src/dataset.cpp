#include "fctn/dataset.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <random>
#include <sstream>

namespace fctn {

namespace fs = std::filesystem;

std::string_view domain_name(Domain d) { return d == Domain::Source ? "source" : "target"; }

Domain parse_domain(std::string_view s) {
  if (s == "source") return Domain::Source;
  if (s == "target") return Domain::Target;
  throw Error("unknown domain: " + std::string(s));
}

// ---------------------------------------------------------------------------
// PNG

namespace {

struct PngImage {
  png_image img{};
  PngImage() {
    img.version = PNG_IMAGE_VERSION;
  }
  ~PngImage() { png_image_free(&img); }
};

std::vector<std::uint8_t> read_png(const fs::path& path, png_uint_32 format, Index& h, Index& w,
                                   bool require_gray) {
  PngImage p;
  if (!png_image_begin_read_from_file(&p.img, path.string().c_str()))
    throw FormatError("cannot read PNG " + path.string() + ": " + p.img.message);
  if (require_gray && (p.img.format & (PNG_FORMAT_FLAG_COLOR | PNG_FORMAT_FLAG_ALPHA)) != 0 &&
      !(p.img.format & PNG_FORMAT_FLAG_COLORMAP))
    throw FormatError("mask " + path.string() + " is not a single-channel image");
  p.img.format = format;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(p.img));
  if (!png_image_finish_read(&p.img, nullptr, buf.data(), 0, nullptr))
    throw FormatError("cannot decode PNG " + path.string() + ": " + p.img.message);
  h = Index(p.img.height);
  w = Index(p.img.width);
  return buf;
}

void write_png(const fs::path& path, png_uint_32 format, Index h, Index w, const std::uint8_t* data) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  PngImage p;
  p.img.width = png_uint_32(w);
  p.img.height = png_uint_32(h);
  p.img.format = format;
  if (!png_image_write_to_file(&p.img, path.string().c_str(), 0, data, 0, nullptr))
    throw Error("cannot write PNG " + path.string() + ": " + p.img.message);
}

std::uint8_t to_byte(float v) { return std::uint8_t(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)); }

}  // namespace

TensorF read_rgb_png(const fs::path& path) {
  Index h = 0, w = 0;
  auto buf = read_png(path, PNG_FORMAT_RGB, h, w, false);
  TensorF out({h, w, 3});
  for (Index i = 0; i < out.size(); ++i) out[i] = float(buf[std::size_t(i)]) / 255.0f;
  return out;
}

Mask read_mask_png(const fs::path& path) {
  Index h = 0, w = 0;
  auto buf = read_png(path, PNG_FORMAT_GRAY, h, w, true);
  Mask m(h, w);
  std::copy(buf.begin(), buf.end(), m.data());
  return m;
}

void write_rgb_png(const TensorF& image, const fs::path& path) {
  if (image.rank() != 3 || image.dim(2) != 3) throw ShapeError("write_rgb_png: expected H x W x 3");
  std::vector<std::uint8_t> buf(std::size_t(image.size()));
  for (Index i = 0; i < image.size(); ++i) buf[std::size_t(i)] = to_byte(image[i]);
  write_png(path, PNG_FORMAT_RGB, image.dim(0), image.dim(1), buf.data());
}

void write_mask_png(const Mask& mask, const fs::path& path) {
  write_png(path, PNG_FORMAT_GRAY, mask.rows(), mask.cols(), mask.data());
}

TensorF quantize_8bit(const TensorF& image) {
  TensorF out(image.shape());
  for (Index i = 0; i < image.size(); ++i) out[i] = float(to_byte(image[i])) / 255.0f;
  return out;
}

// ---------------------------------------------------------------------------
// Dataset files

void Dataset::validate() const {
  if (images.empty()) return;
  const Shape& s = images.front().shape();
  if (s.size() != 3) throw Error("dataset image is not H x W x C");
  for (std::size_t i = 0; i < images.size(); ++i)
    if (images[i].shape() != s)
      throw Error("dataset " + root.string() + ": image " + std::to_string(i) + " has shape " +
                  shape_str(images[i].shape()) + ", expected " + shape_str(s));
  if (!masks.empty() && masks.size() != images.size()) throw Error("dataset: mask count differs from image count");
  for (std::size_t i = 0; i < masks.size(); ++i)
    if (masks[i].rows() != s[0] || masks[i].cols() != s[1])
      throw Error("dataset " + root.string() + ": mask " + std::to_string(i) + " does not match its image size");
}

Dataset load_dataset(const fs::path& root) {
  const fs::path manifest_path = root / "manifest.txt";
  std::ifstream in(manifest_path);
  if (!in) throw Error("missing dataset manifest " + manifest_path.string());
  Dataset ds;
  ds.root = root;
  std::optional<Domain> declared;
  std::string line;
  bool any_mask = false, any_unlabeled = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      auto pos = line.find("domain=");
      if (pos != std::string::npos) {
        std::istringstream ls(line.substr(pos + 7));
        std::string d;
        ls >> d;
        declared = parse_domain(d);
      }
      continue;
    }
    std::istringstream ls(line);
    ManifestEntry e;
    std::string mask;
    if (!(ls >> e.image)) continue;
    if (ls >> mask) {
      e.mask = mask;
      any_mask = true;
    } else {
      any_unlabeled = true;
    }
    ds.manifest.push_back(std::move(e));
  }
  if (any_mask && any_unlabeled) throw Error("dataset " + root.string() + ": some but not all images have masks");
  ds.domain = declared.value_or(any_mask ? Domain::Source : Domain::Target);

  for (const auto& e : ds.manifest) {
    const fs::path img = root / e.image;
    if (!fs::exists(img)) throw Error("dataset " + root.string() + ": missing file " + img.string());
    ds.images.push_back(read_rgb_png(img));
    if (e.mask) {
      const fs::path m = root / *e.mask;
      if (!fs::exists(m)) throw Error("dataset " + root.string() + ": missing file " + m.string());
      ds.masks.push_back(read_mask_png(m));
    }
  }
  ds.validate();
  if (ds.domain == Domain::Source && !ds.labeled() && !ds.images.empty())
    throw Error("dataset " + root.string() + ": source datasets need a mask for every image");
  return ds;
}

void write_dataset(Dataset& ds, const fs::path& root) {
  ds.validate();
  fs::create_directories(root / "images");
  if (!ds.masks.empty()) fs::create_directories(root / "masks");
  ds.manifest.clear();
  std::ofstream manifest(root / "manifest.txt", std::ios::trunc);
  if (!manifest) throw Error("cannot write manifest under " + root.string());
  manifest << "# fctn-dataset v1 domain=" << domain_name(ds.domain) << "\n";
  for (std::size_t i = 0; i < ds.images.size(); ++i) {
    std::ostringstream stem;
    stem << std::setw(5) << std::setfill('0') << i << ".png";
    ManifestEntry e{"images/" + stem.str(), std::nullopt};
    write_rgb_png(ds.images[i], root / e.image);
    if (!ds.masks.empty()) {
      e.mask = "masks/" + stem.str();
      write_mask_png(ds.masks[i], root / *e.mask);
    }
    manifest << e.image;
    if (e.mask) manifest << ' ' << *e.mask;
    manifest << '\n';
    ds.manifest.push_back(std::move(e));
  }
  ds.root = root;
}

std::array<std::uint8_t, 256> read_id_map(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read id map " + path.string());
  std::array<std::uint8_t, 256> map;
  map.fill(kIgnoreId);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    int from = 0, to = 0;
    if (!(ls >> from >> to) || from < 0 || from > 255 || to < 0 || to > 255)
      throw Error("id map " + path.string() + ":" + std::to_string(lineno) + ": expected 'external_id train_id'");
    map[std::size_t(from)] = std::uint8_t(to);
  }
  return map;
}

Dataset import_dataset(const fs::path& source_root, const fs::path& id_map, const fs::path& dest_root, Domain domain) {
  const auto map = read_id_map(id_map);
  Dataset ds = load_dataset(source_root);
  ds.domain = domain;
  for (Mask& m : ds.masks)
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = map[m.data()[i]];
  write_dataset(ds, dest_root);
  return ds;
}

// ---------------------------------------------------------------------------
// Scene generator

void SceneGenConfig::validate() const {
  if (count < 1) throw Error("scene generator: count must be positive");
  if (height < 16 || width < 16) throw Error("scene generator: height and width must be at least 16");
  if (num_classes != 8) throw Error("scene generator: renders exactly 8 classes");
  for (const DomainStyle* s : {&source, &target})
    if (!(s->gamma > 0) || s->noise < 0 || !(s->texture_frequency > 0) || !(s->contrast > 0))
      throw Error("scene generator: invalid domain style");
}

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t index, std::uint64_t salt) {
  return splitmix(splitmix(splitmix(seed) ^ index) ^ salt);
}

// Deterministic lattice hash in [0, 1).
double hash01(int x, int y, std::uint64_t salt) {
  std::uint64_t h = splitmix(salt ^ (std::uint64_t(std::uint32_t(x)) << 32 | std::uint32_t(y)));
  return double(h >> 11) * (1.0 / 9007199254740992.0);
}

// Bilinear value noise with lattice spacing `cell` pixels.
double value_noise(double x, double y, double cell, std::uint64_t salt) {
  const double fx = x / cell, fy = y / cell;
  const int ix = int(std::floor(fx)), iy = int(std::floor(fy));
  const double tx = fx - ix, ty = fy - iy;
  auto sm = [](double t) { return t * t * (3 - 2 * t); };
  const double a = hash01(ix, iy, salt), b = hash01(ix + 1, iy, salt);
  const double c = hash01(ix, iy + 1, salt), d = hash01(ix + 1, iy + 1, salt);
  const double u = sm(tx), v = sm(ty);
  return (a * (1 - u) + b * u) * (1 - v) + (c * (1 - u) + d * u) * v;
}

using Rgb = std::array<double, 3>;

struct Layout {
  Mask mask;
  // Instance id per pixel (building / car / sign index), used for per-instance colors.
  Eigen::Array<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> instance;
  std::vector<Rgb> instance_color;
  int horizon = 0;
  int road_top = 0;
  double road_center = 0;
};

Layout make_layout(const SceneGenConfig& cfg, std::uint64_t index) {
  using namespace scene_class;
  std::mt19937_64 rng(stream_seed(cfg.seed, index, 0x1a7));
  auto uni = [&](double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng); };
  auto uint = [&](int a, int b) { return std::uniform_int_distribution<int>(a, b)(rng); };

  const int H = cfg.height, W = cfg.width;
  Layout L;
  L.mask = Mask::Constant(H, W, kSky);
  L.instance = decltype(L.instance)::Constant(H, W, -1);
  L.horizon = int(H * uni(0.30, 0.42));
  L.road_top = int(H * uni(0.56, 0.64));
  L.road_center = W * uni(0.38, 0.62);
  const double top_half = W * uni(0.06, 0.14), bottom_half = W * uni(0.45, 0.65);
  auto road_half = [&](int y) {
    const double t = double(y - L.road_top) / std::max(1, H - 1 - L.road_top);
    return top_half + (bottom_half - top_half) * t;
  };

  auto paint = [&](int y0, int y1, int x0, int x1, std::uint8_t cls, int inst = -1) {
    for (int y = std::max(0, y0); y < std::min(H, y1); ++y)
      for (int x = std::max(0, x0); x < std::min(W, x1); ++x) {
        L.mask(y, x) = cls;
        L.instance(y, x) = inst;
      }
  };
  auto new_instance = [&](Rgb c) {
    L.instance_color.push_back(c);
    return int(L.instance_color.size()) - 1;
  };

  // Ground: hedge band between horizon and the kerb line, pavement below.
  paint(L.horizon, L.road_top, 0, W, kVegetation);
  paint(L.road_top, H, 0, W, kSidewalk);
  for (int y = L.road_top; y < H; ++y) {
    const double hw = road_half(y);
    for (int x = 0; x < W; ++x)
      if (std::abs(x + 0.5 - L.road_center) <= hw) L.mask(y, x) = kRoad;
  }

  // Skyline: buildings interleaved with trees.
  for (int x = 0; x < W;) {
    const int w = uint(std::max(6, W / 12), std::max(8, W / 4));
    if (uni(0, 1) < 0.72) {
      const int top = int(H * uni(0.06, std::max(0.07, double(L.horizon) / H - 0.02)));
      const double tone = uni(0.35, 0.65);
      const int inst = new_instance({tone + uni(-0.05, 0.1), tone * uni(0.8, 0.95), tone * uni(0.7, 0.9)});
      paint(top, L.road_top, x, x + w, kBuilding, inst);
    } else {
      const double cx = x + w / 2.0, cy = L.horizon - uni(0.0, 0.12) * H;
      const double rx = w * uni(0.45, 0.7), ry = H * uni(0.10, 0.2);
      for (int y = 0; y < L.road_top; ++y)
        for (int xx = std::max(0, int(cx - rx)); xx < std::min(W, int(cx + rx) + 1); ++xx) {
          const double dx = (xx + 0.5 - cx) / rx, dy = (y + 0.5 - cy) / ry;
          if (dx * dx + dy * dy <= 1.0 || (y >= cy && std::abs(xx + 0.5 - cx) < 1.5)) {
            L.mask(y, xx) = kVegetation;
            L.instance(y, xx) = -1;
          }
        }
    }
    x += w;
  }

  // Cars sit on the road; nearer ones are lower and larger.
  const int cars = uint(0, 3);
  static const Rgb palette[] = {{0.75, 0.12, 0.1}, {0.12, 0.2, 0.7}, {0.9, 0.9, 0.88}, {0.1, 0.1, 0.12},
                                {0.7, 0.7, 0.72}};
  for (int i = 0; i < cars; ++i) {
    const int yb = uint(L.road_top + std::max(3, H / 12), H - 1);
    const double s = double(yb - L.horizon) / (H - L.horizon);
    const int cw = int(W * (0.06 + 0.12 * s)), ch = int(H * (0.06 + 0.12 * s));
    const double hw = road_half(yb);
    const int cx = int(L.road_center + uni(-0.7, 0.7) * hw);
    const int inst = new_instance(palette[uint(0, 4)]);
    paint(yb - ch, yb + 1, cx - cw / 2, cx + cw / 2 + 1, kCar, inst);
  }

  // Poles on the pavement, some carrying a sign near the top.
  const int poles = uint(1, 3);
  for (int i = 0; i < poles; ++i) {
    const int yb = uint(L.road_top + 2, H - 3);
    const double hw = road_half(yb);
    const bool left = uni(0, 1) < 0.5;
    int x = int(left ? L.road_center - hw - uni(2, 10) : L.road_center + hw + uni(2, 10));
    x = std::clamp(x, 1, W - 3);
    const int top = int(H * uni(0.1, 0.3));
    const int pw = W >= 96 ? uint(1, 2) : 1;
    paint(top, yb + 1, x, x + pw, kPole);
    if (uni(0, 1) < 0.75) {
      const int sw = uint(std::max(3, W / 32), std::max(4, W / 20)), sh = uint(std::max(3, H / 20), std::max(4, H / 12));
      const int sx = left ? x + pw : x - sw;
      const bool yellow = uni(0, 1) < 0.5;
      const int inst = new_instance(yellow ? Rgb{0.92, 0.78, 0.1} : Rgb{0.15, 0.3, 0.85});
      paint(top + 1, top + 1 + sh, sx, sx + sw, kSign, inst);
    }
  }
  return L;
}

// Rotation of an RGB vector about the grey diagonal.
Rgb rotate_hue(const Rgb& c, double degrees) {
  if (degrees == 0.0) return c;
  const double th = degrees * std::numbers::pi / 180.0;
  const double cs = std::cos(th), sn = std::sin(th), k = 1.0 / std::sqrt(3.0);
  const double a = cs + (1 - cs) / 3, b = (1 - cs) / 3 - k * sn, d = (1 - cs) / 3 + k * sn;
  return {a * c[0] + b * c[1] + d * c[2], d * c[0] + a * c[1] + b * c[2], b * c[0] + d * c[1] + a * c[2]};
}

}  // namespace

LabeledImage<float> render_scene(const SceneGenConfig& cfg, Domain domain, std::uint64_t index) {
  using namespace scene_class;
  cfg.validate();
  const Layout L = make_layout(cfg, index);
  const DomainStyle& style = cfg.style(domain);
  const int H = cfg.height, W = cfg.width;
  const double f = style.texture_frequency;
  const double pi = std::numbers::pi;
  const std::uint64_t tex_salt = stream_seed(cfg.seed, index, 0x7e4);
  std::mt19937_64 noise_rng(stream_seed(cfg.seed, index, domain == Domain::Source ? 0x5 : 0x7));
  std::normal_distribution<double> noise(0.0, 1.0);

  TensorF image({H, W, 3});
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const std::uint8_t cls = L.mask(y, x);
      const int inst = L.instance(y, x);
      Rgb c{};
      switch (cls) {
        case kSky: {
          const double t = double(y) / std::max(1, L.horizon);
          const double cloud = value_noise(x, y, 10.0 / f, tex_salt ^ 1);
          c = {0.45 + 0.2 * t, 0.6 + 0.15 * t, 0.88};
          for (auto& v : c) v += 0.12 * (cloud - 0.5);
          break;
        }
        case kBuilding: {
          c = L.instance_color[std::size_t(inst)];
          const double period = 6.0 / f;
          const bool window = std::fmod(x + 0.5 * inst, period) > period * 0.5 && std::fmod(y, period) > period * 0.45;
          if (window) c = {c[0] * 0.45, c[1] * 0.5, c[2] * 0.6};
          break;
        }
        case kRoad: {
          const double grain = value_noise(x, y, 2.0 / f, tex_salt ^ 2);
          c = {0.33, 0.33, 0.36};
          for (auto& v : c) v += 0.08 * (grain - 0.5);
          const bool lane = std::abs(x + 0.5 - L.road_center) < 0.8 && std::fmod(y * f, 8.0) < 4.0;
          if (lane) c = {0.85, 0.85, 0.8};
          break;
        }
        case kSidewalk: {
          const double period = 8.0 / f;
          const bool joint = std::fmod(x + y * 0.3, period) < 1.0 || std::fmod(double(y), period) < 1.0;
          c = joint ? Rgb{0.5, 0.47, 0.44} : Rgb{0.68, 0.63, 0.58};
          break;
        }
        case kVegetation: {
          const double leaf = value_noise(x, y, 1.5 / f, tex_salt ^ 3);
          const double clump = value_noise(x, y, 6.0 / f, tex_salt ^ 4);
          c = {0.18 + 0.1 * clump, 0.42 + 0.25 * leaf, 0.12 + 0.08 * clump};
          break;
        }
        case kCar: {
          c = L.instance_color[std::size_t(inst)];
          const double shade = 0.85 + 0.15 * std::sin(pi * f * x / 7.0);
          for (auto& v : c) v *= shade;
          break;
        }
        case kPole:
          c = {0.28, 0.28, 0.3};
          break;
        case kSign:
          c = L.instance_color[std::size_t(inst)];
          break;
        default:
          break;
      }
      for (auto& v : c) v = 0.5 + (v - 0.5) * style.contrast;
      c = rotate_hue(c, style.hue_rotation_deg);
      for (int k = 0; k < 3; ++k) {
        double v = std::pow(std::clamp(c[std::size_t(k)], 0.0, 1.0), style.gamma);
        v += style.noise * noise(noise_rng);
        image[(Index(y) * W + x) * 3 + k] = float(v);
      }
    }
  }
  return {quantize_8bit(image), L.mask};
}

Dataset generate_scenes(const SceneGenConfig& cfg, Domain domain, bool with_masks) {
  cfg.validate();
  Dataset ds;
  ds.domain = domain;
  for (int i = 0; i < cfg.count; ++i) {
    auto scene = render_scene(cfg, domain, std::uint64_t(i));
    ds.images.push_back(std::move(scene.image));
    if (with_masks) ds.masks.push_back(std::move(scene.mask));
  }
  return ds;
}

Dataset generate_scenes(const SceneGenConfig& cfg, Domain domain, const fs::path& out, bool with_masks) {
  Dataset ds = generate_scenes(cfg, domain, with_masks);
  write_dataset(ds, out);
  return ds;
}

// ---------------------------------------------------------------------------
// Sampling

MinibatchSampler::MinibatchSampler(std::size_t source_size, std::optional<std::size_t> target_size, int batch_size,
                                   std::uint64_t seed)
    : source_size_(source_size), target_size_(target_size.value_or(0)), seed_(seed) {
  if (batch_size < 1) throw Error("batch size must be positive");
  if (source_size == 0) throw Error("source set is empty");
  if (target_size) {
    if (batch_size % 2 != 0) throw Error("batch size must be even when mixing source and target samples");
    if (*target_size == 0) throw Error("pseudo-labeled target set is empty");
    per_source_ = per_target_ = batch_size / 2;
  } else {
    per_source_ = batch_size;
    per_target_ = 0;
  }
}

std::vector<std::size_t> MinibatchSampler::draws(std::size_t n, int stream, std::uint64_t first, int count) const {
  std::vector<std::size_t> out;
  std::vector<std::size_t> perm;
  std::uint64_t cached_epoch = ~0ULL;
  for (std::uint64_t k = first; k < first + std::uint64_t(count); ++k) {
    const std::uint64_t epoch = k / n;
    if (epoch != cached_epoch) {
      perm.resize(n);
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      std::mt19937_64 rng(stream_seed(seed_, epoch, 0x100 + std::uint64_t(stream)));
      std::shuffle(perm.begin(), perm.end(), rng);
      cached_epoch = epoch;
    }
    out.push_back(perm[k % n]);
  }
  return out;
}

MinibatchSampler::Plan MinibatchSampler::plan(std::uint64_t step) const {
  Plan p;
  p.source = draws(source_size_, 0, step * std::uint64_t(per_source_), per_source_);
  if (per_target_ > 0) p.target = draws(target_size_, 1, step * std::uint64_t(per_target_), per_target_);
  return p;
}

}  // namespace fctn
