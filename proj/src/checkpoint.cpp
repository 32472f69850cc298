#include "fctn/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace fctn {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

void put_string(std::ostream& os, const std::string& s) {
  put<std::uint32_t>(os, std::uint32_t(s.size()));
  os.write(s.data(), std::streamsize(s.size()));
}

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw FormatError("cannot open checkpoint " + path.string());
  }

  void read(void* dst, std::size_t n) {
    in_.read(static_cast<char*>(dst), std::streamsize(n));
    if (std::size_t(in_.gcount()) != n) throw FormatError("checkpoint " + path_.string() + " is truncated");
  }

  template <typename T>
  T get() {
    T v;
    read(&v, sizeof(T));
    return v;
  }

  std::string get_string(std::size_t limit) {
    const auto n = get<std::uint32_t>();
    if (n > limit) throw FormatError("checkpoint " + path_.string() + ": implausible string length");
    std::string s(n, '\0');
    read(s.data(), n);
    return s;
  }

  CheckpointInfo header() {
    char magic[8];
    read(magic, sizeof magic);
    if (std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
      throw FormatError(path_.string() + " is not a checkpoint (bad magic)");
    CheckpointInfo info;
    info.version = get<std::uint32_t>();
    if (info.version != kCheckpointVersion)
      throw FormatError("checkpoint format version " + std::to_string(info.version) + " unsupported (expected " +
                        std::to_string(kCheckpointVersion) + ")");
    info.value_bytes = get<std::uint32_t>();
    if (info.value_bytes != 4 && info.value_bytes != 8)
      throw FormatError("checkpoint value width " + std::to_string(info.value_bytes) + " unsupported");
    info.metadata = get_string(1u << 24);
    const auto count = get<std::uint32_t>();
    for (std::uint32_t i = 0; i < count; ++i) {
      std::string name = get_string(4096);
      const auto rank = get<std::uint32_t>();
      if (rank > 8) throw FormatError("checkpoint parameter " + name + " has implausible rank");
      Shape shape(rank);
      for (auto& d : shape) d = Index(get<std::uint64_t>());
      info.manifest.emplace_back(std::move(name), std::move(shape));
    }
    return info;
  }

 private:
  std::filesystem::path path_;
  std::ifstream in_;
};

}  // namespace

template <typename Scalar>
void save_checkpoint(const ParamStore<Scalar>& store, const std::filesystem::path& path, const std::string& metadata) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot write checkpoint " + path.string());
    os.write(kCheckpointMagic, sizeof kCheckpointMagic);
    put<std::uint32_t>(os, kCheckpointVersion);
    put<std::uint32_t>(os, sizeof(Scalar));
    put_string(os, metadata);
    put<std::uint32_t>(os, std::uint32_t(store.size()));
    for (const auto& [name, p] : store) {
      put_string(os, name);
      put<std::uint32_t>(os, std::uint32_t(p.value.rank()));
      for (Index d : p.value.shape()) put<std::uint64_t>(os, std::uint64_t(d));
    }
    for (const auto& [_, p] : store)
      os.write(reinterpret_cast<const char*>(p.value.data().data()), std::streamsize(p.value.size() * sizeof(Scalar)));
    if (!os) throw Error("failed writing checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

CheckpointInfo read_checkpoint_info(const std::filesystem::path& path) { return Reader(path).header(); }

template <typename Scalar>
ParamStore<Scalar> load_checkpoint(const std::filesystem::path& path, CheckpointInfo* info_out) {
  Reader r(path);
  CheckpointInfo info = r.header();
  if (info.value_bytes != sizeof(Scalar))
    throw FormatError("checkpoint stores " + std::to_string(info.value_bytes) + "-byte values, expected " +
                      std::to_string(sizeof(Scalar)));
  ParamStore<Scalar> store;
  for (const auto& [name, shape] : info.manifest) {
    Tensor<Scalar> t(shape);
    r.read(t.data().data(), std::size_t(t.size()) * sizeof(Scalar));
    store.add(name, std::move(t));
  }
  if (info_out) *info_out = std::move(info);
  return store;
}

template void save_checkpoint<float>(const ParamStore<float>&, const std::filesystem::path&, const std::string&);
template void save_checkpoint<double>(const ParamStore<double>&, const std::filesystem::path&, const std::string&);
template ParamStore<float> load_checkpoint<float>(const std::filesystem::path&, CheckpointInfo*);
template ParamStore<double> load_checkpoint<double>(const std::filesystem::path&, CheckpointInfo*);

}  // namespace fctn
