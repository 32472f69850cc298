#pragma once

#include "fctn/checkpoint.hpp"
#include "fctn/losses.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace fctn {

enum class Domain { Source, Target };

std::string_view domain_name(Domain d);
Domain parse_domain(std::string_view s);

// ---------------------------------------------------------------------------
// Raster I/O. Images are 8-bit RGB PNGs normalized to [0, 1]; masks are
// 8-bit single-channel PNGs of class ids.

TensorF read_rgb_png(const std::filesystem::path& path);
Mask read_mask_png(const std::filesystem::path& path);

/// Values are clamped to [0, 1] and rounded to the nearest 8-bit level.
void write_rgb_png(const TensorF& image, const std::filesystem::path& path);
void write_mask_png(const Mask& mask, const std::filesystem::path& path);

/// Rounds every value to the nearest of 256 levels in [0, 1]; what an image
/// looks like after a PNG round trip.
TensorF quantize_8bit(const TensorF& image);

// ---------------------------------------------------------------------------

struct ManifestEntry {
  std::string image;                ///< relative to the dataset root
  std::optional<std::string> mask;  ///< relative to the dataset root
};

/// An image set held in memory together with its on-disk description.
///
/// Layout on disk: root/manifest.txt, root/images/NNNNN.png and, for labeled
/// sets, root/masks/NNNNN.png. The manifest has one "image [mask]" pair of
/// relative paths per line; '#' lines are comments, and the first comment
/// may carry "domain=source|target".
struct Dataset {
  std::filesystem::path root;
  Domain domain = Domain::Source;
  std::vector<ManifestEntry> manifest;
  std::vector<TensorF> images;
  std::vector<Mask> masks;  ///< empty for unlabeled sets, else one per image

  std::size_t size() const { return images.size(); }
  bool labeled() const { return !images.empty() && masks.size() == images.size(); }
  Index height() const { return images.empty() ? 0 : images.front().dim(0); }
  Index width() const { return images.empty() ? 0 : images.front().dim(1); }

  /// Throws Error when images differ in size or masks disagree with images.
  void validate() const;
};

Dataset load_dataset(const std::filesystem::path& root);

/// Writes images, masks (if any) and the manifest under `root`, replacing
/// `manifest` with the canonical file names.
void write_dataset(Dataset& dataset, const std::filesystem::path& root);

/// Copies an externally labeled dataset, remapping mask ids through a table
/// file of "external_id train_id" lines. Unlisted ids become kIgnoreId.
Dataset import_dataset(const std::filesystem::path& source_root, const std::filesystem::path& id_map,
                       const std::filesystem::path& dest_root, Domain domain);

std::array<std::uint8_t, 256> read_id_map(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Procedural urban-like scenes

inline constexpr std::array<const char*, 8> kSceneClassNames = {"sky",        "building", "road", "sidewalk",
                                                                "vegetation", "car",      "pole", "sign"};

namespace scene_class {
inline constexpr std::uint8_t kSky = 0, kBuilding = 1, kRoad = 2, kSidewalk = 3, kVegetation = 4, kCar = 5,
                              kPole = 6, kSign = 7;
}

/// Appearance of one domain. Shifts act on pixels only, never on layouts.
struct DomainStyle {
  double hue_rotation_deg = 0.0;  ///< rotation of chroma around the grey axis
  double gamma = 1.0;             ///< applied as v^gamma
  double noise = 0.02;            ///< std of additive per-pixel noise
  double texture_frequency = 1.0; ///< scales every procedural texture's frequency
  double contrast = 1.0;          ///< scales distance from mid-grey

  friend bool operator==(const DomainStyle&, const DomainStyle&) = default;
};

struct SceneGenConfig {
  std::uint64_t seed = 7;
  int count = 200;
  int height = 64;
  int width = 128;
  int num_classes = 8;
  DomainStyle source{};
  DomainStyle target{30.0, 1.2, 0.10, 1.4, 0.85};

  void validate() const;
  const DomainStyle& style(Domain d) const { return d == Domain::Source ? source : target; }
};

/// One scene. The layout (and hence the mask) depends only on (seed, index);
/// the domain selects the appearance.
LabeledImage<float> render_scene(const SceneGenConfig& cfg, Domain domain, std::uint64_t index);

/// Renders cfg.count scenes in memory. `with_masks` = false drops the labels
/// (unlabeled target training sets).
Dataset generate_scenes(const SceneGenConfig& cfg, Domain domain, bool with_masks = true);

/// Renders and writes a dataset to `out`.
Dataset generate_scenes(const SceneGenConfig& cfg, Domain domain, const std::filesystem::path& out,
                        bool with_masks = true);

// ---------------------------------------------------------------------------
// Minibatches

/// Which samples make up each training step.
///
/// Every stream (source, pseudo-labeled target) is consumed as a sequence of
/// per-epoch permutations derived from (seed, stream, epoch), so a step's
/// batch is a pure function of the step index.
class MinibatchSampler {
 public:
  /// `target_size` = nullopt selects pretraining mode (all B from source).
  MinibatchSampler(std::size_t source_size, std::optional<std::size_t> target_size, int batch_size,
                   std::uint64_t seed);

  struct Plan {
    std::vector<std::size_t> source;
    std::vector<std::size_t> target;
  };

  Plan plan(std::uint64_t step) const;

  int source_per_batch() const { return per_source_; }
  int target_per_batch() const { return per_target_; }

 private:
  std::vector<std::size_t> draws(std::size_t n, int stream, std::uint64_t first, int count) const;

  std::size_t source_size_;
  std::size_t target_size_;
  int per_source_;
  int per_target_;
  std::uint64_t seed_;
};

}  // namespace fctn
