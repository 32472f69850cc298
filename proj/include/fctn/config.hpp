#pragma once

#include "fctn/trainer.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>
#include <string_view>

namespace fctn {

struct ConfigError : Error {
  using Error::Error;
};

struct DataPaths {
  std::filesystem::path source = "data/source";
  std::filesystem::path target_train = "data/target_train";
  std::filesystem::path target_val = "data/target_val";
};

/// Everything a run needs. Serialized as JSON with the sections "tag",
/// "output_dir", "data", "arch", "train" and "scenes"; every key is optional
/// and unknown keys are rejected.
struct RunConfig {
  std::string tag = "fctn";
  std::filesystem::path output_dir = "runs";
  DataPaths data;
  ArchSpec arch = ArchSpec::desk_default();
  TrainConfig train;
  SceneGenConfig scenes;
  int val_count = 50;  ///< scenes in the labeled target validation split

  /// output_dir / "<tag>-seed<seed>"
  std::filesystem::path run_dir() const;
  void validate() const;
};

nlohmann::json to_json(const ArchSpec& arch);
ArchSpec arch_from_json(const nlohmann::json& j);

nlohmann::json to_json(const RunConfig& cfg);
RunConfig run_config_from_json(const nlohmann::json& j);

RunConfig load_run_config(const std::filesystem::path& path);
void save_run_config(const RunConfig& cfg, const std::filesystem::path& path);

/// Applies a "section.key=value" override. The value is parsed as JSON and
/// falls back to a plain string, so "train.alpha=50" and "tag=quick" both
/// work.
void apply_override(RunConfig& cfg, std::string_view assignment);

}  // namespace fctn
