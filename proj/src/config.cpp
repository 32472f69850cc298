#include "fctn/config.hpp"

#include <fstream>
#include <set>

namespace fctn {

using nlohmann::json;

namespace {

// Rejects keys outside `allowed`, so typos fail loudly instead of silently
// falling back to defaults.
void check_keys(const json& j, std::string_view section, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(std::string(section) + ": expected an object");
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, _] : j.items())
    if (!ok.count(key))
      throw ConfigError("unknown key '" + key + "'" + (section.empty() ? "" : " in '" + std::string(section) + "'"));
}

template <typename T>
void read(const json& j, const char* key, T& out, std::string_view section) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string(section) + "." + key + ": " + e.what());
  }
}

json to_json(const ConvSpec& c) {
  return {{"out_channels", c.out_channels}, {"kernel_size", c.kernel_size}, {"dilation", c.dilation}};
}

std::vector<ConvSpec> layers_from_json(const json& j, std::string_view section) {
  if (!j.is_array()) throw ConfigError(std::string(section) + ": expected an array of layers");
  std::vector<ConvSpec> out;
  for (const auto& l : j) {
    check_keys(l, section, {"out_channels", "kernel_size", "dilation"});
    ConvSpec c;
    read(l, "out_channels", c.out_channels, section);
    read(l, "kernel_size", c.kernel_size, section);
    read(l, "dilation", c.dilation, section);
    out.push_back(c);
  }
  return out;
}

json to_json(const DomainStyle& s) {
  return {{"hue_rotation_deg", s.hue_rotation_deg},
          {"gamma", s.gamma},
          {"noise", s.noise},
          {"texture_frequency", s.texture_frequency},
          {"contrast", s.contrast}};
}

DomainStyle style_from_json(const json& j, DomainStyle s, std::string_view section) {
  check_keys(j, section, {"hue_rotation_deg", "gamma", "noise", "texture_frequency", "contrast"});
  read(j, "hue_rotation_deg", s.hue_rotation_deg, section);
  read(j, "gamma", s.gamma, section);
  read(j, "noise", s.noise, section);
  read(j, "texture_frequency", s.texture_frequency, section);
  read(j, "contrast", s.contrast, section);
  return s;
}

std::string mode_name(UpdateMode m) { return m == UpdateMode::Joint ? "joint" : "alternating"; }

UpdateMode parse_mode(const std::string& s) {
  if (s == "joint") return UpdateMode::Joint;
  if (s == "alternating") return UpdateMode::Alternating;
  throw ConfigError("train.update_mode: expected 'joint' or 'alternating', got '" + s + "'");
}

}  // namespace

json to_json(const ArchSpec& arch) {
  json base = json::array(), branch = json::array();
  for (const auto& l : arch.base_layers) base.push_back(to_json(l));
  for (const auto& l : arch.branch_layers) branch.push_back(to_json(l));
  return {{"input_channels", arch.input_channels},
          {"num_classes", arch.num_classes},
          {"base_layers", base},
          {"branch_layers", branch}};
}

ArchSpec arch_from_json(const json& j) {
  check_keys(j, "arch", {"input_channels", "num_classes", "base_layers", "branch_layers"});
  ArchSpec a = ArchSpec::desk_default(j.value("num_classes", 8));
  read(j, "input_channels", a.input_channels, "arch");
  read(j, "num_classes", a.num_classes, "arch");
  if (j.contains("base_layers")) a.base_layers = layers_from_json(j["base_layers"], "arch.base_layers");
  if (j.contains("branch_layers")) a.branch_layers = layers_from_json(j["branch_layers"], "arch.branch_layers");
  return a;
}

json to_json(const RunConfig& c) {
  const TrainConfig& t = c.train;
  const SceneGenConfig& s = c.scenes;
  return {
      {"tag", c.tag},
      {"output_dir", c.output_dir.string()},
      {"data",
       {{"source", c.data.source.string()},
        {"target_train", c.data.target_train.string()},
        {"target_val", c.data.target_val.string()}}},
      {"arch", to_json(c.arch)},
      {"train",
       {{"alpha", t.alpha},
        {"beta", t.beta},
        {"learning_rate", t.learning_rate},
        {"pretrain_iters", t.pretrain_iters},
        {"rounds", t.rounds},
        {"steps_per_round", t.steps_per_round},
        {"batch_size", t.batch_size},
        {"threshold", t.threshold},
        {"seed", t.seed},
        {"checkpoint_every", t.checkpoint_every},
        {"update_mode", mode_name(t.update_mode)},
        {"pretrain_target_branch", t.pretrain_target_branch},
        {"threads", t.threads},
        {"log_every", t.log_every}}},
      {"scenes",
       {{"seed", s.seed},
        {"count", s.count},
        {"val_count", c.val_count},
        {"height", s.height},
        {"width", s.width},
        {"num_classes", s.num_classes},
        {"source", to_json(s.source)},
        {"target", to_json(s.target)}}},
  };
}

RunConfig run_config_from_json(const json& j) {
  check_keys(j, "", {"tag", "output_dir", "data", "arch", "train", "scenes"});
  RunConfig c;
  read(j, "tag", c.tag, "tag");
  if (j.contains("output_dir")) c.output_dir = j["output_dir"].get<std::string>();
  if (j.contains("data")) {
    const json& d = j["data"];
    check_keys(d, "data", {"source", "target_train", "target_val"});
    if (d.contains("source")) c.data.source = d["source"].get<std::string>();
    if (d.contains("target_train")) c.data.target_train = d["target_train"].get<std::string>();
    if (d.contains("target_val")) c.data.target_val = d["target_val"].get<std::string>();
  }
  if (j.contains("arch")) c.arch = arch_from_json(j["arch"]);
  if (j.contains("train")) {
    const json& t = j["train"];
    check_keys(t, "train",
               {"alpha", "beta", "learning_rate", "pretrain_iters", "rounds", "steps_per_round", "batch_size",
                "threshold", "seed", "checkpoint_every", "update_mode", "pretrain_target_branch", "threads",
                "log_every"});
    TrainConfig& tc = c.train;
    read(t, "alpha", tc.alpha, "train");
    read(t, "beta", tc.beta, "train");
    read(t, "learning_rate", tc.learning_rate, "train");
    read(t, "pretrain_iters", tc.pretrain_iters, "train");
    read(t, "rounds", tc.rounds, "train");
    read(t, "steps_per_round", tc.steps_per_round, "train");
    read(t, "batch_size", tc.batch_size, "train");
    read(t, "threshold", tc.threshold, "train");
    read(t, "seed", tc.seed, "train");
    read(t, "checkpoint_every", tc.checkpoint_every, "train");
    if (t.contains("update_mode")) tc.update_mode = parse_mode(t["update_mode"].get<std::string>());
    read(t, "pretrain_target_branch", tc.pretrain_target_branch, "train");
    read(t, "threads", tc.threads, "train");
    read(t, "log_every", tc.log_every, "train");
  }
  if (j.contains("scenes")) {
    const json& s = j["scenes"];
    check_keys(s, "scenes", {"seed", "count", "val_count", "height", "width", "num_classes", "source", "target"});
    SceneGenConfig& sc = c.scenes;
    read(s, "seed", sc.seed, "scenes");
    read(s, "count", sc.count, "scenes");
    read(s, "val_count", c.val_count, "scenes");
    read(s, "height", sc.height, "scenes");
    read(s, "width", sc.width, "scenes");
    read(s, "num_classes", sc.num_classes, "scenes");
    if (s.contains("source")) sc.source = style_from_json(s["source"], sc.source, "scenes.source");
    if (s.contains("target")) sc.target = style_from_json(s["target"], sc.target, "scenes.target");
  }
  c.validate();
  return c;
}

std::filesystem::path RunConfig::run_dir() const { return output_dir / (tag + "-seed" + std::to_string(train.seed)); }

void RunConfig::validate() const {
  if (tag.empty()) throw ConfigError("tag must not be empty");
  if (val_count < 1) throw ConfigError("scenes.val_count must be positive");
  try {
    arch.validate();
    train.validate();
    scenes.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  if (scenes.num_classes != arch.num_classes) throw ConfigError("scenes.num_classes differs from arch.num_classes");
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

void save_run_config(const RunConfig& cfg, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  out << to_json(cfg).dump(2) << '\n';
  if (!out) throw Error("cannot write " + path.string());
}

void apply_override(RunConfig& cfg, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) throw ConfigError("override must look like key=value");
  const std::string key(assignment.substr(0, eq)), text(assignment.substr(eq + 1));
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }
  json j = to_json(cfg);
  json::json_pointer ptr("/" + [&] {
    std::string p = key;
    for (auto& ch : p)
      if (ch == '.') ch = '/';
    return p;
  }());
  if (!j.contains(ptr)) throw ConfigError("unknown config key '" + key + "'");
  j[ptr] = value;
  cfg = run_config_from_json(j);
}

}  // namespace fctn
