#include "fctn/cli.hpp"

#include "fctn/config.hpp"
#include "fctn/grad_check.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iomanip>

namespace fctn {

namespace fs = std::filesystem;

namespace {

// Settings shared by the training subcommands. Flags win over the config
// file, which wins over the built-in defaults.
struct RunFlags {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::string> tag, output_dir;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;

  void attach(CLI::App& app) {
    app.add_option("-c,--config", config, "JSON run config; omitted keys keep their defaults");
    app.add_option("--set", overrides, "Override a config key, e.g. --set train.alpha=50 (repeatable)");
    app.add_option("--tag", tag, "Run tag; outputs go to <output-dir>/<tag>-seed<seed>");
    app.add_option("--output-dir", output_dir, "Parent directory of run directories");
    app.add_option("--seed", seed, "Training seed");
    app.add_option("--threads", threads, "Worker threads");
  }

  RunConfig resolve() const {
    RunConfig cfg = config.empty() ? RunConfig{} : load_run_config(config);
    for (const auto& o : overrides) apply_override(cfg, o);
    if (tag) cfg.tag = *tag;
    if (output_dir) cfg.output_dir = *output_dir;
    if (seed) cfg.train.seed = *seed;
    if (threads) cfg.train.threads = *threads;
    cfg.validate();
    return cfg;
  }
};

Dataset require_dataset(const fs::path& root, const char* what) {
  if (!fs::exists(root / "manifest.txt"))
    throw Error(std::string("missing ") + what + " dataset at " + root.string() + " (run generate-data first)");
  return load_dataset(root);
}

FctnModel<float> load_model(const fs::path& path, CheckpointInfo* info_out = nullptr) {
  if (!fs::exists(path)) throw Error("missing checkpoint " + path.string());
  CheckpointInfo info;
  ParamStore<float> params = load_checkpoint<float>(path, &info);
  ArchSpec arch = arch_from_metadata(info.metadata);
  if (info_out) *info_out = info;
  return FctnModel<float>(std::move(arch), std::move(params));
}

// Fixed colours for mask inspection; ignored pixels are black.
TensorF colorize(const Mask& m) {
  static const std::array<std::array<float, 3>, 8> palette = {{{0.27f, 0.51f, 0.71f},
                                                               {0.27f, 0.27f, 0.27f},
                                                               {0.50f, 0.25f, 0.50f},
                                                               {0.96f, 0.14f, 0.91f},
                                                               {0.42f, 0.56f, 0.14f},
                                                               {0.00f, 0.00f, 0.56f},
                                                               {0.60f, 0.60f, 0.60f},
                                                               {0.86f, 0.86f, 0.00f}}};
  TensorF img({m.rows(), m.cols(), 3});
  for (Index i = 0; i < m.size(); ++i) {
    const auto y = m.data()[i];
    for (int c = 0; c < 3; ++c)
      img[i * 3 + c] = y == kIgnoreId ? 0.0f : y < palette.size() ? palette[y][c] : float((y * 37 + c * 91) % 256) / 255.0f;
  }
  return img;
}

int train_command(const RunConfig& cfg, const std::optional<std::string>& resume, std::ostream& out,
                  std::ostream& err) {
  const fs::path dir = cfg.run_dir();
  const Dataset source = require_dataset(cfg.data.source, "source");
  std::optional<Dataset> target_train, target_val;
  if (cfg.train.rounds > 0) target_train = require_dataset(cfg.data.target_train, "target training");
  if (fs::exists(cfg.data.target_val / "manifest.txt")) target_val = load_dataset(cfg.data.target_val);

  ResumePoint from;
  std::optional<FctnModel<float>> model;
  if (resume) {
    CheckpointInfo info;
    model.emplace(load_model(*resume, &info));
    if (!(model->spec() == cfg.arch)) throw Error("checkpoint architecture differs from the config");
    from = resume_point_from_metadata(info.metadata);
  } else {
    model.emplace(cfg.arch, cfg.train.seed);
  }
  fs::create_directories(dir);
  save_run_config(cfg, dir / "config.json");
  std::ofstream log_file(dir / "log.jsonl", resume ? std::ios::app : std::ios::trunc);
  RunLog log(&log_file);
  Trainer trainer(*model, {&source, target_train ? &*target_train : nullptr, target_val ? &*target_val : nullptr},
                  cfg.train, log, dir);
  for (int c : trainer.class_weights().absent)
    err << "warning: class " << c << " never occurs in the source labels; using weight 1\n";
  trainer.run(from);

  const auto names = default_class_names(cfg.arch.num_classes);
  for (const auto& e : log.evals()) out << "[" << e.stage << "]\n" << format_iou_table(e.report, names);
  for (const auto& l : log.labelings())
    out << "round " << l.round << " pseudo-label coverage " << std::fixed << std::setprecision(4)
        << l.summary.mean_coverage << "\n";
  out << "run directory: " << dir.string() << "\n";
  return 0;
}

}  // namespace

int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Tri-branch curriculum domain adaptation for semantic segmentation", "fctn"};
  app.require_subcommand(1);

  // generate-data
  auto* gen = app.add_subcommand("generate-data", "Render the synthetic source, target and validation sets");
  RunFlags gen_flags;
  std::optional<std::string> gen_out;
  gen->add_option("-c,--config", gen_flags.config, "JSON run config (scenes and data sections are used)");
  gen->add_option("--set", gen_flags.overrides, "Override a config key (repeatable)");
  gen->add_option("--out", gen_out, "Write <out>/source, <out>/target_train, <out>/target_val instead of data paths");

  // pretrain / adapt
  auto* pre = app.add_subcommand("pretrain", "Train on labeled source data only");
  RunFlags pre_flags;
  pre_flags.attach(*pre);
  auto* adapt = app.add_subcommand("adapt", "Pretrain, then curriculum rounds of pseudo-labeling and re-training");
  RunFlags adapt_flags;
  std::optional<std::string> resume;
  adapt_flags.attach(*adapt);
  adapt->add_option("--resume", resume, "Continue from a checkpoint written by an earlier run with the same config");

  // label
  auto* label = app.add_subcommand("label", "Write pseudo-label masks of a checkpoint for a set of images");
  std::string label_ckpt, label_data, label_out;
  double label_threshold = 0.95;
  int label_threads = 1;
  label->add_option("--checkpoint", label_ckpt, "Model checkpoint")->required();
  label->add_option("--data", label_data, "Dataset directory whose images get labeled")->required();
  label->add_option("--out", label_out, "Output dataset directory (masks plus colour previews in vis/)")->required();
  label->add_option("--threshold", label_threshold, "Confidence threshold")->capture_default_str();
  label->add_option("--threads", label_threads, "Worker threads")->capture_default_str();

  // evaluate
  auto* eval = app.add_subcommand("evaluate", "IoU report of a checkpoint (or saved predictions) on a labeled set");
  std::string eval_data, eval_branch = "Ft";
  std::optional<std::string> eval_ckpt, eval_pred, eval_metrics;
  int eval_threads = 1;
  eval->add_option("--data", eval_data, "Labeled dataset directory")->required();
  auto* ck = eval->add_option("--checkpoint", eval_ckpt, "Model checkpoint");
  auto* pr = eval->add_option("--predictions", eval_pred, "Dataset directory whose masks are predictions");
  ck->excludes(pr);
  eval->add_option("--branch", eval_branch, "Branch to evaluate: F1, F2 or Ft")->capture_default_str();
  eval->add_option("--metrics", eval_metrics, "Also write metric lines to this file");
  eval->add_option("--threads", eval_threads, "Worker threads")->capture_default_str();

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "Central finite-difference check of every op and loss term");
  std::uint64_t gc_seed = 1;
  double gc_tol = 1e-4;
  gc->add_option("--seed", gc_seed, "Seed of the random instances")->capture_default_str();
  gc->add_option("--tolerance", gc_tol, "Maximum relative error")->capture_default_str();

  // import
  auto* imp = app.add_subcommand("import", "Copy an external image/mask dataset, remapping label ids");
  std::string imp_src, imp_map, imp_dest, imp_domain = "target";
  imp->add_option("--src", imp_src, "Dataset directory with manifest.txt")->required();
  imp->add_option("--id-map", imp_map, "Lines of 'external_id train_id'")->required();
  imp->add_option("--dest", imp_dest, "Output dataset directory")->required();
  imp->add_option("--domain", imp_domain, "source or target")->capture_default_str();

  if (argc > 1 && argv[1][0] != '-') {
    const std::string name = argv[1];
    bool known = false;
    for (const auto* sub : app.get_subcommands({})) known = known || sub->get_name() == name;
    if (!known) {
      err << "unknown subcommand '" << name << "'\nRun with --help for the list of subcommands.\n";
      return 2;
    }
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    if (*gen) {
      RunConfig cfg = gen_flags.resolve();
      if (gen_out) cfg.data = {fs::path(*gen_out) / "source", fs::path(*gen_out) / "target_train",
                               fs::path(*gen_out) / "target_val"};
      SceneGenConfig train = cfg.scenes;
      generate_scenes(train, Domain::Source, cfg.data.source, true);
      SceneGenConfig target = train;
      target.seed = train.seed + 1;
      generate_scenes(target, Domain::Target, cfg.data.target_train, false);
      SceneGenConfig val = train;
      val.seed = train.seed + 2;
      val.count = cfg.val_count;
      generate_scenes(val, Domain::Target, cfg.data.target_val, true);
      out << "wrote " << train.count << " source, " << target.count << " target and " << val.count
          << " validation scenes\n";
      return 0;
    }
    if (*pre) {
      RunConfig cfg = pre_flags.resolve();
      cfg.train.rounds = 0;
      return train_command(cfg, std::nullopt, out, err);
    }
    if (*adapt) return train_command(adapt_flags.resolve(), resume, out, err);
    if (*label) {
      const FctnModel<float> model = load_model(label_ckpt);
      const Dataset data = require_dataset(label_data, "input");
      PseudoLabelSet set = label_dataset(model, std::span<const TensorF>(data.images),
                                         PseudoLabelConfig{label_threshold}, label_threads);
      Dataset result;
      result.domain = data.domain;
      for (const auto& s : set.samples) {
        result.images.push_back(s.image);
        result.masks.push_back(s.mask);
      }
      write_dataset(result, label_out);
      fs::create_directories(fs::path(label_out) / "vis");
      for (std::size_t i = 0; i < result.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "%05zu.png", i);
        write_rgb_png(colorize(result.masks[i]), fs::path(label_out) / "vis" / name);
      }
      const auto names = default_class_names(model.spec().num_classes);
      out << "labeled pixels " << set.summary.labeled_pixels << " of " << set.summary.total_pixels << " (coverage "
          << std::fixed << std::setprecision(4) << set.summary.mean_coverage << ")\n";
      for (std::size_t c = 0; c < names.size(); ++c)
        out << "  " << names[c] << " " << set.summary.class_counts[c] << "\n";
      return 0;
    }
    if (*eval) {
      const Dataset data = require_dataset(eval_data, "evaluation");
      if (!data.labeled()) throw Error("evaluation dataset " + eval_data + " has no masks");
      std::optional<ConfusionMatrix> cm;
      int classes = 0;
      if (eval_ckpt) {
        const FctnModel<float> model = load_model(*eval_ckpt);
        classes = model.spec().num_classes;
        cm = evaluate_branch(model, parse_branch(eval_branch), data, eval_threads);
      } else if (eval_pred) {
        const Dataset pred = require_dataset(*eval_pred, "prediction");
        if (pred.size() != data.size() || !pred.labeled())
          throw Error("prediction set does not pair up with the evaluation set");
        int max_id = 0;
        for (const auto& m : data.masks)
          for (Index i = 0; i < m.size(); ++i)
            if (m.data()[i] != kIgnoreId) max_id = std::max(max_id, int(m.data()[i]));
        classes = std::max(max_id + 1, int(kSceneClassNames.size()));
        cm.emplace(classes);
        for (std::size_t i = 0; i < data.size(); ++i) cm->accumulate(pred.masks[i], data.masks[i]);
      } else {
        throw Error("evaluate needs --checkpoint or --predictions");
      }
      const IouReport report = iou_report(*cm);
      const auto names = default_class_names(classes);
      out << format_iou_table(report, names);
      if (eval_metrics) {
        std::ofstream m(*eval_metrics);
        m << format_metric_lines(report, names, "eval");
        if (!m) throw Error("cannot write " + *eval_metrics);
      }
      return 0;
    }
    if (*gc) {
      const auto cases = run_gradcheck_suite(gc_seed, gc_tol);
      bool ok = true;
      for (const auto& c : cases) {
        out << (c.report.passed() ? "ok   " : "FAIL ") << std::left << std::setw(24) << c.name << std::scientific
            << std::setprecision(2) << c.report.max_error() << "\n";
        ok = ok && c.report.passed();
      }
      out << (ok ? "all checks passed" : "gradient check failed") << " (tolerance " << gc_tol << ")\n";
      return ok ? 0 : 1;
    }
    if (*imp) {
      const Dataset ds = import_dataset(imp_src, imp_map, imp_dest, parse_domain(imp_domain));
      out << "imported " << ds.size() << " images into " << imp_dest << "\n";
      return 0;
    }
  } catch (const ConfigError& e) {
    err << "invalid config: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace fctn
