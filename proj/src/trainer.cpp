#include "fctn/trainer.hpp"

#include "fctn/checkpoint.hpp"
#include "fctn/config.hpp"

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

namespace fctn {

using nlohmann::json;
namespace fs = std::filesystem;

void TrainConfig::validate() const {
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ConfigError("train.alpha must be finite and >= 0");
  if (!(beta >= 0.0) || !std::isfinite(beta)) throw ConfigError("train.beta must be finite and >= 0");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
    throw ConfigError("train.learning_rate must be finite and positive");
  if (pretrain_iters < 0) throw ConfigError("train.pretrain_iters must be >= 0");
  if (rounds < 0) throw ConfigError("train.rounds must be >= 0");
  if (steps_per_round < 0) throw ConfigError("train.steps_per_round must be >= 0");
  if (batch_size < 2 || batch_size % 2) throw ConfigError("train.batch_size must be even and >= 2");
  if (!(threshold >= 0.0 && threshold <= 1.0)) throw ConfigError("train.threshold must be in [0, 1]");
  if (checkpoint_every < 0) throw ConfigError("train.checkpoint_every must be >= 0");
  if (threads < 1) throw ConfigError("train.threads must be >= 1");
  if (log_every < 1) throw ConfigError("train.log_every must be >= 1");
}

// ---------------------------------------------------------------------------

namespace {

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

json terms_json(const ObjectiveTerms& t) {
  return {{"L_w", t.weight},
          {"L_S", t.source},
          {"L_S_t", t.source_target_branch},
          {"L_Tl", t.has_target ? json(t.target) : json(nullptr)},
          {"total", t.total}};
}

void emit(std::ostream* sink, json j) {
  if (!sink) return;
  *sink << j.dump() << '\n';
  sink->flush();
}

}  // namespace

double RunLog::now() {
  const double t = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  last_ = std::max(last_, t);
  return last_;
}

void RunLog::add(const StepRecord& r) {
  steps_.push_back(r);
  json j = {{"t", now()}, {"event", "step"}, {"phase", r.phase}, {"round", r.round}, {"step", r.step}};
  j.update(terms_json(r.terms));
  emit(sink_, std::move(j));
}

void RunLog::add(const LabelRecord& r) {
  labelings_.push_back(r);
  const auto& s = r.summary;
  emit(sink_, {{"t", now()},
               {"event", "label"},
               {"round", r.round},
               {"labeled_pixels", s.labeled_pixels},
               {"total_pixels", s.total_pixels},
               {"mean_coverage", s.mean_coverage},
               {"class_counts", s.class_counts}});
}

void RunLog::add(const EvalRecord& r) {
  evals_.push_back(r);
  json iou = json::array();
  for (const auto& v : r.report.iou) iou.push_back(optional_json(v));
  emit(sink_, {{"t", now()},
               {"event", "eval"},
               {"stage", r.stage},
               {"branch", std::string(branch_namespace(r.branch))},
               {"mIoU", optional_json(r.report.miou)},
               {"iou", iou}});
}

// ---------------------------------------------------------------------------

ConfusionMatrix evaluate_branch(const FctnModel<float>& model, Branch branch, const Dataset& data, int threads) {
  if (!data.labeled()) throw Error("evaluation needs a labeled dataset");
  std::vector<Mask> predicted(data.size());
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < data.size();)
      predicted[i] = predict(model, branch, data.images[i]).labels;
  };
  const int n = std::clamp(threads, 1, int(data.size()));
  if (n == 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (int t = 0; t < n; ++t) pool.emplace_back(work);
  }
  ConfusionMatrix cm(model.spec().num_classes);
  for (std::size_t i = 0; i < data.size(); ++i) cm.accumulate(predicted[i], data.masks[i]);
  return cm;
}

std::string checkpoint_metadata(const ArchSpec& arch, const ResumePoint& at) {
  return json{{"arch", to_json(arch)}, {"phase", at.phase}, {"round", at.round}, {"step", at.step}}.dump();
}

namespace {

json parse_metadata(const std::string& metadata) {
  try {
    return json::parse(metadata);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("checkpoint metadata is not JSON: ") + e.what());
  }
}

}  // namespace

ResumePoint resume_point_from_metadata(const std::string& metadata) {
  const json j = parse_metadata(metadata);
  ResumePoint p;
  try {
    p.phase = j.at("phase").get<std::string>();
    p.round = j.at("round").get<int>();
    p.step = j.at("step").get<int>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint metadata lacks a resume point: ") + e.what());
  }
  if (p.phase != "pretrain" && p.phase != "curriculum") throw FormatError("unknown checkpoint phase " + p.phase);
  return p;
}

ArchSpec arch_from_metadata(const std::string& metadata) {
  const json j = parse_metadata(metadata);
  if (!j.contains("arch")) throw FormatError("checkpoint metadata lacks an architecture");
  return arch_from_json(j["arch"]);
}

// ---------------------------------------------------------------------------

namespace {

std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

std::string padded(int v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%06d", v);
  return buf;
}

}  // namespace

Trainer::Trainer(FctnModel<float>& model, TrainData data, TrainConfig cfg, RunLog& log,
                 std::optional<fs::path> run_dir)
    : model_(model), data_(data), cfg_(cfg), log_(log), run_dir_(std::move(run_dir)) {
  cfg_.validate();
  if (!data_.source || !data_.source->labeled() || data_.source->size() == 0)
    throw Error("training needs a labeled source set");
  if (data_.source->images.front().dim(2) != model_.spec().input_channels)
    throw ShapeError("source images do not match the model's input channels");
  weights_ = fctn::class_weights(std::span<const Mask>(data_.source->masks), model_.spec().num_classes);
}

std::vector<LabeledImage<float>> Trainer::gather_source(const std::vector<std::size_t>& idx) const {
  std::vector<LabeledImage<float>> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back({data_.source->images[i], data_.source->masks[i]});
  return out;
}

ObjectiveTerms Trainer::step(std::span<const LabeledImage<float>> source, std::span<const LabeledImage<float>> target,
                             bool curriculum) {
  const SgdOptimizer opt{cfg_.learning_rate};
  ObjectiveSpec spec{cfg_.alpha, cfg_.beta, true, !curriculum && cfg_.pretrain_target_branch};
  if (!curriculum || cfg_.update_mode == UpdateMode::Joint) {
    ObjectiveTerms t = accumulate_objective<float>(model_, source, target, &weights_, spec, cfg_.threads);
    sgd_step(model_.params(), opt);
    return t;
  }
  // Alternating: source half (with the weight term), then the target half.
  ObjectiveTerms a = accumulate_objective<float>(model_, source, {}, &weights_, spec, cfg_.threads);
  sgd_step(model_.params(), opt);
  spec.include_weight_term = false;
  ObjectiveTerms b = accumulate_objective<float>(model_, {}, target, &weights_, spec, cfg_.threads);
  sgd_step(model_.params(), opt);
  a.target = b.target;
  a.has_target = b.has_target;
  a.total += b.total;
  return a;
}

void Trainer::checkpoint(const std::string& name, const ResumePoint& at) const {
  if (!run_dir_) return;
  save_checkpoint(model_.params(), *run_dir_ / "checkpoints" / (name + ".ckpt"),
                  checkpoint_metadata(model_.spec(), at));
}

void Trainer::pretrain(int start_step) {
  const MinibatchSampler sampler(data_.source->size(), std::nullopt, cfg_.batch_size, stream_seed(cfg_.seed, 0));
  for (int k = start_step; k < cfg_.pretrain_iters; ++k) {
    const auto batch = gather_source(sampler.plan(std::uint64_t(k)).source);
    const ObjectiveTerms t = step(batch, {}, false);
    if ((k + 1) % cfg_.log_every == 0 || k + 1 == cfg_.pretrain_iters) log_.add(StepRecord{"pretrain", 0, k + 1, t});
    if (cfg_.checkpoint_every && (k + 1) % cfg_.checkpoint_every == 0 && k + 1 < cfg_.pretrain_iters)
      checkpoint("pretrain_step" + padded(k + 1), {"pretrain", 0, k + 1});
  }
  checkpoint("pretrain", {"pretrain", 0, cfg_.pretrain_iters});
}

PseudoLabelSummary Trainer::curriculum_round(int round, int start_step) {
  if (!data_.target_train || data_.target_train->size() == 0) throw Error("curriculum needs a target training set");
  const Dataset& target = *data_.target_train;
  const fs::path export_dir = run_dir_ ? *run_dir_ / "pseudo" / ("round" + std::to_string(round)) : fs::path{};

  if (start_step > 0 && run_dir_ && fs::exists(export_dir / "manifest.txt")) {
    // Mid-round resume: the model has moved since labeling, so the round's
    // labels come from the export rather than a fresh labeling pass.
    const Dataset saved = load_dataset(export_dir);
    if (saved.size() != target.size() || !saved.labeled())
      throw Error("pseudo-label export " + export_dir.string() + " does not match the target set");
    PseudoLabelSet set;
    for (std::size_t i = 0; i < target.size(); ++i)
      set.samples.push_back({target.images[i], saved.masks[i], mask_coverage(saved.masks[i])});
    set.summary = summarize(set.samples, model_.spec().num_classes);
    pseudo_ = std::move(set);
  } else {
    if (start_step > 0) throw Error("cannot resume round " + std::to_string(round) + ": no pseudo-label export");
    pseudo_ = label_dataset(model_, std::span<const TensorF>(target.images), PseudoLabelConfig{cfg_.threshold},
                            cfg_.threads);
    log_.add(LabelRecord{round, pseudo_->summary});
    if (run_dir_) {
      Dataset out;
      out.domain = Domain::Target;
      for (const auto& s : pseudo_->samples) {
        out.images.push_back(s.image);
        out.masks.push_back(s.mask);
      }
      write_dataset(out, export_dir);
    }
  }
  if (pseudo_->summary.labeled_pixels == 0)
    throw Error("round " + std::to_string(round) + ": no target pixel passed the pseudo-label rule (threshold " +
                std::to_string(cfg_.threshold) + "); lower the threshold or pretrain longer");

  const MinibatchSampler sampler(data_.source->size(), pseudo_->samples.size(), cfg_.batch_size,
                                 stream_seed(cfg_.seed, std::uint64_t(round)));
  std::vector<LabeledImage<float>> tbatch;
  for (int k = start_step; k < cfg_.steps_per_round; ++k) {
    const auto plan = sampler.plan(std::uint64_t(k));
    const auto sbatch = gather_source(plan.source);
    tbatch.clear();
    for (auto i : plan.target) tbatch.push_back({pseudo_->samples[i].image, pseudo_->samples[i].mask});
    const ObjectiveTerms t = step(sbatch, tbatch, true);
    if ((k + 1) % cfg_.log_every == 0 || k + 1 == cfg_.steps_per_round)
      log_.add(StepRecord{"curriculum", round, k + 1, t});
    if (cfg_.checkpoint_every && (k + 1) % cfg_.checkpoint_every == 0 && k + 1 < cfg_.steps_per_round)
      checkpoint("round" + std::to_string(round) + "_step" + padded(k + 1), {"curriculum", round, k + 1});
  }
  checkpoint("round" + std::to_string(round), {"curriculum", round, cfg_.steps_per_round});
  return pseudo_->summary;
}

IouReport Trainer::evaluate(Branch branch) const {
  if (!data_.target_val) throw Error("no target validation set");
  return iou_report(evaluate_branch(model_, branch, *data_.target_val, cfg_.threads));
}

void Trainer::evaluate_stage(const std::string& stage) {
  if (!data_.target_val) return;
  const fs::path metrics = run_dir_ ? *run_dir_ / "metrics.txt" : fs::path{};
  if (run_dir_ && fs::exists(metrics)) {
    std::ifstream in(metrics);
    for (std::string line; std::getline(in, line);)
      if (line.rfind(stage + ".mIoU ", 0) == 0) return;  // already evaluated before a resume
  }
  const IouReport report = evaluate(Branch::Ft);
  log_.add(EvalRecord{stage, Branch::Ft, report});
  if (run_dir_) {
    std::ofstream out(metrics, std::ios::app);
    const auto names = default_class_names(model_.spec().num_classes);
    out << format_metric_lines(report, names, stage);
  }
}

void Trainer::run(const ResumePoint& from) {
  if (run_dir_) {
    fs::create_directories(*run_dir_);
    if (from.phase == "pretrain" && from.step == 0) fs::remove(*run_dir_ / "metrics.txt");
  }
  int first_round = 1, start = 0;
  if (from.phase == "pretrain") {
    pretrain(from.step);
    evaluate_stage("pretrain");
  } else {
    first_round = from.round;
    start = from.step;
  }
  for (int r = first_round; r <= cfg_.rounds; ++r) {
    const int s = r == first_round ? start : 0;
    if (s == 0 || s < cfg_.steps_per_round) curriculum_round(r, s);
    evaluate_stage("round" + std::to_string(r));
  }
  checkpoint("final", cfg_.rounds ? ResumePoint{"curriculum", cfg_.rounds, cfg_.steps_per_round}
                                   : ResumePoint{"pretrain", 0, cfg_.pretrain_iters});
}

}  // namespace fctn
