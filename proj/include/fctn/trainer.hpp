#pragma once

#include "fctn/dataset.hpp"
#include "fctn/losses.hpp"
#include "fctn/metrics.hpp"
#include "fctn/pseudolabel.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

namespace fctn {

/// Non-finite loss during training.
struct DivergenceError : Error {
  using Error::Error;
};

enum class UpdateMode {
  Joint,        ///< one combined loss and one SGD step per curriculum step
  Alternating,  ///< a source-half step followed by a target-half step
};

/// Hyperparameters of the pretrain / re-label / re-train schedule.
///
/// alpha, beta and learning_rate default to the full-scale reference values
/// (10^3, 100, 10^-5). The full-scale schedule ran 70k pretraining steps and
/// 13k + 20k steps in two curriculum rounds; the iteration defaults below are
/// the desk-scale substitute.
struct TrainConfig {
  double alpha = 1e3;
  double beta = 100.0;
  double learning_rate = 1e-5;
  int pretrain_iters = 2000;
  int rounds = 2;
  int steps_per_round = 1000;
  int batch_size = 4;
  double threshold = 0.95;
  std::uint64_t seed = 1;
  int checkpoint_every = 0;  ///< extra checkpoints every N steps; 0 = phase ends only
  UpdateMode update_mode = UpdateMode::Joint;
  bool pretrain_target_branch = true;  ///< Ft also learns from source labels while pretraining
  int threads = 1;
  int log_every = 1;

  void validate() const;
};

// ---------------------------------------------------------------------------
// Objective evaluation

struct ObjectiveTerms {
  double weight = 0.0;         ///< L_w
  double source = 0.0;         ///< L_S (F1, F2 on source)
  double source_target_branch = 0.0;  ///< Ft on source, pretraining only
  double target = 0.0;         ///< L_Tl (F1, F2, Ft on pseudo-labeled target)
  bool has_target = false;
  double total = 0.0;
};

struct ObjectiveSpec {
  double alpha = 1e3;
  double beta = 100.0;
  bool include_weight_term = true;
  bool source_target_branch = false;  ///< add unweighted CE of Ft on the source half
};

namespace detail {

// Gradients of one sample's terms, computed on a private graph.
template <typename Scalar>
struct SampleResult {
  ParamStore<Scalar> grads;
  double source = 0.0, source_target_branch = 0.0, target = 0.0;
};

template <typename Scalar>
SampleResult<Scalar> sample_gradients(const FctnModel<Scalar>& model, const LabeledImage<Scalar>& sample,
                                      bool is_target, Scalar source_coef, Scalar source_t_coef, Scalar target_coef,
                                      std::span<const Scalar> alpha) {
  Graph<Scalar> g;
  Binding<Scalar> params(g, model);
  SampleResult<Scalar> r;
  Var<Scalar> features = forward_base(params, g.constant(sample.image));
  std::optional<Var<Scalar>> loss;
  auto add_term = [&](Var<Scalar> term, double& slot, Scalar coef) {
    slot += double(term.value().item());
    loss = loss ? add(*loss, scale(term, coef)) : scale(term, coef);
  };
  if (is_target) {
    auto t = branch_nll_term(params, features, std::span<const Branch>(kAllBranches), sample.mask, alpha, Scalar(1));
    add_term(*t, r.target, target_coef);
  } else {
    auto s = branch_nll_term(params, features, std::span<const Branch>(kLabelingBranches), sample.mask,
                             std::span<const Scalar>{}, Scalar(1));
    add_term(*s, r.source, source_coef);
    if (source_t_coef != Scalar(0)) {
      const std::array<Branch, 1> ft = {Branch::Ft};
      auto st = branch_nll_term(params, features, std::span<const Branch>(ft), sample.mask,
                                std::span<const Scalar>{}, Scalar(1));
      add_term(*st, r.source_target_branch, source_t_coef);
    }
  }
  g.backward(*loss);
  r.grads = model.params().template cast<Scalar>();
  r.grads.clear_grads();
  params.accumulate_into(r.grads);
  return r;
}

}  // namespace detail

/// Accumulates the gradient of
///
///   alpha * L_w + L_S [+ CE(Ft on source)] [+ beta * L_Tl]
///
/// into model.params() and returns the term values. Each sample runs on its
/// own graph (optionally on its own thread); per-sample gradients are summed
/// in sample order, so the result does not depend on `threads`. Every
/// parameter ends up with a gradient, zero where the objective does not
/// reach it.
template <typename Scalar>
ObjectiveTerms accumulate_objective(FctnModel<Scalar>& model, std::span<const LabeledImage<Scalar>> source,
                                    std::span<const LabeledImage<Scalar>> target, const ClassWeights* weights,
                                    const ObjectiveSpec& spec, int threads = 1) {
  if (!target.empty() && !weights) throw Error("objective: target samples require class weights");
  ObjectiveTerms out;
  out.has_target = !target.empty();

  if (spec.include_weight_term) {
    Graph<Scalar> g;
    Binding<Scalar> params(g, model);
    Var<Scalar> lw = weight_constraint(params);
    out.weight = double(lw.value().item());
    g.backward(lw);
    params.accumulate_into(model.params(), Scalar(spec.alpha));
  }

  const Index ns = count_labeled(source), nt = count_labeled(target);
  const Scalar source_coef = ns ? Scalar(1) / (Scalar(2) * Scalar(ns)) : Scalar(0);
  const Scalar source_t_coef = ns && spec.source_target_branch ? Scalar(1) / Scalar(ns) : Scalar(0);
  const Scalar target_coef = nt ? Scalar(spec.beta) / (Scalar(3) * Scalar(nt)) : Scalar(0);
  const std::vector<Scalar> alpha = weights ? weights->alpha_as<Scalar>() : std::vector<Scalar>{};

  struct Job {
    const LabeledImage<Scalar>* sample;
    bool is_target;
  };
  std::vector<Job> jobs;
  if (ns)
    for (const auto& s : source) jobs.push_back({&s, false});
  if (nt)
    for (const auto& s : target)
      if ((s.mask != kIgnoreId).any()) jobs.push_back({&s, true});

  std::vector<detail::SampleResult<Scalar>> results(jobs.size());
  auto run = [&](std::size_t i) {
    results[i] = detail::sample_gradients(model, *jobs[i].sample, jobs[i].is_target, source_coef, source_t_coef,
                                          target_coef, std::span<const Scalar>(alpha));
  };
  if (threads <= 1 || jobs.size() <= 1) {
    for (std::size_t i = 0; i < jobs.size(); ++i) run(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::jthread> pool;
    for (int t = 0; t < std::min<int>(threads, int(jobs.size())); ++t)
      pool.emplace_back([&] {
        for (std::size_t i; (i = next.fetch_add(1)) < jobs.size();) run(i);
      });
  }

  for (const auto& r : results) {
    for (const auto& [name, p] : r.grads)
      if (p.grad) model.params().accumulate_grad(name, *p.grad);
    out.source += r.source;
    out.source_target_branch += r.source_target_branch;
    out.target += r.target;
  }
  if (ns) {
    out.source /= 2.0 * double(ns);
    out.source_target_branch /= double(ns);
  }
  if (nt) out.target /= 3.0 * double(nt);
  for (auto& [name, p] : model.params())
    if (!p.grad) p.grad = Tensor<Scalar>::zeros(p.value.shape());

  out.total = (spec.include_weight_term ? spec.alpha * out.weight : 0.0) + out.source +
              (spec.source_target_branch ? out.source_target_branch : 0.0) +
              (out.has_target ? spec.beta * out.target : 0.0);
  if (!std::isfinite(out.total)) throw DivergenceError("training loss became non-finite");
  return out;
}

// ---------------------------------------------------------------------------
// Run log

struct StepRecord {
  std::string phase;  ///< "pretrain" or "curriculum"
  int round = 0;
  int step = 0;
  ObjectiveTerms terms;
};

struct LabelRecord {
  int round = 0;
  PseudoLabelSummary summary;
};

struct EvalRecord {
  std::string stage;  ///< "pretrain", "round1", ...
  Branch branch = Branch::Ft;
  IouReport report;
};

/// Append-only training history, optionally streamed as JSON lines.
class RunLog {
 public:
  explicit RunLog(std::ostream* sink = nullptr) : sink_(sink), start_(std::chrono::steady_clock::now()) {}

  void add(const StepRecord& r);
  void add(const LabelRecord& r);
  void add(const EvalRecord& r);

  const std::vector<StepRecord>& steps() const { return steps_; }
  const std::vector<LabelRecord>& labelings() const { return labelings_; }
  const std::vector<EvalRecord>& evals() const { return evals_; }

 private:
  double now();

  std::ostream* sink_;
  std::chrono::steady_clock::time_point start_;
  double last_ = 0.0;
  std::vector<StepRecord> steps_;
  std::vector<LabelRecord> labelings_;
  std::vector<EvalRecord> evals_;
};

// ---------------------------------------------------------------------------

/// Confusion matrix of one branch over a labeled dataset.
ConfusionMatrix evaluate_branch(const FctnModel<float>& model, Branch branch, const Dataset& data, int threads = 1);

/// Where an interrupted run picks up. Phase "pretrain" with step k means k
/// pretraining steps are done; phase "curriculum" with (round r, step k)
/// means round r has completed k of its steps.
struct ResumePoint {
  std::string phase = "pretrain";
  int round = 0;
  int step = 0;
};

/// Checkpoint metadata: architecture plus the resume point.
std::string checkpoint_metadata(const ArchSpec& arch, const ResumePoint& at);
ResumePoint resume_point_from_metadata(const std::string& metadata);
ArchSpec arch_from_metadata(const std::string& metadata);

struct TrainData {
  const Dataset* source = nullptr;        ///< labeled source set S
  const Dataset* target_train = nullptr;  ///< unlabeled target set T (masks, if any, are never read)
  const Dataset* target_val = nullptr;    ///< labeled target validation set, metrics only
};

/// Pretraining on S, then rounds of re-labeling T and re-training on S and T_l.
class Trainer {
 public:
  /// `run_dir`, when set, receives checkpoints, pseudo-label exports and
  /// metrics.txt.
  Trainer(FctnModel<float>& model, TrainData data, TrainConfig cfg, RunLog& log,
          std::optional<std::filesystem::path> run_dir = std::nullopt);

  /// Runs pretraining steps [start_step, pretrain_iters).
  void pretrain(int start_step = 0);

  /// Re-labels T (or reloads the round's exported pseudo-labels when
  /// resuming mid-round), then runs steps [start_step, steps_per_round).
  /// Throws Error when no target pixel receives a pseudo-label.
  PseudoLabelSummary curriculum_round(int round, int start_step = 0);

  /// Full schedule from `from`: pretrain, evaluate, then each round followed
  /// by an evaluation. Returns the recorded validation reports.
  void run(const ResumePoint& from = {});

  /// Validation report of a branch; requires a target validation set.
  IouReport evaluate(Branch branch = Branch::Ft) const;

  const ClassWeights& class_weights() const { return weights_; }
  const PseudoLabelSet* pseudo_labels() const { return pseudo_ ? &*pseudo_ : nullptr; }
  const TrainConfig& config() const { return cfg_; }

 private:
  ObjectiveTerms step(std::span<const LabeledImage<float>> source, std::span<const LabeledImage<float>> target,
                      bool curriculum);
  void checkpoint(const std::string& name, const ResumePoint& at) const;
  void evaluate_stage(const std::string& stage);
  std::vector<LabeledImage<float>> gather_source(const std::vector<std::size_t>& idx) const;

  FctnModel<float>& model_;
  TrainData data_;
  TrainConfig cfg_;
  RunLog& log_;
  std::optional<std::filesystem::path> run_dir_;
  ClassWeights weights_;
  std::optional<PseudoLabelSet> pseudo_;
};

}  // namespace fctn
