#pragma once

#include "fctn/model.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace fctn {

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  bool passed = true;
};

/// Per-parameter comparison of analytic and central-difference gradients.
///
/// The error of a parameter tensor is max_i |analytic_i - numeric_i| divided
/// by the largest gradient magnitude seen in either estimate for that tensor
/// (so entries that are legitimately ~0 do not blow up the ratio).
struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tolerance = 0.0;

  bool passed() const;
  double max_error() const;
};

/// Builds a scalar loss from leaves standing for the parameters.
using GraphLossFn = std::function<Var<double>(Graph<double>&, std::span<const Var<double>>)>;

/// Checks d f / d params at 64-bit precision. `names` labels the report
/// entries and may be empty.
GradCheckReport grad_check(const GraphLossFn& f, const std::vector<TensorD>& params,
                           const std::vector<std::string>& names = {}, double step = 1e-5,
                           double tolerance = 1e-4);

using ModelLossFn = std::function<Var<double>(Binding<double>&)>;

/// Same check over every parameter of a model.
GradCheckReport grad_check_model(const FctnModel<double>& model, const ModelLossFn& f, double step = 1e-5,
                                 double tolerance = 1e-4);

struct SuiteCase {
  std::string name;
  GradCheckReport report;
};

/// Randomized tiny instances of every differentiable op and every loss
/// term, each checked at 64-bit precision.
std::vector<SuiteCase> run_gradcheck_suite(std::uint64_t seed = 1, double tolerance = 1e-4);

/// Tiny architecture used by the model-level checks: 2 base layers, 2-layer
/// heads, `num_classes` outputs.
ArchSpec tiny_arch(int num_classes = 3, int input_channels = 3);

}  // namespace fctn
