#include "fctn/grad_check.hpp"

#include "fctn/losses.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace fctn {

bool GradCheckReport::passed() const {
  return std::all_of(entries.begin(), entries.end(), [](const auto& e) { return e.passed; });
}

double GradCheckReport::max_error() const {
  double m = 0.0;
  for (const auto& e : entries) m = std::max(m, e.max_rel_error);
  return m;
}

namespace {

// evaluate(values, analytic) returns the loss; when `analytic` is non-null
// it is filled with one gradient per parameter.
using Evaluator = std::function<double(const std::vector<TensorD>&, std::vector<TensorD>*)>;

GradCheckReport run_check(const Evaluator& evaluate, std::vector<TensorD> values, const std::vector<std::string>& names,
                          double step, double tolerance) {
  std::vector<TensorD> analytic;
  evaluate(values, &analytic);

  GradCheckReport report;
  report.tolerance = tolerance;
  for (std::size_t p = 0; p < values.size(); ++p) {
    TensorD numeric(values[p].shape());
    for (Index i = 0; i < values[p].size(); ++i) {
      const double saved = values[p][i];
      values[p][i] = saved + step;
      const double up = evaluate(values, nullptr);
      values[p][i] = saved - step;
      const double down = evaluate(values, nullptr);
      values[p][i] = saved;
      numeric[i] = (up - down) / (2.0 * step);
    }
    const auto& a = analytic[p].data();
    const auto& n = numeric.data();
    const double scale = std::max({a.cwiseAbs().maxCoeff(), n.cwiseAbs().maxCoeff(), 1e-12});
    GradCheckEntry e;
    e.name = p < names.size() ? names[p] : "param" + std::to_string(p);
    e.max_rel_error = a.size() ? (a - n).cwiseAbs().maxCoeff() / scale : 0.0;
    e.passed = e.max_rel_error < tolerance;
    report.entries.push_back(e);
  }
  return report;
}

}  // namespace

GradCheckReport grad_check(const GraphLossFn& f, const std::vector<TensorD>& params,
                           const std::vector<std::string>& names, double step, double tolerance) {
  Evaluator evaluate = [&](const std::vector<TensorD>& values, std::vector<TensorD>* grads) {
    Graph<double> g;
    std::vector<Var<double>> leaves;
    for (const auto& v : values) leaves.push_back(g.leaf(v, grads != nullptr));
    Var<double> loss = f(g, leaves);
    if (grads) {
      g.backward(loss);
      grads->clear();
      for (const auto& l : leaves) grads->push_back(l.grad().value_or(TensorD::zeros(l.shape())));
    }
    return loss.value().item();
  };
  return run_check(evaluate, params, names, step, tolerance);
}

GradCheckReport grad_check_model(const FctnModel<double>& model, const ModelLossFn& f, double step,
                                 double tolerance) {
  const std::vector<std::string> names = model.params().names();
  Evaluator evaluate = [&](const std::vector<TensorD>& values, std::vector<TensorD>* grads) {
    ParamStore<double> store;
    for (std::size_t i = 0; i < names.size(); ++i) store.add(names[i], values[i]);
    FctnModel<double> perturbed(model.spec(), std::move(store));
    Graph<double> g;
    Binding<double> params(g, perturbed, grads != nullptr);
    Var<double> loss = f(params);
    if (grads) {
      g.backward(loss);
      ParamStore<double> acc = perturbed.params().cast<double>();
      params.accumulate_into(acc);
      grads->clear();
      for (const auto& name : names) {
        const auto& p = acc.at(name);
        grads->push_back(p.grad.value_or(TensorD::zeros(p.value.shape())));
      }
    }
    return loss.value().item();
  };
  std::vector<TensorD> values;
  for (const auto& name : names) values.push_back(model.params().value(name));
  return run_check(evaluate, values, names, step, tolerance);
}

ArchSpec tiny_arch(int num_classes, int input_channels) {
  ArchSpec a;
  a.input_channels = input_channels;
  a.num_classes = num_classes;
  a.base_layers = {{3, 3, 1}, {4, 3, 2}};
  a.branch_layers = {{3, 3, 2}, {num_classes, 1, 1}};
  return a;
}

namespace {

class Rand {
 public:
  explicit Rand(std::uint64_t seed) : gen_(seed) {}

  TensorD uniform(Shape shape, double lo = -1.0, double hi = 1.0) {
    TensorD t(std::move(shape));
    std::uniform_real_distribution<double> d(lo, hi);
    for (Index i = 0; i < t.size(); ++i) t[i] = d(gen_);
    return t;
  }

  // Values bounded away from zero, for kinks and poles.
  TensorD away_from_zero(Shape shape, double lo = 0.2, double hi = 1.5) {
    TensorD t = uniform(std::move(shape), lo, hi);
    std::bernoulli_distribution sign(0.5);
    for (Index i = 0; i < t.size(); ++i)
      if (sign(gen_)) t[i] = -t[i];
    return t;
  }

  Mask labels(Index h, Index w, int classes, double ignore_fraction) {
    Mask m(h, w);
    std::uniform_int_distribution<int> c(0, classes - 1);
    std::bernoulli_distribution ignore(ignore_fraction);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = ignore(gen_) ? kIgnoreId : std::uint8_t(c(gen_));
    return m;
  }

  std::mt19937_64& engine() { return gen_; }

 private:
  std::mt19937_64 gen_;
};

// Projects an op's output onto fixed random weights, so every output entry
// carries a distinct upstream gradient.
Var<double> project(const Var<double>& out, const TensorD& weights) {
  return sum(mul(out, out.graph().constant(weights.reshaped(out.shape()))));
}

}  // namespace

std::vector<SuiteCase> run_gradcheck_suite(std::uint64_t seed, double tol) {
  Rand rnd(seed);
  std::vector<SuiteCase> out;
  auto check = [&](std::string name, const GraphLossFn& f, std::vector<TensorD> params) {
    out.push_back({std::move(name), grad_check(f, params, {}, 1e-5, tol)});
  };
  const Shape s = {2, 3, 4};
  const TensorD w = rnd.uniform(s);
  auto unary = [&](std::string name, auto op, TensorD x) {
    check(name, [&, op](Graph<double>&, std::span<const Var<double>> v) { return project(op(v[0]), w); }, {x});
  };
  auto binary = [&](std::string name, auto op, TensorD a, TensorD b) {
    check(name, [&, op](Graph<double>&, std::span<const Var<double>> v) { return project(op(v[0], v[1]), w); },
          {a, b});
  };

  binary("add", [](auto a, auto b) { return add(a, b); }, rnd.uniform(s), rnd.uniform(s));
  binary("sub", [](auto a, auto b) { return sub(a, b); }, rnd.uniform(s), rnd.uniform(s));
  binary("mul", [](auto a, auto b) { return mul(a, b); }, rnd.uniform(s), rnd.uniform(s));
  binary("div", [](auto a, auto b) { return div(a, b); }, rnd.uniform(s), rnd.away_from_zero(s));
  check("mul_scalar_broadcast",
        [&](Graph<double>&, std::span<const Var<double>> v) { return project(mul(v[0], v[1]), w); },
        {rnd.uniform(s), rnd.uniform({})});
  unary("negate", [](auto a) { return negate(a); }, rnd.uniform(s));
  unary("scale", [](auto a) { return scale(a, -2.5); }, rnd.uniform(s));
  unary("relu", [](auto a) { return relu(a); }, rnd.away_from_zero(s));
  unary("exp", [](auto a) { return exp(a); }, rnd.uniform(s));
  unary("log", [](auto a) { return log(a); }, rnd.uniform(s, 0.3, 2.0));
  unary("sqrt", [](auto a) { return sqrt(a); }, rnd.uniform(s, 0.3, 2.0));
  check("sum", [](Graph<double>&, std::span<const Var<double>> v) { return sum(v[0]); }, {rnd.uniform(s)});
  check("dot", [](Graph<double>&, std::span<const Var<double>> v) { return dot(v[0], v[1]); },
        {rnd.uniform(s), rnd.uniform(s)});
  unary("reshape", [](auto a) { return reshape(a, Shape{4, 6}); }, rnd.uniform(s));
  check("matmul",
        [&](Graph<double>&, std::span<const Var<double>> v) { return project(matmul(v[0], v[1]), w); },
        {rnd.uniform({4, 2}), rnd.uniform({2, 6})});
  check("flatten_concat",
        [&](Graph<double>&, std::span<const Var<double>> v) { return project(flatten_concat<double>(v), w); },
        {rnd.uniform({2, 5}), rnd.uniform({14})});
  check("concat_channels",
        [&](Graph<double>&, std::span<const Var<double>> v) { return project(concat_channels(v[0], v[1]), w); },
        {rnd.uniform({2, 3, 1}), rnd.uniform({2, 3, 3})});
  unary("softmax_channel", [](auto a) { return softmax_channel(a); }, rnd.uniform(s, -2.0, 2.0));

  const Mask labels = rnd.labels(3, 4, 5, 0.25);
  const std::vector<double> alpha = {0.5, 1.0, 2.0, 3.5, 0.8};
  check("softmax_nll_sum",
        [&](Graph<double>&, std::span<const Var<double>> v) {
          return softmax_nll_sum<double>(v[0], labels, alpha).sum;
        },
        {rnd.uniform({3, 4, 5}, -2.0, 2.0)});

  struct ConvCase {
    const char* name;
    Index h, w, cin, k, cout;
    int dilation;
  };
  for (const ConvCase& c : {ConvCase{"conv2d_3x3", 5, 6, 2, 3, 3, 1}, ConvCase{"conv2d_3x3_dilated", 6, 7, 2, 3, 2, 2},
                            ConvCase{"conv2d_5x5_dilated", 7, 5, 1, 5, 2, 3}, ConvCase{"conv2d_1x1", 4, 3, 3, 1, 2, 1}}) {
    const TensorD proj = rnd.uniform({c.h, c.w, c.cout});
    check(
        c.name,
        [&, c](Graph<double>&, std::span<const Var<double>> v) {
          return project(conv2d(v[0], v[1], v[2], c.dilation), proj);
        },
        {rnd.uniform({c.h, c.w, c.cin}), rnd.uniform({c.k, c.k, c.cin, c.cout}), rnd.uniform({c.cout})});
  }

  // Loss terms over a whole tiny model.
  const int classes = 3;
  const FctnModel<double> model(tiny_arch(classes), rnd.engine()());
  auto sample = [&](double ignore) {
    return LabeledImage<double>{rnd.uniform({5, 6, 3}, 0.0, 1.0), rnd.labels(5, 6, classes, ignore)};
  };
  const std::vector<LabeledImage<double>> source = {sample(0.1), sample(0.0)};
  const std::vector<LabeledImage<double>> target = {sample(0.5), sample(0.3)};
  std::vector<Mask> source_masks;
  for (const auto& x : source) source_masks.push_back(x.mask);
  const ClassWeights weights = class_weights(source_masks, classes);

  auto model_case = [&](std::string name, const ModelLossFn& f) {
    out.push_back({std::move(name), grad_check_model(model, f, 1e-5, tol)});
  };
  model_case("weight_constraint", [](Binding<double>& p) { return weight_constraint(p); });
  model_case("weighted_ce", [&](Binding<double>& p) {
    Graph<double>& g = p.graph();
    Var<double> logits = forward_branch(p, Branch::Ft, forward_base(p, g.constant(target[0].image)));
    return ce_loss(logits, target[0].mask, &weights).value;
  });
  model_case("source_objective", [&](Binding<double>& p) {
    return total_loss<double>(p, source, std::nullopt, nullptr, 10.0, 100.0).total;
  });
  model_case("curriculum_objective", [&](Binding<double>& p) {
    return total_loss<double>(p, source, std::span<const LabeledImage<double>>(target), &weights, 10.0, 2.0).total;
  });
  return out;
}

}  // namespace fctn
