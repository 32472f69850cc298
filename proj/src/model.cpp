#include "fctn/model.hpp"

namespace fctn {

std::string_view branch_namespace(Branch b) {
  switch (b) {
    case Branch::F1:
      return "branch1";
    case Branch::F2:
      return "branch2";
    case Branch::Ft:
      return "branch_t";
  }
  throw Error("unknown branch id");
}

Branch parse_branch(std::string_view name) {
  if (name == "F1" || name == "branch1") return Branch::F1;
  if (name == "F2" || name == "branch2") return Branch::F2;
  if (name == "Ft" || name == "branch_t") return Branch::Ft;
  throw Error("unknown branch id: " + std::string(name));
}

ArchSpec ArchSpec::desk_default(int num_classes) {
  ArchSpec spec;
  spec.input_channels = 3;
  spec.num_classes = num_classes;
  spec.base_layers = {{16, 3, 1}, {32, 3, 1}, {32, 3, 2}, {64, 3, 2}};
  spec.branch_layers = {{16, 3, 4}, {16, 1, 1}, {num_classes, 1, 1}};
  return spec;
}

int ArchSpec::base_depth() const {
  if (base_layers.empty()) throw Error("architecture has no base layers");
  return base_layers.back().out_channels;
}

void ArchSpec::validate() const {
  if (input_channels < 1) throw Error("architecture: input_channels must be positive");
  if (num_classes < 1 || num_classes > 254) throw Error("architecture: num_classes must be in [1, 254]");
  if (base_layers.empty()) throw Error("architecture: base needs at least one layer");
  if (branch_layers.empty()) throw Error("architecture: branches need at least one layer");
  auto check = [](const std::vector<ConvSpec>& layers, const char* where) {
    for (const auto& l : layers) {
      if (l.out_channels < 1) throw Error(std::string("architecture: ") + where + " layer has no output channels");
      if (l.kernel_size < 1 || l.kernel_size % 2 == 0)
        throw Error(std::string("architecture: ") + where + " kernel size must be odd");
      if (l.dilation < 1) throw Error(std::string("architecture: ") + where + " dilation must be >= 1");
    }
  };
  check(base_layers, "base");
  check(branch_layers, "branch");
  if (branch_layers.back().out_channels != num_classes)
    throw Error("architecture: last branch layer must emit num_classes channels");
}

std::string param_name(std::string_view ns, std::size_t layer, std::string_view what) {
  return std::string(ns) + ".conv" + std::to_string(layer) + "." + std::string(what);
}

std::map<std::string, Shape> expected_param_shapes(const ArchSpec& spec) {
  std::map<std::string, Shape> out;
  auto stack = [&](std::string_view ns, Index in, const std::vector<ConvSpec>& layers) {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const Index k = layers[i].kernel_size;
      out[param_name(ns, i, "kernel")] = {k, k, in, layers[i].out_channels};
      out[param_name(ns, i, "bias")] = {layers[i].out_channels};
      in = layers[i].out_channels;
    }
  };
  stack("base", spec.input_channels, spec.base_layers);
  for (Branch b : kAllBranches) stack(branch_namespace(b), spec.branch_input_depth(), spec.branch_layers);
  return out;
}

}  // namespace fctn
