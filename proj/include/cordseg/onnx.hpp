#pragma once

// ONNX export (opset 13) of a trained network and a small reference
// interpreter used to check that the exported graph reproduces the native
// forward pass.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cordseg/unet3d.hpp"

namespace cordseg::onnx {

inline constexpr std::int64_t kOpset = 13;
inline constexpr std::int64_t kIrVersion = 7;

/// Serialized ModelProto. Input "input" [1, Cin, D, H, W] maps to a
/// FeatureMap (W, H, D, Cin); output "prob" likewise.
std::string export_model(const UNet3D &model);
void save_model(const UNet3D &model, const std::filesystem::path &path);

/// Row-major dense tensor.
struct Tensor {
  std::vector<std::int64_t> dims;
  std::vector<float> data;
  std::int64_t numel() const;
};

/// Parsed graph executed node by node with plain loops. Supports the ops
/// the exporter emits. Throws ExportParityFailure on malformed models.
class Graph {
public:
  static Graph parse(const std::string &bytes);
  static Graph load(const std::filesystem::path &path);

  FeatureMap run(const FeatureMap &input) const;
  Tensor run(const Tensor &input) const;

  struct Attribute {
    std::string name;
    std::int64_t i = 0;
    float f = 0.f;
    std::string s;
    std::vector<std::int64_t> ints;
  };
  struct Node {
    std::string op_type, name;
    std::vector<std::string> inputs, outputs;
    std::vector<Attribute> attributes;
    const Attribute *attribute(const std::string &name) const;
  };

  std::int64_t ir_version = 0, opset = 0;
  std::string producer;
  std::vector<Node> nodes;
  std::vector<std::pair<std::string, Tensor>> initializers;
  std::string input_name, output_name;
  std::vector<std::pair<std::string, std::string>> metadata;
};

struct ParityReport {
  std::vector<double> max_abs_diff; // per patch
  double worst = 0.0;
  double tolerance = 1e-4;
  bool passed = false;
};

/// Runs both graphs on `n` random standard-normal patches of the given shape.
ParityReport check_parity(const UNet3D &model, const Graph &graph, const Index3 &patch_shape, int n = 5,
                          std::uint64_t seed = 0, double tolerance = 1e-4);

} // namespace cordseg::onnx
