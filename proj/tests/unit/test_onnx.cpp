#include <doctest.h>

#include <filesystem>
#include <random>

#include <nlohmann/json.hpp>

#include "cordseg/onnx.hpp"

using namespace cordseg;

namespace {

ModelConfig small(int in, int out, int depth, bool ds, std::uint64_t seed) {
  ModelConfig c;
  c.in_channels = in;
  c.out_channels = out;
  c.depth = depth;
  c.base_filters = 2;
  c.deep_supervision = ds;
  c.seed = seed;
  return c;
}

} // namespace

TEST_CASE("exported graph structure") {
  ModelConfig c = small(1, 1, 1, false, 1);
  c.base_filters = 1;
  const UNet3D m(c);
  const onnx::Graph g = onnx::Graph::parse(onnx::export_model(m));
  CHECK(g.ir_version == onnx::kIrVersion);
  CHECK(g.opset == onnx::kOpset);
  CHECK(g.producer == "cordseg");
  CHECK(g.input_name == "input");
  CHECK(g.output_name == "prob");
  CHECK(g.initializers.size() == m.parameters().size());
  std::int64_t n = 0;
  for (const auto &[name, t] : g.initializers) {
    const Parameter &p = m.parameter(name);
    CHECK(t.dims == p.onnx_shape);
    REQUIRE(t.numel() == p.value.size());
    for (std::int64_t i = 0; i < t.numel(); ++i) REQUIRE(t.data[std::size_t(i)] == p.value.data()[i]);
    n += t.numel();
  }
  CHECK(n == 332);
  REQUIRE(g.metadata.size() == 1);
  CHECK(nlohmann::json::parse(g.metadata[0].second).get<ModelConfig>() == m.config());
  CHECK(g.nodes.back().op_type == "Identity");
}

TEST_CASE("reference interpreter matches the native forward") {
  for (int depth : {1, 2, 3})
    for (bool ds : {false, true}) {
      const UNet3D m(small(2, 4, depth, ds, 7 + depth));
      const onnx::Graph g = onnx::Graph::parse(onnx::export_model(m));
      const int div = 1 << depth;
      const onnx::ParityReport r = onnx::check_parity(m, g, {3 * div, 2 * div, div}, 2, 5);
      CHECK(r.max_abs_diff.size() == 2);
      CHECK(r.passed);
      CHECK(r.worst < 1e-5);
    }
}

TEST_CASE("parity flags a diverging model") {
  UNet3D m(small(1, 1, 2, true, 3));
  const onnx::Graph g = onnx::Graph::parse(onnx::export_model(m));
  for (auto &p : m.parameters())
    if (p.name == "head.bias") p.value(0, 0) += 0.05f;
  const onnx::ParityReport r = onnx::check_parity(m, g, {8, 8, 4}, 5, 1);
  CHECK_FALSE(r.passed);
  CHECK(r.worst > 1e-3);
  CHECK(r.worst < 0.0125 + 1e-6); // sigmoid slope is at most 1/4
}

TEST_CASE("exported file round trip") {
  const UNet3D m(small(1, 1, 1, false, 2));
  const auto p = std::filesystem::temp_directory_path() / "cordseg_test.onnx";
  onnx::save_model(m, p);
  const onnx::Graph g = onnx::Graph::load(p);
  CHECK(g.nodes.size() == onnx::Graph::parse(onnx::export_model(m)).nodes.size());
  std::filesystem::remove(p);
}

TEST_CASE("malformed models are rejected") {
  const std::string bytes = onnx::export_model(UNet3D(small(1, 1, 1, false, 2)));
  auto kind = [](const std::string &b) {
    try {
      const onnx::Graph g = onnx::Graph::parse(b);
      FeatureMap x(4, 4, 2, 1);
      x.setConstant(1.f);
      g.run(x);
    } catch (const Error &e) {
      return e.kind();
    }
    return ErrorKind::IoFailure;
  };
  CHECK(kind(bytes.substr(0, bytes.size() / 2)) == ErrorKind::ExportParityFailure);
  CHECK(kind(std::string("\x0a\x05", 2)) == ErrorKind::ExportParityFailure);
}

TEST_CASE("strided convolution alignment") {
  // a stride-2 3x3x3 conv with padding 1 centres output i on input 2i
  onnx::Graph g;
  g.input_name = "x";
  g.output_name = "y";
  onnx::Graph::Node n;
  n.op_type = "Conv";
  n.inputs = {"x", "w"};
  n.outputs = {"y"};
  onnx::Graph::Attribute pads, strides;
  pads.name = "pads";
  pads.ints = {1, 1, 1, 1, 1, 1};
  strides.name = "strides";
  strides.ints = {2, 2, 2};
  n.attributes = {pads, strides};
  g.nodes.push_back(n);
  onnx::Tensor w{{1, 1, 3, 3, 3}, std::vector<float>(27, 0.f)};
  w.data[13] = 1.f; // centre tap
  g.initializers.emplace_back("w", w);
  onnx::Tensor x{{1, 1, 4, 4, 4}, std::vector<float>(64)};
  for (int i = 0; i < 64; ++i) x.data[std::size_t(i)] = float(i);
  const onnx::Tensor y = g.run(x);
  CHECK(y.dims == std::vector<std::int64_t>{1, 1, 2, 2, 2});
  CHECK(y.data[7] == x.data[(2 * 4 + 2) * 4 + 2]);
}
