#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "cordseg/kernels.hpp"
#include "cordseg/tensor.hpp"
#include "cordseg/volume.hpp"

namespace cordseg {

inline constexpr const char *kPipelineVersion = "cordseg-1.0";

struct ModelConfig {
  int in_channels = 1;
  int out_channels = 1;
  int depth = 4;
  int base_filters = 8;
  double dropout_rate = 0.3;
  double leaky_slope = 0.01;
  double norm_eps = 1e-5;
  bool deep_supervision = true;
  std::uint64_t seed = 0;

  /// T2w -> cord probability.
  static ModelConfig localizer();
  /// (T2w, T1w-Gd) -> (tumor, cavity, edema, whole).
  static ModelConfig segmenter();

  void validate() const; // throws InvalidConfig
  int width(int level) const { return base_filters << level; }
  /// Decoder levels that carry an auxiliary deep-supervision head.
  std::vector<int> aux_levels() const;
  bool operator==(const ModelConfig &) const = default;
};

void to_json(nlohmann::json &j, const ModelConfig &c);
void from_json(const nlohmann::json &j, ModelConfig &c);

struct Parameter {
  std::string name;
  std::vector<std::int64_t> onnx_shape;
  kernels::Matrix value;
  kernels::Matrix grad;
};

/// Encoder-decoder network: per level two conv3 -> instance norm -> leaky
/// rectifier blocks (the first block of levels >= 1 has stride 2), transposed
/// convolution upsampling with skip concatenation, dropout in the deepest
/// blocks, summed deep-supervision logits and a sigmoid output.
class UNet3D {
public:
  explicit UNet3D(const ModelConfig &cfg);
  ~UNet3D();
  UNet3D(UNet3D &&) noexcept;
  UNet3D &operator=(UNet3D &&) noexcept;
  UNet3D(const UNet3D &other);
  UNet3D &operator=(const UNet3D &other);

  const ModelConfig &config() const { return cfg_; }

  /// Evaluation-mode forward (dropout off). Throws ShapeMismatch.
  FeatureMap forward(const FeatureMap &input) const;
  Batch forward(const Batch &input) const;

  /// Training forward: caches activations for `backward`.
  FeatureMap forward_train(const FeatureMap &input, std::uint64_t dropout_seed);
  /// Accumulates parameter gradients from d(loss)/d(probability) and
  /// releases the cache.
  void backward(const FeatureMap &grad_prob);

  void zero_grad();
  std::vector<Parameter> &parameters() { return params_; }
  const std::vector<Parameter> &parameters() const { return params_; }
  const Parameter &parameter(const std::string &name) const;

  std::int64_t count_parameters() const;
  std::vector<int> encoder_widths() const;
  /// Spatial shape at the deepest level for a given input shape.
  Index3 bottleneck_shape(const Index3 &input_shape) const;
  void check_input_shape(const Index3 &shape, int channels) const;

  void save(const std::filesystem::path &path) const;
  static UNet3D load(const std::filesystem::path &path);

private:
  struct Cache;
  FeatureMap run(const FeatureMap &input, Cache *cache, std::uint64_t dropout_seed) const;
  int add_param(std::string name, std::vector<std::int64_t> onnx_shape, Eigen::Index rows,
                Eigen::Index cols);
  void initialize();

  struct BlockIds {
    int weight = -1, gamma = -1, beta = -1;
  };
  struct LevelIds {
    BlockIds a, b;
    int up_weight = -1, up_bias = -1;
  };

  ModelConfig cfg_;
  std::vector<Parameter> params_;
  std::vector<LevelIds> enc_ids_, dec_ids_;
  int head_weight_ = -1, head_bias_ = -1;
  std::vector<int> aux_weight_, aux_bias_; // per level, -1 when absent
  std::unique_ptr<Cache> cache_;
};

/// Extracts one sample of a batch.
FeatureMap batch_sample(const Batch &batch, Eigen::Index b);

} // namespace cordseg
