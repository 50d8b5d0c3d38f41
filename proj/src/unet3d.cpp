#include "cordseg/unet3d.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <random>

#include <nlohmann/json.hpp>

namespace cordseg {

using kernels::Matrix;
using kernels::Vector;

// ---------------------------------------------------------------------------
// Config

ModelConfig ModelConfig::localizer() {
  ModelConfig c;
  c.in_channels = 1;
  c.out_channels = 1;
  c.depth = 4;
  c.base_filters = 8;
  return c;
}

ModelConfig ModelConfig::segmenter() {
  ModelConfig c;
  c.in_channels = 2;
  c.out_channels = kNumClasses;
  c.depth = 4;
  c.base_filters = 16;
  return c;
}

void ModelConfig::validate() const {
  if (depth < 1) throw Error(ErrorKind::InvalidConfig, "depth must be >= 1");
  if (depth > 8) throw Error(ErrorKind::InvalidConfig, "depth must be <= 8");
  if (base_filters < 1) throw Error(ErrorKind::InvalidConfig, "base_filters must be >= 1");
  if (in_channels < 1 || out_channels < 1)
    throw Error(ErrorKind::InvalidConfig, "channel counts must be >= 1");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0))
    throw Error(ErrorKind::InvalidConfig, "dropout_rate must be in [0, 1)");
  if (!(leaky_slope > 0.0 && leaky_slope < 1.0))
    throw Error(ErrorKind::InvalidConfig, "leaky_slope must lie in (0, 1)");
  if (!(norm_eps > 0.0)) throw Error(ErrorKind::InvalidConfig, "norm_eps must be > 0");
}

std::vector<int> ModelConfig::aux_levels() const {
  std::vector<int> out;
  if (!deep_supervision) return out;
  for (int l = depth - 1; l >= depth - 2; --l)
    if (l >= 1) out.push_back(l);
  return out;
}

void to_json(nlohmann::json &j, const ModelConfig &c) {
  j = nlohmann::json{{"in_channels", c.in_channels},   {"out_channels", c.out_channels},
                     {"depth", c.depth},               {"base_filters", c.base_filters},
                     {"dropout_rate", c.dropout_rate}, {"leaky_slope", c.leaky_slope},
                     {"norm_eps", c.norm_eps},         {"deep_supervision", c.deep_supervision},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json &j, ModelConfig &c) {
  static const char *known[] = {"in_channels", "out_channels", "depth", "base_filters", "dropout_rate",
                                "leaky_slope", "norm_eps", "deep_supervision", "seed"};
  for (const auto &[key, _] : j.items())
    if (std::find_if(std::begin(known), std::end(known), [&](const char *k) { return key == k; }) ==
        std::end(known))
      throw Error(ErrorKind::InvalidConfig, "unknown model config key '" + key + "'");
  ModelConfig d;
  c.in_channels = j.value("in_channels", d.in_channels);
  c.out_channels = j.value("out_channels", d.out_channels);
  c.depth = j.value("depth", d.depth);
  c.base_filters = j.value("base_filters", d.base_filters);
  c.dropout_rate = j.value("dropout_rate", d.dropout_rate);
  c.leaky_slope = j.value("leaky_slope", d.leaky_slope);
  c.norm_eps = j.value("norm_eps", d.norm_eps);
  c.deep_supervision = j.value("deep_supervision", d.deep_supervision);
  c.seed = j.value("seed", d.seed);
  c.validate();
}

// ---------------------------------------------------------------------------
// Model

namespace {

Index3 spatial(const FeatureMap &f) {
  return {static_cast<int>(f.dimension(0)), static_cast<int>(f.dimension(1)),
          static_cast<int>(f.dimension(2))};
}
int channels(const FeatureMap &f) { return static_cast<int>(f.dimension(3)); }
Eigen::Index plane(const FeatureMap &f) { return f.dimension(0) * f.dimension(1) * f.dimension(2); }

FeatureMap make_map(const Index3 &s, int c) { return FeatureMap(s[0], s[1], s[2], c); }

FeatureMap zeros_like(const FeatureMap &f) {
  FeatureMap z(f.dimensions());
  z.setZero();
  return z;
}

} // namespace

struct UNet3D::Cache {
  struct Block {
    const FeatureMap *input = nullptr;
    int stride = 1;
    FeatureMap xhat, out;
    Vector inv_std;
    FeatureMap drop_scale; // empty when dropout is off
    FeatureMap dropped;
    const FeatureMap &result() const { return drop_scale.size() ? dropped : out; }
  };
  FeatureMap input;
  std::vector<Block> enc_a, enc_b, dec_a, dec_b;
  std::vector<FeatureMap> concat;
  FeatureMap prob;
};

UNet3D::UNet3D(const ModelConfig &cfg) : cfg_(cfg) {
  cfg_.validate();
  const int d = cfg_.depth;
  enc_ids_.resize(d + 1);
  dec_ids_.resize(d);
  aux_weight_.assign(d + 1, -1);
  aux_bias_.assign(d + 1, -1);

  auto block = [&](const std::string &prefix, int cin, int cout) {
    BlockIds ids;
    ids.weight = add_param(prefix + ".weight", {cout, cin, 3, 3, 3}, 27 * Eigen::Index(cin), cout);
    ids.gamma = add_param(prefix + ".gamma", {cout}, cout, 1);
    ids.beta = add_param(prefix + ".beta", {cout}, cout, 1);
    return ids;
  };
  for (int l = 0; l <= d; ++l) {
    const int cin = l == 0 ? cfg_.in_channels : cfg_.width(l - 1);
    enc_ids_[l].a = block("enc" + std::to_string(l) + ".a", cin, cfg_.width(l));
    enc_ids_[l].b = block("enc" + std::to_string(l) + ".b", cfg_.width(l), cfg_.width(l));
  }
  for (int l = d - 1; l >= 0; --l) {
    const std::string p = "dec" + std::to_string(l);
    const int w = cfg_.width(l), wu = cfg_.width(l + 1);
    dec_ids_[l].up_weight = add_param(p + ".up.weight", {wu, w, 2, 2, 2}, 8 * Eigen::Index(w), wu);
    dec_ids_[l].up_bias = add_param(p + ".up.bias", {w}, w, 1);
    dec_ids_[l].a = block(p + ".a", 2 * w, w);
    dec_ids_[l].b = block(p + ".b", w, w);
  }
  for (int l : cfg_.aux_levels()) {
    const std::string p = "aux" + std::to_string(l);
    aux_weight_[l] = add_param(p + ".weight", {cfg_.out_channels, cfg_.width(l), 1, 1, 1},
                               cfg_.width(l), cfg_.out_channels);
    aux_bias_[l] = add_param(p + ".bias", {cfg_.out_channels}, cfg_.out_channels, 1);
  }
  head_weight_ = add_param("head.weight", {cfg_.out_channels, cfg_.width(0), 1, 1, 1}, cfg_.width(0),
                           cfg_.out_channels);
  head_bias_ = add_param("head.bias", {cfg_.out_channels}, cfg_.out_channels, 1);
  initialize();
}

UNet3D::~UNet3D() = default;
UNet3D::UNet3D(UNet3D &&) noexcept = default;
UNet3D &UNet3D::operator=(UNet3D &&) noexcept = default;

UNet3D::UNet3D(const UNet3D &other)
    : cfg_(other.cfg_), params_(other.params_), enc_ids_(other.enc_ids_), dec_ids_(other.dec_ids_),
      head_weight_(other.head_weight_), head_bias_(other.head_bias_), aux_weight_(other.aux_weight_),
      aux_bias_(other.aux_bias_) {}

UNet3D &UNet3D::operator=(const UNet3D &other) {
  if (this != &other) {
    UNet3D tmp(other);
    *this = std::move(tmp);
  }
  return *this;
}

int UNet3D::add_param(std::string name, std::vector<std::int64_t> onnx_shape, Eigen::Index rows,
                      Eigen::Index cols) {
  Parameter p;
  p.name = std::move(name);
  p.onnx_shape = std::move(onnx_shape);
  p.value = Matrix::Zero(rows, cols);
  p.grad = Matrix::Zero(rows, cols);
  params_.push_back(std::move(p));
  return static_cast<int>(params_.size()) - 1;
}

void UNet3D::initialize() {
  std::mt19937_64 rng(cfg_.seed);
  auto fill_normal = [&](Matrix &m, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(dist(rng));
  };
  for (auto &p : params_) {
    const std::string &n = p.name;
    auto ends_with = [&](const char *suffix) {
      const std::size_t len = std::strlen(suffix);
      return n.size() >= len && n.compare(n.size() - len, len, suffix) == 0;
    };
    if (ends_with(".gamma")) {
      p.value.setOnes();
    } else if (ends_with(".beta") || ends_with(".bias")) {
      p.value.setZero();
    } else if (n.find(".up.") != std::string::npos) {
      fill_normal(p.value, std::sqrt(1.0 / static_cast<double>(p.value.cols())));
    } else if (n.rfind("head", 0) == 0 || n.rfind("aux", 0) == 0) {
      fill_normal(p.value, std::sqrt(1.0 / static_cast<double>(p.value.rows())));
    } else {
      // fan-in scaled for leaky rectifier layers
      fill_normal(p.value, std::sqrt(2.0 / static_cast<double>(p.value.rows())));
    }
  }
}

void UNet3D::zero_grad() {
  for (auto &p : params_) p.grad.setZero();
}

const Parameter &UNet3D::parameter(const std::string &name) const {
  for (const auto &p : params_)
    if (p.name == name) return p;
  throw Error(ErrorKind::InvalidConfig, "no parameter named " + name);
}

std::int64_t UNet3D::count_parameters() const {
  std::int64_t n = 0;
  for (const auto &p : params_) n += p.value.size();
  return n;
}

std::vector<int> UNet3D::encoder_widths() const {
  std::vector<int> w;
  for (int l = 0; l <= cfg_.depth; ++l) w.push_back(cfg_.width(l));
  return w;
}

Index3 UNet3D::bottleneck_shape(const Index3 &input_shape) const {
  return input_shape / (1 << cfg_.depth);
}

void UNet3D::check_input_shape(const Index3 &shape, int ch) const {
  const int div = 1 << cfg_.depth;
  if (ch != cfg_.in_channels)
    throw Error(ErrorKind::ShapeMismatch, "expected " + std::to_string(cfg_.in_channels) +
                                              " input channels, got " + std::to_string(ch));
  if ((shape.unaryExpr([div](int v) { return v % div; }) != 0).any() || !(shape > 0).all())
    throw Error(ErrorKind::ShapeMismatch,
                "spatial dims must be positive multiples of " + std::to_string(div));
}

FeatureMap UNet3D::run(const FeatureMap &input, Cache *cache, std::uint64_t dropout_seed) const {
  check_input_shape(spatial(input), channels(input));
  const int d = cfg_.depth;
  const float slope = static_cast<float>(cfg_.leaky_slope);
  const float eps = static_cast<float>(cfg_.norm_eps);
  std::mt19937_64 drop_rng(dropout_seed);
  const bool train = cache != nullptr;

  // conv3 -> norm -> leaky (-> dropout); returns the block output
  auto conv_block = [&](const FeatureMap &in, const BlockIds &ids, int stride, bool dropout,
                        Cache::Block *bc) -> FeatureMap {
    const Matrix &w = params_[ids.weight].value;
    const Index3 out_shape = kernels::conv3_output_shape(spatial(in), stride);
    const int cout = static_cast<int>(w.cols());
    FeatureMap x = make_map(out_shape, cout);
    kernels::conv3_forward(in.data(), spatial(in), channels(in), w, stride, x.data());
    FeatureMap out = make_map(out_shape, cout);
    Vector inv_std;
    FeatureMap xhat;
    if (bc) xhat = make_map(out_shape, cout);
    kernels::norm_act_forward(x.data(), voxel_count(out_shape), cout, params_[ids.gamma].value.col(0),
                              params_[ids.beta].value.col(0), eps, slope, bc ? xhat.data() : nullptr,
                              inv_std, out.data());
    x = FeatureMap();
    if (!bc) return out;

    bc->input = &in;
    bc->stride = stride;
    bc->xhat = std::move(xhat);
    bc->inv_std = inv_std;
    bc->out = std::move(out);
    if (dropout && train && cfg_.dropout_rate > 0.0) {
      const float keep_scale = static_cast<float>(1.0 / (1.0 - cfg_.dropout_rate));
      std::bernoulli_distribution keep(1.0 - cfg_.dropout_rate);
      bc->drop_scale = FeatureMap(bc->out.dimensions());
      for (Eigen::Index i = 0; i < bc->drop_scale.size(); ++i)
        bc->drop_scale.data()[i] = keep(drop_rng) ? keep_scale : 0.0f;
      bc->dropped = bc->out * bc->drop_scale;
    }
    return FeatureMap();
  };

  // Forward through the encoder. In eval mode we keep skip outputs only.
  std::vector<FeatureMap> skips(d + 1);
  if (cache) {
    cache->enc_a.assign(d + 1, {});
    cache->enc_b.assign(d + 1, {});
    cache->dec_a.assign(d, {});
    cache->dec_b.assign(d, {});
    cache->concat.assign(d, {});
  }
  const FeatureMap *prev = &input;
  for (int l = 0; l <= d; ++l) {
    const int stride = l == 0 ? 1 : 2;
    const bool drop = l >= d - 1;
    if (cache) {
      conv_block(*prev, enc_ids_[l].a, stride, drop, &cache->enc_a[l]);
      conv_block(cache->enc_a[l].result(), enc_ids_[l].b, 1, false, &cache->enc_b[l]);
      prev = &cache->enc_b[l].out;
    } else {
      FeatureMap a = conv_block(*prev, enc_ids_[l].a, stride, drop, nullptr);
      skips[l] = conv_block(a, enc_ids_[l].b, 1, false, nullptr);
      prev = &skips[l];
    }
  }

  // Decoder with deep-supervision logits.
  std::vector<FeatureMap> aux_logits(d + 1);
  FeatureMap dec_out;
  for (int l = d - 1; l >= 0; --l) {
    const LevelIds &ids = dec_ids_[l];
    const FeatureMap &skip = cache ? cache->enc_b[l].out : skips[l];
    const Index3 s = spatial(skip);
    const int w = cfg_.width(l);
    FeatureMap cat = make_map(s, 2 * w);
    std::memcpy(cat.data(), skip.data(), sizeof(float) * plane(skip) * w);
    kernels::upconv2_forward(prev->data(), spatial(*prev), channels(*prev), params_[ids.up_weight].value,
                             params_[ids.up_bias].value.col(0), cat.data() + plane(skip) * w);
    const bool drop = l >= d - 2;
    const FeatureMap *out_ptr = nullptr;
    if (cache) {
      cache->concat[l] = std::move(cat);
      conv_block(cache->concat[l], ids.a, 1, drop, &cache->dec_a[l]);
      conv_block(cache->dec_a[l].result(), ids.b, 1, false, &cache->dec_b[l]);
      out_ptr = &cache->dec_b[l].out;
    } else {
      FeatureMap a = conv_block(cat, ids.a, 1, drop, nullptr);
      cat = FeatureMap();
      if (l + 1 <= d) skips[l + 1] = FeatureMap(); // no longer needed
      dec_out = conv_block(a, ids.b, 1, false, nullptr);
      out_ptr = &dec_out;
    }
    if (aux_weight_[l] >= 0) {
      aux_logits[l] = make_map(s, cfg_.out_channels);
      kernels::pointwise_forward(out_ptr->data(), plane(*out_ptr), w, params_[aux_weight_[l]].value,
                                 params_[aux_bias_[l]].value.col(0), aux_logits[l].data());
    }
    prev = out_ptr;
  }

  const Index3 s0 = spatial(input);
  FeatureMap logits = make_map(s0, cfg_.out_channels);
  kernels::pointwise_forward(prev->data(), voxel_count(s0), cfg_.width(0), params_[head_weight_].value,
                             params_[head_bias_].value.col(0), logits.data());
  const auto aux = cfg_.aux_levels();
  if (!aux.empty()) {
    FeatureMap sum = std::move(aux_logits[aux.front()]);
    for (int l = aux.front() - 1; l >= 0; --l) {
      FeatureMap up = make_map(spatial(sum) * 2, cfg_.out_channels);
      kernels::upsample2_forward(sum.data(), spatial(sum), cfg_.out_channels, up.data());
      sum = std::move(up);
      if (l > 0 && aux_weight_[l] >= 0) sum += aux_logits[l];
    }
    logits += sum;
  }

  constexpr float lo = std::numeric_limits<float>::min();
  const float hi = std::nextafter(1.0f, 0.0f);
  FeatureMap prob = logits.unaryExpr([&](float z) {
    const float p = 1.0f / (1.0f + std::exp(-z));
    return std::clamp(p, lo, hi);
  });
  if (cache) cache->prob = prob;
  return prob;
}

FeatureMap UNet3D::forward(const FeatureMap &input) const { return run(input, nullptr, 0); }

Batch UNet3D::forward(const Batch &input) const {
  const Eigen::Index n = input.dimension(4);
  Batch out(input.dimension(0), input.dimension(1), input.dimension(2), cfg_.out_channels, n);
  const Eigen::Index per = out.dimension(0) * out.dimension(1) * out.dimension(2) * cfg_.out_channels;
  for (Eigen::Index b = 0; b < n; ++b) {
    const FeatureMap o = forward(batch_sample(input, b));
    std::memcpy(out.data() + b * per, o.data(), sizeof(float) * per);
  }
  return out;
}

FeatureMap UNet3D::forward_train(const FeatureMap &input, std::uint64_t dropout_seed) {
  cache_ = std::make_unique<Cache>();
  cache_->input = input;
  return run(cache_->input, cache_.get(), dropout_seed);
}

void UNet3D::backward(const FeatureMap &grad_prob) {
  if (!cache_)
    throw Error(ErrorKind::ShapeMismatch, "backward called without forward_train");
  Cache &c = *cache_;
  if (grad_prob.dimensions() != c.prob.dimensions())
    throw Error(ErrorKind::ShapeMismatch, "gradient shape differs from output shape");
  const int d = cfg_.depth;
  const float slope = static_cast<float>(cfg_.leaky_slope);

  auto block_backward = [&](Cache::Block &bc, const BlockIds &ids, FeatureMap &d_out,
                            FeatureMap *d_in) {
    if (bc.drop_scale.size()) d_out *= bc.drop_scale;
    Parameter &w = params_[ids.weight];
    Parameter &g = params_[ids.gamma];
    Parameter &b = params_[ids.beta];
    Vector dg = Vector::Zero(g.value.rows()), db = Vector::Zero(b.value.rows());
    kernels::norm_act_backward(bc.xhat.data(), bc.out.data(), bc.inv_std, plane(bc.out), channels(bc.out),
                               g.value.col(0), slope, d_out.data(), dg, db, d_out.data());
    g.grad.col(0) += dg;
    b.grad.col(0) += db;
    bc.xhat = FeatureMap();
    kernels::conv3_backward(bc.input->data(), spatial(*bc.input), channels(*bc.input), w.value, bc.stride,
                            d_out.data(), w.grad, d_in ? d_in->data() : nullptr);
  };

  // sigmoid
  FeatureMap d_logits = grad_prob * c.prob * (c.prob.constant(1.0f) - c.prob);
  c.prob = FeatureMap();

  // deep-supervision chain: gradient of the summed logits at each level
  const auto aux = cfg_.aux_levels();
  std::vector<FeatureMap> d_level(d + 1);
  if (!aux.empty()) {
    FeatureMap g = d_logits;
    for (int l = 1; l <= aux.front(); ++l) {
      const Index3 s = spatial(g) / 2;
      FeatureMap down = make_map(s, cfg_.out_channels);
      down.setZero();
      kernels::upsample2_backward(g.data(), s, cfg_.out_channels, down.data());
      g = std::move(down);
      if (aux_weight_[l] >= 0) d_level[l] = g;
    }
  }

  // gradients w.r.t. decoder outputs, seeded by the heads
  std::vector<FeatureMap> d_dec(d);
  for (int l = 0; l < d; ++l) {
    d_dec[l] = zeros_like(c.dec_b[l].out);
  }
  {
    Parameter &w = params_[head_weight_];
    Parameter &b = params_[head_bias_];
    Vector db = Vector::Zero(b.value.rows());
    kernels::pointwise_backward(c.dec_b[0].out.data(), plane(c.dec_b[0].out), cfg_.width(0), w.value,
                                d_logits.data(), w.grad, db, d_dec[0].data());
    b.grad.col(0) += db;
  }
  d_logits = FeatureMap();
  for (int l : aux) {
    Parameter &w = params_[aux_weight_[l]];
    Parameter &b = params_[aux_bias_[l]];
    Vector db = Vector::Zero(b.value.rows());
    kernels::pointwise_backward(c.dec_b[l].out.data(), plane(c.dec_b[l].out), cfg_.width(l), w.value,
                                d_level[l].data(), w.grad, db, d_dec[l].data());
    b.grad.col(0) += db;
    d_level[l] = FeatureMap();
  }

  // decoder, finest level first
  std::vector<FeatureMap> d_skip(d + 1);
  for (int l = 0; l <= d; ++l) d_skip[l] = zeros_like(c.enc_b[l].out);
  for (int l = 0; l < d; ++l) {
    const LevelIds &ids = dec_ids_[l];
    FeatureMap d_a = zeros_like(c.dec_a[l].out);
    block_backward(c.dec_b[l], ids.b, d_dec[l], &d_a);
    d_dec[l] = FeatureMap();
    c.dec_b[l].out = FeatureMap();
    FeatureMap d_cat = zeros_like(c.concat[l]);
    block_backward(c.dec_a[l], ids.a, d_a, &d_cat);
    d_a = FeatureMap();
    c.dec_a[l] = Cache::Block();

    const Eigen::Index n = plane(c.concat[l]);
    const int w = cfg_.width(l);
    d_skip[l] += Eigen::TensorMap<FeatureMap>(d_cat.data(), d_cat.dimension(0), d_cat.dimension(1),
                                              d_cat.dimension(2), w);
    FeatureMap &d_prev = l + 1 < d ? d_dec[l + 1] : d_skip[d];
    const FeatureMap &prev_out = l + 1 < d ? c.dec_b[l + 1].out : c.enc_b[d].out;
    Vector db = Vector::Zero(w);
    kernels::upconv2_backward(prev_out.data(), spatial(prev_out), channels(prev_out),
                              params_[ids.up_weight].value, d_cat.data() + n * w,
                              params_[ids.up_weight].grad, db, d_prev.data());
    params_[ids.up_bias].grad.col(0) += db;
    c.concat[l] = FeatureMap();
  }

  // encoder, deepest level first
  for (int l = d; l >= 0; --l) {
    const LevelIds &ids = enc_ids_[l];
    FeatureMap d_a = zeros_like(c.enc_a[l].out);
    block_backward(c.enc_b[l], ids.b, d_skip[l], &d_a);
    d_skip[l] = FeatureMap();
    FeatureMap *d_in = l > 0 ? &d_skip[l - 1] : nullptr;
    block_backward(c.enc_a[l], ids.a, d_a, d_in);
    c.enc_a[l] = Cache::Block();
    if (l < d) c.enc_b[l + 1] = Cache::Block();
  }
  cache_.reset();
}

FeatureMap batch_sample(const Batch &batch, Eigen::Index b) {
  FeatureMap out(batch.dimension(0), batch.dimension(1), batch.dimension(2), batch.dimension(3));
  std::memcpy(out.data(), batch.data() + b * out.size(), sizeof(float) * out.size());
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: "CSEGCKPT" | u64 header length | JSON header | float32 params | u64 FNV-1a

namespace {

constexpr char kMagic[8] = {'C', 'S', 'E', 'G', 'C', 'K', 'P', 'T'};

std::uint64_t fnv1a(const std::string &bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

} // namespace

void UNet3D::save(const std::filesystem::path &path) const {
  nlohmann::json header;
  header["version"] = kPipelineVersion;
  header["config"] = cfg_;
  nlohmann::json plist = nlohmann::json::array();
  for (const auto &p : params_)
    plist.push_back({{"name", p.name}, {"rows", p.value.rows()}, {"cols", p.value.cols()}});
  header["params"] = plist;
  const std::string hs = header.dump();

  std::string payload(kMagic, sizeof(kMagic));
  const std::uint64_t hlen = hs.size();
  payload.append(reinterpret_cast<const char *>(&hlen), sizeof(hlen));
  payload += hs;
  for (const auto &p : params_)
    payload.append(reinterpret_cast<const char *>(p.value.data()), sizeof(float) * p.value.size());
  const std::uint64_t sum = fnv1a(payload);

  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::IoFailure, "cannot write checkpoint " + path.string());
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  out.write(reinterpret_cast<const char *>(&sum), sizeof(sum));
  if (!out) throw Error(ErrorKind::IoFailure, "write failed: " + path.string());
}

UNet3D UNet3D::load(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::FileNotFound, path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  auto corrupt = [&](const std::string &why) {
    return Error(ErrorKind::CorruptCheckpoint, path.string() + ": " + why);
  };
  if (bytes.size() < sizeof(kMagic) + 16 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
    throw corrupt("bad magic");
  std::uint64_t stored = 0;
  std::memcpy(&stored, bytes.data() + bytes.size() - sizeof(stored), sizeof(stored));
  const std::string payload = bytes.substr(0, bytes.size() - sizeof(stored));
  if (fnv1a(payload) != stored) throw corrupt("checksum mismatch");

  std::uint64_t hlen = 0;
  std::memcpy(&hlen, payload.data() + sizeof(kMagic), sizeof(hlen));
  const std::size_t hstart = sizeof(kMagic) + sizeof(hlen);
  if (hstart + hlen > payload.size()) throw corrupt("header overruns file");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(payload.substr(hstart, hlen));
  } catch (const nlohmann::json::exception &e) {
    throw corrupt(e.what());
  }
  UNet3D model(header.at("config").get<ModelConfig>());
  const auto &plist = header.at("params");
  if (plist.size() != model.params_.size()) throw corrupt("parameter count mismatch");
  std::size_t off = hstart + hlen;
  for (std::size_t i = 0; i < plist.size(); ++i) {
    Parameter &p = model.params_[i];
    if (plist[i].at("name").get<std::string>() != p.name ||
        plist[i].at("rows").get<Eigen::Index>() != p.value.rows() ||
        plist[i].at("cols").get<Eigen::Index>() != p.value.cols())
      throw corrupt("parameter layout mismatch at " + p.name);
    const std::size_t nbytes = sizeof(float) * static_cast<std::size_t>(p.value.size());
    if (off + nbytes > payload.size()) throw corrupt("truncated parameters");
    std::memcpy(p.value.data(), payload.data() + off, nbytes);
    off += nbytes;
  }
  if (off != payload.size()) throw corrupt("trailing bytes");
  return model;
}

} // namespace cordseg
