#include "cordseg/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

namespace cordseg {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

void reject_unknown(const nlohmann::json &j, std::initializer_list<const char *> known, const char *what) {
  for (const auto &[key, _] : j.items())
    if (std::find_if(known.begin(), known.end(), [&](const char *k) { return key == k; }) == known.end())
      throw Error(ErrorKind::InvalidConfig, std::string("unknown ") + what + " key '" + key + "'");
}

} // namespace

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  std::uint64_t x = a;
  for (std::uint64_t w : {b, c}) {
    x ^= w + 0x9e3779b97f4a7c15ULL + (x << 6) + (x >> 2);
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    x ^= x >> 31;
  }
  return x;
}

TrainConfig TrainConfig::localizer() { return {}; }

TrainConfig TrainConfig::segmenter() {
  TrainConfig c;
  c.batch_size = 8;
  return c;
}

void TrainConfig::validate() const {
  if (!(lr0 > 0.0)) throw Error(ErrorKind::InvalidConfig, "lr0 must be > 0");
  if (max_epochs < 1) throw Error(ErrorKind::InvalidConfig, "max_epochs must be >= 1");
  if (patience < 0 || patience > max_epochs)
    throw Error(ErrorKind::InvalidConfig, "patience must lie in [0, max_epochs]");
  if (!(min_delta >= 0.0)) throw Error(ErrorKind::InvalidConfig, "min_delta must be >= 0");
  if (batch_size < 1) throw Error(ErrorKind::InvalidConfig, "batch_size must be >= 1");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0 && adam_eps > 0.0))
    throw Error(ErrorKind::InvalidConfig, "invalid Adam coefficients");
}

void to_json(nlohmann::json &j, const TrainConfig &c) {
  j = nlohmann::json{{"lr0", c.lr0},         {"max_epochs", c.max_epochs}, {"patience", c.patience},
                     {"min_delta", c.min_delta}, {"batch_size", c.batch_size}, {"seed", c.seed},
                     {"beta1", c.beta1},     {"beta2", c.beta2},           {"adam_eps", c.adam_eps}};
}

void from_json(const nlohmann::json &j, TrainConfig &c) {
  reject_unknown(j, {"lr0", "max_epochs", "patience", "min_delta", "batch_size", "seed", "beta1", "beta2", "adam_eps"},
                 "train");
  TrainConfig d = c;
  d.lr0 = j.value("lr0", c.lr0);
  d.max_epochs = j.value("max_epochs", c.max_epochs);
  d.patience = j.value("patience", c.patience);
  d.min_delta = j.value("min_delta", c.min_delta);
  d.batch_size = j.value("batch_size", c.batch_size);
  d.seed = j.value("seed", c.seed);
  d.beta1 = j.value("beta1", c.beta1);
  d.beta2 = j.value("beta2", c.beta2);
  d.adam_eps = j.value("adam_eps", c.adam_eps);
  c = d;
}

double cosine_lr(int epoch, const TrainConfig &cfg) {
  const int e = std::clamp(epoch, 0, cfg.max_epochs);
  return 0.5 * cfg.lr0 * (1.0 + std::cos(std::numbers::pi * e / cfg.max_epochs));
}

void SplitSpec::validate() const {
  if (train_frac < 0 || val_frac < 0 || test_frac < 0)
    throw Error(ErrorKind::InvalidConfig, "split fractions must be >= 0");
  if (std::abs(train_frac + val_frac + test_frac - 1.0) > 1e-9)
    throw Error(ErrorKind::InvalidConfig, "split fractions must sum to 1");
}

void to_json(nlohmann::json &j, const SplitSpec &s) {
  std::vector<std::string> tags;
  for (RegionTag t : s.force_train) tags.push_back(to_string(t));
  j = nlohmann::json{{"train_frac", s.train_frac}, {"val_frac", s.val_frac}, {"test_frac", s.test_frac},
                     {"force_train_tags", tags},   {"seed", s.seed}};
}

void from_json(const nlohmann::json &j, SplitSpec &s) {
  reject_unknown(j, {"train_frac", "val_frac", "test_frac", "force_train_tags", "seed"}, "split");
  SplitSpec d = s;
  d.train_frac = j.value("train_frac", s.train_frac);
  d.val_frac = j.value("val_frac", s.val_frac);
  d.test_frac = j.value("test_frac", s.test_frac);
  d.seed = j.value("seed", s.seed);
  if (j.contains("force_train_tags")) {
    d.force_train.clear();
    for (const auto &t : j.at("force_train_tags")) d.force_train.insert(region_tag_from_string(t.get<std::string>()));
  }
  s = d;
}

Split split_dataset(const std::vector<RegionTag> &tags, const SplitSpec &spec) {
  spec.validate();
  const std::size_t n = tags.size();
  if (n < 5) throw Error(ErrorKind::InsufficientSubjects, "at least 5 subjects are required, got " + std::to_string(n));
  const auto n_val = static_cast<std::size_t>(std::floor(spec.val_frac * double(n) + 1e-9));
  const auto n_test = static_cast<std::size_t>(std::floor(spec.test_frac * double(n) + 1e-9));

  Split s;
  std::vector<std::size_t> free;
  for (std::size_t i = 0; i < n; ++i)
    (spec.force_train.count(tags[i]) ? s.train : free).push_back(i);
  if (free.size() < n_val + n_test)
    throw Error(ErrorKind::InsufficientSubjects, "too few subjects outside the forced-train regions");

  std::mt19937_64 rng(spec.seed);
  // Fisher-Yates with an explicit draw so the order is library independent
  for (std::size_t i = free.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(free[i - 1], free[j]);
  }
  s.val.assign(free.begin(), free.begin() + n_val);
  s.test.assign(free.begin() + n_val, free.begin() + n_val + n_test);
  s.train.insert(s.train.end(), free.begin() + n_val + n_test, free.end());
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.val.begin(), s.val.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

Split split_dataset(const std::vector<ManifestEntry> &subjects, const SplitSpec &spec) {
  std::vector<RegionTag> tags;
  for (const auto &e : subjects) tags.push_back(e.region_tag);
  return split_dataset(tags, spec);
}

Split split_dataset(const std::vector<SubjectRecord> &subjects, const SplitSpec &spec) {
  std::vector<RegionTag> tags;
  for (const auto &e : subjects) tags.push_back(e.region_tag);
  return split_dataset(tags, spec);
}

nlohmann::json split_manifest(const Split &split, const std::vector<std::string> &ids) {
  auto names = [&](const std::vector<std::size_t> &idx) {
    std::vector<std::string> out;
    for (std::size_t i : idx) out.push_back(ids.at(i));
    return out;
  };
  return {{"train", names(split.train)}, {"val", names(split.val)}, {"test", names(split.test)}};
}

LossFn dice_loss_fn(const DiceOptions &opt) {
  return [opt](const FeatureMap &pred, const FeatureMap &target, FeatureMap *grad) {
    return multiclass_dice_loss(pred, target, grad, opt);
  };
}

std::string History::csv() const {
  std::ostringstream s;
  s << "epoch,train_loss,val_loss,lr\n" << std::setprecision(17);
  for (const EpochRecord &e : epochs) s << e.epoch << ',' << e.train_loss << ',' << e.val_loss << ',' << e.lr << '\n';
  return s.str();
}

void History::write_csv(const std::filesystem::path &path) const {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::IoFailure, "cannot write " + path.string());
  out << csv();
  if (!out) throw Error(ErrorKind::IoFailure, "write failed: " + path.string());
}

Adam::Adam(const std::vector<Parameter> &params, double beta1, double beta2, double eps)
    : beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const Parameter &p : params) {
    m_.push_back(kernels::Matrix::Zero(p.value.rows(), p.value.cols()));
    v_.push_back(kernels::Matrix::Zero(p.value.rows(), p.value.cols()));
  }
}

void Adam::step(std::vector<Parameter> &params, double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, double(t_)), c2 = 1.0 - std::pow(beta2_, double(t_));
  const float b1 = float(beta1_), b2 = float(beta2_);
  const float step = float(lr / c1), inv_c2 = float(1.0 / c2), eps = float(eps_);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto g = params[k].grad.array();
    auto m = m_[k].array();
    auto v = v_[k].array();
    m = b1 * m + (1.f - b1) * g;
    v = b2 * v + (1.f - b2) * g.square();
    params[k].value.array() -= step * m / ((v * inv_c2).sqrt() + eps);
  }
}

double evaluate_loss(const UNet3D &model, const SampleSource &source, const LossFn &loss) {
  if (source.size == 0) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < source.size; ++i) {
    const Sample s = source.get(i, 0);
    sum += loss(model.forward(s.input), s.target, nullptr).value;
  }
  return sum / double(source.size);
}

TrainResult train(UNet3D model, const SampleSource &train_set, const SampleSource &val_set, const TrainConfig &cfg,
                  const LossFn &loss, const TrainOptions &opts) {
  cfg.validate();
  const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);
  const std::size_t steps = train_set.size / bs;
  if (steps == 0) throw Error(ErrorKind::InsufficientSubjects, "training set smaller than one batch");
  if (val_set.size == 0) throw Error(ErrorKind::InsufficientSubjects, "empty validation set");

  TrainResult result{model, {}, false};
  Adam adam(model.parameters(), cfg.beta1, cfg.beta2, cfg.adam_eps);
  // early stopping compares against `reference` (moved only by min_delta
  // improvements); the returned checkpoint is the plain minimum
  double reference = std::numeric_limits<double>::infinity();
  double best = std::numeric_limits<double>::infinity();
  int since_improvement = 0;

  auto diverged = [&](const std::string &what) {
    if (!opts.dump_dir.empty()) {
      std::filesystem::create_directories(opts.dump_dir);
      model.save(opts.dump_dir / "diverged.ckpt");
      result.history.write_csv(opts.dump_dir / "diverged_history.csv");
    }
    throw Error(ErrorKind::DivergedLoss, what);
  };

  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    const auto t0 = Clock::now();
    const double lr = cosine_lr(epoch, cfg);
    std::vector<std::size_t> order(train_set.size);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 shuffle(mix_seed(cfg.seed, 0x5348, epoch));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle() % i]);

    double train_sum = 0.0;
    for (std::size_t s = 0; s < steps; ++s) {
      const auto ts = Clock::now();
      model.zero_grad();
      double batch_loss = 0.0;
      for (std::size_t b = 0; b < bs; ++b) {
        const std::size_t idx = order[s * bs + b];
        const std::uint64_t draw = mix_seed(cfg.seed, epoch, s * bs + b);
        const Sample sample = train_set.get(idx, draw | 1);
        const FeatureMap pred = model.forward_train(sample.input, mix_seed(draw, 0xd0));
        FeatureMap grad;
        const double l = loss(pred, sample.target, &grad).value;
        if (!std::isfinite(l))
          diverged("non-finite training loss at epoch " + std::to_string(epoch) + ", step " + std::to_string(s));
        batch_loss += l;
        grad = grad * (1.0f / float(bs));
        model.backward(grad);
      }
      adam.step(model.parameters(), lr);
      batch_loss /= double(bs);
      train_sum += batch_loss;
      if (opts.on_step && !opts.on_step({epoch, s, steps, batch_loss, seconds_since(ts)})) {
        result.aborted = true;
        return result;
      }
    }

    const double val = evaluate_loss(model, val_set, loss);
    if (!std::isfinite(val)) diverged("non-finite validation loss at epoch " + std::to_string(epoch));
    EpochRecord rec{epoch, train_sum / double(steps), val, lr, val < reference - cfg.min_delta, 0.0};
    if (rec.improved) {
      reference = val;
      since_improvement = 0;
    } else {
      ++since_improvement;
    }
    if (val < best) {
      best = val;
      result.model = model;
      result.history.best_epoch = epoch;
      result.history.best_val_loss = val;
    }
    rec.seconds = seconds_since(t0);
    result.history.epochs.push_back(rec);
    if (opts.on_epoch) opts.on_epoch(rec);
    if (since_improvement >= cfg.patience && epoch + 1 < cfg.max_epochs) {
      result.history.stopped_early = true;
      break;
    }
  }
  return result;
}

} // namespace cordseg
