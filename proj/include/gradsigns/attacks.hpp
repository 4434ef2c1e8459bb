#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <mutex>
#include <numeric>
#include <string>
#include <variant>
#include <vector>

#include "gradsigns/autodiff.hpp"
#include "gradsigns/data.hpp"
#include "gradsigns/error.hpp"
#include "gradsigns/extraction.hpp"
#include "gradsigns/model.hpp"
#include "gradsigns/random.hpp"
#include "gradsigns/train.hpp"
#include "gradsigns/watermark.hpp"

namespace gradsigns {

// ---- model tampering ------------------------------------------------------

// Zeroes the floor(p * W) non-bias weights of smallest magnitude (W = number
// of non-bias weights, ranked globally) and records 0/1 masks so later
// training keeps them at zero. Ties break by position.
inline Model prune(Model model, double p) {
  if (!(p >= 0.0 && p < 1.0)) throw value_error("pruning rate must be in [0, 1)");
  auto& params = model.params();
  if (model.masks().empty()) {
    for (const auto& q : params) model.masks().emplace_back(q.value.shape(), 1.0);
  }
  struct Ref {
    double mag;
    std::size_t tensor, index;
  };
  std::vector<Ref> refs;
  for (std::size_t t = 0; t < params.size(); ++t) {
    if (params[t].is_bias) continue;
    const auto w = params[t].value.data();
    for (std::size_t i = 0; i < w.size(); ++i) refs.push_back({std::abs(w[i]), t, i});
  }
  const auto k = static_cast<std::size_t>(std::floor(p * static_cast<double>(refs.size())));
  std::nth_element(refs.begin(), refs.begin() + static_cast<std::ptrdiff_t>(k), refs.end(), [](const Ref& a, const Ref& b) {
    if (a.mag != b.mag) return a.mag < b.mag;
    return a.tensor != b.tensor ? a.tensor < b.tensor : a.index < b.index;
  });
  for (std::size_t j = 0; j < k; ++j) {
    params[refs[j].tensor].value[refs[j].index] = 0.0;
    model.masks()[refs[j].tensor][refs[j].index] = 0.0;
  }
  return model;
}

struct FineTuneConfig {
  std::size_t epochs = 10;
  double learning_rate = 0.0005;
  bool early_stopping = true;
  std::size_t patience = 3;
  std::size_t batch_size = 64;
  Optimizer optimizer = Optimizer::SgdMomentum;
  double train_fraction = 0.7;
  std::uint64_t seed = 0;
};

// Cross-entropy retraining on the adversary's data, split train/validation;
// returns the epoch with the best validation accuracy.
inline TrainResult fine_tune(const Model& model, const Dataset& adversary, const FineTuneConfig& cfg) {
  if (adversary.size() == 0) throw value_error("adversary dataset is empty");
  const auto parts = split(adversary, {cfg.train_fraction, 1.0 - cfg.train_fraction}, mix_seed(cfg.seed, 10));
  if (parts[0].size() == 0 || parts[1].size() == 0) throw value_error("adversary split produced an empty part");
  TrainConfig tc;
  tc.epochs = cfg.epochs;
  tc.batch_size = cfg.batch_size;
  tc.learning_rate = cfg.learning_rate;
  tc.optimizer = cfg.optimizer;
  tc.seed = mix_seed(cfg.seed, 11);
  TrainOptions opts;
  opts.validation = &parts[1];
  opts.keep_best = cfg.early_stopping;
  opts.patience = cfg.early_stopping ? cfg.patience : 0;
  return train(model, parts[0], tc, nullptr, opts);
}

// Symmetric per-tensor fixed point: scale = max|w| / (2^(bits-1) - 1).
inline Model quantize(Model model, int bits = 8) {
  if (bits < 2 || bits > 16) throw value_error("quantization bits must be in [2, 16]");
  const double levels = std::ldexp(1.0, bits - 1) - 1.0;
  for (auto& p : model.params()) {
    double max_abs = 0.0;
    for (const double w : p.value.data()) max_abs = std::max(max_abs, std::abs(w));
    if (max_abs == 0.0) continue;
    const double scale = max_abs / levels;
    for (double& w : p.value.data()) w = std::round(w / scale) * scale;
  }
  return model;
}

inline double quantization_scale(const Tensor& t, int bits) {
  double max_abs = 0.0;
  for (const double w : t.data()) max_abs = std::max(max_abs, std::abs(w));
  return max_abs / (std::ldexp(1.0, bits - 1) - 1.0);
}

// clip(x + eps * sign(dJ_ce/dx), 0, 1) for a batch.
inline Tensor fgsm(const Model& model, const Tensor& x, std::span<const int> labels, double eps) {
  if (eps < 0.0) throw value_error("fgsm epsilon must be >= 0");
  if (eps == 0.0) return x;
  ad::Graph g;
  const ad::NodeId xn = g.input("x");
  const ad::NodeId yn = g.input("y");
  std::vector<ad::NodeId> leaves;
  ad::Bindings b;
  for (const auto& p : model.params()) {
    leaves.push_back(g.input(p.name));
    b.bind(leaves.back(), p.value);
  }
  const ad::NodeId ce = g.softmax_xent(model_logits(g, model.config(), xn, leaves), yn);
  const ad::NodeId dx = g.grad(ce, {xn})[0];
  const Tensor y = one_hot(labels, model.config().num_classes);
  b.bind(xn, x);
  b.bind(yn, y);
  return detail::fgsm_from_gradient(x, ad::forward(g, b, {dx})[dx], eps);
}

struct AdversarialConfig {
  std::size_t epochs = 5;
  double epsilon = 0.1;
  double learning_rate = 0.0005;
  std::size_t batch_size = 64;
  Optimizer optimizer = Optimizer::SgdMomentum;
  std::uint64_t seed = 0;
};

// Cross-entropy training on batches made of clean samples plus their FGSM
// counterparts (same labels), half and half.
inline TrainResult adversarial_fine_tune(const Model& model, const Dataset& data, const AdversarialConfig& cfg) {
  TrainConfig tc;
  tc.epochs = cfg.epochs;
  tc.batch_size = cfg.batch_size;
  tc.learning_rate = cfg.learning_rate;
  tc.optimizer = cfg.optimizer;
  tc.seed = mix_seed(cfg.seed, 20);
  TrainOptions opts;
  opts.fgsm_epsilon = cfg.epsilon;
  return train(model, data, tc, nullptr, opts);
}

// ---- oracle wrappers --------------------------------------------------------

// Wrappers forward each query to `inner` exactly once, so the base counter
// counts stack queries. Stochastic wrappers serialize access to their RNG.
class NoisyOracle final : public PredictionOracle {
 public:
  NoisyOracle(std::shared_ptr<PredictionOracle> inner, double sigma, std::uint64_t seed)
      : inner_(std::move(inner)), sigma_(sigma), rng_(seed) {
    if (!(sigma >= 0.0)) throw value_error("noise sigma must be >= 0");
  }
  Shape input_shape() const override { return inner_->input_shape(); }
  int class_count() const override { return inner_->class_count(); }

 protected:
  Tensor answer(const Tensor& batch) override {
    if (sigma_ == 0.0) return inner_->query(batch);
    Tensor noisy = batch;
    {
      std::lock_guard<std::mutex> lock(mu_);
      for (double& v : noisy.data()) v = std::clamp(v + sigma_ * standard_normal(rng_), 0.0, 1.0);
    }
    return inner_->query(noisy);
  }

 private:
  std::shared_ptr<PredictionOracle> inner_;
  double sigma_;
  std::mutex mu_;
  Rng rng_;
};

inline double round_half_away(double v, int decimals) {
  const double f = std::pow(10.0, decimals);
  return std::round(v * f) / f;
}

class RoundingOracle final : public PredictionOracle {
 public:
  RoundingOracle(std::shared_ptr<PredictionOracle> inner, int decimals) : inner_(std::move(inner)), decimals_(decimals) {
    if (decimals < 0) throw value_error("rounding decimals must be >= 0");
  }
  Shape input_shape() const override { return inner_->input_shape(); }
  int class_count() const override { return inner_->class_count(); }

 protected:
  Tensor answer(const Tensor& batch) override {
    Tensor p = inner_->query(batch);
    for (double& v : p.data()) v = round_half_away(v, decimals_);
    return p;
  }

 private:
  std::shared_ptr<PredictionOracle> inner_;
  int decimals_;
};

// Score perturbation on one probability row. Moves phi in (0, tau] from the
// top-1 entry to the lowest one, where tau = min(P1 - P2, PM - Plast) - eps;
// the top-M order and the sum are preserved. Returns phi (0 if untouched).
template <BitSource64 G>
double perturb_scores(std::span<double> p, std::size_t m, double eps, G& gen) {
  const std::size_t k = p.size();
  if (m < 2 || k < m + 1) throw value_error("perturbation needs 2 <= M < class count");
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] > p[b]; });
  const double top1 = p[order[0]], top2 = p[order[1]], top_m = p[order[m - 1]], last = p[order[k - 1]];
  const double tau = std::min(top1 - top2, top_m - last) - eps;
  if (!(tau > 0.0)) return 0.0;
  const double phi = (1.0 - uniform01(gen)) * tau;
  p[order[0]] -= phi;
  p[order[k - 1]] += phi;
  return phi;
}

class PerturbationOracle final : public PredictionOracle {
 public:
  PerturbationOracle(std::shared_ptr<PredictionOracle> inner, std::size_t m, double eps, std::uint64_t seed)
      : inner_(std::move(inner)), m_(m), eps_(eps), rng_(seed) {
    if (m < 2 || static_cast<std::size_t>(inner_->class_count()) < m + 1) {
      throw value_error("perturbation needs 2 <= M < class count");
    }
    if (!(eps >= 0.0)) throw value_error("perturbation epsilon must be >= 0");
  }
  Shape input_shape() const override { return inner_->input_shape(); }
  int class_count() const override { return inner_->class_count(); }

 protected:
  Tensor answer(const Tensor& batch) override {
    Tensor p = inner_->query(batch);
    const std::size_t k = p.dim(1);
    std::lock_guard<std::mutex> lock(mu_);
    for (std::size_t r = 0; r < p.dim(0); ++r) perturb_scores(p.data().subspan(r * k, k), m_, eps_, rng_);
    return p;
  }

 private:
  std::shared_ptr<PredictionOracle> inner_;
  std::size_t m_;
  double eps_;
  std::mutex mu_;
  Rng rng_;
};

struct NoiseWrap {
  double sigma = 0.0;
  bool operator==(const NoiseWrap&) const = default;
};
struct RoundWrap {
  int decimals = 0;
  bool operator==(const RoundWrap&) const = default;
};
struct PerturbWrap {
  std::size_t m = 3;
  double eps = 1e-5;
  std::uint64_t seed = 0;
  bool operator==(const PerturbWrap&) const = default;
};
using WrapperSpec = std::variant<NoiseWrap, RoundWrap, PerturbWrap>;

// "noise:0.01", "round:1", "perturb:3,1e-5,7" (seed defaults to 0).
inline WrapperSpec parse_wrapper(const std::string& text) {
  const auto colon = text.find(':');
  if (colon == std::string::npos) throw value_error("wrapper spec '" + text + "' lacks ':'");
  const std::string kind = text.substr(0, colon);
  const std::string args = text.substr(colon + 1);
  auto number = [&](const std::string& s) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(s, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != s.size() || !std::isfinite(v)) throw value_error("bad number '" + s + "' in wrapper spec");
    return v;
  };
  if (kind == "noise") {
    const double s = number(args);
    if (s < 0.0) throw value_error("noise sigma must be >= 0");
    return NoiseWrap{s};
  }
  if (kind == "round") {
    const double d = number(args);
    if (d < 0.0 || d != std::floor(d) || d > 17) throw value_error("round decimals must be an integer in [0, 17]");
    return RoundWrap{static_cast<int>(d)};
  }
  if (kind == "perturb") {
    std::vector<std::string> f;
    std::size_t start = 0;
    for (;;) {
      const auto comma = args.find(',', start);
      f.push_back(args.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (f.size() < 2 || f.size() > 3) throw value_error("perturb spec is M,eps[,seed]");
    const double m = number(f[0]);
    if (m < 2 || m != std::floor(m)) throw value_error("perturb M must be an integer >= 2");
    const double eps = number(f[1]);
    if (eps < 0.0) throw value_error("perturb epsilon must be >= 0");
    std::uint64_t seed = 0;
    if (f.size() == 3) {
      try {
        std::size_t used = 0;
        seed = std::stoull(f[2], &used);
        if (used != f[2].size()) throw value_error("");
      } catch (const std::exception&) {
        throw value_error("bad perturb seed '" + f[2] + "'");
      }
    }
    return PerturbWrap{static_cast<std::size_t>(m), eps, seed};
  }
  throw value_error("unknown wrapper kind '" + kind + "'");
}

inline std::string wrapper_to_string(const WrapperSpec& w) {
  return std::visit(
      [](const auto& s) -> std::string {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, NoiseWrap>) return "noise:" + std::to_string(s.sigma);
        if constexpr (std::is_same_v<T, RoundWrap>) return "round:" + std::to_string(s.decimals);
        if constexpr (std::is_same_v<T, PerturbWrap>)
          return "perturb:" + std::to_string(s.m) + "," + std::to_string(s.eps) + "," + std::to_string(s.seed);
      },
      w);
}

// Applies the wrappers innermost first. `stream` is mixed into every
// stochastic seed, giving e.g. each server connection its own generator.
inline std::shared_ptr<PredictionOracle> wrap_oracle(std::shared_ptr<PredictionOracle> base,
                                                     const std::vector<WrapperSpec>& stack, std::uint64_t stream = 0) {
  std::shared_ptr<PredictionOracle> cur = std::move(base);
  std::uint64_t layer = 0;
  for (const WrapperSpec& w : stack) {
    ++layer;
    if (const auto* n = std::get_if<NoiseWrap>(&w)) {
      cur = std::make_shared<NoisyOracle>(cur, n->sigma, mix_seed(mix_seed(stream, layer), 0x6e6f697365));
    } else if (const auto* r = std::get_if<RoundWrap>(&w)) {
      cur = std::make_shared<RoundingOracle>(cur, r->decimals);
    } else if (const auto* p = std::get_if<PerturbWrap>(&w)) {
      cur = std::make_shared<PerturbationOracle>(cur, p->m, p->eps, mix_seed(p->seed, stream));
    }
  }
  return cur;
}

// ---- forging ----------------------------------------------------------------

struct ForgeConfig {
  std::size_t epochs = 80;
  std::vector<double> lambdas;  // empty: {lambda/2, lambda, 2 lambda} of `base`
  TrainConfig base;             // optimizer, lr, batch sizes, vendor lambda
};

struct ForgeTrial {
  double lambda = 0.0;
  double besr = 0.0;           // on the held-out target-class pool
  double besr_training = 0.0;  // on the forger's own target-class samples
  double test_accuracy = 0.0;
  double accuracy_delta = 0.0;  // forged minus pretrained, in [-1, 1]
};

struct ForgeResult {
  std::vector<ForgeTrial> trials;
  double best_besr = 0.0;
  double best_accuracy_delta = 0.0;
  double pretrained_accuracy = 0.0;
};

inline std::vector<double> forging_lambdas(double lambda) {
  std::vector<double> out;
  for (const double l : {lambda / 2.0, lambda, 2.0 * lambda}) out.push_back(std::clamp(l, 1e-12, 1.0));
  return out;
}

// Retrains a pretrained (stolen) model with the embedding objective for a
// counterfeit key on the forger's small dataset, once per lambda trial.
inline ForgeResult forge(const Model& pretrained, const WatermarkKey& counterfeit, const Dataset& sub_dataset,
                         const Dataset& test, const Dataset& heldout_pool, const ForgeConfig& cfg) {
  if (sub_dataset.indices_of_class(counterfeit.target_class).empty()) {
    throw value_error("no target-class samples in the forging dataset");
  }
  const Dataset pool = heldout_pool.of_class(counterfeit.target_class);
  if (pool.size() == 0) throw value_error("no held-out target-class samples for BESR");
  ForgeResult out;
  out.pretrained_accuracy = accuracy(pretrained, test);
  const std::vector<double> lambdas = cfg.lambdas.empty() ? forging_lambdas(cfg.base.lambda) : cfg.lambdas;
  out.best_besr = -1.0;
  for (const double lambda : lambdas) {
    TrainConfig tc = cfg.base;
    tc.epochs = cfg.epochs;
    tc.lambda = lambda;
    TrainResult r = train(pretrained, sub_dataset, tc, &counterfeit);
    ForgeTrial t;
    t.lambda = lambda;
    t.besr_training = r.history.back().besr;
    t.besr = training_besr(r.model, counterfeit, pool);
    t.test_accuracy = accuracy(r.model, test);
    t.accuracy_delta = t.test_accuracy - out.pretrained_accuracy;
    out.trials.push_back(t);
    if (t.besr > out.best_besr) {
      out.best_besr = t.besr;
      out.best_accuracy_delta = t.accuracy_delta;
    }
  }
  return out;
}

// ---- robustness grid --------------------------------------------------------

struct RobustnessCell {
  double prune_rate = 0.0;
  std::size_t adversary_per_class = 0;
  double test_accuracy = 0.0;
  double watermark_accuracy = 0.0;
  std::size_t n_error = 0;
  bool verified = false;
  bool retained = false;  // passes the accuracy-retention filter
};

struct RobustnessReport {
  double baseline_accuracy = 0.0;
  double retention = 0.9;
  std::vector<RobustnessCell> cells;

  // Minimum watermark accuracy over retained cells (1.0 if none retained).
  double min_retained_watermark_accuracy() const {
    double m = 1.0;
    for (const auto& c : cells)
      if (c.retained) m = std::min(m, c.watermark_accuracy);
    return m;
  }
  bool all_retained_verified() const {
    return std::all_of(cells.begin(), cells.end(), [](const RobustnessCell& c) { return !c.retained || c.verified; });
  }
  std::size_t retained_count() const {
    return static_cast<std::size_t>(std::count_if(cells.begin(), cells.end(), [](const RobustnessCell& c) { return c.retained; }));
  }
};

struct RobustnessConfig {
  std::vector<double> prune_rates{0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
  std::vector<std::size_t> adversary_sizes{64, 256, 1024};
  FineTuneConfig fine_tune;
  // A cell is retained when its accuracy is at least retention * baseline.
  double retention = 0.9;
  VerificationPolicy policy;
  std::uint64_t seed = 0;
};

// Every (pruning rate, adversary size) cell: prune, fine-tune on a fresh
// per-class subsample of `adversary_pool`, verify white-box on `key_samples`.
inline RobustnessReport robustness_sweep(const Model& marked, const WatermarkKey& key, const Dataset& key_samples,
                                         const Dataset& adversary_pool, const Dataset& test, const RobustnessConfig& cfg,
                                         const std::function<void(const RobustnessCell&)>& on_cell = {}) {
  RobustnessReport rep;
  rep.retention = cfg.retention;
  rep.baseline_accuracy = accuracy(marked, test);
  std::uint64_t cell_index = 0;
  for (const std::size_t n : cfg.adversary_sizes) {
    for (const double p : cfg.prune_rates) {
      ++cell_index;
      const Dataset adv = subsample_per_class(adversary_pool, n, mix_seed(cfg.seed, 100 + n));
      FineTuneConfig ft = cfg.fine_tune;
      ft.seed = mix_seed(cfg.seed, cell_index);
      const Model attacked = fine_tune(prune(marked, p), adv, ft).model;
      RobustnessCell c;
      c.prune_rate = p;
      c.adversary_per_class = n;
      c.test_accuracy = accuracy(attacked, test);
      const auto rep_v = verify_estimate(whitebox_expected_gradient(attacked, key, key_samples), key, cfg.policy);
      c.watermark_accuracy = rep_v.watermark_accuracy();
      c.n_error = rep_v.n_error;
      c.verified = rep_v.verified;
      c.retained = c.test_accuracy >= cfg.retention * rep.baseline_accuracy;
      rep.cells.push_back(c);
      if (on_cell) on_cell(c);
    }
  }
  return rep;
}

}  // namespace gradsigns
