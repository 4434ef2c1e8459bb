#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "gradsigns/autodiff.hpp"
#include "gradsigns/data.hpp"
#include "gradsigns/error.hpp"
#include "gradsigns/extraction.hpp"
#include "gradsigns/model.hpp"
#include "gradsigns/random.hpp"
#include "gradsigns/watermark.hpp"

namespace gradsigns {

enum class Optimizer { Sgd, SgdMomentum };

inline const char* optimizer_name(Optimizer o) { return o == Optimizer::Sgd ? "sgd" : "sgd-momentum"; }

inline Optimizer optimizer_from_name(const std::string& s) {
  if (s == "sgd") return Optimizer::Sgd;
  if (s == "sgd-momentum") return Optimizer::SgdMomentum;
  throw value_error("unknown optimizer '" + s + "'");
}

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 64;
  double learning_rate = 0.05;
  // Learning rate of the last epoch; epochs in between decay geometrically.
  // Negative means constant.
  double final_learning_rate = -1.0;
  Optimizer optimizer = Optimizer::SgdMomentum;
  double momentum = 0.9;
  double lambda = 0.1;
  std::size_t wm_batch_size = 64;
  std::uint64_t seed = 0;

  void validate(bool watermarking) const {
    if (epochs == 0) throw value_error("epochs must be positive");
    if (batch_size == 0) throw value_error("batch_size must be positive");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw value_error("learning_rate must be >= 0");
    if (final_learning_rate >= 0.0 && (final_learning_rate == 0.0) != (learning_rate == 0.0)) {
      throw value_error("final_learning_rate must be positive when learning_rate is");
    }
    if (!(momentum >= 0.0 && momentum < 1.0)) throw value_error("momentum must be in [0, 1)");
    if (watermarking) {
      if (!(lambda >= 0.0 && lambda <= 1.0)) throw value_error("lambda must be in [0, 1] when watermarking");
      if (wm_batch_size == 0) throw value_error("wm_batch_size must be positive");
    }
  }

  double rate_for_epoch(std::size_t epoch) const {
    if (final_learning_rate < 0.0 || epochs < 2 || learning_rate == 0.0) return learning_rate;
    const double t = static_cast<double>(epoch - 1) / static_cast<double>(epochs - 1);
    return learning_rate * std::pow(final_learning_rate / learning_rate, t);
  }
};

struct TrainOptions {
  const Dataset* validation = nullptr;
  // Return the parameters of the epoch with the best validation accuracy.
  bool keep_best = false;
  // Stop after this many epochs without validation improvement (0 = never).
  std::size_t patience = 0;
  // When > 0, each minibatch is doubled with its FGSM counterparts.
  double fgsm_epsilon = 0.0;
  // Target-class pool for the end-of-epoch BESR; defaults to the training set.
  const Dataset* besr_samples = nullptr;
  std::function<void(std::size_t epoch, std::size_t epochs)> on_epoch;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double loss = 0.0;            // mean total objective over steps
  double cross_entropy = 0.0;   // mean CE over steps
  double embedding_loss = std::numeric_limits<double>::quiet_NaN();
  double train_accuracy = 0.0;  // running accuracy over the epoch's batches
  double val_accuracy = std::numeric_limits<double>::quiet_NaN();
  double besr = std::numeric_limits<double>::quiet_NaN();

  bool operator==(const EpochMetrics& o) const {
    auto same = [](double a, double b) { return a == b || (std::isnan(a) && std::isnan(b)); };
    return epoch == o.epoch && same(loss, o.loss) && same(cross_entropy, o.cross_entropy) &&
           same(embedding_loss, o.embedding_loss) && same(train_accuracy, o.train_accuracy) &&
           same(val_accuracy, o.val_accuracy) && same(besr, o.besr);
  }
};

struct TrainResult {
  Model model;
  std::vector<EpochMetrics> history;
  std::size_t best_epoch = 0;
};

namespace detail {

// The combined objective CE + lambda * J_emb with parameter gradients.
struct TrainGraph {
  ad::Graph g;
  ad::NodeId x, y;
  std::vector<ad::NodeId> params;
  ad::NodeId logits, ce, total;
  std::optional<ad::NodeId> xw, yw, emb;
  ad::NodeId input_grad;  // dCE/dx of the main batch, for FGSM
  std::vector<ad::NodeId> grads;

  TrainGraph(const Model& model, const WatermarkKey* key, double lambda) {
    x = g.input("x");
    y = g.input("y");
    for (const auto& p : model.params()) params.push_back(g.input(p.name));
    logits = model_logits(g, model.config(), x, params);
    ce = g.softmax_xent(logits, y);
    total = ce;
    if (key) {
      xw = g.input("xw");
      yw = g.input("yw");
      const ad::NodeId cew = g.softmax_xent(model_logits(g, model.config(), *xw, params), *yw);
      const ad::NodeId dxw = g.grad(cew, {*xw})[0];
      const ad::NodeId G = g.sum_axis0(g.gather_cols(dxw, key->carriers));
      emb = embedding_loss_node(g, G, *key);
      total = g.add(ce, g.mul(g.scalar(lambda), *emb));
    }
    input_grad = g.grad(ce, {x})[0];
    grads = g.grad(total, params);
  }
};

inline Tensor fgsm_from_gradient(const Tensor& x, const Tensor& dx, double eps) {
  Tensor out = x;
  auto o = out.data();
  const auto d = dx.data();
  for (std::size_t i = 0; i < o.size(); ++i) {
    const double s = d[i] > 0.0 ? 1.0 : (d[i] < 0.0 ? -1.0 : 0.0);
    o[i] = std::clamp(o[i] + eps * s, 0.0, 1.0);
  }
  return out;
}

inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
  Shape s = a.shape();
  s[0] += b.dim(0);
  std::vector<double> v(a.data().begin(), a.data().end());
  v.insert(v.end(), b.data().begin(), b.data().end());
  return Tensor(s, std::move(v));
}

}  // namespace detail

// Fraction of key bits decoded correctly from the white-box G over `pool`.
inline double training_besr(const Model& model, const WatermarkKey& key, const Dataset& pool) {
  const auto G = mean_input_gradient(model, pool, key.carriers);
  return besr(decode(G, key), key.bits);
}

// Minibatch training of CE, plus lambda * J_emb when a key is given. The
// embedding term is computed on a fresh batch of target-class samples each
// step. Pruning masks on the model are respected.
inline TrainResult train(Model model, const Dataset& data, const TrainConfig& cfg, const WatermarkKey* key = nullptr,
                         const TrainOptions& opts = {}) {
  if (data.size() == 0) throw value_error("training dataset is empty");
  cfg.validate(key != nullptr);
  if (data.sample_shape() != model.config().input_shape()) throw shape_error("dataset does not match model input");
  const int classes = model.config().num_classes;

  std::vector<std::size_t> target_pool;
  Dataset besr_pool;
  if (key) {
    if (key->input_dim != model.config().input_dim()) throw shape_error("key input_dim does not match model");
    if (key->target_class >= classes) throw shape_error("key target class outside model classes");
    target_pool = data.indices_of_class(key->target_class);
    if (target_pool.empty()) throw value_error("no target-class samples in training data");
    besr_pool = opts.besr_samples ? opts.besr_samples->of_class(key->target_class) : data.select(target_pool);
  }

  detail::TrainGraph tg(model, key, cfg.lambda);
  Rng order_rng(mix_seed(cfg.seed, 1));
  Rng wm_rng(mix_seed(cfg.seed, 2));

  auto& params = model.params();
  const bool masked = !model.masks().empty();
  std::vector<Tensor> velocity;
  for (const auto& p : params) velocity.emplace_back(p.value.shape());

  TrainResult result;
  std::optional<std::vector<Parameter>> best_params;
  double best_val = -1.0;
  std::size_t since_best = 0;
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    shuffle(order_rng, std::span<std::size_t>(order));
    const double lr = cfg.rate_for_epoch(epoch);
    EpochMetrics m;
    m.epoch = epoch;
    double loss_sum = 0.0, ce_sum = 0.0, emb_sum = 0.0;
    std::size_t steps = 0, correct = 0, seen = 0;

    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
      const std::span<const std::size_t> idx(order.data() + begin, end - begin);
      Tensor xb = gather_rows(data.images, idx);
      std::vector<int> lb;
      lb.reserve(idx.size());
      for (const std::size_t i : idx) lb.push_back(data.labels[i]);
      Tensor yb = one_hot(lb, classes);

      ad::Bindings b;
      for (std::size_t i = 0; i < params.size(); ++i) b.bind(tg.params[i], params[i].value);
      try {
        if (opts.fgsm_epsilon > 0.0) {
          b.bind(tg.x, xb);
          b.bind(tg.y, yb);
          const Tensor dx = ad::forward(tg.g, b, {tg.input_grad})[tg.input_grad];
          Tensor adv = detail::fgsm_from_gradient(xb, dx, opts.fgsm_epsilon);
          xb = detail::concat_rows(xb, adv);
          yb = detail::concat_rows(yb, yb);
          lb.insert(lb.end(), lb.begin(), lb.end());
        }
        b.bind(tg.x, xb);
        b.bind(tg.y, yb);

        Tensor xw, yw;
        if (key) {
          const std::size_t take = std::min(cfg.wm_batch_size, target_pool.size());
          std::vector<std::size_t> widx;
          for (const std::size_t k : sample_without_replacement(wm_rng, target_pool.size(), take))
            widx.push_back(target_pool[k]);
          xw = gather_rows(data.images, widx);
          yw = one_hot(std::vector<int>(take, key->target_class), classes);
          b.bind(*tg.xw, xw);
          b.bind(*tg.yw, yw);
        }

        std::vector<ad::NodeId> wanted{tg.total, tg.ce, tg.logits};
        if (tg.emb) wanted.push_back(*tg.emb);
        wanted.insert(wanted.end(), tg.grads.begin(), tg.grads.end());
        const ad::Evaluation ev = ad::forward(tg.g, b, wanted);

        loss_sum += ev[tg.total].item();
        ce_sum += ev[tg.ce].item();
        if (tg.emb) emb_sum += ev[*tg.emb].item();
        const Tensor& lg = ev[tg.logits];
        for (std::size_t r = 0; r < lb.size(); ++r)
          if (static_cast<int>(argmax_row(lg, r)) == lb[r]) ++correct;
        seen += lb.size();

        for (std::size_t i = 0; i < params.size(); ++i) {
          const auto g = ev[tg.grads[i]].data();
          auto w = params[i].value.data();
          auto v = velocity[i].data();
          const double* mask = masked ? model.masks()[i].data().data() : nullptr;
          for (std::size_t j = 0; j < w.size(); ++j) {
            if (cfg.optimizer == Optimizer::SgdMomentum) {
              v[j] = cfg.momentum * v[j] + g[j];
              w[j] -= lr * v[j];
            } else {
              w[j] -= lr * g[j];
            }
            if (mask) {
              w[j] *= mask[j];
              v[j] *= mask[j];
            }
          }
        }
      } catch (const Error& e) {
        if (e.kind() != "non-finite") throw;
        throw Error("divergence", "training diverged in epoch " + std::to_string(epoch) + " step " +
                                      std::to_string(steps + 1) + ": " + e.what());
      }
      ++steps;
    }

    m.loss = loss_sum / static_cast<double>(steps);
    m.cross_entropy = ce_sum / static_cast<double>(steps);
    if (key) m.embedding_loss = emb_sum / static_cast<double>(steps);
    m.train_accuracy = static_cast<double>(correct) / static_cast<double>(seen);
    if (!std::isfinite(m.loss)) throw Error("divergence", "loss is not finite after epoch " + std::to_string(epoch));
    if (opts.validation) m.val_accuracy = accuracy(model, *opts.validation);
    if (key) m.besr = training_besr(model, *key, besr_pool);
    result.history.push_back(m);
    if (opts.on_epoch) opts.on_epoch(epoch, cfg.epochs);

    if (opts.validation) {
      if (m.val_accuracy > best_val) {
        best_val = m.val_accuracy;
        result.best_epoch = epoch;
        since_best = 0;
        if (opts.keep_best) best_params = params;
      } else if (opts.patience > 0 && ++since_best >= opts.patience) {
        break;
      }
    } else {
      result.best_epoch = epoch;
    }
  }

  if (best_params) params = std::move(*best_params);
  const EpochMetrics& chosen = result.history[(result.best_epoch ? result.best_epoch : result.history.size()) - 1];
  model.metadata().epochs_run += result.history.size();
  model.metadata().train_accuracy = chosen.train_accuracy;
  model.metadata().val_accuracy = opts.validation ? chosen.val_accuracy : 0.0;
  result.model = std::move(model);
  return result;
}

inline const std::vector<double>& default_lambda_candidates() {
  static const std::vector<double> c{0.01, 0.05, 0.1, 0.5, 1.0};
  return c;
}

struct LambdaTrial {
  double lambda = 0.0;
  double besr = 0.0;
};

struct LambdaSelection {
  double lambda = 0.0;
  bool achieved = false;  // some candidate reached BESR 1.0
  TrainResult result;
  std::vector<LambdaTrial> trials;
};

// Trains with each candidate in ascending order and keeps the first (the
// smallest) lambda that reaches BESR 1.0; otherwise the best BESR seen.
inline LambdaSelection select_lambda(const Model& initial, const Dataset& data, TrainConfig cfg, const WatermarkKey& key,
                                     std::vector<double> candidates = default_lambda_candidates(),
                                     const TrainOptions& opts = {}) {
  if (candidates.empty()) throw value_error("no lambda candidates");
  std::sort(candidates.begin(), candidates.end());
  LambdaSelection sel;
  double best = -1.0;
  for (const double lambda : candidates) {
    cfg.lambda = lambda;
    TrainResult r = train(initial, data, cfg, &key, opts);
    const double b = r.history.back().besr;
    sel.trials.push_back({lambda, b});
    if (b > best) {
      best = b;
      sel.lambda = lambda;
      sel.result = std::move(r);
    }
    if (b == 1.0) {
      sel.achieved = true;
      break;
    }
  }
  return sel;
}

}  // namespace gradsigns
