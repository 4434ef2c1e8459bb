#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gradsigns/autodiff.hpp"
#include "gradsigns/data.hpp"
#include "gradsigns/error.hpp"
#include "gradsigns/model.hpp"
#include "gradsigns/watermark.hpp"

namespace gradsigns {

// Black-box prediction interface: probabilities for a batch of inputs.
// Implementations must be safe to call from several threads; the counter
// counts rows answered. Tampering wrappers may return rows that do not sum
// to one, so consumers must not rely on normalization.
class PredictionOracle {
 public:
  virtual ~PredictionOracle() = default;

  virtual Shape input_shape() const = 0;
  virtual int class_count() const = 0;

  // batch is (n, H, W, C); returns (n, classes).
  Tensor query(const Tensor& batch) {
    Tensor out = answer(batch);
    served_.fetch_add(batch.rank() ? batch.dim(0) : 1, std::memory_order_relaxed);
    return out;
  }

  std::uint64_t queries_served() const { return served_.load(std::memory_order_relaxed); }

 protected:
  virtual Tensor answer(const Tensor& batch) = 0;

 private:
  std::atomic<std::uint64_t> served_{0};
};

// In-process oracle over an immutable model.
class ModelOracle final : public PredictionOracle {
 public:
  explicit ModelOracle(std::shared_ptr<const Model> model) : model_(std::move(model)) {}

  Shape input_shape() const override { return model_->config().input_shape(); }
  int class_count() const override { return model_->config().num_classes; }

 protected:
  Tensor answer(const Tensor& batch) override { return model_->predict(batch); }

 private:
  std::shared_ptr<const Model> model_;
};

class OracleError : public Error {
 public:
  OracleError(const std::string& what, std::uint64_t answered) : Error("oracle", what), answered_(answered) {}
  std::uint64_t answered() const noexcept { return answered_; }

 private:
  std::uint64_t answered_;
};

class ExtractionError : public Error {
 public:
  ExtractionError(const std::string& kind, const std::string& what, std::uint64_t queries)
      : Error(kind, what), queries_(queries) {}
  std::uint64_t queries_issued() const noexcept { return queries_; }

 private:
  std::uint64_t queries_;
};

struct GradientEstimate {
  std::vector<double> values;  // one per carrier
  ExtractionMode mode = ExtractionMode::WhiteBox;
  std::size_t samples = 0;
  double step = 0.0;
  std::uint64_t query_count = 0;
  std::size_t boundary_coordinates = 0;  // x_c + h beyond 1.0, summed over samples

  ExtractionMeta meta() const { return {mode, samples, step, query_count}; }
};

namespace detail {

inline void check_key_samples(const Dataset& samples, const WatermarkKey& key) {
  if (samples.size() == 0) throw value_error("no key samples supplied");
  if (samples.sample_size() != key.input_dim) {
    throw shape_error("samples have " + std::to_string(samples.sample_size()) + " inputs, key expects " +
                      std::to_string(key.input_dim));
  }
  for (const int l : samples.labels) {
    if (l != key.target_class) throw value_error("key sample labeled " + std::to_string(l) + ", expected target class");
  }
}

}  // namespace detail

// Mean over `samples` of dJ_ce/dx restricted to `carriers`, by backpropagation.
inline std::vector<double> mean_input_gradient(const Model& model, const Dataset& samples,
                                               std::span<const std::size_t> carriers, std::size_t chunk = 500) {
  ad::Graph g;
  const ad::NodeId x = g.input("x");
  const ad::NodeId y = g.input("y");
  std::vector<ad::NodeId> leaves;
  for (const auto& p : model.params()) leaves.push_back(g.input(p.name));
  const ad::NodeId ce = g.softmax_xent(model_logits(g, model.config(), x, leaves), y);
  const ad::NodeId dx = g.grad(ce, {x})[0];
  const ad::NodeId G = g.sum_axis0(g.gather_cols(dx, std::vector<std::size_t>(carriers.begin(), carriers.end())));

  std::vector<double> total(carriers.size(), 0.0);
  const std::size_t n = samples.size();
  for (std::size_t begin = 0; begin < n; begin += chunk) {
    const std::size_t end = std::min(n, begin + chunk);
    const Tensor xs = samples.images.rows(begin, end);
    const Tensor ys = one_hot(std::span<const int>(samples.labels).subspan(begin, end - begin), model.config().num_classes);
    ad::Bindings b;
    b.bind(x, xs);
    b.bind(y, ys);
    for (std::size_t i = 0; i < leaves.size(); ++i) b.bind(leaves[i], model.params()[i].value);
    const Tensor part = ad::forward(g, b, {G})[G];
    // part is the chunk mean; reweight to the overall mean.
    const double w = static_cast<double>(end - begin) / static_cast<double>(n);
    for (std::size_t i = 0; i < total.size(); ++i) total[i] += w * part[i];
  }
  return total;
}

inline GradientEstimate whitebox_expected_gradient(const Model& model, const WatermarkKey& key, const Dataset& samples) {
  detail::check_key_samples(samples, key);
  GradientEstimate est;
  est.values = mean_input_gradient(model, samples, key.carriers);
  est.mode = ExtractionMode::WhiteBox;
  est.samples = samples.size();
  return est;
}

// Forward difference quotients against a black-box oracle: per sample one
// query at x and one at x + h e_c for each carrier c, so s * (|C| + 1)
// queries in total. J is -log p_T with p_T clamped at 1e-12. Perturbed
// inputs are not clipped back into [0, 1].
inline GradientEstimate blackbox_estimate_gradient(PredictionOracle& oracle, const WatermarkKey& key,
                                                   const Dataset& samples, double h) {
  if (!(h > 0.0)) throw value_error("estimation step h must be positive");
  detail::check_key_samples(samples, key);
  if (oracle.class_count() <= key.target_class) throw shape_error("oracle has fewer classes than the key's target");

  const std::size_t c = key.carrier_count();
  const std::size_t d = key.input_dim;
  const Shape sample_shape = samples.sample_shape();
  const std::size_t k = static_cast<std::size_t>(oracle.class_count());
  const std::size_t t = static_cast<std::size_t>(key.target_class);

  GradientEstimate est;
  est.mode = ExtractionMode::BlackBox;
  est.samples = samples.size();
  est.step = h;
  est.values.assign(c, 0.0);

  Shape batch_shape{c + 1};
  batch_shape.insert(batch_shape.end(), sample_shape.begin(), sample_shape.end());
  auto loss_of = [&](const Tensor& probs, std::size_t row) {
    const double p = std::max(probs[row * k + t], kProbabilityClamp);
    return -std::log(p);
  };

  for (std::size_t s = 0; s < samples.size(); ++s) {
    Tensor batch(batch_shape);
    auto px = batch.data();
    const auto src = samples.images.data().subspan(s * d, d);
    for (std::size_t r = 0; r <= c; ++r) std::copy(src.begin(), src.end(), px.begin() + static_cast<std::ptrdiff_t>(r * d));
    for (std::size_t i = 0; i < c; ++i) {
      px[(i + 1) * d + key.carriers[i]] += h;
      if (src[key.carriers[i]] + h > 1.0) ++est.boundary_coordinates;
    }

    Tensor probs;
    try {
      probs = oracle.query(batch);
    } catch (const OracleError& e) {
      throw ExtractionError("oracle", e.what(), est.query_count + e.answered());
    } catch (const Error& e) {
      throw ExtractionError("oracle", e.what(), est.query_count);
    }
    if (probs.rank() != 2 || probs.dim(0) != c + 1 || probs.dim(1) != k) {
      throw ExtractionError("oracle", "oracle returned shape " + shape_string(probs.shape()), est.query_count);
    }
    est.query_count += c + 1;

    const double base = loss_of(probs, 0);
    if (!std::isfinite(base)) throw ExtractionError("non-finite", "non-finite loss from oracle", est.query_count);
    for (std::size_t i = 0; i < c; ++i) {
      const double moved = loss_of(probs, i + 1);
      if (!std::isfinite(moved)) throw ExtractionError("non-finite", "non-finite loss from oracle", est.query_count);
      est.values[i] += (moved - base) / h;
    }
  }
  for (double& v : est.values) v /= static_cast<double>(samples.size());
  return est;
}

inline std::vector<std::uint8_t> extract_watermark(const GradientEstimate& estimate, const WatermarkKey& key) {
  if (estimate.values.size() != key.carrier_count()) throw shape_error("estimate does not match key carriers");
  return decode(estimate.values, key);
}

inline VerificationReport verify_estimate(const GradientEstimate& estimate, const WatermarkKey& key,
                                          const VerificationPolicy& policy = {}) {
  return verify_bits(extract_watermark(estimate, key), key, policy, estimate.meta());
}

}  // namespace gradsigns
