#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gradsigns/autodiff.hpp"
#include "gradsigns/data.hpp"
#include "gradsigns/error.hpp"
#include "gradsigns/random.hpp"
#include "gradsigns/tensor.hpp"

namespace gradsigns {

enum class LayerKind { Conv, Dense, Relu, Sigmoid, Flatten, Softmax };

struct LayerSpec {
  LayerKind kind = LayerKind::Relu;
  std::size_t size = 0;     // conv kernel size or dense units
  std::size_t filters = 0;  // conv only
  bool same_padding = false;

  static LayerSpec conv(std::size_t kernel, std::size_t filters, bool same = false) {
    return {LayerKind::Conv, kernel, filters, same};
  }
  static LayerSpec dense(std::size_t units) { return {LayerKind::Dense, units, 0, false}; }
  static LayerSpec relu() { return {LayerKind::Relu}; }
  static LayerSpec sigmoid() { return {LayerKind::Sigmoid}; }
  static LayerSpec flatten() { return {LayerKind::Flatten}; }
  static LayerSpec softmax() { return {LayerKind::Softmax}; }

  bool operator==(const LayerSpec&) const = default;
};

inline const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::Conv: return "conv";
    case LayerKind::Dense: return "dense";
    case LayerKind::Relu: return "relu";
    case LayerKind::Sigmoid: return "sigmoid";
    case LayerKind::Flatten: return "flatten";
    case LayerKind::Softmax: return "softmax";
  }
  return "?";
}

inline LayerKind layer_kind_from_name(const std::string& s) {
  for (const LayerKind k : {LayerKind::Conv, LayerKind::Dense, LayerKind::Relu, LayerKind::Sigmoid, LayerKind::Flatten,
                            LayerKind::Softmax}) {
    if (s == layer_kind_name(k)) return k;
  }
  throw value_error("unknown layer kind '" + s + "'");
}

struct ModelConfig {
  std::size_t height = 28, width = 28, channels = 1;
  std::vector<LayerSpec> layers;
  int num_classes = 10;
  std::uint64_t seed = 0;

  Shape input_shape() const { return {height, width, channels}; }
  std::size_t input_dim() const { return height * width * channels; }
  bool operator==(const ModelConfig&) const = default;
};

// flatten -> dense(hidden) -> relu -> dense(classes) -> softmax
inline ModelConfig mlp_config(std::size_t height, std::size_t width, std::size_t channels, std::size_t hidden,
                              int classes, std::uint64_t seed) {
  ModelConfig c;
  c.height = height;
  c.width = width;
  c.channels = channels;
  c.num_classes = classes;
  c.seed = seed;
  c.layers = {LayerSpec::flatten(), LayerSpec::dense(hidden), LayerSpec::relu(),
              LayerSpec::dense(static_cast<std::size_t>(classes)), LayerSpec::softmax()};
  return c;
}

// Six 3x3 conv+relu blocks (32, 32, 64, 64, 128, 128 filters), dense 512,
// softmax; every width divided by `width_divisor`.
inline ModelConfig street_numbers_preset(std::size_t height, std::size_t width, std::size_t channels, int classes,
                                         std::size_t width_divisor, std::uint64_t seed) {
  if (width_divisor == 0) throw value_error("width divisor must be positive");
  ModelConfig c;
  c.height = height;
  c.width = width;
  c.channels = channels;
  c.num_classes = classes;
  c.seed = seed;
  for (const std::size_t f : {32u, 32u, 64u, 64u, 128u, 128u}) {
    c.layers.push_back(LayerSpec::conv(3, std::max<std::size_t>(1, f / width_divisor)));
    c.layers.push_back(LayerSpec::relu());
  }
  c.layers.push_back(LayerSpec::flatten());
  c.layers.push_back(LayerSpec::dense(std::max<std::size_t>(1, 512 / width_divisor)));
  c.layers.push_back(LayerSpec::relu());
  c.layers.push_back(LayerSpec::dense(static_cast<std::size_t>(classes)));
  c.layers.push_back(LayerSpec::softmax());
  return c;
}

struct ParameterSpec {
  std::string name;
  Shape shape;
  std::size_t fan_in = 0;
  bool is_bias = false;
};

// Parameter layout implied by a config; throws on inconsistent shapes.
inline std::vector<ParameterSpec> parameter_layout(const ModelConfig& cfg) {
  if (cfg.num_classes < 2) throw shape_error("model needs at least 2 classes");
  if (cfg.layers.empty() || cfg.layers.back().kind != LayerKind::Softmax) {
    throw shape_error("last layer must be softmax");
  }
  if (cfg.height == 0 || cfg.width == 0 || cfg.channels == 0) throw shape_error("empty input shape");
  std::vector<ParameterSpec> out;
  bool spatial = true;
  std::size_t h = cfg.height, w = cfg.width, c = cfg.channels, flat = 0;
  for (std::size_t i = 0; i < cfg.layers.size(); ++i) {
    const LayerSpec& l = cfg.layers[i];
    const std::string prefix = "layer" + std::to_string(i);
    switch (l.kind) {
      case LayerKind::Conv: {
        if (!spatial) throw shape_error(prefix + ": conv after flatten");
        if (l.size == 0 || l.filters == 0) throw shape_error(prefix + ": empty conv");
        if (l.same_padding && l.size % 2 == 0) throw shape_error(prefix + ": same padding needs an odd kernel");
        if (!l.same_padding && (l.size > h || l.size > w)) throw shape_error(prefix + ": kernel larger than input");
        out.push_back({prefix + ".w", {l.size, l.size, c, l.filters}, l.size * l.size * c, false});
        out.push_back({prefix + ".b", {l.filters}, l.size * l.size * c, true});
        if (!l.same_padding) {
          h = h - l.size + 1;
          w = w - l.size + 1;
        }
        c = l.filters;
        break;
      }
      case LayerKind::Flatten:
        if (spatial) {
          flat = h * w * c;
          spatial = false;
        }
        break;
      case LayerKind::Dense: {
        if (spatial) throw shape_error(prefix + ": dense layer needs a flatten before it");
        if (l.size == 0) throw shape_error(prefix + ": empty dense layer");
        out.push_back({prefix + ".w", {flat, l.size}, flat, false});
        out.push_back({prefix + ".b", {l.size}, flat, true});
        flat = l.size;
        break;
      }
      case LayerKind::Relu:
      case LayerKind::Sigmoid:
        break;
      case LayerKind::Softmax:
        if (i + 1 != cfg.layers.size()) throw shape_error(prefix + ": softmax must be the last layer");
        if (spatial || flat != static_cast<std::size_t>(cfg.num_classes)) {
          throw shape_error("softmax input width does not match num_classes");
        }
        break;
    }
  }
  return out;
}

struct Parameter {
  std::string name;
  Tensor value;
  bool is_bias = false;
};

struct TrainingMetadata {
  std::size_t epochs_run = 0;
  double train_accuracy = 0.0;
  double val_accuracy = 0.0;
  bool operator==(const TrainingMetadata&) const = default;
};

// Builds the logits of `cfg` applied to `x` using the given parameter leaves.
inline ad::NodeId model_logits(ad::Graph& g, const ModelConfig& cfg, ad::NodeId x, std::span<const ad::NodeId> params) {
  std::size_t p = 0;
  ad::NodeId cur = x;
  for (const LayerSpec& l : cfg.layers) {
    switch (l.kind) {
      case LayerKind::Conv:
        cur = g.conv2d(cur, params[p], l.same_padding ? (l.size - 1) / 2 : 0);
        cur = g.add(cur, params[p + 1]);
        p += 2;
        break;
      case LayerKind::Dense:
        cur = g.add(g.matmul(cur, params[p]), params[p + 1]);
        p += 2;
        break;
      case LayerKind::Relu: cur = g.relu(cur); break;
      case LayerKind::Sigmoid: cur = g.sigmoid(cur); break;
      case LayerKind::Flatten: cur = g.flatten(cur); break;
      case LayerKind::Softmax: break;  // logits stop here
    }
  }
  return cur;
}

class Model {
 public:
  Model() = default;
  Model(ModelConfig config, std::vector<Parameter> params) : config_(std::move(config)), params_(std::move(params)) {
    const auto layout = parameter_layout(config_);
    if (layout.size() != params_.size()) throw shape_error("parameter count does not match config");
    for (std::size_t i = 0; i < layout.size(); ++i) {
      if (layout[i].name != params_[i].name || layout[i].shape != params_[i].value.shape()) {
        throw shape_error("parameter '" + params_[i].name + "' does not match config layout");
      }
      params_[i].is_bias = layout[i].is_bias;
    }
  }

  const ModelConfig& config() const noexcept { return config_; }
  std::vector<Parameter>& params() noexcept { return params_; }
  const std::vector<Parameter>& params() const noexcept { return params_; }

  // 0/1 masks per parameter, empty when the model was never pruned.
  std::vector<Tensor>& masks() noexcept { return masks_; }
  const std::vector<Tensor>& masks() const noexcept { return masks_; }

  TrainingMetadata& metadata() noexcept { return metadata_; }
  const TrainingMetadata& metadata() const noexcept { return metadata_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  // Logits for a batch shaped (n, H, W, C).
  Tensor logits(const Tensor& batch) const {
    check_batch(batch);
    ad::Graph g;
    const ad::NodeId x = g.input("x");
    std::vector<ad::NodeId> leaves;
    ad::Bindings b;
    b.bind(x, batch);
    for (const auto& p : params_) {
      leaves.push_back(g.input(p.name));
      b.bind(leaves.back(), p.value);
    }
    const ad::NodeId out = model_logits(g, config_, x, leaves);
    return ad::forward(g, b, {out})[out];
  }

  // Class probabilities, one row per sample.
  Tensor predict(const Tensor& batch) const { return ad::detail::softmax_rows(logits(batch)); }

 private:
  void check_batch(const Tensor& batch) const {
    if (batch.rank() != 4 || batch.dim(1) != config_.height || batch.dim(2) != config_.width ||
        batch.dim(3) != config_.channels) {
      throw shape_error("batch shape " + shape_string(batch.shape()) + " does not match model input " +
                        shape_string(config_.input_shape()));
    }
  }

  ModelConfig config_;
  std::vector<Parameter> params_;
  std::vector<Tensor> masks_;
  TrainingMetadata metadata_;
};

// Weights uniform in +-1/sqrt(fan_in), biases zero, drawn from config.seed.
inline Model build_model(const ModelConfig& cfg) {
  const auto layout = parameter_layout(cfg);
  Rng rng(cfg.seed);
  std::vector<Parameter> params;
  for (const auto& spec : layout) {
    Tensor t(spec.shape);
    if (!spec.is_bias) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(spec.fan_in));
      for (double& v : t.data()) v = uniform(rng, -bound, bound);
    }
    params.push_back({spec.name, std::move(t), spec.is_bias});
  }
  return Model(cfg, std::move(params));
}

// Mean of -log p(label); probabilities below 1e-12 are clamped and counted.
inline double cross_entropy(const Tensor& probs, std::span<const int> labels, std::size_t* clamped = nullptr) {
  if (probs.rank() != 2 || probs.dim(0) != labels.size()) throw shape_error("cross_entropy shape mismatch");
  const std::size_t k = probs.dim(1);
  double total = 0.0;
  std::size_t clamps = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k) throw value_error("label out of range");
    double p = probs[i * k + static_cast<std::size_t>(labels[i])];
    if (p < 1e-12) {
      p = 1e-12;
      ++clamps;
    }
    total -= std::log(p);
  }
  if (clamped) *clamped = clamps;
  return labels.empty() ? 0.0 : total / static_cast<double>(labels.size());
}

inline std::size_t argmax_row(const Tensor& probs, std::size_t row) {
  const std::size_t k = probs.dim(1);
  std::size_t best = 0;
  for (std::size_t j = 1; j < k; ++j)
    if (probs[row * k + j] > probs[row * k + best]) best = j;
  return best;
}

// Batched predictions over the whole dataset.
inline Tensor predict_all(const Model& model, const Dataset& data, std::size_t batch = 500) {
  const std::size_t k = static_cast<std::size_t>(model.config().num_classes);
  Tensor out(Shape{data.size(), k});
  for (std::size_t begin = 0; begin < data.size(); begin += batch) {
    const std::size_t end = std::min(data.size(), begin + batch);
    const Tensor p = model.predict(data.images.rows(begin, end));
    std::copy(p.data().begin(), p.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(begin * k));
  }
  return out;
}

inline double accuracy(const Model& model, const Dataset& data) {
  if (data.size() == 0) return 0.0;
  const Tensor probs = predict_all(model, data);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i)
    if (static_cast<int>(argmax_row(probs, i)) == data.labels[i]) ++correct;
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

}  // namespace gradsigns
