#pragma once

#include <openssl/evp.h>

#include <charconv>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <variant>
#include <string>
#include <vector>

#include <json.hpp>

#include "gradsigns/attacks.hpp"
#include "gradsigns/checkpoint.hpp"
#include "gradsigns/data.hpp"
#include "gradsigns/extraction.hpp"
#include "gradsigns/model.hpp"
#include "gradsigns/train.hpp"
#include "gradsigns/watermark.hpp"

namespace gradsigns {

// ---- desk data ----------------------------------------------------------------

struct DatasetSpec {
  std::string kind = "idx";  // "idx" or "synthetic"
  std::string path;          // directory with the digit archives
  std::size_t train_per_class = 1000;
  std::size_t test_per_class = 200;
  // synthetic only
  int classes = 4;
  std::size_t n_per_class = 300;
  ImageDims dims{8, 8, 1};
  double noise = 0.1;
};

// Vendor training set, test set, and the disjoint pool adversaries draw from.
struct DeskData {
  Dataset train;
  Dataset test;
  Dataset pool;
};

inline Dataset complement(const Dataset& data, std::span<const std::size_t> taken) {
  std::vector<bool> used(data.size(), false);
  for (const std::size_t i : taken) used.at(i) = true;
  std::vector<std::size_t> rest;
  for (std::size_t i = 0; i < data.size(); ++i)
    if (!used[i]) rest.push_back(i);
  return data.select(rest);
}

inline DeskData load_desk_data(const DatasetSpec& spec, std::uint64_t seed) {
  DeskData d;
  if (spec.kind == "idx") {
    const DigitArchive a = load_digit_archive(spec.path);
    const auto idx = subsample_indices(a.train, spec.train_per_class, mix_seed(seed, 1));
    d.train = a.train.select(idx);
    d.pool = complement(a.train, idx);
    d.test = subsample_per_class(a.test, spec.test_per_class, mix_seed(seed, 2));
  } else if (spec.kind == "synthetic") {
    const Dataset all = make_synthetic(spec.classes, spec.n_per_class, spec.dims, mix_seed(seed, 3), spec.noise);
    auto parts = split(all, {0.5, 0.2, 0.3}, mix_seed(seed, 4));
    d.train = std::move(parts[0]);
    d.test = std::move(parts[1]);
    d.pool = std::move(parts[2]);
  } else {
    throw value_error("unknown dataset kind '" + spec.kind + "'");
  }
  d.train.name = "train";
  d.test.name = "test";
  d.pool.name = "adversary-pool";
  return d;
}

// Accuracy on inputs with N(0, sigma^2) pixel noise, clipped to [0, 1].
inline double noisy_accuracy(const Model& model, const Dataset& data, double sigma, std::uint64_t seed) {
  Dataset noisy = data;
  Rng rng(seed);
  for (double& v : noisy.images.data()) v = std::clamp(v + sigma * standard_normal(rng), 0.0, 1.0);
  return accuracy(model, noisy);
}

// ---- experiment spec ----------------------------------------------------------

struct ModelSpec {
  std::string kind = "mlp";  // "mlp", "street_numbers" or "custom"
  std::size_t hidden = 128;
  std::size_t width_divisor = 4;
  std::optional<ModelConfig> custom;
};

struct WatermarkSpec {
  std::vector<std::size_t> bits{16, 32, 64};
  std::vector<std::size_t> carriers{128, 256, 384};
  std::string provenance = "random";  // or "message"
  std::string message = "desk vendor";
};

struct AttackSpec {
  std::vector<double> prune_rates{0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
  std::vector<std::size_t> adversary_sizes{64, 256, 1024};
  FineTuneConfig fine_tune;
  double retention = 0.9;
  int quantize_bits = 8;
  AdversarialConfig adversarial;
  bool adversarial_stress = true;  // also run at the vendor's initial learning rate
  std::vector<double> noise_sigmas{0.001, 0.005, 0.01, 0.05, 0.1};
  double noise_h = 0.1;
  int rounding_decimals = 1;
  std::vector<double> rounding_h{1e-4, 0.1};
  std::size_t perturb_m = 3;
  double perturb_eps = 1e-5;
  std::size_t perturb_runs = 50;
  double perturb_h = 0.1;
  std::size_t forge_epochs = 80;
  std::size_t forge_per_class = 100;
  std::size_t null_models = 20;
};

// Vendor schedule: geometric decay from 0.05 to 0.0005 over the run.
inline TrainConfig desk_train_config() {
  TrainConfig c;
  c.final_learning_rate = 0.0005;
  return c;
}

struct ExperimentSpec {
  DatasetSpec dataset;
  ModelSpec model;
  WatermarkSpec watermark;
  TrainConfig train = desk_train_config();
  std::vector<double> lambda_candidates = default_lambda_candidates();
  VerificationPolicy policy;
  std::size_t samples = 50;  // black-box key samples s
  double h = 1e-4;
  AttackSpec attacks;
  std::string output_dir = "experiment-out";
  std::uint64_t seed = 1;
};

inline ModelConfig model_config_for(const ModelSpec& m, const Dataset& data, std::uint64_t seed) {
  const Shape s = data.sample_shape();
  if (m.kind == "mlp") return mlp_config(s[0], s[1], s[2], m.hidden, data.class_count, seed);
  if (m.kind == "street_numbers") return street_numbers_preset(s[0], s[1], s[2], data.class_count, m.width_divisor, seed);
  if (m.kind == "custom") {
    if (!m.custom) throw value_error("custom model kind needs a config");
    ModelConfig c = *m.custom;
    c.seed = seed;
    return c;
  }
  throw value_error("unknown model kind '" + m.kind + "'");
}

namespace detail {

template <typename T>
void maybe(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

inline ExperimentSpec experiment_spec_from_json(const nlohmann::json& j) {
  ExperimentSpec s;
  try {
    detail::maybe(j, "seed", s.seed);
    detail::maybe(j, "output_dir", s.output_dir);
    if (j.contains("dataset")) {
      const auto& d = j.at("dataset");
      detail::maybe(d, "kind", s.dataset.kind);
      detail::maybe(d, "path", s.dataset.path);
      detail::maybe(d, "train_per_class", s.dataset.train_per_class);
      detail::maybe(d, "test_per_class", s.dataset.test_per_class);
      detail::maybe(d, "classes", s.dataset.classes);
      detail::maybe(d, "n_per_class", s.dataset.n_per_class);
      detail::maybe(d, "noise", s.dataset.noise);
      if (d.contains("dims")) {
        const auto v = d.at("dims").get<std::vector<std::size_t>>();
        if (v.size() != 3) throw value_error("dataset dims must be [H, W, C]");
        s.dataset.dims = {v[0], v[1], v[2]};
      }
    }
    if (j.contains("model")) {
      const auto& m = j.at("model");
      detail::maybe(m, "kind", s.model.kind);
      detail::maybe(m, "hidden", s.model.hidden);
      detail::maybe(m, "width_divisor", s.model.width_divisor);
      if (m.contains("config")) s.model.custom = config_from_json(m.at("config"));
    }
    if (j.contains("watermark")) {
      const auto& w = j.at("watermark");
      detail::maybe(w, "bits", s.watermark.bits);
      detail::maybe(w, "carriers", s.watermark.carriers);
      detail::maybe(w, "provenance", s.watermark.provenance);
      detail::maybe(w, "message", s.watermark.message);
    }
    if (j.contains("train")) {
      const auto& t = j.at("train");
      detail::maybe(t, "epochs", s.train.epochs);
      detail::maybe(t, "batch_size", s.train.batch_size);
      detail::maybe(t, "learning_rate", s.train.learning_rate);
      detail::maybe(t, "final_learning_rate", s.train.final_learning_rate);
      detail::maybe(t, "momentum", s.train.momentum);
      detail::maybe(t, "wm_batch_size", s.train.wm_batch_size);
      detail::maybe(t, "lambda_candidates", s.lambda_candidates);
      if (t.contains("optimizer")) s.train.optimizer = optimizer_from_name(t.at("optimizer").get<std::string>());
    }
    if (j.contains("verification")) {
      const auto& v = j.at("verification");
      detail::maybe(v, "tau", s.policy.tau);
      detail::maybe(v, "samples", s.samples);
      detail::maybe(v, "h", s.h);
    }
    if (j.contains("attacks")) {
      const auto& a = j.at("attacks");
      auto& A = s.attacks;
      detail::maybe(a, "prune_rates", A.prune_rates);
      detail::maybe(a, "adversary_sizes", A.adversary_sizes);
      detail::maybe(a, "retention", A.retention);
      detail::maybe(a, "fine_tune_epochs", A.fine_tune.epochs);
      detail::maybe(a, "fine_tune_lr", A.fine_tune.learning_rate);
      detail::maybe(a, "quantize_bits", A.quantize_bits);
      detail::maybe(a, "adversarial_epochs", A.adversarial.epochs);
      detail::maybe(a, "adversarial_epsilon", A.adversarial.epsilon);
      detail::maybe(a, "adversarial_lr", A.adversarial.learning_rate);
      detail::maybe(a, "adversarial_stress", A.adversarial_stress);
      detail::maybe(a, "noise_sigmas", A.noise_sigmas);
      detail::maybe(a, "noise_h", A.noise_h);
      detail::maybe(a, "rounding_decimals", A.rounding_decimals);
      detail::maybe(a, "rounding_h", A.rounding_h);
      detail::maybe(a, "perturb_m", A.perturb_m);
      detail::maybe(a, "perturb_eps", A.perturb_eps);
      detail::maybe(a, "perturb_runs", A.perturb_runs);
      detail::maybe(a, "perturb_h", A.perturb_h);
      detail::maybe(a, "forge_epochs", A.forge_epochs);
      detail::maybe(a, "forge_per_class", A.forge_per_class);
      detail::maybe(a, "null_models", A.null_models);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error("format", std::string("bad experiment spec: ") + e.what());
  }
  if (s.watermark.bits.size() != s.watermark.carriers.size()) throw value_error("watermark bits and carriers differ in length");
  if (!(s.policy.tau > 0.0 && s.policy.tau < 1.0)) throw value_error("tau must be in (0, 1)");
  if (s.samples == 0) throw value_error("samples must be positive");
  if (!(s.h > 0.0)) throw value_error("h must be positive");
  if (s.dataset.kind != "idx" && s.dataset.kind != "synthetic") throw value_error("unknown dataset kind '" + s.dataset.kind + "'");
  if (s.model.kind != "mlp" && s.model.kind != "street_numbers" && s.model.kind != "custom") {
    throw value_error("unknown model kind '" + s.model.kind + "'");
  }
  if (s.model.kind == "custom" && !s.model.custom) throw value_error("custom model kind needs a config");
  if (s.watermark.provenance != "random" && s.watermark.provenance != "message") {
    throw value_error("unknown key provenance '" + s.watermark.provenance + "'");
  }
  s.train.validate(true);
  return s;
}

// ---- CSV --------------------------------------------------------------------

inline std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  char buf[40];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> header) : header_(std::move(header)) {}

  using Cell = std::variant<std::string, double, std::int64_t, bool>;

  void add(std::vector<Cell> row) {
    if (row.size() != header_.size()) throw value_error("csv row width mismatch");
    std::string line;
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) line += ',';
      std::visit(
          [&](const auto& c) {
            using T = std::decay_t<decltype(c)>;
            if constexpr (std::is_same_v<T, std::string>) line += c;
            else if constexpr (std::is_same_v<T, double>) line += format_number(c);
            else if constexpr (std::is_same_v<T, bool>) line += c ? "true" : "false";
            else line += std::to_string(c);
          },
          row[i]);
    }
    rows_.push_back(std::move(line));
  }

  std::string text() const {
    std::string out;
    for (std::size_t i = 0; i < header_.size(); ++i) out += (i ? "," : "") + header_[i];
    out += '\n';
    for (const auto& r : rows_) out += r + '\n';
    return out;
  }

  std::size_t rows() const { return rows_.size(); }

 private:
  std::vector<std::string> header_;
  std::vector<std::string> rows_;
};

inline std::string sha256_hex(const std::string& bytes) {
  return detail::to_hex(detail::sha256(std::span<const unsigned char>(reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size())));
}

// ---- runner -------------------------------------------------------------------

struct ExperimentResult {
  std::filesystem::path directory;
  bool complete = true;
  nlohmann::json manifest;
};

struct MarkedModel {
  std::size_t bits = 0;
  WatermarkKey key;
  Model model;
  double lambda = 0.0;
  double besr = 0.0;
  Dataset key_samples;  // vendor's target-class training samples
};

namespace detail {

class Bundle {
 public:
  Bundle(std::filesystem::path dir, std::function<void(const std::string&)> log)
      : dir_(std::move(dir)), log_(std::move(log)) {
    std::filesystem::create_directories(dir_);
  }

  void write(const std::string& name, const std::string& text, std::size_t rows) {
    std::ofstream f(dir_ / name, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("io", "cannot write " + (dir_ / name).string());
    f << text;
    files_.push_back({{"name", name}, {"sha256", sha256_hex(text)}, {"rows", rows}});
  }
  void write(const std::string& name, const CsvTable& t) { write(name, t.text(), t.rows()); }

  // Runs a stage; failures are recorded and the bundle becomes partial.
  void stage(const std::string& name, const std::function<void()>& body) {
    log_("stage " + name);
    const auto t0 = std::chrono::steady_clock::now();
    try {
      body();
    } catch (const std::exception& e) {
      const auto* ge = dynamic_cast<const Error*>(&e);
      errors_.push_back({{"stage", name}, {"kind", ge ? ge->kind() : "exception"}, {"message", e.what()}});
      log_("stage " + name + " failed: " + e.what());
    }
    timings_[name] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }

  const std::filesystem::path& dir() const { return dir_; }
  nlohmann::json files() const { return files_; }
  nlohmann::json errors() const { return errors_; }
  nlohmann::json timings() const { return timings_; }
  bool ok() const { return errors_.empty(); }
  void log(const std::string& s) const { log_(s); }

 private:
  std::filesystem::path dir_;
  std::function<void(const std::string&)> log_;
  nlohmann::json files_ = nlohmann::json::array();
  nlohmann::json errors_ = nlohmann::json::array();
  nlohmann::json timings_ = nlohmann::json::object();
};

}  // namespace detail

inline nlohmann::json experiment_spec_to_json(const ExperimentSpec& s) {
  const auto& A = s.attacks;
  nlohmann::json model{{"kind", s.model.kind}, {"hidden", s.model.hidden}, {"width_divisor", s.model.width_divisor}};
  if (s.model.custom) model["config"] = config_to_json(*s.model.custom);
  return {{"seed", s.seed},
          {"output_dir", s.output_dir},
          {"dataset",
           {{"kind", s.dataset.kind},
            {"path", s.dataset.path},
            {"train_per_class", s.dataset.train_per_class},
            {"test_per_class", s.dataset.test_per_class},
            {"classes", s.dataset.classes},
            {"n_per_class", s.dataset.n_per_class},
            {"dims", {s.dataset.dims.height, s.dataset.dims.width, s.dataset.dims.channels}},
            {"noise", s.dataset.noise}}},
          {"model", model},
          {"watermark",
           {{"bits", s.watermark.bits},
            {"carriers", s.watermark.carriers},
            {"provenance", s.watermark.provenance},
            {"message", s.watermark.message}}},
          {"train",
           {{"epochs", s.train.epochs},
            {"batch_size", s.train.batch_size},
            {"learning_rate", s.train.learning_rate},
            {"final_learning_rate", s.train.final_learning_rate},
            {"optimizer", optimizer_name(s.train.optimizer)},
            {"momentum", s.train.momentum},
            {"wm_batch_size", s.train.wm_batch_size},
            {"lambda_candidates", s.lambda_candidates}}},
          {"verification", {{"tau", s.policy.tau}, {"samples", s.samples}, {"h", s.h}}},
          {"attacks",
           {{"prune_rates", A.prune_rates},
            {"adversary_sizes", A.adversary_sizes},
            {"retention", A.retention},
            {"fine_tune_epochs", A.fine_tune.epochs},
            {"fine_tune_lr", A.fine_tune.learning_rate},
            {"quantize_bits", A.quantize_bits},
            {"adversarial_epochs", A.adversarial.epochs},
            {"adversarial_epsilon", A.adversarial.epsilon},
            {"adversarial_lr", A.adversarial.learning_rate},
            {"adversarial_stress", A.adversarial_stress},
            {"noise_sigmas", A.noise_sigmas},
            {"noise_h", A.noise_h},
            {"rounding_decimals", A.rounding_decimals},
            {"rounding_h", A.rounding_h},
            {"perturb_m", A.perturb_m},
            {"perturb_eps", A.perturb_eps},
            {"perturb_runs", A.perturb_runs},
            {"perturb_h", A.perturb_h},
            {"forge_epochs", A.forge_epochs},
            {"forge_per_class", A.forge_per_class},
            {"null_models", A.null_models}}}};
}

inline WatermarkKey experiment_key(const ExperimentSpec& spec, std::size_t bits, std::size_t carrier,
                                   const Dataset& train, std::uint64_t stream) {
  if (spec.watermark.provenance == "message") {
    return generate_key_from_message(spec.watermark.message + " / " + std::to_string(bits) + " bits", bits, carrier,
                                     train.sample_size(), train.class_count);
  }
  if (spec.watermark.provenance != "random") throw value_error("unknown key provenance '" + spec.watermark.provenance + "'");
  return generate_key_random(bits, carrier, train.sample_size(), train.class_count, mix_seed(spec.seed, stream));
}

// Trains the baseline and marked models, runs extraction and the attack
// suite, and writes CSV tables plus manifest.json into spec.output_dir.
// A failing stage is recorded in the manifest and the remaining stages run.
inline ExperimentResult run_experiment(const ExperimentSpec& spec,
                                       const std::function<void(const std::string&)>& log = [](const std::string&) {}) {
  detail::Bundle bundle(spec.output_dir, log);
  const auto& A = spec.attacks;
  const VerificationPolicy policy = spec.policy;

  DeskData data;
  Model baseline;
  double baseline_acc = 0.0;
  std::vector<MarkedModel> marked;

  CsvTable thresholds({"bits", "eta", "min_correct_bits", "tau"});
  for (const std::size_t n : spec.watermark.bits) {
    const int eta = error_threshold(n, policy.tau);
    thresholds.add({static_cast<std::int64_t>(n), static_cast<std::int64_t>(eta),
                    static_cast<std::int64_t>(static_cast<int>(n) - eta), policy.tau});
  }
  bundle.write("thresholds.csv", thresholds);

  bundle.stage("data", [&] { data = load_desk_data(spec.dataset, spec.seed); });

  bundle.stage("baseline", [&] {
    TrainConfig tc = spec.train;
    tc.seed = mix_seed(spec.seed, 30);
    const Model init = build_model(model_config_for(spec.model, data.train, mix_seed(spec.seed, 31)));
    baseline = train(init, data.train, tc).model;
    baseline_acc = accuracy(baseline, data.test);
  });

  bundle.stage("embedding", [&] {
    CsvTable cap({"bits", "carrier", "target_class", "lambda", "lambda_trials", "baseline_accuracy", "marked_accuracy",
                  "accuracy_drop", "besr", "min_correct_bits"});
    const Model init = build_model(model_config_for(spec.model, data.train, mix_seed(spec.seed, 31)));
    for (std::size_t i = 0; i < spec.watermark.bits.size(); ++i) {
      MarkedModel m;
      m.bits = spec.watermark.bits[i];
      m.key = experiment_key(spec, m.bits, spec.watermark.carriers[i], data.train, 40 + i);
      TrainConfig tc = spec.train;
      tc.seed = mix_seed(spec.seed, 30);
      LambdaSelection sel = select_lambda(init, data.train, tc, m.key, spec.lambda_candidates);
      m.model = std::move(sel.result.model);
      m.lambda = sel.lambda;
      m.key_samples = data.train.of_class(m.key.target_class);
      m.besr = besr(extract_watermark(whitebox_expected_gradient(m.model, m.key, m.key_samples), m.key), m.key.bits);
      const double acc = accuracy(m.model, data.test);
      std::string trials;
      for (const auto& t : sel.trials) trials += (trials.empty() ? "" : ";") + format_number(t.lambda) + ":" + format_number(t.besr);
      cap.add({static_cast<std::int64_t>(m.bits), static_cast<std::int64_t>(m.key.carrier_count()),
               static_cast<std::int64_t>(m.key.target_class), m.lambda, trials, baseline_acc, acc, baseline_acc - acc, m.besr,
               static_cast<std::int64_t>(static_cast<int>(m.bits) - error_threshold(m.bits, policy.tau))});
      const std::string stem = "model_" + std::to_string(m.bits);
      save_checkpoint(m.model, bundle.dir() / (stem + ".gsck"));
      save_key(m.key, bundle.dir() / ("key_" + std::to_string(m.bits) + ".json"));
      marked.push_back(std::move(m));
    }
    save_checkpoint(baseline, bundle.dir() / "baseline.gsck");
    bundle.write("capacity.csv", cap);
  });

  auto black_box = [&](const MarkedModel& m, PredictionOracle& oracle, double h) {
    return verify_estimate(blackbox_estimate_gradient(oracle, m.key, m.key_samples.head(spec.samples), h), m.key, policy);
  };
  auto white_box = [&](const Model& model, const MarkedModel& m) {
    return verify_estimate(whitebox_expected_gradient(model, m.key, m.key_samples), m.key, policy);
  };

  bundle.stage("efficiency", [&] {
    CsvTable t({"bits", "carrier", "samples", "h", "queries", "queries_per_bit", "blackbox_errors", "whitebox_errors",
                "decoded_identical", "verified"});
    for (const auto& m : marked) {
      auto base = std::make_shared<ModelOracle>(std::make_shared<const Model>(m.model));
      const auto bb = black_box(m, *base, spec.h);
      const auto wb = verify_estimate(whitebox_expected_gradient(m.model, m.key, m.key_samples.head(spec.samples)), m.key, policy);
      t.add({static_cast<std::int64_t>(m.bits), static_cast<std::int64_t>(m.key.carrier_count()),
             static_cast<std::int64_t>(bb.extraction.samples), spec.h, static_cast<std::int64_t>(bb.extraction.query_count),
             static_cast<double>(bb.extraction.query_count) / static_cast<double>(m.bits),
             static_cast<std::int64_t>(bb.n_error), static_cast<std::int64_t>(wb.n_error), bb.decoded == wb.decoded, bb.verified});
    }
    bundle.write("efficiency.csv", t);
  });

  bundle.stage("quantization", [&] {
    CsvTable t({"bits", "quantize_bits", "accuracy_before", "accuracy_after", "n_error", "eta", "verified"});
    for (const auto& m : marked) {
      const Model q = quantize(m.model, A.quantize_bits);
      const auto r = white_box(q, m);
      t.add({static_cast<std::int64_t>(m.bits), static_cast<std::int64_t>(A.quantize_bits), accuracy(m.model, data.test),
             accuracy(q, data.test), static_cast<std::int64_t>(r.n_error), static_cast<std::int64_t>(r.eta), r.verified});
    }
    bundle.write("quantization.csv", t);
  });

  bundle.stage("adversarial", [&] {
    CsvTable t({"bits", "learning_rate", "epsilon", "epochs", "accuracy_before", "accuracy_after", "n_error", "eta", "verified"});
    std::vector<double> rates{A.adversarial.learning_rate};
    if (A.adversarial_stress && spec.train.learning_rate != A.adversarial.learning_rate) rates.push_back(spec.train.learning_rate);
    for (const auto& m : marked) {
      for (const double lr : rates) {
        AdversarialConfig ac = A.adversarial;
        ac.learning_rate = lr;
        ac.seed = mix_seed(spec.seed, 50 + m.bits);
        const Model adv = adversarial_fine_tune(m.model, data.train, ac).model;
        const auto r = white_box(adv, m);
        t.add({static_cast<std::int64_t>(m.bits), lr, ac.epsilon, static_cast<std::int64_t>(ac.epochs),
               accuracy(m.model, data.test), accuracy(adv, data.test), static_cast<std::int64_t>(r.n_error),
               static_cast<std::int64_t>(r.eta), r.verified});
      }
    }
    bundle.write("adversarial.csv", t);
  });

  bundle.stage("pruning", [&] {
    CsvTable t({"bits", "adversary_per_class", "prune_rate", "test_accuracy", "watermark_accuracy", "n_error", "verified",
                "retained"});
    CsvTable summary({"bits", "baseline_accuracy", "cells", "retained_cells", "min_retained_watermark_accuracy",
                      "all_retained_verified"});
    for (const auto& m : marked) {
      RobustnessConfig rc;
      rc.prune_rates = A.prune_rates;
      rc.adversary_sizes = A.adversary_sizes;
      rc.fine_tune = A.fine_tune;
      rc.retention = A.retention;
      rc.policy = policy;
      rc.seed = mix_seed(spec.seed, 60 + m.bits);
      const auto rep = robustness_sweep(m.model, m.key, m.key_samples, data.pool, data.test, rc);
      for (const auto& c : rep.cells) {
        t.add({static_cast<std::int64_t>(m.bits), static_cast<std::int64_t>(c.adversary_per_class), c.prune_rate,
               c.test_accuracy, c.watermark_accuracy, static_cast<std::int64_t>(c.n_error), c.verified, c.retained});
      }
      summary.add({static_cast<std::int64_t>(m.bits), rep.baseline_accuracy, static_cast<std::int64_t>(rep.cells.size()),
                   static_cast<std::int64_t>(rep.retained_count()), rep.min_retained_watermark_accuracy(),
                   rep.all_retained_verified()});
    }
    bundle.write("pruning.csv", t);
    bundle.write("pruning_summary.csv", summary);
  });

  bundle.stage("noise", [&] {
    CsvTable t({"bits", "sigma", "h", "noisy_accuracy", "retained", "n_error", "verified"});
    for (const auto& m : marked) {
      const auto model = std::make_shared<const Model>(m.model);
      const double clean = accuracy(m.model, data.test);
      for (std::size_t i = 0; i < A.noise_sigmas.size(); ++i) {
        const double sigma = A.noise_sigmas[i];
        const double acc = noisy_accuracy(m.model, data.test, sigma, mix_seed(spec.seed, 70 + i));
        auto oracle = wrap_oracle(std::make_shared<ModelOracle>(model), {NoiseWrap{sigma}}, mix_seed(spec.seed, 80 + i));
        const auto r = black_box(m, *oracle, A.noise_h);
        t.add({static_cast<std::int64_t>(m.bits), sigma, A.noise_h, acc, acc >= A.retention * clean,
               static_cast<std::int64_t>(r.n_error), r.verified});
      }
    }
    bundle.write("noise.csv", t);
  });

  bundle.stage("rounding", [&] {
    CsvTable t({"bits", "decimals", "h", "n_error", "eta", "verified"});
    for (const auto& m : marked) {
      auto oracle = wrap_oracle(std::make_shared<ModelOracle>(std::make_shared<const Model>(m.model)),
                                {RoundWrap{A.rounding_decimals}});
      for (const double h : A.rounding_h) {
        const auto r = black_box(m, *oracle, h);
        t.add({static_cast<std::int64_t>(m.bits), static_cast<std::int64_t>(A.rounding_decimals), h,
               static_cast<std::int64_t>(r.n_error), static_cast<std::int64_t>(r.eta), r.verified});
      }
    }
    bundle.write("rounding.csv", t);
  });

  bundle.stage("perturbation", [&] {
    CsvTable t({"bits", "run", "h", "n_error", "watermark_accuracy", "verified"});
    CsvTable summary({"bits", "runs", "mean_watermark_accuracy", "threshold_accuracy", "verified_fraction"});
    for (const auto& m : marked) {
      const auto model = std::make_shared<const Model>(m.model);
      double acc_sum = 0.0;
      std::size_t ok = 0;
      for (std::size_t run = 0; run < A.perturb_runs; ++run) {
        auto oracle = wrap_oracle(std::make_shared<ModelOracle>(model),
                                  {PerturbWrap{A.perturb_m, A.perturb_eps, mix_seed(spec.seed, 1000 + run)}});
        const auto r = black_box(m, *oracle, A.perturb_h);
        acc_sum += r.watermark_accuracy();
        ok += r.verified;
        t.add({static_cast<std::int64_t>(m.bits), static_cast<std::int64_t>(run), A.perturb_h,
               static_cast<std::int64_t>(r.n_error), r.watermark_accuracy(), r.verified});
      }
      const double runs = static_cast<double>(std::max<std::size_t>(A.perturb_runs, 1));
      const int eta = error_threshold(m.bits, policy.tau);
      summary.add({static_cast<std::int64_t>(m.bits), static_cast<std::int64_t>(A.perturb_runs), acc_sum / runs,
                   1.0 - static_cast<double>(eta) / static_cast<double>(m.bits), static_cast<double>(ok) / runs});
    }
    bundle.write("perturbation.csv", t);
    bundle.write("perturbation_summary.csv", summary);
  });

  bundle.stage("forging", [&] {
    CsvTable t({"bits", "per_class", "vendor_lambda", "lambda", "besr_heldout", "besr_forger_samples", "test_accuracy",
                "accuracy_delta", "target_collision"});
    for (const auto& m : marked) {
      const WatermarkKey fake = generate_key_random(m.bits, m.key.carrier_count(), m.key.input_dim, m.key.class_count,
                                                    mix_seed(spec.seed, 90 + m.bits));
      const Dataset sub = subsample_per_class(data.pool, A.forge_per_class, mix_seed(spec.seed, 91 + m.bits));
      ForgeConfig fc;
      fc.epochs = A.forge_epochs;
      fc.base = spec.train;
      fc.base.lambda = m.lambda;
      fc.base.seed = mix_seed(spec.seed, 92 + m.bits);
      const ForgeResult fr = forge(m.model, fake, sub, data.test, data.test, fc);
      for (const auto& tr : fr.trials) {
        t.add({static_cast<std::int64_t>(m.bits), static_cast<std::int64_t>(A.forge_per_class), m.lambda, tr.lambda, tr.besr,
               tr.besr_training, tr.test_accuracy, tr.accuracy_delta, fake.target_class == m.key.target_class});
      }
    }
    bundle.write("forging.csv", t);
  });

  bundle.stage("null_models", [&] {
    CsvTable t({"model", "bits", "key", "n_error", "ber", "verified"});
    CsvTable summary({"bits", "models", "vendor_key_verified", "mean_ber_vendor_key", "mean_ber_own_key"});
    std::vector<double> ber_vendor(marked.size(), 0.0), ber_own(marked.size(), 0.0);
    std::vector<std::size_t> hits(marked.size(), 0);
    for (std::size_t i = 0; i < A.null_models; ++i) {
      TrainConfig tc = spec.train;
      tc.seed = mix_seed(spec.seed, 2000 + i);
      const Model init = build_model(model_config_for(spec.model, data.train, mix_seed(spec.seed, 3000 + i)));
      const Model null_model = train(init, data.train, tc).model;
      for (std::size_t k = 0; k < marked.size(); ++k) {
        const auto& m = marked[k];
        const auto r = white_box(null_model, m);
        const WatermarkKey own = generate_key_random(m.bits, m.key.carrier_count(), m.key.input_dim, m.key.class_count,
                                                     mix_seed(spec.seed, 4000 + 100 * i + k));
        const auto r_own = verify_estimate(whitebox_expected_gradient(null_model, own, data.train.of_class(own.target_class)), own, policy);
        ber_vendor[k] += 1.0 - r.watermark_accuracy();
        ber_own[k] += 1.0 - r_own.watermark_accuracy();
        hits[k] += r.verified;
        t.add({static_cast<std::int64_t>(i), static_cast<std::int64_t>(m.bits), std::string("vendor"),
               static_cast<std::int64_t>(r.n_error), 1.0 - r.watermark_accuracy(), r.verified});
        t.add({static_cast<std::int64_t>(i), static_cast<std::int64_t>(m.bits), std::string("independent"),
               static_cast<std::int64_t>(r_own.n_error), 1.0 - r_own.watermark_accuracy(), r_own.verified});
      }
    }
    const double n = static_cast<double>(std::max<std::size_t>(A.null_models, 1));
    for (std::size_t k = 0; k < marked.size(); ++k) {
      summary.add({static_cast<std::int64_t>(marked[k].bits), static_cast<std::int64_t>(A.null_models),
                   static_cast<std::int64_t>(hits[k]), ber_vendor[k] / n, ber_own[k] / n});
    }
    bundle.write("null_models.csv", t);
    bundle.write("null_models_summary.csv", summary);
  });

  ExperimentResult res;
  res.directory = bundle.dir();
  res.complete = bundle.ok();
  res.manifest = {{"status", res.complete ? "complete" : "partial"},
                  {"spec", experiment_spec_to_json(spec)},
                  {"files", bundle.files()},
                  {"errors", bundle.errors()},
                  {"timings_seconds", bundle.timings()}};
  std::ofstream f(bundle.dir() / "manifest.json", std::ios::trunc);
  f << res.manifest.dump(2) << '\n';
  return res;
}

}  // namespace gradsigns
