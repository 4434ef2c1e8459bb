// gradsigns: command-line front end for training, marking, extracting,
// verifying, attacking and serving models.

#include <csignal>
#include <cstdio>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "gradsigns/gradsigns.hpp"

using namespace gradsigns;
using nlohmann::json;

namespace {

constexpr int kExitFailure = 1;  // verification failed
constexpr int kExitError = 2;

void print_error(const std::string& kind, const std::string& message) {
  std::cerr << json{{"error", {{"kind", kind}, {"message", message}}}}.dump() << std::endl;
}

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    const auto c = s.find(',', start);
    out.push_back(s.substr(start, c - start));
    if (c == std::string::npos) break;
    start = c + 1;
  }
  return out;
}

std::uint64_t parse_u64(const std::string& s, const std::string& what) {
  try {
    std::size_t used = 0;
    const auto v = std::stoull(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  throw value_error("bad " + what + " '" + s + "'");
}

struct LoadedData {
  Dataset train;
  Dataset test;
};

// "synthetic[:classes,n_per_class,H,W,C[,seed]]" or a directory holding the
// digit archives.
LoadedData load_dataset(const std::string& spec, std::size_t train_per_class, std::size_t test_per_class) {
  LoadedData d;
  if (spec.rfind("synthetic", 0) == 0) {
    int classes = 4;
    std::size_t n = 200;
    ImageDims dims{8, 8, 1};
    std::uint64_t seed = 0;
    if (spec.size() > 9) {
      if (spec[9] != ':') throw value_error("bad synthetic dataset spec '" + spec + "'");
      const auto f = split_commas(spec.substr(10));
      if (f.size() != 5 && f.size() != 6) throw value_error("synthetic spec needs classes,n,H,W,C[,seed]");
      classes = static_cast<int>(parse_u64(f[0], "class count"));
      n = parse_u64(f[1], "sample count");
      dims = {parse_u64(f[2], "height"), parse_u64(f[3], "width"), parse_u64(f[4], "channels")};
      if (f.size() == 6) seed = parse_u64(f[5], "seed");
    }
    auto parts = split(make_synthetic(classes, n, dims, seed), {0.8, 0.2}, mix_seed(seed, 1));
    d.train = std::move(parts[0]);
    d.test = std::move(parts[1]);
  } else {
    DigitArchive a = load_digit_archive(spec);
    d.train = train_per_class ? subsample_per_class(a.train, train_per_class, 1) : std::move(a.train);
    d.test = test_per_class ? subsample_per_class(a.test, test_per_class, 2) : std::move(a.test);
  }
  return d;
}

// "mlp[:hidden]" or "street[:width_divisor]"
ModelConfig parse_model(const std::string& spec, const Dataset& data, std::uint64_t seed) {
  const auto colon = spec.find(':');
  const std::string kind = spec.substr(0, colon);
  const std::string arg = colon == std::string::npos ? "" : spec.substr(colon + 1);
  const Shape s = data.sample_shape();
  if (kind == "mlp") return mlp_config(s[0], s[1], s[2], arg.empty() ? 128 : parse_u64(arg, "hidden width"), data.class_count, seed);
  if (kind == "street") {
    return street_numbers_preset(s[0], s[1], s[2], data.class_count, arg.empty() ? 4 : parse_u64(arg, "width divisor"), seed);
  }
  throw value_error("unknown model '" + spec + "'");
}

void check_key_matches(const WatermarkKey& key, const ModelConfig& cfg) {
  if (key.input_dim != cfg.input_dim() || key.class_count != cfg.num_classes) {
    throw Error("mismatch", "key expects " + std::to_string(key.input_dim) + " inputs and " +
                                std::to_string(key.class_count) + " classes; model has " + std::to_string(cfg.input_dim()) +
                                " and " + std::to_string(cfg.num_classes));
  }
}

void write_json(const json& j, const std::string& out) {
  if (out.empty()) {
    std::cout << j.dump(2) << std::endl;
    return;
  }
  std::ofstream f(out, std::ios::trunc);
  if (!f) throw Error("io", "cannot write " + out);
  f << j.dump(2) << '\n';
}

json history_json(const std::vector<EpochMetrics>& h) {
  json a = json::array();
  for (const auto& m : h) {
    json e{{"epoch", m.epoch}, {"loss", m.loss}, {"train_accuracy", m.train_accuracy}};
    if (!std::isnan(m.val_accuracy)) e["val_accuracy"] = m.val_accuracy;
    if (!std::isnan(m.besr)) e["besr"] = m.besr;
    a.push_back(e);
  }
  return a;
}

// Shared options.
struct Common {
  std::string checkpoint;
  std::string key;
  std::string dataset;
  std::size_t train_per_class = 0;
  std::size_t test_per_class = 0;
  std::string out;
  std::uint64_t seed = 1;
};

void add_dataset(CLI::App* c, Common& o, bool required) {
  auto* opt = c->add_option("--dataset", o.dataset, "Digit archive directory or synthetic[:classes,n,H,W,C[,seed]]");
  if (required) opt->required();
  c->add_option("--train-per-class", o.train_per_class, "Subsample the training split (0 = all)");
  c->add_option("--test-per-class", o.test_per_class, "Subsample the test split (0 = all)");
}

struct TrainFlags {
  std::string model = "mlp:128";
  TrainConfig cfg = desk_train_config();
  std::string optimizer = "sgd-momentum";
};

void add_train_flags(CLI::App* c, TrainFlags& t) {
  c->add_option("--model", t.model, "mlp[:hidden] or street[:width_divisor]")->capture_default_str();
  c->add_option("--epochs", t.cfg.epochs, "Training epochs")->capture_default_str();
  c->add_option("--lr", t.cfg.learning_rate, "Initial learning rate")->capture_default_str();
  c->add_option("--final-lr", t.cfg.final_learning_rate, "Learning rate of the last epoch (negative = constant)")->capture_default_str();
  c->add_option("--batch", t.cfg.batch_size, "Minibatch size")->capture_default_str();
  c->add_option("--optimizer", t.optimizer, "sgd or sgd-momentum")->capture_default_str();
}

// ---- subcommands ------------------------------------------------------------

int cmd_train(const Common& o, TrainFlags t) {
  const LoadedData d = load_dataset(o.dataset, o.train_per_class, o.test_per_class);
  t.cfg.optimizer = optimizer_from_name(t.optimizer);
  t.cfg.seed = mix_seed(o.seed, 1);
  const Model init = build_model(parse_model(t.model, d.train, mix_seed(o.seed, 2)));
  TrainResult r = train(init, d.train, t.cfg);
  save_checkpoint(r.model, o.out);
  write_json({{"checkpoint", o.out}, {"test_accuracy", accuracy(r.model, d.test)}, {"history", history_json(r.history)}}, "");
  return 0;
}

int cmd_embed(const Common& o, TrainFlags t, std::optional<double> lambda) {
  const LoadedData d = load_dataset(o.dataset, o.train_per_class, o.test_per_class);
  const WatermarkKey key = load_key(o.key);
  t.cfg.optimizer = optimizer_from_name(t.optimizer);
  t.cfg.seed = mix_seed(o.seed, 1);
  const Model init = o.checkpoint.empty() ? build_model(parse_model(t.model, d.train, mix_seed(o.seed, 2)))
                                          : load_checkpoint(o.checkpoint);
  check_key_matches(key, init.config());
  TrainResult r;
  json trials = json::array();
  if (lambda) {
    t.cfg.lambda = *lambda;
    r = train(init, d.train, t.cfg, &key);
    trials.push_back({{"lambda", *lambda}, {"besr", r.history.back().besr}});
  } else {
    LambdaSelection sel = select_lambda(init, d.train, t.cfg, key);
    for (const auto& tr : sel.trials) trials.push_back({{"lambda", tr.lambda}, {"besr", tr.besr}});
    t.cfg.lambda = sel.lambda;
    r = std::move(sel.result);
  }
  save_checkpoint(r.model, o.out);
  write_json({{"checkpoint", o.out},
              {"lambda", t.cfg.lambda},
              {"trials", trials},
              {"besr", r.history.back().besr},
              {"test_accuracy", accuracy(r.model, d.test)}},
             "");
  return 0;
}

int cmd_keygen(const Common& o, std::size_t bits, std::size_t carrier, const std::string& message, bool seeded,
               std::size_t input_dim, int classes) {
  if (!o.checkpoint.empty()) {
    const Model m = load_checkpoint(o.checkpoint);
    input_dim = m.config().input_dim();
    classes = m.config().num_classes;
  }
  if (!message.empty() && seeded) throw value_error("--message and --seed are exclusive");
  const WatermarkKey key = message.empty() ? generate_key_random(bits, carrier, input_dim, classes, o.seed)
                                           : generate_key_from_message(message, bits, carrier, input_dim, classes);
  if (o.out.empty()) {
    std::cout << key_to_json(key).dump(1) << std::endl;
  } else {
    save_key(key, o.out);
  }
  return 0;
}

struct ExtractFlags {
  std::string remote;
  std::vector<std::string> wraps;
  std::optional<double> h;
  bool blackbox = false;
  std::size_t samples = 50;
  double tau = 3e-3;
};

VerificationReport run_extraction(const Common& o, const ExtractFlags& e) {
  const WatermarkKey key = load_key(o.key);
  if (e.remote.empty() && o.checkpoint.empty()) throw value_error("need --checkpoint or --remote");
  const LoadedData d = load_dataset(o.dataset, o.train_per_class, 0);
  if (d.train.sample_size() != key.input_dim) throw Error("mismatch", "dataset samples do not match key input size");
  const Dataset samples = d.train.of_class(key.target_class);
  const VerificationPolicy policy{e.tau};

  std::vector<WrapperSpec> wrappers;
  for (const auto& w : e.wraps) wrappers.push_back(parse_wrapper(w));

  if (!e.remote.empty()) {
    if (!wrappers.empty()) throw value_error("--wrap applies to local oracles; configure wrappers on the server");
    RemoteOracle oracle(net::parse_endpoint(e.remote), d.train.sample_shape(), key.class_count);
    return verify_estimate(blackbox_estimate_gradient(oracle, key, samples.head(e.samples), e.h.value_or(1e-4)), key, policy);
  }
  const auto model = std::make_shared<const Model>(load_checkpoint(o.checkpoint));
  check_key_matches(key, model->config());
  if (e.blackbox || e.h || !wrappers.empty()) {
    auto oracle = wrap_oracle(std::make_shared<ModelOracle>(model), wrappers, o.seed);
    return verify_estimate(blackbox_estimate_gradient(*oracle, key, samples.head(e.samples), e.h.value_or(1e-4)), key, policy);
  }
  return verify_estimate(whitebox_expected_gradient(*model, key, samples), key, policy);
}

int cmd_extract(const Common& o, const ExtractFlags& e, bool verify_mode) {
  const VerificationReport r = run_extraction(o, e);
  write_json(report_to_json(r), o.out);
  if (!o.out.empty()) std::cout << report_to_json(r).dump(2) << std::endl;
  return verify_mode && !r.verified ? kExitFailure : 0;
}

// "prune:p", "quantize:bits", "finetune:per_class", "adversarial:epsilon"
int cmd_attack(const Common& o, const std::string& spec, std::optional<std::size_t> epochs, std::optional<double> lr) {
  const auto colon = spec.find(':');
  const std::string kind = spec.substr(0, colon);
  const std::string arg = colon == std::string::npos ? "" : spec.substr(colon + 1);
  auto number = [&](double fallback) {
    if (arg.empty()) return fallback;
    try {
      std::size_t used = 0;
      const double v = std::stod(arg, &used);
      if (used == arg.size()) return v;
    } catch (const std::exception&) {
    }
    throw value_error("bad attack parameter '" + arg + "'");
  };
  Model model = load_checkpoint(o.checkpoint);
  json info{{"attack", spec}};
  std::optional<LoadedData> d;
  if (!o.dataset.empty()) d = load_dataset(o.dataset, o.train_per_class, o.test_per_class);
  if (d) info["accuracy_before"] = accuracy(model, d->test);

  if (kind == "prune") {
    model = prune(std::move(model), number(0.5));
  } else if (kind == "quantize") {
    model = quantize(std::move(model), static_cast<int>(number(8)));
  } else if (kind == "finetune") {
    if (!d) throw value_error("finetune needs --dataset");
    FineTuneConfig ft;
    ft.seed = o.seed;
    if (epochs) ft.epochs = *epochs;
    if (lr) ft.learning_rate = *lr;
    const Dataset adv = subsample_per_class(d->train, static_cast<std::size_t>(number(256)), mix_seed(o.seed, 5));
    model = fine_tune(model, adv, ft).model;
  } else if (kind == "adversarial") {
    if (!d) throw value_error("adversarial needs --dataset");
    AdversarialConfig ac;
    ac.seed = o.seed;
    ac.epsilon = number(0.1);
    if (epochs) ac.epochs = *epochs;
    if (lr) ac.learning_rate = *lr;
    model = adversarial_fine_tune(model, d->train, ac).model;
  } else {
    throw value_error("unknown attack '" + spec + "'");
  }
  if (d) info["accuracy_after"] = accuracy(model, d->test);
  save_checkpoint(model, o.out);
  info["checkpoint"] = o.out;
  write_json(info, "");
  return 0;
}

int cmd_serve(const Common& o, const std::string& bind, const std::vector<std::string>& wraps, std::size_t max_conn,
              std::uint64_t query_limit) {
  // Block the stop signals before any thread starts so that only sigwait sees them.
  sigset_t stop;
  sigemptyset(&stop);
  sigaddset(&stop, SIGINT);
  sigaddset(&stop, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &stop, nullptr);

  ServerConfig cfg;
  cfg.bind = net::parse_endpoint(bind.find(':') == std::string::npos ? bind + ":0" : bind, true);
  for (const auto& w : wraps) cfg.wrappers.push_back(parse_wrapper(w));
  cfg.max_connections = max_conn;
  cfg.query_limit = query_limit;
  PredictionServer server(std::make_shared<const Model>(load_checkpoint(o.checkpoint)), cfg);
  server.start();
  std::cout << json{{"listening", cfg.bind.host + ":" + std::to_string(server.port())}}.dump() << std::endl;
  int sig = 0;
  sigwait(&stop, &sig);
  server.stop();
  std::cout << json{{"stopped", true}, {"queries_served", server.queries_served()}}.dump() << std::endl;
  return 0;
}

int cmd_report(const Common& o, const std::string& bundle) {
  json out;
  if (!bundle.empty()) {
    std::ifstream f(std::filesystem::path(bundle) / "manifest.json");
    if (!f) throw Error("io", "no manifest.json in " + bundle);
    json m;
    try {
      f >> m;
    } catch (const json::exception& e) {
      throw Error("format", std::string("manifest is not JSON: ") + e.what());
    }
    out["bundle"] = {{"status", m.value("status", "unknown")}, {"files", m.value("files", json::array())},
                     {"errors", m.value("errors", json::array())}};
  }
  if (!o.checkpoint.empty()) {
    const Model model = load_checkpoint(o.checkpoint);
    out["model"] = {{"config", config_to_json(model.config())},
                    {"parameters", model.parameter_count()},
                    {"pruned", !model.masks().empty()},
                    {"epochs_run", model.metadata().epochs_run},
                    {"train_accuracy", model.metadata().train_accuracy}};
    if (!o.dataset.empty()) {
      const LoadedData d = load_dataset(o.dataset, o.train_per_class, o.test_per_class);
      out["model"]["test_accuracy"] = accuracy(model, d.test);
      if (!o.key.empty()) {
        const WatermarkKey key = load_key(o.key);
        check_key_matches(key, model.config());
        out["verification"] = report_to_json(verify_estimate(
            whitebox_expected_gradient(model, key, d.train.of_class(key.target_class)), key, VerificationPolicy{}));
      }
    }
  }
  if (!o.key.empty()) {
    const WatermarkKey key = load_key(o.key);
    out["key"] = {{"bits", key.bit_count()},
                  {"carriers", key.carrier_count()},
                  {"target_class", key.target_class},
                  {"eta", error_threshold(key.bit_count(), VerificationPolicy{}.tau)},
                  {"auditable", audit_key(key)}};
  }
  if (out.empty()) throw value_error("report needs --bundle, --checkpoint or --key");
  write_json(out, o.out);
  return 0;
}

int cmd_experiment(const Common& o, const std::string& spec_path, bool seed_set) {
  std::ifstream f(spec_path);
  if (!f) throw Error("io", "cannot read " + spec_path);
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw Error("format", std::string("experiment spec is not JSON: ") + e.what());
  }
  ExperimentSpec spec = experiment_spec_from_json(j);
  if (!o.out.empty()) spec.output_dir = o.out;
  if (seed_set) spec.seed = o.seed;
  const auto res = run_experiment(spec, [](const std::string& s) { std::cerr << s << std::endl; });
  std::cout << json{{"directory", res.directory.string()}, {"status", res.manifest.at("status")},
                    {"errors", res.manifest.at("errors")}}
                   .dump(2)
            << std::endl;
  return res.complete ? 0 : kExitFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gradient-sign watermarking toolkit"};
  app.set_help_flag("--help", "Print this help message and exit");  // -h is taken by --h
  app.require_subcommand(1);
  Common o;

  auto* train_cmd = app.add_subcommand("train", "Train an unmarked model");
  TrainFlags train_flags;
  add_dataset(train_cmd, o, true);
  add_train_flags(train_cmd, train_flags);
  train_cmd->add_option("--seed", o.seed, "Master seed")->capture_default_str();
  train_cmd->add_option("--out", o.out, "Output checkpoint")->required();

  auto* embed_cmd = app.add_subcommand("embed", "Train a model carrying a watermark");
  TrainFlags embed_flags;
  std::optional<double> lambda;
  add_dataset(embed_cmd, o, true);
  add_train_flags(embed_cmd, embed_flags);
  embed_cmd->add_option("--key", o.key, "Key file")->required();
  embed_cmd->add_option("--checkpoint", o.checkpoint, "Start from this checkpoint instead of a fresh model");
  embed_cmd->add_option("--lambda", lambda, "Embedding loss weight (default: smallest candidate reaching BESR 1)");
  embed_cmd->add_option("--seed", o.seed, "Master seed")->capture_default_str();
  embed_cmd->add_option("--out", o.out, "Output checkpoint")->required();

  auto* keygen_cmd = app.add_subcommand("keygen", "Generate a watermark key");
  std::size_t bits = 64, carrier = 128, input_dim = 784;
  int classes = 10;
  std::string message;
  keygen_cmd->add_option("--bits", bits, "Watermark length N")->capture_default_str();
  keygen_cmd->add_option("--carrier", carrier, "Carrier set size |C|")->capture_default_str();
  keygen_cmd->add_option("--message", message, "Derive the key from an identity message");
  auto* keygen_seed = keygen_cmd->add_option("--seed", o.seed, "Seed for a random key")->capture_default_str();
  keygen_cmd->add_option("--checkpoint", o.checkpoint, "Take input size and classes from this model");
  keygen_cmd->add_option("--input-dim", input_dim, "Flattened input size")->capture_default_str();
  keygen_cmd->add_option("--classes", classes, "Class count")->capture_default_str();
  keygen_cmd->add_option("--out", o.out, "Key file (stdout if omitted)");

  ExtractFlags ef;
  auto add_extract = [&](CLI::App* c) {
    add_dataset(c, o, true);
    c->add_option("--key", o.key, "Key file")->required();
    c->add_option("--checkpoint", o.checkpoint, "Model checkpoint");
    c->add_option("--remote", ef.remote, "Prediction server host:port");
    c->add_option("--h", ef.h, "Finite-difference step (selects black-box extraction)");
    c->add_flag("--blackbox", ef.blackbox, "Use the black-box estimator on a local checkpoint");
    c->add_option("--samples", ef.samples, "Target-class samples for black-box extraction")->capture_default_str();
    c->add_option("--tau", ef.tau, "Significance level")->capture_default_str();
    c->add_option("--wrap", ef.wraps, "Output wrapper for a local oracle: noise:s | round:d | perturb:M,eps[,seed]");
    c->add_option("--seed", o.seed, "Seed for stochastic wrappers")->capture_default_str();
    c->add_option("--out", o.out, "Also write the report here");
  };
  auto* extract_cmd = app.add_subcommand("extract", "Extract the watermark and print the report");
  add_extract(extract_cmd);
  auto* verify_cmd = app.add_subcommand("verify", "Verify ownership; exit status 0 iff verified");
  add_extract(verify_cmd);

  auto* attack_cmd = app.add_subcommand("attack", "Apply a removal attack to a checkpoint");
  std::string attack;
  std::optional<std::size_t> attack_epochs;
  std::optional<double> attack_lr;
  add_dataset(attack_cmd, o, false);
  attack_cmd->add_option("--checkpoint", o.checkpoint, "Input checkpoint")->required();
  attack_cmd->add_option("--attack", attack, "prune:p | quantize:bits | finetune:per_class | adversarial:eps")->required();
  attack_cmd->add_option("--epochs", attack_epochs, "Fine-tuning epochs");
  attack_cmd->add_option("--lr", attack_lr, "Fine-tuning learning rate");
  attack_cmd->add_option("--seed", o.seed, "Seed")->capture_default_str();
  attack_cmd->add_option("--out", o.out, "Output checkpoint")->required();

  auto* serve_cmd = app.add_subcommand("serve", "Serve predictions over TCP until SIGINT/SIGTERM");
  std::string bind = "127.0.0.1:0";
  std::vector<std::string> serve_wraps;
  std::size_t max_conn = 16;
  std::uint64_t query_limit = 0;
  serve_cmd->add_option("--checkpoint", o.checkpoint, "Model checkpoint")->required();
  serve_cmd->add_option("--bind", bind, "host:port (port 0 picks a free port)")->capture_default_str();
  serve_cmd->add_option("--wrap", serve_wraps, "Output wrapper, innermost first: noise:s | round:d | perturb:M,eps[,seed]");
  serve_cmd->add_option("--max-connections", max_conn, "Concurrent connection limit")->capture_default_str();
  serve_cmd->add_option("--query-limit", query_limit, "Per-connection query limit (0 = unlimited)")->capture_default_str();

  auto* report_cmd = app.add_subcommand("report", "Summarize a checkpoint, key or experiment bundle");
  std::string bundle;
  add_dataset(report_cmd, o, false);
  report_cmd->add_option("--checkpoint", o.checkpoint, "Model checkpoint");
  report_cmd->add_option("--key", o.key, "Key file");
  report_cmd->add_option("--bundle", bundle, "Experiment output directory");
  report_cmd->add_option("--out", o.out, "Write the summary here");

  auto* exp_cmd = app.add_subcommand("experiment", "Run the evaluation described by a JSON spec");
  std::string spec_path;
  exp_cmd->add_option("--spec", spec_path, "Experiment spec (JSON)")->required();
  auto* exp_seed = exp_cmd->add_option("--seed", o.seed, "Override the master seed");
  exp_cmd->add_option("--out", o.out, "Override the output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    print_error("usage", e.what());
    return kExitError;
  }

  try {
    if (*train_cmd) return cmd_train(o, train_flags);
    if (*embed_cmd) return cmd_embed(o, embed_flags, lambda);
    if (*keygen_cmd) return cmd_keygen(o, bits, carrier, message, keygen_seed->count() > 0, input_dim, classes);
    if (*extract_cmd) return cmd_extract(o, ef, false);
    if (*verify_cmd) return cmd_extract(o, ef, true);
    if (*attack_cmd) return cmd_attack(o, attack, attack_epochs, attack_lr);
    if (*serve_cmd) return cmd_serve(o, bind, serve_wraps, max_conn, query_limit);
    if (*report_cmd) return cmd_report(o, bundle);
    if (*exp_cmd) return cmd_experiment(o, spec_path, exp_seed->count() > 0);
  } catch (const ExtractionError& e) {
    std::cerr << json{{"error", {{"kind", e.kind()}, {"message", e.what()}, {"queries_issued", e.queries_issued()}}}}.dump()
              << std::endl;
    return kExitError;
  } catch (const OracleError& e) {
    std::cerr << json{{"error", {{"kind", e.kind()}, {"message", e.what()}, {"answered", e.answered()}}}}.dump() << std::endl;
    return kExitError;
  } catch (const Error& e) {
    print_error(e.kind(), e.what());
    return kExitError;
  } catch (const std::exception& e) {
    print_error("internal", e.what());
    return kExitError;
  }
  return kExitError;
}
