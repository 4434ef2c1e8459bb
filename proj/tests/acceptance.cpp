// Acceptance run on the desk setup: one PASS/FAIL line per criterion.
// Exit status is 0 iff every criterion passes.

#include <boost/math/distributions/binomial.hpp>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>

#include "gradsigns/gradsigns.hpp"

using namespace gradsigns;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(int id, const std::string& name, const Outcome& o) {
  std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << " (" << name << "): " << o.detail << std::endl;
  if (!o.pass) ++failures;
}

template <typename F>
void criterion(int id, const std::string& name, F&& body) {
  try {
    report(id, name, body());
  } catch (const std::exception& e) {
    report(id, name, {false, std::string("error: ") + e.what()});
  }
}

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(6);
  s << v;
  return s.str();
}

// Rows of a bundle CSV as column -> text.
std::vector<std::map<std::string, std::string>> read_csv(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw Error("io", "missing table " + p.string());
  std::string line;
  std::getline(in, line);
  auto cells = [](const std::string& l) {
    std::vector<std::string> out;
    std::stringstream ss(l);
    std::string c;
    while (std::getline(ss, c, ',')) out.push_back(c);
    return out;
  };
  const auto header = cells(line);
  std::vector<std::map<std::string, std::string>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto v = cells(line);
    std::map<std::string, std::string> row;
    for (std::size_t i = 0; i < header.size() && i < v.size(); ++i) row[header[i]] = v[i];
    rows.push_back(std::move(row));
  }
  return rows;
}

double num(const std::map<std::string, std::string>& row, const std::string& col) { return std::stod(row.at(col)); }
bool flag(const std::map<std::string, std::string>& row, const std::string& col) { return row.at(col) == "true"; }

// Pascal-triangle threshold in 128-bit integers: the largest eta with
// sum_{k<=eta} C(n,k) * 1000 < 3 * 2^n.
int pascal_eta(int n) {
  std::vector<unsigned __int128> row{1};
  for (int i = 1; i <= n; ++i) {
    std::vector<unsigned __int128> next(static_cast<std::size_t>(i) + 1, 1);
    for (int k = 1; k < i; ++k) next[static_cast<std::size_t>(k)] = row[static_cast<std::size_t>(k) - 1] + row[static_cast<std::size_t>(k)];
    row = std::move(next);
  }
  unsigned __int128 sum = 0;
  int eta = -1;
  for (int k = 0; k <= n; ++k) {
    sum += row[static_cast<std::size_t>(k)];
    if (sum * 1000 >= (static_cast<unsigned __int128>(3) << n)) break;
    eta = k;
  }
  return eta;
}

// Max over coordinates of |a - n| / max(|a|, |n|, floor), floor = 1e-3 * max|a|.
double max_relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric) {
  double scale = 0.0;
  for (const double a : analytic) scale = std::max(scale, std::abs(a));
  const double floor = 1e-3 * scale;
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double d = std::max({std::abs(analytic[i]), std::abs(numeric[i]), floor});
    if (d > 0.0) worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / d);
  }
  return worst;
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path out = argc > 1 ? fs::path(argv[1]) : fs::path("acceptance-out");
  const std::vector<std::size_t> bits{16, 32, 64};
  const double tau = 3e-3;

  // 1. Threshold exactness.
  criterion(1, "threshold exactness", [&] {
    const auto t0 = Clock::now();
    bool ok = true;
    std::string d;
    const int want_correct[] = {14, 25, 44};
    for (std::size_t i = 0; i < bits.size(); ++i) {
      const int eta = error_threshold(bits[i], tau);
      const int oracle = pascal_eta(static_cast<int>(bits[i]));
      ok = ok && eta == oracle && static_cast<int>(bits[i]) - eta == want_correct[i];
      d += "N=" + std::to_string(bits[i]) + " eta=" + std::to_string(eta) + " oracle=" + std::to_string(oracle) +
           " min_correct=" + std::to_string(static_cast<int>(bits[i]) - eta) + "; ";
    }
    const double s = seconds_since(t0);
    return Outcome{ok && s < 1.0, d + "runtime " + fmt(s) + " s"};
  });

  ExperimentSpec spec;
  spec.dataset.path = GRADSIGNS_DATA_DIR;
  spec.output_dir = out.string();
  const bool have_data = fs::exists(fs::path(GRADSIGNS_DATA_DIR) / "train-images-idx3-ubyte.gz") ||
                         fs::exists(fs::path(GRADSIGNS_DATA_DIR) / "train-images-idx3-ubyte");

  // 2. Gradient correctness on a 2-layer desk MLP.
  criterion(2, "gradient correctness", [&]() -> Outcome {
    if (!have_data) return {false, "digit archive not found in " + std::string(GRADSIGNS_DATA_DIR)};
    const auto t0 = Clock::now();
    const DeskData data = load_desk_data(spec.dataset, 1);
    const Model m0 = build_model(mlp_config(28, 28, 1, 128, 10, 5));
    TrainConfig tc = desk_train_config();
    tc.epochs = 2;
    const Model model = train(m0, data.train, tc).model;
    const WatermarkKey key = generate_key_random(64, 384, 784, 10, 9);
    const Dataset batch = data.test.head(16);
    const Dataset ksamples = data.train.of_class(key.target_class).head(32);

    // dJ_ce/dx over every pixel of one batch.
    ad::Graph g;
    const ad::NodeId x = g.input("x"), y = g.input("y");
    std::vector<ad::NodeId> leaves;
    for (const auto& p : model.params()) leaves.push_back(g.input(p.name));
    const ad::NodeId ce = g.softmax_xent(model_logits(g, model.config(), x, leaves), y);
    const ad::NodeId dx = g.grad(ce, {x})[0];
    ad::Bindings b;
    for (std::size_t i = 0; i < leaves.size(); ++i) b.bind(leaves[i], model.params()[i].value);
    const Tensor batch_y = one_hot(batch.labels, 10);
    b.bind(x, batch.images);
    b.bind(y, batch_y);
    const Tensor gx = ad::forward(g, b, {dx})[dx];
    std::vector<double> ax(gx.data().begin(), gx.data().end()), nx(ax.size());
    const double hx = 1e-6;
    for (std::size_t i = 0; i < ax.size(); ++i) {
      Tensor up = batch.images, down = batch.images;
      up[i] += hx;
      down[i] -= hx;
      nx[i] = (cross_entropy(model.predict(up), batch.labels) - cross_entropy(model.predict(down), batch.labels)) / (2 * hx);
    }
    const double ex = max_relative_error(ax, nx);

    // dJ_emb/dtheta through the input gradient (second order).
    ad::Graph h;
    const ad::NodeId xw = h.input("xw"), yw = h.input("yw");
    std::vector<ad::NodeId> th;
    for (const auto& p : model.params()) th.push_back(h.input(p.name));
    const ad::NodeId cew = h.softmax_xent(model_logits(h, model.config(), xw, th), yw);
    const ad::NodeId G = h.sum_axis0(h.gather_cols(h.grad(cew, {xw})[0], key.carriers));
    const ad::NodeId emb = embedding_loss_node(h, G, key);
    const auto dth = h.grad(emb, th);
    ad::Bindings bw;
    for (std::size_t i = 0; i < th.size(); ++i) bw.bind(th[i], model.params()[i].value);
    const Tensor ksamples_y = one_hot(ksamples.labels, 10);
    bw.bind(xw, ksamples.images);
    bw.bind(yw, ksamples_y);
    const ad::Evaluation ev = ad::forward(h, bw, dth);

    auto j_emb = [&](const Model& mm) { return embedding_loss(mean_input_gradient(mm, ksamples, key.carriers), key); };
    std::vector<double> at, nt;
    Rng pick(17);
    const double ht = 1e-6;
    for (std::size_t t = 0; t < model.params().size(); ++t) {
      const std::size_t n = model.params()[t].value.size();
      for (int r = 0; r < 40; ++r) {
        const std::size_t i = static_cast<std::size_t>(pick() % n);
        Model up = model, down = model;
        up.params()[t].value[i] += ht;
        down.params()[t].value[i] -= ht;
        at.push_back(ev[dth[t]][i]);
        nt.push_back((j_emb(up) - j_emb(down)) / (2 * ht));
      }
    }
    const double et = max_relative_error(at, nt);
    const double s = seconds_since(t0);
    return {ex < 1e-5 && et < 1e-3 && s < 60.0, "dJce/dx max rel err " + fmt(ex) + " over " + std::to_string(ax.size()) +
                                                     " coords; dJemb/dtheta max rel err " + fmt(et) + " over " +
                                                     std::to_string(at.size()) + " coords; runtime " + fmt(s) + " s"};
  });

  // Full desk experiment; criteria 3 and 5-12 read its tables.
  ExperimentResult exp;
  double experiment_seconds = 0.0;
  if (have_data) {
    const auto t0 = Clock::now();
    exp = run_experiment(spec, [&](const std::string& msg) {
      std::cout << "  [" << fmt(seconds_since(t0)) << " s] " << msg << std::endl;
    });
    experiment_seconds = seconds_since(t0);
    std::cout << "  experiment bundle " << exp.directory.string() << " (" << exp.manifest.at("status").get<std::string>()
              << ", " << fmt(experiment_seconds) << " s)" << std::endl;
  }
  auto stage_seconds = [&](const std::string& name) {
    return exp.manifest.contains("timings_seconds") && exp.manifest["timings_seconds"].contains(name)
               ? exp.manifest["timings_seconds"][name].get<double>()
               : -1.0;
  };
  auto table = [&](const std::string& name) {
    if (!have_data) throw Error("io", "digit archive not found in " + std::string(GRADSIGNS_DATA_DIR));
    return read_csv(out / name);
  };

  // 3. Embedding capacity.
  criterion(3, "embedding capacity", [&] {
    bool ok = true;
    std::string d;
    for (const auto& r : table("capacity.csv")) {
      const bool row_ok = num(r, "besr") == 1.0 && num(r, "accuracy_drop") <= 0.02;
      ok = ok && row_ok;
      d += "N=" + r.at("bits") + " besr=" + r.at("besr") + " drop=" + fmt(100 * num(r, "accuracy_drop")) +
           "pt lambda=" + r.at("lambda") + "; ";
    }
    const double s = stage_seconds("baseline") + stage_seconds("embedding");
    return Outcome{ok && s >= 0.0 && s <= 900.0, d + "runtime " + fmt(s) + " s"};
  });

  // 4. Black-box equals white-box, with exact query accounting.
  criterion(4, "black-box = white-box", [&]() -> Outcome {
    if (!have_data) return {false, "digit archive not found"};
    const auto t0 = Clock::now();
    bool ok = true;
    std::string d;
    for (const std::size_t n : bits) {
      const auto model = std::make_shared<const Model>(load_checkpoint(out / ("model_" + std::to_string(n) + ".gsck")));
      const WatermarkKey key = load_key(out / ("key_" + std::to_string(n) + ".json"));
      const DeskData data = load_desk_data(spec.dataset, spec.seed);
      const Dataset s = data.train.of_class(key.target_class).head(50);
      ModelOracle oracle(model);
      const auto bb = blackbox_estimate_gradient(oracle, key, s, 1e-4);
      const auto wb = whitebox_expected_gradient(*model, key, s);
      const std::uint64_t want = 50 * (key.carrier_count() + 1);
      const bool same = extract_watermark(bb, key) == extract_watermark(wb, key);
      ok = ok && same && bb.query_count == want && oracle.queries_served() == want;
      d += "N=" + std::to_string(n) + " identical=" + (same ? "yes" : "no") + " queries=" +
           std::to_string(oracle.queries_served()) + "/" + std::to_string(want) + "; ";
    }
    const double sec = seconds_since(t0);
    return {ok && sec < 300.0, d + "runtime " + fmt(sec) + " s"};
  });

  // 5. Reliability: null models and the Monte Carlo false-positive rate.
  criterion(5, "null models and FPR", [&] {
    const auto rows = table("null_models.csv");
    std::size_t verified = 0;
    double ber_sum = 0.0;
    for (const auto& r : rows) {
      verified += flag(r, "verified");
      ber_sum += num(r, "ber");
    }
    std::set<std::string> models;
    for (const auto& r : rows) models.insert(r.at("model"));
    const double mean_ber = ber_sum / static_cast<double>(rows.size());
    bool ok = verified == 0 && models.size() == 20 && mean_ber >= 0.4 && mean_ber <= 0.6;
    std::string d = std::to_string(models.size()) + " null models, " + std::to_string(verified) + " of " +
                    std::to_string(rows.size()) + " checks verified, mean BER " + fmt(mean_ber) + "; ";

    const auto t0 = Clock::now();
    const std::size_t trials = 100000;
    for (const std::size_t n : bits) {
      Rng rng(7000 + n);
      std::size_t hits = 0;
      for (std::size_t t = 0; t < trials; ++t) {
        const auto key = generate_key_random(n, 16, 64, 10, rng());
        std::vector<double> g(16);
        for (double& v : g) v = standard_normal(rng);
        hits += verify(g, key, {tau}).verified;
      }
      using boost::math::binomial_distribution;
      const double lo = binomial_distribution<>::find_lower_bound_on_p(static_cast<double>(trials), static_cast<double>(hits), 0.025);
      const double hi = binomial_distribution<>::find_upper_bound_on_p(static_cast<double>(trials), static_cast<double>(hits), 0.025);
      ok = ok && hi < tau;
      d += "N=" + std::to_string(n) + " FPR " + fmt(static_cast<double>(hits) / trials) + " 95% CI [" + fmt(lo) + ", " +
           fmt(hi) + "]; ";
    }
    const double s = stage_seconds("null_models") + seconds_since(t0);
    return Outcome{ok && s <= 1800.0, d + std::to_string(trials) + " pairs per N; runtime " + fmt(s) + " s"};
  });

  // 6. Pruning plus fine-tuning grid.
  criterion(6, "pruning + fine-tuning", [&] {
    bool ok = true;
    std::string d;
    for (const auto& r : table("pruning_summary.csv")) {
      ok = ok && flag(r, "all_retained_verified") && num(r, "cells") == 30;
      d += "N=" + r.at("bits") + " retained " + r.at("retained_cells") + "/" + r.at("cells") + " min wm acc " +
           r.at("min_retained_watermark_accuracy") + " all verified=" + r.at("all_retained_verified") + "; ";
    }
    const double s = stage_seconds("pruning");
    return Outcome{ok && s >= 0.0 && s <= 3600.0, d + "runtime " + fmt(s) + " s"};
  });

  // 7. Quantization.
  criterion(7, "8-bit quantization", [&] {
    bool ok = false;
    std::string d;
    for (const auto& r : table("quantization.csv")) {
      d += "N=" + r.at("bits") + " errors " + r.at("n_error") + "/eta " + r.at("eta") + " verified=" + r.at("verified") + "; ";
      if (r.at("bits") == "64") ok = num(r, "n_error") <= num(r, "eta") && flag(r, "verified");
    }
    return Outcome{ok, d};
  });

  // 8. Adversarial fine-tuning at the attack learning rate.
  criterion(8, "adversarial fine-tuning", [&] {
    bool ok = false;
    std::string d;
    for (const auto& r : table("adversarial.csv")) {
      d += "N=" + r.at("bits") + " lr " + r.at("learning_rate") + " errors " + r.at("n_error") + "/eta " + r.at("eta") +
           " verified=" + r.at("verified") + "; ";
      if (r.at("bits") == "64" && num(r, "learning_rate") == spec.attacks.adversarial.learning_rate)
        ok = num(r, "n_error") <= num(r, "eta") && flag(r, "verified") && num(r, "epochs") == 5;
    }
    return Outcome{ok, d + "(criterion uses lr " + fmt(spec.attacks.adversarial.learning_rate) + ")"};
  });

  // 9. Score rounding.
  criterion(9, "score rounding", [&] {
    bool ok = true;
    std::string d;
    for (const auto& r : table("rounding.csv")) {
      const bool small_h = num(r, "h") < 1e-3;
      const bool row_ok = small_h ? num(r, "n_error") > num(r, "eta") : num(r, "n_error") <= num(r, "eta") && flag(r, "verified");
      ok = ok && row_ok;
      d += "N=" + r.at("bits") + " h=" + r.at("h") + " errors " + r.at("n_error") + "/eta " + r.at("eta") + "; ";
    }
    return Outcome{ok, d};
  });

  // 10. Score perturbation.
  criterion(10, "score perturbation", [&] {
    bool ok = true;
    std::string d;
    for (const auto& r : table("perturbation_summary.csv")) {
      ok = ok && num(r, "mean_watermark_accuracy") > num(r, "threshold_accuracy") && num(r, "verified_fraction") >= 0.9 &&
           num(r, "runs") == 50;
      d += "N=" + r.at("bits") + " mean wm acc " + r.at("mean_watermark_accuracy") + " > " + r.at("threshold_accuracy") +
           ", verified " + r.at("verified_fraction") + "; ";
    }
    // Invariants on fuzzed probability rows.
    Rng data(11), gen(12);
    std::size_t violations = 0, touched = 0;
    const std::size_t fuzz = 100000;
    for (std::size_t t = 0; t < fuzz; ++t) {
      std::vector<double> p(10);
      double s = 0.0;
      const double temp = 0.5 + 6.0 * uniform01(data);
      for (double& v : p) s += (v = std::exp(temp * standard_normal(data)));
      if (t % 10 == 0) {  // exercise ties
        p[3] = p[7];
        s = std::accumulate(p.begin(), p.end(), 0.0);
      }
      for (double& v : p) v /= s;
      const std::vector<double> before = p;
      touched += perturb_scores(std::span<double>(p), 3, 1e-5, gen) > 0.0;
      std::vector<std::size_t> ob(10), oa(10);
      std::iota(ob.begin(), ob.end(), std::size_t{0});
      std::iota(oa.begin(), oa.end(), std::size_t{0});
      std::stable_sort(ob.begin(), ob.end(), [&](std::size_t a, std::size_t b) { return before[a] > before[b]; });
      std::stable_sort(oa.begin(), oa.end(), [&](std::size_t a, std::size_t b) { return p[a] > p[b]; });
      double sum = 0.0;
      for (const double v : p) sum += v;
      bool bad = std::abs(sum - 1.0) > 1e-12;
      for (int k = 0; k < 3; ++k) bad = bad || oa[static_cast<std::size_t>(k)] != ob[static_cast<std::size_t>(k)];
      violations += bad;
    }
    ok = ok && violations == 0;
    return Outcome{ok, d + "invariant violations " + std::to_string(violations) + " in " + std::to_string(fuzz) +
                           " fuzzed rows (" + std::to_string(touched) + " perturbed)"};
  });

  // 11. Input noise.
  criterion(11, "input noise", [&] {
    bool ok = true;
    std::string d;
    std::map<std::string, double> clean;
    for (const auto& r : table("capacity.csv")) clean[r.at("bits")] = num(r, "marked_accuracy");
    std::size_t flagged = 0;
    for (const auto& r : table("noise.csv")) {
      const double sigma = num(r, "sigma");
      if (sigma <= 0.005) ok = ok && flag(r, "verified");
      const bool should_retain = num(r, "noisy_accuracy") >= spec.attacks.retention * clean.at(r.at("bits"));
      ok = ok && flag(r, "retained") == should_retain;
      flagged += !flag(r, "retained");
      d += "N=" + r.at("bits") + " s=" + r.at("sigma") + (flag(r, "verified") ? " ok" : " fail") +
           (flag(r, "retained") ? "" : "(flagged)") + "; ";
    }
    return Outcome{ok, d + std::to_string(flagged) + " rows flagged by the retention rule"};
  });

  // 12. Forging.
  criterion(12, "forging", [&] {
    bool ok = true;
    std::map<std::string, std::size_t> trials;
    std::string d;
    for (const auto& r : table("forging.csv")) {
      ok = ok && num(r, "besr_heldout") < 1.0 && num(r, "per_class") <= 0.1 * static_cast<double>(spec.dataset.train_per_class);
      ++trials[r.at("bits")];
      d += "N=" + r.at("bits") + " lambda " + r.at("lambda") + " besr " + r.at("besr_heldout") + "; ";
    }
    for (const auto& [n, c] : trials) ok = ok && c == 3;
    return Outcome{ok && trials.size() == 3, d};
  });

  // 13. Protocol soundness and remote = in-process.
  criterion(13, "protocol soundness", [&]() -> Outcome {
    Rng r(13);
    std::size_t mismatches = 0;
    const std::size_t fuzz = 100000;
    for (std::size_t t = 0; t < fuzz; ++t) {
      std::vector<double> v(r() % 12);
      for (double& x : v) {
        switch (r() % 4) {
          case 0: x = uniform01(r); break;
          case 1: x = std::ldexp(standard_normal(r), static_cast<int>(r() % 2000) - 1000); break;
          case 2: x = std::bit_cast<double>(r()); if (!std::isfinite(x)) x = -0.0; break;
          default: x = static_cast<double>(static_cast<std::int64_t>(r() % 2001) - 1000); break;
        }
      }
      const std::uint64_t id = r();
      bool same = true;
      if (t % 2 == 0) {
        const wire::Request q{id, v};
        const wire::Request back = wire::decode_request(wire::encode(q));
        same = back.id == q.id && back.input.size() == v.size();
        for (std::size_t i = 0; same && i < v.size(); ++i)
          same = std::bit_cast<std::uint64_t>(back.input[i]) == std::bit_cast<std::uint64_t>(v[i]);
      } else {
        const wire::Response s{id, v, std::nullopt};
        const wire::Response back = wire::decode_response(wire::encode(s));
        same = back.id == s.id && !back.error && back.probs.size() == v.size();
        for (std::size_t i = 0; same && i < v.size(); ++i)
          same = std::bit_cast<std::uint64_t>(back.probs[i]) == std::bit_cast<std::uint64_t>(v[i]);
      }
      mismatches += !same;
    }
    std::string d = std::to_string(mismatches) + " mismatches in " + std::to_string(fuzz) + " fuzzed messages; ";
    if (!have_data) return {false, d + "digit archive not found"};

    const auto model = std::make_shared<const Model>(load_checkpoint(out / "model_64.gsck"));
    const WatermarkKey key = load_key(out / "key_64.json");
    const DeskData data = load_desk_data(spec.dataset, spec.seed);
    const Dataset s = data.train.of_class(key.target_class).head(50);
    PredictionServer server(model, {});
    server.start();
    RemoteOracle remote({"127.0.0.1", server.port()}, model->config().input_shape(), model->config().num_classes);
    ModelOracle local(model);
    const auto rr = report_to_json(verify_estimate(blackbox_estimate_gradient(remote, key, s, 1e-4), key, {tau}));
    const auto lr = report_to_json(verify_estimate(blackbox_estimate_gradient(local, key, s, 1e-4), key, {tau}));
    server.stop();
    const bool identical = rr == lr;
    d += std::string("remote and in-process reports ") + (identical ? "identical" : "differ") + " (verified=" +
         (rr.at("verified").get<bool>() ? "true" : "false") + ")";
    return {mismatches == 0 && identical, d};
  });

  std::cout << (failures == 0 ? "ALL CRITERIA PASS" : std::to_string(failures) + " CRITERIA FAIL") << std::endl;
  return failures == 0 ? 0 : 1;
}
