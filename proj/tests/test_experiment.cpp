#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "gradsigns/experiment.hpp"

using namespace gradsigns;
namespace fs = std::filesystem;

namespace {

ExperimentSpec tiny_spec(const fs::path& out) {
  const auto j = nlohmann::json::parse(R"({
    "seed": 3,
    "dataset": {"kind": "synthetic", "classes": 4, "n_per_class": 300, "dims": [8, 8, 1]},
    "model": {"kind": "mlp", "hidden": 32},
    "watermark": {"bits": [16], "carriers": [24], "provenance": "message", "message": "tiny"},
    "train": {"epochs": 15, "lambda_candidates": [0.05, 0.1, 0.5]},
    "verification": {"samples": 10},
    "attacks": {"prune_rates": [0.0, 0.5], "adversary_sizes": [10], "fine_tune_epochs": 1,
                "adversarial_epochs": 1, "adversarial_stress": false, "noise_sigmas": [0.01],
                "perturb_runs": 2, "forge_epochs": 1, "forge_per_class": 10, "null_models": 2}
  })");
  ExperimentSpec s = experiment_spec_from_json(j);
  s.output_dir = out.string();
  return s;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Experiment, SpecRoundTrip) {
  const ExperimentSpec s = tiny_spec("x");
  const nlohmann::json j = experiment_spec_to_json(s);
  EXPECT_EQ(experiment_spec_to_json(experiment_spec_from_json(j)), j);
}

TEST(Experiment, BadSpecRejected) {
  EXPECT_THROW(experiment_spec_from_json(nlohmann::json::parse(R"({"watermark": {"bits": [16], "carriers": []}})")),
               Error);
  EXPECT_THROW(experiment_spec_from_json(nlohmann::json::parse(R"({"dataset": {"kind": "floppy"}})")), Error);
  EXPECT_THROW(experiment_spec_from_json(nlohmann::json::parse(R"({"seed": "x"})")), Error);
}

TEST(Experiment, CsvNumberFormat) {
  EXPECT_EQ(format_number(0.1), "0.1");
  EXPECT_EQ(format_number(1.0), "1");
  EXPECT_EQ(format_number(std::nan("")), "nan");
}

TEST(Experiment, RerunGivesIdenticalTables) {
  const fs::path root = fs::temp_directory_path() / ("gs_exp_" + std::to_string(::getpid()));
  const auto a = run_experiment(tiny_spec(root / "a"));
  const auto b = run_experiment(tiny_spec(root / "b"));
  EXPECT_TRUE(a.complete) << a.manifest.dump(2);
  EXPECT_EQ(a.manifest.at("status"), "complete");
  EXPECT_EQ(a.manifest.at("files"), b.manifest.at("files"));
  std::size_t csvs = 0;
  for (const auto& entry : fs::directory_iterator(a.directory)) {
    if (entry.path().extension() != ".csv" && entry.path().extension() != ".json") continue;
    if (entry.path().filename() == "manifest.json") continue;
    csvs += entry.path().extension() == ".csv";
    EXPECT_EQ(slurp(entry.path()), slurp(b.directory / entry.path().filename())) << entry.path();
  }
  EXPECT_GE(csvs, 10u);
  const std::string capacity = slurp(a.directory / "capacity.csv");
  const std::string row = capacity.substr(capacity.find('\n') + 1);
  EXPECT_NE(row.find(",1,14\n"), std::string::npos) << capacity;  // besr 1, 14 correct bits needed
  for (const char* f : {"capacity.csv", "pruning.csv", "noise.csv", "forging.csv", "null_models.csv", "thresholds.csv"})
    EXPECT_TRUE(fs::exists(a.directory / f)) << f;
  fs::remove_all(root);
}
