// Marks a small model on synthetic data and verifies it in both settings.

#include <iostream>

#include "gradsigns/gradsigns.hpp"

using namespace gradsigns;

int main() {
  const Dataset all = make_synthetic(4, 300, {8, 8, 1}, 7);
  const auto parts = split(all, {0.8, 0.2}, 8);
  const Dataset& train_set = parts[0];
  const Dataset& test_set = parts[1];

  const WatermarkKey key = generate_key_from_message("quickstart owner", 16, 24, train_set.sample_size(), train_set.class_count);
  const Model init = build_model(mlp_config(8, 8, 1, 32, train_set.class_count, 3));

  TrainConfig cfg;
  cfg.epochs = 15;
  cfg.lambda = 0.05;
  cfg.seed = 4;
  const Model marked = train(init, train_set, cfg, &key).model;
  std::cout << "test accuracy " << accuracy(marked, test_set) << "\n";

  const Dataset samples = train_set.of_class(key.target_class);
  const auto white = verify_estimate(whitebox_expected_gradient(marked, key, samples), key, {});

  ModelOracle oracle(std::make_shared<const Model>(marked));
  const auto black = verify_estimate(blackbox_estimate_gradient(oracle, key, samples.head(50), 1e-4), key, {});

  std::cout << "white-box " << report_to_json(white).dump() << "\n";
  std::cout << "black-box " << report_to_json(black).dump() << "\n";
  return white.verified && black.verified ? 0 : 1;
}
