// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "doctest.h"
#include "fabgpt/errors.hpp"
#include "fabgpt/trainer.hpp"
#include "json.hpp"

using namespace fabgpt;

namespace {

RunConfig tiny_config() {
  RunConfig cfg;
  cfg.seed = 11;
  cfg.generation.count_good = 6;
  cfg.generation.count_hole = 3;
  cfg.generation.count_particle = 3;
  cfg.generation.count_scratch = 3;
  cfg.generation.count_deformation = 3;
  cfg.model.d_pm = 16;
  cfg.model.n_experts = 2;
  cfg.model.d_key = 32;
  cfg.model.d_llm = 32;
  cfg.model.lm_blocks = 1;
  cfg.train.batch_size = 2;
  cfg.train.total_steps = 6;
  cfg.facts_file = std::string(FABGPT_DATA_DIR) + "/general_facts.txt";
  cfg.generation.seed = cfg.seed;
  return cfg;
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& name) : path("tmp_" + name) {
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

bool same_tensor(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a.at(i) != b.at(i)) return false;
  return true;
}

}  // namespace

TEST_CASE("cosine schedule hits its endpoints exactly") {
  CHECK(cosine_lr(0, 100, 1e-4, 1e-6) == 1e-4);
  CHECK(cosine_lr(100, 100, 1e-4, 1e-6) == 1e-6);
  CHECK(cosine_lr(50, 100, 1e-4, 1e-6) == doctest::Approx(5.05e-5).epsilon(1e-12));

  // Quarter point against the closed form.
  const double want = 1e-6 + 0.5 * (1e-4 - 1e-6) * (1.0 + std::cos(M_PI * 0.25));
  CHECK(cosine_lr(25, 100, 1e-4, 1e-6) == doctest::Approx(want).epsilon(1e-15));

  CHECK_THROWS_AS(cosine_lr(0, 0, 1e-4, 1e-6), InputError);
  CHECK_THROWS_AS(cosine_lr(5, 4, 1e-4, 1e-6), InputError);
}

TEST_CASE("adamw matches a straight-line oracle") {
  ParamStore store;
  Tensor init({3}, 0.0);
  init.at(0) = 1.0;
  init.at(1) = -2.0;
  init.at(2) = 0.5;
  ag::Var p = store.add("w", init);

  const double lr = 0.1, b1 = 0.9, b2 = 0.999, wd = 0.01;
  std::vector<double> grads = {0.3, -0.7, 0.0};
  std::vector<double> om(3, 0.0), ov(3, 0.0), op = {1.0, -2.0, 0.5};

  AdamState opt;
  for (int t = 1; t <= 3; ++t) {
    ag::grad_buf(*p);
    for (std::size_t i = 0; i < 3; ++i) p->grad.at(i) = grads[i];
    adamw_step(store, opt, lr, b1, b2, wd);

    for (std::size_t i = 0; i < 3; ++i) {
      om[i] = b1 * om[i] + (1 - b1) * grads[i];
      ov[i] = b2 * ov[i] + (1 - b2) * grads[i] * grads[i];
      const double mh = om[i] / (1 - std::pow(b1, t));
      const double vh = ov[i] / (1 - std::pow(b2, t));
      op[i] -= lr * (mh / (std::sqrt(vh) + 1e-8) + wd * op[i]);
      op[i] = static_cast<double>(static_cast<float>(op[i]));
      CHECK(p->value.at(i) == doctest::Approx(op[i]).epsilon(1e-12));
    }
    for (std::size_t i = 0; i < 3; ++i) grads[i] *= -0.5;  // vary the stream
  }
  CHECK(opt.t == 3);

  // Zero gradient still decays the weight.
  ParamStore store2;
  ag::Var q = store2.add("w", Tensor({1}, 2.0));
  AdamState opt2;
  adamw_step(store2, opt2, 0.1, b1, b2, 0.5);
  const double decayed = static_cast<double>(static_cast<float>(2.0 - 0.1 * 0.5 * 2.0));
  CHECK(q->value.at(0) == decayed);
}

TEST_CASE("training run logs the exact alternation and schedule") {
  RunConfig cfg = tiny_config();
  TempDir dir("trainer_run");
  const auto manifest = synth::generate_dataset(cfg.generation, dir.path.string());
  FabGptModel m = build_model(cfg);

  const auto frozen_before = [&] {
    std::vector<Tensor> copy;
    for (auto& [name, t] : m.encoders.param_table()) copy.push_back(*t);
    return copy;
  }();

  TrainResult r = train_model(m, manifest, dir.path.string(), (dir.path / "out").string());
  REQUIRE(r.total_steps == 6);
  REQUIRE(r.log.size() == 6);

  std::string tags;
  for (const auto& row : r.log) tags.push_back(row.tag);
  CHECK(tags == "AABAAB");
  const auto want = alternation_schedule(6);
  for (std::size_t i = 0; i < 6; ++i) CHECK(r.log[i].tag == want[i]);

  CHECK(r.log[0].lr == 1e-4);  // exact endpoint
  CHECK(r.log[5].lr > 1e-6);
  CHECK(r.log[5].lr < r.log[0].lr);
  for (const auto& row : r.log) CHECK(std::isfinite(row.total));

  // B-steps carry no classification term.
  CHECK(r.log[2].ce1 == 0.0);
  CHECK(r.log[5].ce1 == 0.0);

  // Artifacts: config echo and one json line per step.
  std::ifstream cfg_in(dir.path / "out" / "run_config.json");
  REQUIRE(cfg_in.good());
  nlohmann::json echo;
  cfg_in >> echo;
  CHECK(echo["seed"] == 11);
  CHECK(echo["train"]["total_steps"] == 6);

  std::ifstream log_in(dir.path / "out" / "train_log.jsonl");
  std::string line;
  std::size_t rows = 0;
  while (std::getline(log_in, line)) {
    const nlohmann::json j = nlohmann::json::parse(line);
    CHECK(j["step"] == rows);
    CHECK(j["tag"] == std::string(1, r.log[rows].tag));
    CHECK(j["total"] == doctest::Approx(r.log[rows].total).epsilon(1e-15));
    ++rows;
  }
  CHECK(rows == 6);

  // The frozen encoders never move.
  std::size_t k = 0;
  for (auto& [name, t] : m.encoders.param_table()) CHECK(same_tensor(*t, frozen_before[k++]));

  CHECK(std::filesystem::exists(r.checkpoint_path));
}

TEST_CASE("training is deterministic in the seed") {
  RunConfig cfg = tiny_config();
  cfg.train.total_steps = 4;
  TempDir dir("trainer_det");
  const auto manifest = synth::generate_dataset(cfg.generation, dir.path.string());

  auto run = [&](std::uint64_t seed) {
    RunConfig c = cfg;
    c.seed = seed;
    FabGptModel m = build_model(c);
    return train_model(m, manifest, dir.path.string(), "");
  };

  const TrainResult a = run(11);
  const TrainResult b = run(11);
  REQUIRE(a.log.size() == b.log.size());
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    CHECK(a.log[i].total == b.log[i].total);
    CHECK(a.log[i].focal == b.log[i].focal);
    CHECK(a.log[i].ce2 == b.log[i].ce2);
  }

  const TrainResult c = run(12);
  bool any_diff = false;
  for (std::size_t i = 0; i < a.log.size(); ++i)
    if (a.log[i].total != c.log[i].total) any_diff = true;
  CHECK(any_diff);
}

TEST_CASE("non-finite losses abort with the term and step") {
  RunConfig cfg = tiny_config();
  cfg.train.total_steps = 2;
  TempDir dir("trainer_nan");
  const auto manifest = synth::generate_dataset(cfg.generation, dir.path.string());
  FabGptModel m = build_model(cfg);
  m.store.get("detection/head/w")->value.at(0) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_WITH_AS(train_model(m, manifest, dir.path.string(), ""),
                       "non-finite dice loss at step 0", NumericError);
}

TEST_CASE("zero epochs with no pinned steps is rejected") {
  RunConfig cfg = tiny_config();
  cfg.train.total_steps = 0;
  cfg.train.epochs = 0;
  TempDir dir("trainer_zero");
  const auto manifest = synth::generate_dataset(cfg.generation, dir.path.string());
  FabGptModel m = build_model(cfg);
  CHECK_THROWS_AS(train_model(m, manifest, dir.path.string(), ""), ConfigError);
}

TEST_CASE("checkpoint restores training bit-exactly") {
  RunConfig cfg = tiny_config();
  cfg.train.total_steps = 2;
  TempDir dir("trainer_ckpt");
  const auto manifest = synth::generate_dataset(cfg.generation, dir.path.string());
  FabGptModel m = build_model(cfg);
  TrainResult r = train_model(m, manifest, dir.path.string(), (dir.path / "out").string());

  const Checkpoint c = load_checkpoint(r.checkpoint_path);
  CHECK(c.step == 2);

  RunConfig cfg2 = config_from_json(c.config);
  FabGptModel m2 = build_model(cfg2);
  AdamState opt2;
  restore_training(m2, opt2, c);
  CHECK(opt2.t == 2);
  for (const auto& name : m.store.names())
    CHECK(same_tensor(m.store.get(name)->value, m2.store.get(name)->value));

  // A fresh snapshot of the restored state reproduces the file contents.
  const Checkpoint again = snapshot_training(m2, opt2, opt2.t);
  REQUIRE(again.tensors.size() == c.tensors.size());
  for (std::size_t i = 0; i < c.tensors.size(); ++i) {
    CHECK(again.tensors[i].first == c.tensors[i].first);
    CHECK(same_tensor(again.tensors[i].second, c.tensors[i].second));
  }

  // Behaviour carries across the round trip.
  const auto sample = synth::load_sample(dir.path.string(), manifest.test.front());
  SampleForward f1 = forward_detection(m, sample.image, synth::extract_text_marks(sample));
  SampleForward f2 = forward_detection(m2, sample.image, synth::extract_text_marks(sample));
  CHECK(answer_question(m, f1, "is there a defect?", -1.0) ==
        answer_question(m2, f2, "is there a defect?", -1.0));

  // Tampering is caught.
  Checkpoint bad = c;
  bad.vocab_tokens.push_back("extra");
  AdamState opt3;
  FabGptModel m3 = build_model(cfg2);
  CHECK_THROWS_AS(restore_training(m3, opt3, bad), FormatError);

  Checkpoint missing = c;
  missing.tensors.erase(missing.tensors.begin());
  CHECK_THROWS_AS(restore_training(m3, opt3, missing), FormatError);
}
