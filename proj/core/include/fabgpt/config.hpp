// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>

#include "fabgpt/encoders.hpp"
#include "fabgpt/modulation.hpp"
#include "fabgpt/objectives.hpp"
#include "fabgpt/wafersynth.hpp"
#include "json.hpp"

namespace fabgpt {

struct ModelConfig {
  std::size_t d_pm = 32;       // prediction-module projection width
  std::size_t n_experts = 4;   // prompt rows per expert branch
  std::size_t d_key = 64;      // attention key width in the modulation stack
  std::size_t d_llm = 64;      // language-model width
  std::size_t lm_blocks = 2;
  std::size_t max_seq = 128;
};

struct TrainSettings {
  double lr_init = 1e-4;
  double lr_final = 1e-6;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.01;
  std::size_t batch_size = 8;
  std::size_t epochs = 10;
  // 0 derives epochs * ceil(train_images / batch_size); nonzero pins the
  // step count exactly (schedule audits use this).
  std::size_t total_steps = 0;
  // When true, text-only batches keep the gate in the training path, which
  // is what teaches the corrector to shut on unrelated questions. When
  // false they run with the gate forced to zero.
  bool gate_on_corpus_b = true;
};

struct AblationConfig {
  bool use_pm = true;
  bool use_experts = true;
  bool use_qformer_stack = true;
  bool use_corrector = true;
  InstructionFormat instruction_format = InstructionFormat::kGated;
};

struct RunConfig {
  int version = 1;
  std::uint64_t seed = 0;
  synth::GenConfig generation;
  EncoderConfig encoder;
  ModelConfig model;
  TrainSettings train;
  LossConfig loss;
  AblationConfig ablation;
  std::string facts_file = "data/general_facts.txt";

  void validate() const;  // throws ConfigError
};

// Strict parse: unknown keys are rejected naming their full path, absent keys
// keep the defaults. Throws ConfigError/FormatError.
RunConfig config_from_json(const nlohmann::json& j);

// Full effective-config echo, suitable for run artifacts.
nlohmann::json config_to_json(const RunConfig& cfg);

// Reads and parses a JSON config file. Throws IoError when unreadable.
RunConfig load_run_config(const std::string& path);

// FABGPT_SEED overrides cfg.seed when set; malformed values throw ConfigError.
void apply_env_overrides(RunConfig& cfg);

const char* instruction_format_name(InstructionFormat f);
InstructionFormat instruction_format_from_name(const std::string& name);

}  // namespace fabgpt
