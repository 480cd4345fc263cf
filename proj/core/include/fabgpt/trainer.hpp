// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fabgpt/checkpoint.hpp"
#include "fabgpt/pipeline.hpp"

namespace fabgpt {

// lr = lr_final + 0.5 (lr_init - lr_final)(1 + cos(pi step / total)).
// The endpoints return lr_init and lr_final exactly. total_steps = 0 throws
// InputError.
double cosine_lr(std::size_t step, std::size_t total_steps, double lr_init, double lr_final);

// Decoupled-weight-decay adaptive moments, one (m, v) pair per parameter.
// t counts completed updates and drives the bias correction.
struct AdamState {
  std::uint64_t t = 0;
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;
};

// One update from the gradients currently on the store's parameters.
// Parameters and moments are re-quantized to f32 after the step.
void adamw_step(ParamStore& store, AdamState& opt, double lr, double beta1, double beta2,
                double weight_decay);

struct TrainStepLog {
  std::size_t step = 0;
  char tag = 'A';
  double lr = 0.0;
  double focal = 0.0;
  double dice = 0.0;
  double ce1 = 0.0;
  double ce2 = 0.0;
  double total = 0.0;
};

struct TrainResult {
  std::size_t total_steps = 0;
  std::vector<TrainStepLog> log;
  std::string checkpoint_path;  // empty when out_dir was empty
};

// The joint training loop: batches alternate A,A,B; tag-A batches cycle the
// shuffled train split (detection losses on every image, PM and one Q&A pair
// on defect images), tag-B batches pair a blank image with general facts.
// Writes run_config.json, train_log.jsonl, and checkpoint.fabgpt under
// out_dir (pass "" to skip the artifacts). Throws NumericError naming the
// term and step if a loss goes non-finite.
TrainResult train_model(FabGptModel& m, const synth::DatasetManifest& manifest,
                        const std::string& manifest_dir, const std::string& out_dir);

// Everything the optimizer ever touches plus the frozen encoder tensors.
Checkpoint snapshot_training(FabGptModel& m, const AdamState& opt, std::uint64_t step);

// Restores parameter values, moments, and the step counter into a model
// built from the same config. Shape or vocabulary mismatch throws
// FormatError.
void restore_training(FabGptModel& m, AdamState& opt, const Checkpoint& c);

}  // namespace fabgpt
