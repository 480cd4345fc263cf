// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "fabgpt/config.hpp"
#include "fabgpt/detection.hpp"
#include "fabgpt/enhancement.hpp"
#include "fabgpt/metrics.hpp"
#include "fabgpt/qa.hpp"

namespace fabgpt {

// The full three-stage model: frozen encoders plus every trainable block,
// all parameters registered in one store. Build once per process; the struct
// shares autograd nodes, so treat copies as views.
struct FabGptModel {
  RunConfig cfg;
  Vocabulary vocab;
  Corpora corpora;
  std::vector<std::pair<std::string, std::string>> facts;  // train + held-out
  FrozenEncoders encoders;
  ParamStore store;
  PmParams pm;
  PromptExpert img_expert;
  PromptExpert txt_expert;
  DetectionParams det;
  ModulationParams mod;
  ToyLM lm;
  Tensor label_rows;                        // [4, D] frozen defect-label encodings
  std::vector<std::string> defect_labels;   // underscore names, id order

  std::size_t grid() const { return cfg.generation.height / cfg.encoder.patch; }
  std::size_t expert_rows() const { return cfg.ablation.use_experts ? cfg.model.n_experts : 0; }
};

// Deterministic given cfg and the facts file it names. Expert prompts start
// from seeded guides; reinit_experts_from_guides swaps in dataset-derived
// guides before training.
FabGptModel build_model(const RunConfig& cfg);

// Re-derives both expert prompt blocks from a concrete sample's encodings
// (row i = z_i scaled by the guide's mean feature). Call before training.
void reinit_experts_from_guides(FabGptModel& m, const Tensor& image, const std::string& marks);

struct SampleForward {
  Tensor v_img_clip;     // [g*g, D] raw frozen patch tokens
  PmOut pm;              // valid only when pm_valid
  bool pm_valid = false;
  ag::Var t_img;         // [n_e + g*g, D] enhanced image tokens
  ag::Var t_txt;         // [n_e + N_t, D] enhanced text tokens
  DetectOut det;
  ag::Var mask_tokens;   // [g*g, D] embedding of the pooled anomaly map
  std::size_t n_e = 0;
};

// Stage 1 + 2: encode, classify, scale, enhance, detect, project the mask.
SampleForward forward_detection(FabGptModel& m, const Tensor& image, const std::string& marks);

struct QaForward {
  PromptInstruction instruction;
  ag::Var gate;       // the scalar actually multiplying the visual block
  double gate_value;  // detached copy for logging
};

// Stage 3: modulation stack, gate, and instruction assembly on top of a
// detection forward. force_gate >= 0 pins the gate to that constant (the
// text-only training path); negative computes it (or 1 with the corrector
// disabled).
QaForward forward_instruction(FabGptModel& m, const SampleForward& s,
                              const std::string& question, double force_gate);

// Greedy-decoded answer through the same path.
std::string answer_question(FabGptModel& m, const SampleForward& s, const std::string& question,
                            double force_gate, std::size_t max_len = 16);

Tensor blank_image(const RunConfig& cfg);

// Encodes an answer string to LM targets (appends the end sentinel).
std::vector<std::size_t> answer_ids(const FabGptModel& m, const std::string& answer);

struct EvalOptions {
  bool oracle_masks = false;   // feed ground-truth masks as anomaly maps
  std::string checkpoint_id;
  std::string timestamp;
};

// Detection metrics per defect class (good images are the negatives for the
// image-level score), PM accuracy over defect samples, and the Q&A block on
// held-out template questions plus held-out general questions asked against
// defect images.
struct EvalResult {
  EvalReport report;
  double pm_accuracy = 0.0;        // over defect test samples
  double gate_mean_defect = 0.0;   // mean gate on defect-related questions
  double gate_mean_unrelated = 0.0;
};

EvalResult evaluate(FabGptModel& m, const synth::DatasetManifest& manifest,
                    const std::string& manifest_dir, const EvalOptions& opts);

nlohmann::json eval_result_to_json(const EvalResult& r);

}  // namespace fabgpt
