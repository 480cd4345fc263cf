// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>

#include "fabgpt/autograd.hpp"
#include "fabgpt/params.hpp"

namespace fabgpt {

// Binarized per-pixel decision, detached from the graph.
struct MaskTensor {
  Tensor probs;        // [2,H,W]; channel 0 normal, channel 1 defect
  Tensor binary;       // [H,W] in {0,1}; ties go to 0
  Tensor anomaly_map;  // [H,W] = probs[1]
};

struct DetectionParams {
  ag::Var dec_w[4];  // conv3x3 weights
  ag::Var dec_b[4];
  ag::Var head_w;  // conv1x1 [2, C_last]
  ag::Var head_b;  // [2]
  ag::Var proj_w;  // [1, D] mask-token embedding of the pooled anomaly scalar
  ag::Var proj_b;  // [D]

  static DetectionParams create(ParamStore& store, std::size_t d_model, std::uint64_t seed);
  static constexpr std::size_t kWidths[4] = {32, 32, 16, 16};
};

struct DetectOut {
  ag::Var probs;    // [H*W, 2] per-pixel class probabilities
  ag::Var anomaly;  // [H,W] defect-channel probability
  MaskTensor mask;  // detached snapshot incl. argmax binarization
};

// t_img: [n_e + g*g, D] enhanced image tokens (first n_e rows are prompt
// rows and carry no grid position); t_txt: [N_t, D]. Fusion gates each image
// token by the mean of its similarity row against all text tokens, then the
// g*g grid decodes through four upsample+conv stages to [H,W].
DetectOut detect(const ag::Var& t_img, const ag::Var& t_txt, const DetectionParams& p,
                 std::size_t n_e, std::size_t height, std::size_t width);

// Last leg of detect: per-pixel softmax over [2,H,W] logits plus the argmax
// binarization (ties to normal). Exposed so the logit gradient can be probed
// directly.
DetectOut finalize_logits(const ag::Var& logits, std::size_t height, std::size_t width);

// Average-pools the anomaly map to the g*g latent grid and linearly embeds
// each pooled scalar to a D-vector: one mask token per grid cell.
ag::Var project_mask(const ag::Var& anomaly, const DetectionParams& p, std::size_t grid);

}  // namespace fabgpt
