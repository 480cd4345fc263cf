// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>

#include "fabgpt/autograd.hpp"
#include "fabgpt/params.hpp"

namespace fabgpt {

// Prediction-module parameters: one shared affine projection applied to the
// pooled image feature and to every label row before the cosine comparison.
struct PmParams {
  ag::Var w;  // [D, D_pm]
  ag::Var b;  // [D_pm]

  static PmParams create(ParamStore& store, std::size_t d_in, std::size_t d_pm,
                         std::uint64_t seed);
};

struct PmOut {
  ag::Var p_raw;      // [1, C] cosine similarities, each in [-1, 1]
  ag::Var softmax_p;  // [1, C]
  ag::Var p_n;        // scalar, max(softmax_p)
  std::size_t predicted_label = 0;
};

// v_img_clip and v_lab_clip enter as frozen constants; gradients reach only
// the projection parameters.
PmOut pm_predict(const Tensor& v_img_clip, const Tensor& v_lab_clip, const PmParams& pm);

// Scales both frozen token matrices by the scalar confidence; gradient flows
// through p_n into the projection parameters.
std::pair<ag::Var, ag::Var> apply_confidence(const ag::Var& p_n, const Tensor& v_img_clip,
                                             const Tensor& v_txt_clip);

// A trainable prompt block initialized under the guidance of a frozen token
// matrix: row i = z_i (seeded unit-variance vector) elementwise-scaled by the
// mean-pooled guide feature. The snapshot never changes after construction.
struct PromptExpert {
  ag::Var prompts;        // [N_e, D] trainable
  Tensor guide_snapshot;  // [N_e, D]
  Tensor z;               // [N_e, D]
};

PromptExpert init_expert(ParamStore& store, const std::string& name, const Tensor& v_clip,
                         std::size_t n_e, std::uint64_t seed);

// Row-concatenation [prompts; v]; nothing else.
ag::Var expert_branch_forward(const PromptExpert& expert, const ag::Var& v);

}  // namespace fabgpt
