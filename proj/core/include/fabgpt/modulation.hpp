// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <utility>

#include "fabgpt/autograd.hpp"
#include "fabgpt/params.hpp"

namespace fabgpt {

// Alignment machinery between the detection stage and the language model:
// bidirectional self-attention over image/mask tokens, cross-attention with
// text tokens, an FFN lift to the LM width, a learnable corrector gate, and
// prompt-instruction assembly.
struct ModulationParams {
  // Size-1 "1-D convolution" kernels, i.e. per-token linear projections to
  // the key width. The self pair serves both self-attention branches; the
  // cross pair serves the image-text cross-attention.
  ag::Var self_k1, self_k2;    // [D, d_key]
  ag::Var cross_k1, cross_k2;  // [D, d_key]

  ag::Var ffn_w1, ffn_b1;  // [D, 4D], [4D]
  ag::Var ffn_w2, ffn_b2;  // [4D, D_llm], [D_llm]

  ag::Var corr_w, corr_b;  // [D_llm, D_llm], [D_llm]

  // Linear adapters lifting D-wide token blocks to the LM width.
  ag::Var mas_w, mas_b;  // [D, D_llm]
  ag::Var que_w, que_b;  // [D, D_llm]
  ag::Var img_w, img_b;  // [D, D_llm]

  static ModulationParams create(ParamStore& store, std::size_t d_model, std::size_t d_key,
                                 std::size_t d_llm, std::uint64_t seed);
};

struct SelfAttentionOut {
  ag::Var m_img;  // [N, N] row-stochastic
  ag::Var m_mak;  // [N, N] row-stochastic
  ag::Var f_im;   // [N, D]
};

// f_im = ((M_img + M_mak)/2) * t_img with M_img from t_img and M_mak from
// t_mas, both through the shared self kernel pair. t_mas is zero-padded or
// truncated to t_img's row count; widths must already match.
SelfAttentionOut bidirectional_self_attention(const ag::Var& t_img, const ag::Var& t_mas,
                                              const ModulationParams& p);

struct CrossAttentionOut {
  ag::Var m_cross;  // [N_img, N_txt] row-stochastic
  ag::Var f_imt;    // [N_img, D]
};

// f_imt = rowsoftmax((f_im*k1)(t_txt*k2)^T / sqrt(d_key)) * t_txt.
CrossAttentionOut cross_attention(const ag::Var& f_im, const ag::Var& t_txt,
                                  const ModulationParams& p);

// Two affine layers with a ReLU between: [N, D] -> [N, 4D] -> [N, D_llm].
ag::Var ffn_project(const ag::Var& f_imt, const ModulationParams& p);

// Adapters for the instruction blocks, all [N, D] -> [N, D_llm]. The image
// adapter serves both raw patch tokens and enhanced image tokens.
ag::Var adapt_mask_tokens(const ag::Var& t_mas, const ModulationParams& p);
ag::Var adapt_question_tokens(const ag::Var& t_que, const ModulationParams& p);
ag::Var adapt_image_tokens(const ag::Var& t_img, const ModulationParams& p);

struct GateOut {
  ag::Var corrector;  // [D_llm], affine image of mean-pooled t_vis
  ag::Var a;          // scalar in [0, 1]
};

// a = max(0, cosine(corrector, mean-pooled t_que)); zero-norm operands give
// exactly 0. t_que must be non-empty and D_llm wide.
GateOut compute_gate(const ag::Var& t_vis, const ag::Var& t_que, const ModulationParams& p);

enum class InstructionFormat {
  kBaseline,  // ungated [raw image tokens; adapted image tokens; question]
  kGated,     // [a * t_vis; adapted mask tokens; question]
};

struct PromptInstruction {
  ag::Var tokens;  // [N_vis + N_mas + N_que, D_llm]
  // Half-open row ranges, tiling tokens in order visual, mask, question.
  std::array<std::pair<std::size_t, std::size_t>, 3> block_spans;
  InstructionFormat format = InstructionFormat::kGated;
};

// Concatenates the three blocks; the gate multiplies the visual block only,
// and only under the gated format. Width mismatch raises InputError.
PromptInstruction assemble_instruction(const ag::Var& a, const ag::Var& visual,
                                       const ag::Var& mask, const ag::Var& question,
                                       InstructionFormat format);

}  // namespace fabgpt
