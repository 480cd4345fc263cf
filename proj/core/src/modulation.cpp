// SPDX-License-Identifier: Apache-2.0
#include "fabgpt/modulation.hpp"

#include <cmath>
#include <string>

#include "fabgpt/errors.hpp"
#include "fabgpt/rng.hpp"

namespace fabgpt {

using ag::Var;

namespace {

Tensor gaussian_init(std::vector<std::size_t> shape, double sigma, Rng& rng) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t.at(i) = sigma * rng.gaussian();
  return t;
}

void require_matrix(const Var& x, const char* what) {
  if (x->value.rank() != 2) throw InputError(std::string(what) + " must be a matrix");
}

void require_width(const Var& x, std::size_t want, const char* what) {
  require_matrix(x, what);
  if (x->value.shape()[1] != want)
    throw InputError(std::string(what) + " width " + std::to_string(x->value.shape()[1]) +
                     ", expected " + std::to_string(want));
}

// rowsoftmax((x*k1)(y*k2)^T / sqrt(d_key))
Var attention_matrix(const Var& x, const Var& y, const Var& k1, const Var& k2) {
  const std::size_t d_key = k1->value.shape()[1];
  Var scores = ag::matmul_nt(ag::matmul(x, k1), ag::matmul(y, k2));
  return ag::softmax_rows(ag::scale(scores, 1.0 / std::sqrt(static_cast<double>(d_key))));
}

}  // namespace

ModulationParams ModulationParams::create(ParamStore& store, std::size_t d_model,
                                          std::size_t d_key, std::size_t d_llm,
                                          std::uint64_t seed) {
  if (d_model == 0 || d_key == 0 || d_llm == 0)
    throw ConfigError("modulation widths must be positive");
  Rng rng(Rng::mix(seed, 0x40D));
  const double s_in = 1.0 / std::sqrt(static_cast<double>(d_model));
  const double s_hid = 1.0 / std::sqrt(static_cast<double>(4 * d_model));
  const double s_llm = 1.0 / std::sqrt(static_cast<double>(d_llm));

  ModulationParams p;
  p.self_k1 = store.add("modulation/self_k1", gaussian_init({d_model, d_key}, s_in, rng));
  p.self_k2 = store.add("modulation/self_k2", gaussian_init({d_model, d_key}, s_in, rng));
  p.cross_k1 = store.add("modulation/cross_k1", gaussian_init({d_model, d_key}, s_in, rng));
  p.cross_k2 = store.add("modulation/cross_k2", gaussian_init({d_model, d_key}, s_in, rng));
  p.ffn_w1 = store.add("modulation/ffn/w1", gaussian_init({d_model, 4 * d_model}, s_in, rng));
  p.ffn_b1 = store.add("modulation/ffn/b1", Tensor({4 * d_model}, 0.0));
  p.ffn_w2 = store.add("modulation/ffn/w2", gaussian_init({4 * d_model, d_llm}, s_hid, rng));
  p.ffn_b2 = store.add("modulation/ffn/b2", Tensor({d_llm}, 0.0));
  p.corr_w = store.add("modulation/corrector/w", gaussian_init({d_llm, d_llm}, s_llm, rng));
  p.corr_b = store.add("modulation/corrector/b", Tensor({d_llm}, 0.01));
  p.mas_w = store.add("modulation/adapt_mas/w", gaussian_init({d_model, d_llm}, s_in, rng));
  p.mas_b = store.add("modulation/adapt_mas/b", Tensor({d_llm}, 0.0));
  p.que_w = store.add("modulation/adapt_que/w", gaussian_init({d_model, d_llm}, s_in, rng));
  p.que_b = store.add("modulation/adapt_que/b", Tensor({d_llm}, 0.0));
  p.img_w = store.add("modulation/adapt_img/w", gaussian_init({d_model, d_llm}, s_in, rng));
  p.img_b = store.add("modulation/adapt_img/b", Tensor({d_llm}, 0.0));
  return p;
}

SelfAttentionOut bidirectional_self_attention(const ag::Var& t_img, const ag::Var& t_mas,
                                              const ModulationParams& p) {
  require_matrix(t_img, "t_img");
  require_width(t_mas, t_img->value.shape()[1], "t_mas");

  const std::size_t n = t_img->value.shape()[0];
  Var mas = t_mas;
  const std::size_t m = t_mas->value.shape()[0];
  if (m > n) {
    mas = ag::slice_rows(t_mas, 0, n);
  } else if (m < n) {
    Tensor pad({n - m, t_img->value.shape()[1]}, 0.0);
    mas = ag::concat_rows({t_mas, ag::constant(pad)});
  }

  SelfAttentionOut out;
  out.m_img = attention_matrix(t_img, t_img, p.self_k1, p.self_k2);
  out.m_mak = attention_matrix(mas, mas, p.self_k1, p.self_k2);
  out.f_im = ag::matmul(ag::scale(ag::add(out.m_img, out.m_mak), 0.5), t_img);
  return out;
}

CrossAttentionOut cross_attention(const ag::Var& f_im, const ag::Var& t_txt,
                                  const ModulationParams& p) {
  require_matrix(f_im, "f_im");
  require_width(t_txt, f_im->value.shape()[1], "t_txt");

  CrossAttentionOut out;
  out.m_cross = attention_matrix(f_im, t_txt, p.cross_k1, p.cross_k2);
  out.f_imt = ag::matmul(out.m_cross, t_txt);
  return out;
}

ag::Var ffn_project(const ag::Var& f_imt, const ModulationParams& p) {
  require_width(f_imt, p.ffn_w1->value.shape()[0], "f_imt");
  Var hidden = ag::relu(ag::add_rowvec(ag::matmul(f_imt, p.ffn_w1), p.ffn_b1));
  return ag::add_rowvec(ag::matmul(hidden, p.ffn_w2), p.ffn_b2);
}

ag::Var adapt_mask_tokens(const ag::Var& t_mas, const ModulationParams& p) {
  require_width(t_mas, p.mas_w->value.shape()[0], "t_mas");
  return ag::add_rowvec(ag::matmul(t_mas, p.mas_w), p.mas_b);
}

ag::Var adapt_question_tokens(const ag::Var& t_que, const ModulationParams& p) {
  require_width(t_que, p.que_w->value.shape()[0], "t_que");
  return ag::add_rowvec(ag::matmul(t_que, p.que_w), p.que_b);
}

ag::Var adapt_image_tokens(const ag::Var& t_img, const ModulationParams& p) {
  require_width(t_img, p.img_w->value.shape()[0], "t_img");
  return ag::add_rowvec(ag::matmul(t_img, p.img_w), p.img_b);
}

GateOut compute_gate(const ag::Var& t_vis, const ag::Var& t_que, const ModulationParams& p) {
  const std::size_t d_llm = p.corr_w->value.shape()[0];
  require_width(t_vis, d_llm, "t_vis");
  // Zero-row tensors are unrepresentable, so t_que is non-empty by construction.
  require_width(t_que, d_llm, "t_que");

  GateOut out;
  Var pooled = ag::reshape(ag::mean_over_rows(t_vis), {1, d_llm});
  out.corrector =
      ag::reshape(ag::add_rowvec(ag::matmul(pooled, p.corr_w), p.corr_b), {d_llm});
  Var q_bar = ag::mean_over_rows(t_que);
  out.a = ag::relu(ag::cosine(out.corrector, q_bar));
  return out;
}

PromptInstruction assemble_instruction(const ag::Var& a, const ag::Var& visual,
                                       const ag::Var& mask, const ag::Var& question,
                                       InstructionFormat format) {
  require_matrix(visual, "visual block");
  const std::size_t width = visual->value.shape()[1];
  require_width(mask, width, "mask block");
  require_width(question, width, "question block");

  PromptInstruction ins;
  ins.format = format;
  Var vis = format == InstructionFormat::kGated ? ag::smul(a, visual) : visual;
  ins.tokens = ag::concat_rows({vis, mask, question});

  const std::size_t n_vis = visual->value.shape()[0];
  const std::size_t n_mas = mask->value.shape()[0];
  const std::size_t n_que = question->value.shape()[0];
  ins.block_spans = {{{0, n_vis}, {n_vis, n_vis + n_mas}, {n_vis + n_mas, n_vis + n_mas + n_que}}};
  return ins;
}

}  // namespace fabgpt
