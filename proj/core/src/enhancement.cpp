// SPDX-License-Identifier: Apache-2.0
#include "fabgpt/enhancement.hpp"

#include <cmath>

#include "fabgpt/errors.hpp"
#include "fabgpt/rng.hpp"

namespace fabgpt {

using namespace ag;

PmParams PmParams::create(ParamStore& store, std::size_t d_in, std::size_t d_pm,
                          std::uint64_t seed) {
  Rng rng(Rng::mix(seed, 0x9D));
  Tensor w({d_in, d_pm});
  const double sigma = 1.0 / std::sqrt(static_cast<double>(d_in));
  for (std::size_t i = 0; i < w.size(); ++i) w.at(i) = sigma * rng.gaussian();
  Tensor b({d_pm}, 0.01);
  PmParams p;
  p.w = store.add("enhancement/pm/w", std::move(w));
  p.b = store.add("enhancement/pm/b", std::move(b));
  return p;
}

PmOut pm_predict(const Tensor& v_img_clip, const Tensor& v_lab_clip, const PmParams& pm) {
  const std::size_t c = v_lab_clip.rows();
  if (c < 2) throw InputError("pm_predict: need at least 2 label rows");
  if (v_img_clip.cols() != pm.w->value.rows() || v_lab_clip.cols() != pm.w->value.rows())
    throw InputError("pm_predict: feature width does not match projection");

  Var img_tokens = constant(v_img_clip);
  Var pooled = reshape(mean_over_rows(img_tokens), {1, v_img_clip.cols()});
  Var f_img = relu(add_rowvec(matmul(pooled, pm.w), pm.b));       // [1, D_pm]
  Var f_lab = relu(add_rowvec(matmul(constant(v_lab_clip), pm.w), pm.b));  // [C, D_pm]

  Var f_img_vec = reshape(f_img, {f_img->value.cols()});
  std::vector<Var> sims;
  sims.reserve(c);
  for (std::size_t i = 0; i < c; ++i) {
    Var row = reshape(slice_rows(f_lab, i, i + 1), {f_lab->value.cols()});
    sims.push_back(reshape(cosine(f_img_vec, row), {1, 1}));
  }
  PmOut out;
  Var p_col = concat_rows(sims);           // [C,1]
  out.p_raw = transpose(p_col);            // [1,C]
  out.softmax_p = softmax_rows(out.p_raw);  // [1,C]
  out.p_n = max_entry(out.softmax_p);
  std::size_t best = 0;
  for (std::size_t i = 1; i < c; ++i)
    if (out.softmax_p->value.at(i) > out.softmax_p->value.at(best)) best = i;
  out.predicted_label = best;
  return out;
}

std::pair<Var, Var> apply_confidence(const Var& p_n, const Tensor& v_img_clip,
                                     const Tensor& v_txt_clip) {
  return {smul(p_n, constant(v_img_clip)), smul(p_n, constant(v_txt_clip))};
}

PromptExpert init_expert(ParamStore& store, const std::string& name, const Tensor& v_clip,
                         std::size_t n_e, std::uint64_t seed) {
  if (n_e == 0) throw ConfigError("init_expert: N_e must be at least 1");
  const std::size_t d = v_clip.cols();
  Tensor mean({d});
  for (std::size_t i = 0; i < v_clip.rows(); ++i)
    for (std::size_t j = 0; j < d; ++j) mean.at(j) += v_clip.at2(i, j);
  for (std::size_t j = 0; j < d; ++j) mean.at(j) /= static_cast<double>(v_clip.rows());

  Rng rng(Rng::mix(seed, 0xE1));
  PromptExpert e;
  e.z = Tensor({n_e, d});
  for (std::size_t i = 0; i < e.z.size(); ++i) e.z.at(i) = rng.gaussian();
  Tensor init({n_e, d});
  for (std::size_t i = 0; i < n_e; ++i)
    for (std::size_t j = 0; j < d; ++j) init.at2(i, j) = e.z.at2(i, j) * mean.at(j);
  init.quantize_f32();
  e.guide_snapshot = init;
  e.prompts = store.add(name, std::move(init));
  return e;
}

Var expert_branch_forward(const PromptExpert& expert, const Var& v) {
  if (expert.prompts->value.cols() != v->value.cols())
    throw InputError("expert_branch_forward: width mismatch");
  return concat_rows({expert.prompts, v});
}

}  // namespace fabgpt
