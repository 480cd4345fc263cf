// SPDX-License-Identifier: Apache-2.0
#include "fabgpt/detection.hpp"

#include <cmath>

#include "fabgpt/errors.hpp"
#include "fabgpt/rng.hpp"

namespace fabgpt {

using namespace ag;

constexpr std::size_t DetectionParams::kWidths[4];

DetectionParams DetectionParams::create(ParamStore& store, std::size_t d_model,
                                        std::uint64_t seed) {
  Rng rng(Rng::mix(seed, 0xDE7EC7));
  DetectionParams p;
  std::size_t cin = d_model;
  for (int s = 0; s < 4; ++s) {
    const std::size_t cout = kWidths[s];
    Tensor w({cout, cin, 3, 3});
    const double sigma = std::sqrt(2.0 / static_cast<double>(cin * 9));
    for (std::size_t i = 0; i < w.size(); ++i) w.at(i) = sigma * rng.gaussian();
    p.dec_w[s] = store.add("detection/dec" + std::to_string(s) + "/w", std::move(w));
    p.dec_b[s] = store.add("detection/dec" + std::to_string(s) + "/b", Tensor({cout}, 0.0));
    cin = cout;
  }
  Tensor hw({2, cin});
  for (std::size_t i = 0; i < hw.size(); ++i) hw.at(i) = 0.05 * rng.gaussian();
  p.head_w = store.add("detection/head/w", std::move(hw));
  p.head_b = store.add("detection/head/b", Tensor({2}, 0.0));

  Tensor pw({1, d_model});
  for (std::size_t i = 0; i < pw.size(); ++i) pw.at(i) = 0.5 * rng.gaussian();
  p.proj_w = store.add("detection/proj/w", std::move(pw));
  p.proj_b = store.add("detection/proj/b", Tensor({d_model}, 0.01));
  return p;
}

DetectOut detect(const Var& t_img, const Var& t_txt, const DetectionParams& p, std::size_t n_e,
                 std::size_t height, std::size_t width) {
  const std::size_t rows = t_img->value.rows();
  const std::size_t d = t_img->value.cols();
  if (t_txt->value.cols() != d) throw InputError("detect: token width mismatch");
  if (rows <= n_e) throw InputError("detect: no grid rows after prompt rows");
  const std::size_t cells = rows - n_e;
  const std::size_t g = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(cells))));
  if (g * g != cells) throw InputError("detect: grid row count is not a perfect square");
  if (g * 16 != height || g * 16 != width)
    throw InputError("detect: grid does not reach the target resolution with 4 upsampling stages");

  // Fusion: similarity of every image token against every text token, mean
  // over text tokens, used as a per-token scalar gate.
  Var sim = matmul_nt(t_img, t_txt);                       // [rows, N_t]
  Var gate = mean_over_rows(transpose(sim));               // [rows]
  Var gated = mul_colvec(t_img, gate);                     // [rows, D]
  Var grid_tokens = slice_rows(gated, n_e, rows);          // [g*g, D]
  Var x = reshape(transpose(grid_tokens), {d, g, g});      // [D, g, g]

  for (int s = 0; s < 4; ++s) x = relu(conv3x3(upsample2x(x), p.dec_w[s], p.dec_b[s]));
  Var logits = conv1x1(x, p.head_w, p.head_b);             // [2, H, W]
  return finalize_logits(logits, height, width);
}

DetectOut finalize_logits(const Var& logits, std::size_t height, std::size_t width) {
  if (logits->value.rank() != 3 || logits->value.dim(0) != 2 || logits->value.dim(1) != height ||
      logits->value.dim(2) != width)
    throw InputError("finalize_logits: expected [2,H,W] logits");
  const std::size_t hw = height * width;
  Var probs = softmax_rows(transpose(reshape(logits, {2, hw})));  // [H*W, 2]
  Var anomaly = reshape(slice_cols(probs, 1, 2), {height, width});

  DetectOut out;
  out.probs = probs;
  out.anomaly = anomaly;
  out.mask.probs = Tensor({2, height, width});
  out.mask.binary = Tensor({height, width});
  out.mask.anomaly_map = anomaly->value;
  for (std::size_t i = 0; i < hw; ++i) {
    const double p0 = probs->value.at2(i, 0);
    const double p1 = probs->value.at2(i, 1);
    out.mask.probs.at(i) = p0;
    out.mask.probs.at(hw + i) = p1;
    out.mask.binary.at(i) = p1 > p0 ? 1.0 : 0.0;  // tie goes to normal
  }
  return out;
}

Var project_mask(const Var& anomaly, const DetectionParams& p, std::size_t grid) {
  const std::size_t h = anomaly->value.rows(), w = anomaly->value.cols();
  if (h % grid != 0 || w % grid != 0) throw InputError("project_mask: grid must divide map dims");
  Var pooled = avgpool2d(anomaly, h / grid);                    // [g,g]
  Var col = reshape(pooled, {grid * grid, 1});                  // [g*g, 1]
  return add_rowvec(matmul(col, p.proj_w), p.proj_b);           // [g*g, D]
}

}  // namespace fabgpt
