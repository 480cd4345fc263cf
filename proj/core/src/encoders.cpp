// SPDX-License-Identifier: Apache-2.0
#include "fabgpt/encoders.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "fabgpt/errors.hpp"
#include "fabgpt/rng.hpp"

namespace fabgpt {

namespace {
Tensor gaussian_init(std::vector<std::size_t> shape, Rng& rng, double sigma) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t.at(i) = sigma * rng.gaussian();
  return t;
}
}  // namespace

FrozenEncoders::FrozenEncoders(EncoderConfig cfg, const Vocabulary& vocab)
    : cfg_(cfg), vocab_(vocab) {
  const std::size_t d = cfg_.d_model, ps = cfg_.patch;
  if (cfg_.image_height % ps != 0 || cfg_.image_width % ps != 0)
    throw ConfigError("encoder patch size must divide image dimensions");
  const std::size_t nv = num_patches();
  const double sw = 1.0 / std::sqrt(static_cast<double>(d));

  Rng rng(Rng::mix(cfg_.seed, 0xE0C0DE));
  patch_w_ = gaussian_init({ps * ps, d}, rng, 1.0 / static_cast<double>(ps));
  patch_b_ = gaussian_init({d}, rng, 0.02);
  img_pos_ = gaussian_init({nv, d}, rng, 0.1);
  for (auto& b : img_blocks_) {
    b.wq = gaussian_init({d, d}, rng, sw);
    b.wk = gaussian_init({d, d}, rng, sw);
    b.wv = gaussian_init({d, d}, rng, sw);
    b.wo = gaussian_init({d, d}, rng, sw);
    b.mlp_w1 = gaussian_init({d, 2 * d}, rng, sw);
    b.mlp_b1 = gaussian_init({2 * d}, rng, 0.02);
    b.mlp_w2 = gaussian_init({2 * d, d}, rng, sw);
    b.mlp_b2 = gaussian_init({d}, rng, 0.02);
  }
  tok_emb_ = gaussian_init({vocab.size(), d}, rng, 0.5);
  txt_pos_ = gaussian_init({cfg_.max_text_tokens, d}, rng, 0.1);
  txt_block_.wq = gaussian_init({d, d}, rng, sw);
  txt_block_.wk = gaussian_init({d, d}, rng, sw);
  txt_block_.wv = gaussian_init({d, d}, rng, sw);
  txt_block_.wo = gaussian_init({d, d}, rng, sw);
  txt_block_.mlp_w1 = gaussian_init({d, 2 * d}, rng, sw);
  txt_block_.mlp_b1 = gaussian_init({2 * d}, rng, 0.02);
  txt_block_.mlp_w2 = gaussian_init({2 * d, d}, rng, sw);
  txt_block_.mlp_b2 = gaussian_init({d}, rng, 0.02);
}

std::size_t FrozenEncoders::num_patches() const {
  return (cfg_.image_height / cfg_.patch) * (cfg_.image_width / cfg_.patch);
}

// Single-head attention plus a tanh MLP, both with residuals, restricted to
// the first valid_rows rows; rows beyond valid_rows pass through untouched.
void FrozenEncoders::run_block(Tensor& x, const Block& b, std::size_t valid_rows) const {
  const std::size_t n = valid_rows, d = x.cols();
  if (n == 0) return;
  Tensor sub({n, d});
  std::copy(x.data(), x.data() + n * d, sub.data());
  Tensor q = matmul(sub, b.wq), k = matmul(sub, b.wk), v = matmul(sub, b.wv);
  const double inv = 1.0 / std::sqrt(static_cast<double>(d));
  Tensor att({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -1e300;
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < d; ++p) s += q.at2(i, p) * k.at2(j, p);
      att.at2(i, j) = s * inv;
      mx = std::max(mx, att.at2(i, j));
    }
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      att.at2(i, j) = std::exp(att.at2(i, j) - mx);
      sum += att.at2(i, j);
    }
    for (std::size_t j = 0; j < n; ++j) att.at2(i, j) /= sum;
  }
  Tensor mixed = matmul(att, v);
  Tensor attn_out = matmul(mixed, b.wo);
  for (std::size_t i = 0; i < n * d; ++i) sub.at(i) += attn_out.at(i);

  Tensor h = matmul(sub, b.mlp_w1);
  for (std::size_t i = 0; i < h.rows(); ++i)
    for (std::size_t j = 0; j < h.cols(); ++j) h.at2(i, j) = std::tanh(h.at2(i, j) + b.mlp_b1.at(j));
  Tensor m2 = matmul(h, b.mlp_w2);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) sub.at2(i, j) += m2.at2(i, j) + b.mlp_b2.at(j);

  std::copy(sub.data(), sub.data() + n * d, x.data());
}

Tensor FrozenEncoders::encode_image(const Tensor& image) const {
  if (image.rank() != 2 || image.rows() != cfg_.image_height || image.cols() != cfg_.image_width)
    throw InputError("encode_image: image dimensions do not match encoder config");
  const std::size_t ps = cfg_.patch, d = cfg_.d_model;
  const std::size_t gy = cfg_.image_height / ps, gx = cfg_.image_width / ps;
  Tensor x({gy * gx, d});
  for (std::size_t py = 0; py < gy; ++py)
    for (std::size_t px = 0; px < gx; ++px) {
      const std::size_t row = py * gx + px;
      for (std::size_t j = 0; j < d; ++j) {
        double acc = patch_b_.at(j);
        for (std::size_t iy = 0; iy < ps; ++iy)
          for (std::size_t ix = 0; ix < ps; ++ix)
            acc += image.at2(py * ps + iy, px * ps + ix) * patch_w_.at2(iy * ps + ix, j);
        x.at2(row, j) = acc + img_pos_.at2(row, j);
      }
    }
  for (const auto& b : img_blocks_) run_block(x, b, x.rows());
  return x;
}

Tensor FrozenEncoders::encode_text(const std::string& text) const {
  const std::size_t d = cfg_.d_model, cap = cfg_.max_text_tokens;
  std::vector<std::size_t> ids = vocab_.encode(text);
  if (ids.size() > cap) ids.resize(cap);
  Tensor x({cap, d});
  for (std::size_t i = 0; i < cap; ++i) {
    const std::size_t tok = i < ids.size() ? ids[i] : Vocabulary::kPad;
    for (std::size_t j = 0; j < d; ++j) x.at2(i, j) = tok_emb_.at2(tok, j);
    if (i < ids.size())
      for (std::size_t j = 0; j < d; ++j) x.at2(i, j) += txt_pos_.at2(i, j);
  }
  run_block(x, txt_block_, ids.size());
  return x;
}

Tensor FrozenEncoders::encode_labels(const std::vector<std::string>& labels) const {
  if (labels.size() < 2) throw InputError("encode_labels: need at least 2 labels");
  std::set<std::string> seen;
  for (const auto& l : labels)
    if (!seen.insert(l).second) throw InputError("encode_labels: duplicate label: " + l);
  const std::size_t d = cfg_.d_model;
  Tensor out({labels.size(), d});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    std::vector<std::size_t> ids = vocab_.encode(labels[i]);
    if (ids.empty()) ids.push_back(Vocabulary::kUnk);
    for (std::size_t j = 0; j < d; ++j) {
      double acc = 0.0;
      for (std::size_t t : ids) acc += tok_emb_.at2(t, j);
      out.at2(i, j) = acc / static_cast<double>(ids.size());
    }
    double norm = 0.0;
    for (std::size_t j = 0; j < d; ++j) norm += out.at2(i, j) * out.at2(i, j);
    norm = std::sqrt(norm);
    if (norm < 1e-12) throw NumericError("encode_labels: zero-norm label row");
    for (std::size_t j = 0; j < d; ++j) out.at2(i, j) /= norm;
  }
  return out;
}

std::vector<std::pair<std::string, Tensor*>> FrozenEncoders::param_table() {
  std::vector<std::pair<std::string, Tensor*>> t;
  t.emplace_back("frozen/img/patch_w", &patch_w_);
  t.emplace_back("frozen/img/patch_b", &patch_b_);
  t.emplace_back("frozen/img/pos", &img_pos_);
  for (int i = 0; i < 2; ++i) {
    const std::string p = "frozen/img/blk" + std::to_string(i) + "/";
    Block& b = img_blocks_[i];
    t.emplace_back(p + "wq", &b.wq);
    t.emplace_back(p + "wk", &b.wk);
    t.emplace_back(p + "wv", &b.wv);
    t.emplace_back(p + "wo", &b.wo);
    t.emplace_back(p + "mlp_w1", &b.mlp_w1);
    t.emplace_back(p + "mlp_b1", &b.mlp_b1);
    t.emplace_back(p + "mlp_w2", &b.mlp_w2);
    t.emplace_back(p + "mlp_b2", &b.mlp_b2);
  }
  t.emplace_back("frozen/txt/emb", &tok_emb_);
  t.emplace_back("frozen/txt/pos", &txt_pos_);
  t.emplace_back("frozen/txt/blk0/wq", &txt_block_.wq);
  t.emplace_back("frozen/txt/blk0/wk", &txt_block_.wk);
  t.emplace_back("frozen/txt/blk0/wv", &txt_block_.wv);
  t.emplace_back("frozen/txt/blk0/wo", &txt_block_.wo);
  t.emplace_back("frozen/txt/blk0/mlp_w1", &txt_block_.mlp_w1);
  t.emplace_back("frozen/txt/blk0/mlp_b1", &txt_block_.mlp_b1);
  t.emplace_back("frozen/txt/blk0/mlp_w2", &txt_block_.mlp_w2);
  t.emplace_back("frozen/txt/blk0/mlp_b2", &txt_block_.mlp_b2);
  return t;
}

}  // namespace fabgpt
