// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "fabgpt/enhancement.hpp"
#include "fabgpt/errors.hpp"
#include "fabgpt/rng.hpp"

using namespace fabgpt;
using namespace fabgpt::ag;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t.at(i) = scale * rng.gaussian();
  return t;
}

// Straight-line oracle of the prediction module: pooled image feature and
// label rows through the shared affine+ReLU, cosines, softmax, max.
struct PmOracle {
  std::vector<double> softmax_p;
  double p_n;
  std::size_t argmax;
};

PmOracle pm_oracle(const Tensor& v_img, const Tensor& v_lab, const Tensor& w, const Tensor& b) {
  const std::size_t d_in = v_img.cols(), d_pm = w.cols(), c = v_lab.rows();
  std::vector<double> pooled(d_in, 0.0);
  for (std::size_t i = 0; i < v_img.rows(); ++i)
    for (std::size_t j = 0; j < d_in; ++j) pooled[j] += v_img.at2(i, j);
  for (auto& v : pooled) v /= static_cast<double>(v_img.rows());

  auto project = [&](const std::vector<double>& x) {
    std::vector<double> out(d_pm);
    for (std::size_t j = 0; j < d_pm; ++j) {
      double acc = b.at(j);
      for (std::size_t i = 0; i < d_in; ++i) acc += x[i] * w.at2(i, j);
      out[j] = std::max(0.0, acc);
    }
    return out;
  };
  std::vector<double> f_img = project(pooled);

  std::vector<double> p(c);
  for (std::size_t k = 0; k < c; ++k) {
    std::vector<double> row(d_in);
    for (std::size_t j = 0; j < d_in; ++j) row[j] = v_lab.at2(k, j);
    std::vector<double> f_lab = project(row);
    double uu = 0.0, vv = 0.0, uv = 0.0;
    for (std::size_t j = 0; j < d_pm; ++j) {
      uu += f_img[j] * f_img[j];
      vv += f_lab[j] * f_lab[j];
      uv += f_img[j] * f_lab[j];
    }
    p[k] = (std::sqrt(uu) < 1e-12 || std::sqrt(vv) < 1e-12) ? 0.0 : uv / std::sqrt(uu * vv);
  }
  double mx = p[0];
  for (double v : p) mx = std::max(mx, v);
  double sum = 0.0;
  PmOracle o;
  o.softmax_p.resize(c);
  for (std::size_t k = 0; k < c; ++k) {
    o.softmax_p[k] = std::exp(p[k] - mx);
    sum += o.softmax_p[k];
  }
  o.p_n = 0.0;
  o.argmax = 0;
  for (std::size_t k = 0; k < c; ++k) {
    o.softmax_p[k] /= sum;
    if (o.softmax_p[k] > o.p_n) {
      o.p_n = o.softmax_p[k];
      o.argmax = k;
    }
  }
  return o;
}

}  // namespace

TEST_CASE("pm_predict matches the scalar oracle on random inputs") {
  Rng rng(41);
  for (int trial = 0; trial < 5; ++trial) {
    ParamStore store;
    PmParams pm = PmParams::create(store, 8, 8, 1000 + trial);
    Tensor v_img = random_tensor({6, 8}, rng);
    Tensor v_lab = random_tensor({5, 8}, rng);
    PmOut out = pm_predict(v_img, v_lab, pm);
    PmOracle o = pm_oracle(v_img, v_lab, pm.w->value, pm.b->value);
    double sum = 0.0;
    for (std::size_t k = 0; k < 5; ++k) {
      CHECK(out.softmax_p->value.at(k) == doctest::Approx(o.softmax_p[k]).epsilon(1e-10));
      CHECK(out.p_raw->value.at(k) >= -1.0 - 1e-9);
      CHECK(out.p_raw->value.at(k) <= 1.0 + 1e-9);
      sum += out.softmax_p->value.at(k);
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(out.p_n->value.item() == doctest::Approx(o.p_n).epsilon(1e-10));
    CHECK(out.predicted_label == o.argmax);
  }
}

TEST_CASE("identical direction scores cosine 1, orthogonal rows score 0") {
  // Identity projection, zero bias: f_img equals the pooled image row.
  ParamStore store;
  PmParams pm;
  Tensor eye({4, 4});
  for (int i = 0; i < 4; ++i) eye.at2(i, i) = 1.0;
  pm.w = store.add("enhancement/pm/w", eye);
  pm.b = store.add("enhancement/pm/b", Tensor({4}, 0.0));

  Tensor v_img({1, 4});
  v_img.at2(0, 2) = 1.0;  // aligns with label row 2
  Tensor v_lab({4, 4});
  v_lab.at2(0, 0) = 1.0;
  v_lab.at2(1, 1) = 1.0;
  v_lab.at2(2, 2) = 1.0;
  v_lab.at2(3, 3) = 1.0;
  PmOut out = pm_predict(v_img, v_lab, pm);
  CHECK(out.p_raw->value.at(2) == doctest::Approx(1.0).epsilon(1e-12));
  for (std::size_t k : {0u, 1u, 3u}) CHECK(out.p_raw->value.at(k) == doctest::Approx(0.0));
  CHECK(out.predicted_label == 2);
}

TEST_CASE("all-zero similarities give a uniform softmax") {
  ParamStore store;
  PmParams pm;
  pm.w = store.add("enhancement/pm/w", Tensor({4, 4}, 0.0));
  pm.b = store.add("enhancement/pm/b", Tensor({4}, 0.0));
  Rng rng(42);
  Tensor v_img = random_tensor({3, 4}, rng);
  Tensor v_lab = random_tensor({4, 4}, rng);
  // Zero projection makes every feature zero; the zero-norm convention turns
  // every cosine into 0, so the softmax is uniform and P_n = 1/C.
  PmOut out = pm_predict(v_img, v_lab, pm);
  for (std::size_t k = 0; k < 4; ++k)
    CHECK(out.softmax_p->value.at(k) == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(out.p_n->value.item() == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("pm gradients reach the projection parameters") {
  ParamStore store;
  PmParams pm = PmParams::create(store, 6, 6, 7);
  Rng rng(45);
  Tensor v_img = random_tensor({4, 6}, rng);
  Tensor v_lab = random_tensor({3, 6}, rng);
  PmOut out = pm_predict(v_img, v_lab, pm);
  // Precondition: the ReLU feature must not be fully dead, otherwise every
  // cosine sits on its zero-norm guard and the gradient is zero by contract.
  double raw_mag = 0.0;
  for (std::size_t k = 0; k < 3; ++k) raw_mag += std::fabs(out.p_raw->value.at(k));
  REQUIRE(raw_mag > 1e-9);
  backward(out.p_n);
  REQUIRE(pm.w->grad_alloc);
  double mag = 0.0;
  for (std::size_t i = 0; i < pm.w->grad.size(); ++i) mag += std::fabs(pm.w->grad.at(i));
  CHECK(mag > 0.0);
}

TEST_CASE("apply_confidence scales both matrices and preserves direction") {
  Rng rng(44);
  Tensor img = random_tensor({3, 4}, rng);
  Tensor txt = random_tensor({2, 4}, rng);

  Var one = constant(Tensor::scalar(1.0));
  auto [i1, t1] = apply_confidence(one, img, txt);
  for (std::size_t i = 0; i < img.size(); ++i) CHECK(i1->value.at(i) == img.at(i));
  for (std::size_t i = 0; i < txt.size(); ++i) CHECK(t1->value.at(i) == txt.at(i));

  Var q = constant(Tensor::scalar(0.25));
  Tensor ones({2, 2}, 1.0);
  auto [i2, t2] = apply_confidence(q, ones, ones);
  for (std::size_t i = 0; i < 4; ++i) CHECK(i2->value.at(i) == doctest::Approx(0.25));

  auto [i3, t3] = apply_confidence(q, img, txt);
  for (std::size_t r = 0; r < img.rows(); ++r) {
    double uu = 0.0, vv = 0.0, uv = 0.0;
    for (std::size_t j = 0; j < img.cols(); ++j) {
      uu += img.at2(r, j) * img.at2(r, j);
      vv += i3->value.at2(r, j) * i3->value.at2(r, j);
      uv += img.at2(r, j) * i3->value.at2(r, j);
    }
    CHECK(uv / std::sqrt(uu * vv) == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("expert initialization is guided, deterministic, and seed-sensitive") {
  Rng rng(45);
  Tensor guide = random_tensor({5, 6}, rng);
  ParamStore s1, s2, s3;
  PromptExpert a = init_expert(s1, "enhancement/expert_img/prompts", guide, 4, 99);
  PromptExpert b = init_expert(s2, "enhancement/expert_img/prompts", guide, 4, 99);
  PromptExpert c = init_expert(s3, "enhancement/expert_img/prompts", guide, 4, 100);

  REQUIRE(a.prompts->value.rows() == 4);
  for (std::size_t i = 0; i < a.prompts->value.size(); ++i) {
    CHECK(a.prompts->value.at(i) == a.guide_snapshot.at(i));
    CHECK(a.prompts->value.at(i) == b.prompts->value.at(i));
  }
  std::size_t diffs = 0;
  for (std::size_t i = 0; i < a.prompts->value.size(); ++i)
    diffs += (a.prompts->value.at(i) != c.prompts->value.at(i));
  CHECK(diffs > 0);
}

TEST_CASE("expert branch forward is pure concatenation") {
  Rng rng(46);
  Tensor guide = random_tensor({5, 6}, rng);
  ParamStore store;
  PromptExpert e = init_expert(store, "enhancement/expert_img/prompts", guide, 4, 7);
  Var v = constant(random_tensor({16, 6}, rng));
  Var t = expert_branch_forward(e, v);
  REQUIRE(t->value.rows() == 20);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 6; ++j) CHECK(t->value.at2(i, j) == e.prompts->value.at2(i, j));
  for (std::size_t i = 0; i < 16; ++i)
    for (std::size_t j = 0; j < 6; ++j) CHECK(t->value.at2(4 + i, j) == v->value.at2(i, j));

  Var bad = constant(random_tensor({3, 7}, rng));
  CHECK_THROWS_AS(expert_branch_forward(e, bad), InputError);
}

TEST_CASE("prompt rows change under a gradient step while passthrough rows do not") {
  Rng rng(47);
  Tensor guide = random_tensor({5, 6}, rng);
  ParamStore store;
  PromptExpert e = init_expert(store, "enhancement/expert_img/prompts", guide, 2, 7);
  Tensor vt = random_tensor({4, 6}, rng);
  Var v = constant(vt);
  Var t = expert_branch_forward(e, v);
  backward(mean_all(mul(t, t)));
  REQUIRE(e.prompts->grad_alloc);

  // Mimic one SGD step on the prompts only.
  for (std::size_t i = 0; i < e.prompts->value.size(); ++i)
    e.prompts->value.at(i) -= 0.1 * e.prompts->grad.at(i);
  Var t2 = expert_branch_forward(e, constant(vt));
  std::size_t changed = 0;
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 6; ++j)
      changed += (t2->value.at2(i, j) != e.guide_snapshot.at2(i, j));
  CHECK(changed > 0);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 6; ++j) CHECK(t2->value.at2(2 + i, j) == vt.at2(i, j));
}
