// SPDX-License-Identifier: Apache-2.0
#include "fabgpt/objectives.hpp"

#include <cmath>

#include "fabgpt/errors.hpp"

namespace fabgpt {

using namespace ag;

Var focal_loss(const Var& p_correct, double gamma) {
  if (p_correct->value.size() == 0) throw InputError("focal_loss: empty input");
  Var p = clamp_min(p_correct, 1e-7);
  Var weight = powc(affine(p, -1.0, 1.0), gamma);
  return neg(mean_all(mul(weight, log_(p))));
}

Var dice_loss(const Var& y, const Tensor& y_hat) {
  if (!y->value.same_shape(y_hat)) throw InputError("dice_loss: shape mismatch");
  double target_sq = 0.0;
  for (std::size_t i = 0; i < y_hat.size(); ++i) target_sq += y_hat.at(i) * y_hat.at(i);
  Var num = sum_all(mul(y, constant(y_hat)));
  Var den = add(sum_all(powc(y, 2.0)), constant(Tensor::scalar(target_sq + 1e-7)));
  return neg(div(num, den));
}

Var cross_entropy_probs(const Var& probs, const std::vector<std::size_t>& targets) {
  if (probs->value.rank() != 2) throw InputError("cross_entropy_probs: expected [rows, classes]");
  if (targets.size() != probs->value.rows())
    throw InputError("cross_entropy_probs: target count mismatch");
  for (std::size_t t : targets)
    if (t >= probs->value.cols()) throw InputError("cross_entropy_probs: target index out of range");
  Var picked = pick_per_row(probs, targets);
  return neg(mean_all(log_(clamp_min(picked, 1e-7))));
}

Var total_loss(const Var& focal, const Var& dice, const Var& ce1, const Var& ce2,
               const LossConfig& cfg) {
  const struct {
    const char* name;
    const Var& v;
  } terms[] = {{"focal", focal}, {"dice", dice}, {"ce1", ce1}, {"ce2", ce2}};
  for (const auto& t : terms)
    if (!std::isfinite(t.v->value.item()))
      throw NumericError(std::string("total_loss: non-finite term ") + t.name);
  return add(add(scale(focal, cfg.alpha), scale(dice, cfg.beta)),
             add(scale(ce1, cfg.delta), scale(ce2, cfg.epsilon)));
}

}  // namespace fabgpt
