// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "fabgpt/autograd.hpp"

namespace fabgpt {

struct LossConfig {
  double gamma = 2.0;
  double alpha = 1.0;    // focal
  double beta = 1.0;     // dice
  double delta = 1.0;    // classification cross-entropy
  double epsilon = 1.0;  // language-model cross-entropy
};

// -mean (1-p)^gamma * log(p), with p clamped below at 1e-7. p_correct holds
// the probability of the correct class at every pixel.
ag::Var focal_loss(const ag::Var& p_correct, double gamma);

// -sum(y*y_hat) / (sum(y^2) + sum(y_hat^2) + 1e-7), exactly as the overlap
// objective is written: no factor 2, so a perfect binary match scores -0.5.
ag::Var dice_loss(const ag::Var& y, const Tensor& y_hat);

// -mean over rows of log(probs[row, target[row]]), probabilities clamped at
// 1e-7. Covers both the single-vector case (one row) and token sequences.
ag::Var cross_entropy_probs(const ag::Var& probs, const std::vector<std::size_t>& targets);

ag::Var total_loss(const ag::Var& focal, const ag::Var& dice, const ag::Var& ce1,
                   const ag::Var& ce2, const LossConfig& cfg);

}  // namespace fabgpt
