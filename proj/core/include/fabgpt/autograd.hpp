// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "fabgpt/tensor.hpp"

namespace fabgpt::ag {

// Tape-free reverse-mode autograd. Each op builds a Node holding its value,
// its parents, and a closure that scatters the node's gradient into the
// parents. backward() topo-sorts from the root and runs closures in reverse.
struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  bool grad_alloc = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;
};

using Var = std::shared_ptr<Node>;

Var constant(Tensor v);
Var make_param(Tensor v);  // leaf with requires_grad

// Allocates-and-zeroes the gradient buffer if absent; returns it.
Tensor& grad_buf(Node& n);

// root must be a scalar ([1]). Accumulates into leaf gradients; leaves keep
// whatever was already in their grad buffer, so one graph per optimizer step
// and explicit zeroing between steps.
void backward(const Var& root);

// Elementwise, same shape.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);

Var scale(const Var& a, double c);
Var affine(const Var& a, double k, double c);  // k*a + c
Var neg(const Var& a);

// Scalar Var ([1]) times tensor, broadcast.
Var smul(const Var& s, const Var& a);

Var matmul(const Var& a, const Var& b);
// a [m,k] times b[n,k] transposed -> [m,n].
Var matmul_nt(const Var& a, const Var& b);
Var transpose(const Var& a);

Var add_rowvec(const Var& a, const Var& v);  // [m,n] + [n] per row
Var mul_rowvec(const Var& a, const Var& v);  // [m,n] * [n] per row
Var mul_colvec(const Var& a, const Var& v);  // [m,n] * [m] per column (row scalars)

Var relu(const Var& a);
Var tanh_(const Var& a);
Var clamp_min(const Var& a, double floor);
Var log_(const Var& a);      // input must be positive
Var powc(const Var& a, double p);  // a >= 0

Var softmax_rows(const Var& a);
// Adds a constant bias (e.g. -1e30 at masked slots) before the softmax.
Var softmax_rows_masked(const Var& a, const Tensor& bias);

Var sum_all(const Var& a);
Var mean_all(const Var& a);
Var mean_over_rows(const Var& a);  // [m,n] -> [n]

Var concat_rows(const std::vector<Var>& parts);
Var slice_rows(const Var& a, std::size_t r0, std::size_t r1);
Var slice_cols(const Var& a, std::size_t c0, std::size_t c1);
Var reshape(const Var& a, std::vector<std::size_t> shape);

Var pick_per_row(const Var& a, const std::vector<std::size_t>& ids);
// Max over all entries; gradient routed to the first argmax.
Var max_entry(const Var& a);

Var embed_rows(const Var& table, const std::vector<std::size_t>& ids);

// x [Cin,H,W], w [Cout,Cin,3,3], b [Cout] -> [Cout,H,W], zero padding.
Var conv3x3(const Var& x, const Var& w, const Var& b);
// w [Cout,Cin], b [Cout].
Var conv1x1(const Var& x, const Var& w, const Var& b);
Var upsample2x(const Var& x);           // [C,H,W] nearest -> [C,2H,2W]
Var avgpool2d(const Var& a, std::size_t f);  // [H,W] -> [H/f,W/f]

Var layer_norm_rows(const Var& a, const Var& gain, const Var& bias);

// Cosine similarity of two rank-1 vectors. Returns exactly 0 with zero
// gradient when either norm is below 1e-12.
Var cosine(const Var& u, const Var& v);

}  // namespace fabgpt::ag
