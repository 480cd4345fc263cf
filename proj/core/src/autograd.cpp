// SPDX-License-Identifier: Apache-2.0
#include "fabgpt/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace fabgpt::ag {

namespace {

Var make(Tensor value, std::vector<Var> parents, std::function<void(Node&)> bp) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->parents = std::move(parents);
  for (const auto& p : n->parents) {
    if (p->requires_grad) {
      n->requires_grad = true;
      break;
    }
  }
  if (n->requires_grad) n->backprop = std::move(bp);
  return n;
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (!a->value.same_shape(b->value)) throw std::logic_error(std::string(op) + ": shape mismatch");
}

bool wants(const Node& n) { return n.requires_grad; }

}  // namespace

Var constant(Tensor v) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  return n;
}

Var make_param(Tensor v) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  n->requires_grad = true;
  return n;
}

Tensor& grad_buf(Node& n) {
  if (!n.grad_alloc) {
    n.grad = Tensor(n.value.shape());
    n.grad_alloc = true;
  }
  return n.grad;
}

void backward(const Var& root) {
  if (root->value.size() != 1) throw std::logic_error("backward: root must be scalar");
  if (!root->requires_grad) return;
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& top = stack.back();
    Node* n = top.first;
    if (top.second < n->parents.size()) {
      Node* p = n->parents[top.second].get();
      ++top.second;
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  // Every reachable node gets a zeroed buffer up front: a closure may run
  // without any child having contributed to it (e.g. a gradient-stopping op)
  // and still reads its own grad.
  for (Node* n : order) grad_buf(*n);
  grad_buf(*root).at(0) += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backprop) (*it)->backprop(**it);
  }
}

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out.at(i) += b->value.at(i);
  return make(std::move(out), {a, b}, [](Node& self) {
    for (int k = 0; k < 2; ++k) {
      Node& p = *self.parents[k];
      if (!wants(p)) continue;
      Tensor& g = grad_buf(p);
      for (std::size_t i = 0; i < g.size(); ++i) g.at(i) += self.grad.at(i);
    }
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out.at(i) -= b->value.at(i);
  return make(std::move(out), {a, b}, [](Node& self) {
    if (wants(*self.parents[0])) {
      Tensor& g = grad_buf(*self.parents[0]);
      for (std::size_t i = 0; i < g.size(); ++i) g.at(i) += self.grad.at(i);
    }
    if (wants(*self.parents[1])) {
      Tensor& g = grad_buf(*self.parents[1]);
      for (std::size_t i = 0; i < g.size(); ++i) g.at(i) -= self.grad.at(i);
    }
  });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out.at(i) *= b->value.at(i);
  return make(std::move(out), {a, b}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (wants(pa)) {
      Tensor& g = grad_buf(pa);
      for (std::size_t i = 0; i < g.size(); ++i) g.at(i) += self.grad.at(i) * pb.value.at(i);
    }
    if (wants(pb)) {
      Tensor& g = grad_buf(pb);
      for (std::size_t i = 0; i < g.size(); ++i) g.at(i) += self.grad.at(i) * pa.value.at(i);
    }
  });
}

Var div(const Var& a, const Var& b) {
  check_same_shape(a, b, "div");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out.at(i) /= b->value.at(i);
  return make(std::move(out), {a, b}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (wants(pa)) {
      Tensor& g = grad_buf(pa);
      for (std::size_t i = 0; i < g.size(); ++i) g.at(i) += self.grad.at(i) / pb.value.at(i);
    }
    if (wants(pb)) {
      Tensor& g = grad_buf(pb);
      for (std::size_t i = 0; i < g.size(); ++i)
        g.at(i) -= self.grad.at(i) * self.value.at(i) / pb.value.at(i);
    }
  });
}

Var scale(const Var& a, double c) {
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out.at(i) *= c;
  return make(std::move(out), {a}, [c](Node& self) {
    if (!wants(*self.parents[0])) return;
    Tensor& g = grad_buf(*self.parents[0]);
    for (std::size_t i = 0; i < g.size(); ++i) g.at(i) += c * self.grad.at(i);
  });
}

Var affine(const Var& a, double k, double c) {
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out.at(i) = k * out.at(i) + c;
  return make(std::move(out), {a}, [k](Node& self) {
    if (!wants(*self.parents[0])) return;
    Tensor& g = grad_buf(*self.parents[0]);
    for (std::size_t i = 0; i < g.size(); ++i) g.at(i) += k * self.grad.at(i);
  });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var smul(const Var& s, const Var& a) {
  if (s->value.size() != 1) throw std::logic_error("smul: scalar operand must have size 1");
  const double sv = s->value.at(0);
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out.at(i) *= sv;
  return make(std::move(out), {s, a}, [](Node& self) {
    Node& ps = *self.parents[0];
    Node& pa = *self.parents[1];
    if (wants(ps)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < pa.value.size(); ++i) acc += self.grad.at(i) * pa.value.at(i);
      grad_buf(ps).at(0) += acc;
    }
    if (wants(pa)) {
      const double sv = ps.value.at(0);
      Tensor& g = grad_buf(pa);
      for (std::size_t i = 0; i < g.size(); ++i) g.at(i) += sv * self.grad.at(i);
    }
  });
}

Var matmul(const Var& a, const Var& b) {
  const std::size_t m = a->value.rows(), k = a->value.cols(), n = b->value.cols();
  if (b->value.rows() != k) throw std::logic_error("matmul: inner dimensions differ");
  Tensor out = fabgpt::matmul(a->value, b->value);
  return make(std::move(out), {a, b}, [m, k, n](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (wants(pa)) {
      Tensor& ga = grad_buf(pa);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const double gv = self.grad.at2(i, j);
          if (gv == 0.0) continue;
          for (std::size_t p = 0; p < k; ++p) ga.at2(i, p) += gv * pb.value.at2(p, j);
        }
    }
    if (wants(pb)) {
      Tensor& gb = grad_buf(pb);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double av = pa.value.at2(i, p);
          if (av == 0.0) continue;
          for (std::size_t j = 0; j < n; ++j) gb.at2(p, j) += av * self.grad.at2(i, j);
        }
    }
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  const std::size_t m = a->value.rows(), k = a->value.cols(), n = b->value.rows();
  if (b->value.cols() != k) throw std::logic_error("matmul_nt: inner dimensions differ");
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += a->value.at2(i, p) * b->value.at2(j, p);
      out.at2(i, j) = acc;
    }
  return make(std::move(out), {a, b}, [m, k, n](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (wants(pa)) {
      Tensor& ga = grad_buf(pa);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const double gv = self.grad.at2(i, j);
          if (gv == 0.0) continue;
          for (std::size_t p = 0; p < k; ++p) ga.at2(i, p) += gv * pb.value.at2(j, p);
        }
    }
    if (wants(pb)) {
      Tensor& gb = grad_buf(pb);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const double gv = self.grad.at2(i, j);
          if (gv == 0.0) continue;
          for (std::size_t p = 0; p < k; ++p) gb.at2(j, p) += gv * pa.value.at2(i, p);
        }
    }
  });
}

Var transpose(const Var& a) {
  const std::size_t m = a->value.rows(), n = a->value.cols();
  Tensor out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at2(j, i) = a->value.at2(i, j);
  return make(std::move(out), {a}, [m, n](Node& self) {
    if (!wants(*self.parents[0])) return;
    Tensor& g = grad_buf(*self.parents[0]);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) g.at2(i, j) += self.grad.at2(j, i);
  });
}

Var add_rowvec(const Var& a, const Var& v) {
  const std::size_t m = a->value.rows(), n = a->value.cols();
  if (v->value.size() != n) throw std::logic_error("add_rowvec: width mismatch");
  Tensor out = a->value;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at2(i, j) += v->value.at(j);
  return make(std::move(out), {a, v}, [m, n](Node& self) {
    if (wants(*self.parents[0])) {
      Tensor& g = grad_buf(*self.parents[0]);
      for (std::size_t i = 0; i < g.size(); ++i) g.at(i) += self.grad.at(i);
    }
    if (wants(*self.parents[1])) {
      Tensor& g = grad_buf(*self.parents[1]);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g.at(j) += self.grad.at2(i, j);
    }
  });
}

Var mul_rowvec(const Var& a, const Var& v) {
  const std::size_t m = a->value.rows(), n = a->value.cols();
  if (v->value.size() != n) throw std::logic_error("mul_rowvec: width mismatch");
  Tensor out = a->value;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at2(i, j) *= v->value.at(j);
  return make(std::move(out), {a, v}, [m, n](Node& self) {
    Node& pa = *self.parents[0];
    Node& pv = *self.parents[1];
    if (wants(pa)) {
      Tensor& g = grad_buf(pa);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g.at2(i, j) += self.grad.at2(i, j) * pv.value.at(j);
    }
    if (wants(pv)) {
      Tensor& g = grad_buf(pv);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g.at(j) += self.grad.at2(i, j) * pa.value.at2(i, j);
    }
  });
}

Var mul_colvec(const Var& a, const Var& v) {
  const std::size_t m = a->value.rows(), n = a->value.cols();
  if (v->value.size() != m) throw std::logic_error("mul_colvec: height mismatch");
  Tensor out = a->value;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at2(i, j) *= v->value.at(i);
  return make(std::move(out), {a, v}, [m, n](Node& self) {
    Node& pa = *self.parents[0];
    Node& pv = *self.parents[1];
    if (wants(pa)) {
      Tensor& g = grad_buf(pa);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g.at2(i, j) += self.grad.at2(i, j) * pv.value.at(i);
    }
    if (wants(pv)) {
      Tensor& g = grad_buf(pv);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g.at(i) += self.grad.at2(i, j) * pa.value.at2(i, j);
    }
  });
}

Var relu(const Var& a) {
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out.at(i) = std::max(0.0, out.at(i));
  return make(std::move(out), {a}, [](Node& self) {
    Node& p = *self.parents[0];
    if (!wants(p)) return;
    Tensor& g = grad_buf(p);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (p.value.at(i) > 0.0) g.at(i) += self.grad.at(i);
  });
}

Var tanh_(const Var& a) {
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out.at(i) = std::tanh(out.at(i));
  return make(std::move(out), {a}, [](Node& self) {
    if (!wants(*self.parents[0])) return;
    Tensor& g = grad_buf(*self.parents[0]);
    for (std::size_t i = 0; i < g.size(); ++i)
      g.at(i) += self.grad.at(i) * (1.0 - self.value.at(i) * self.value.at(i));
  });
}

Var clamp_min(const Var& a, double floor) {
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out.at(i) = std::max(floor, out.at(i));
  return make(std::move(out), {a}, [floor](Node& self) {
    Node& p = *self.parents[0];
    if (!wants(p)) return;
    Tensor& g = grad_buf(p);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (p.value.at(i) > floor) g.at(i) += self.grad.at(i);
  });
}

Var log_(const Var& a) {
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out.at(i) = std::log(out.at(i));
  return make(std::move(out), {a}, [](Node& self) {
    Node& p = *self.parents[0];
    if (!wants(p)) return;
    Tensor& g = grad_buf(p);
    for (std::size_t i = 0; i < g.size(); ++i) g.at(i) += self.grad.at(i) / p.value.at(i);
  });
}

Var powc(const Var& a, double p) {
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out.at(i) = std::pow(out.at(i), p);
  return make(std::move(out), {a}, [p](Node& self) {
    Node& pa = *self.parents[0];
    if (!wants(pa)) return;
    Tensor& g = grad_buf(pa);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double base = pa.value.at(i);
      if (base == 0.0) {
        if (p == 1.0) g.at(i) += self.grad.at(i);
        continue;
      }
      g.at(i) += self.grad.at(i) * p * std::pow(base, p - 1.0);
    }
  });
}

namespace {
void softmax_rows_impl(Tensor& t) {
  const std::size_t m = t.rows(), n = t.cols();
  for (std::size_t i = 0; i < m; ++i) {
    double mx = t.at2(i, 0);
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, t.at2(i, j));
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double e = std::exp(t.at2(i, j) - mx);
      t.at2(i, j) = e;
      sum += e;
    }
    for (std::size_t j = 0; j < n; ++j) t.at2(i, j) /= sum;
  }
}

std::function<void(Node&)> softmax_backprop() {
  return [](Node& self) {
    Node& p = *self.parents[0];
    if (!wants(p)) return;
    Tensor& g = grad_buf(p);
    const std::size_t m = self.value.rows(), n = self.value.cols();
    for (std::size_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += self.grad.at2(i, j) * self.value.at2(i, j);
      for (std::size_t j = 0; j < n; ++j)
        g.at2(i, j) += self.value.at2(i, j) * (self.grad.at2(i, j) - dot);
    }
  };
}
}  // namespace

Var softmax_rows(const Var& a) {
  Tensor out = a->value;
  softmax_rows_impl(out);
  return make(std::move(out), {a}, softmax_backprop());
}

Var softmax_rows_masked(const Var& a, const Tensor& bias) {
  if (!a->value.same_shape(bias)) throw std::logic_error("softmax_rows_masked: bias shape mismatch");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out.at(i) += bias.at(i);
  softmax_rows_impl(out);
  return make(std::move(out), {a}, softmax_backprop());
}

Var sum_all(const Var& a) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a->value.size(); ++i) acc += a->value.at(i);
  return make(Tensor::scalar(acc), {a}, [](Node& self) {
    if (!wants(*self.parents[0])) return;
    Tensor& g = grad_buf(*self.parents[0]);
    const double gv = self.grad.at(0);
    for (std::size_t i = 0; i < g.size(); ++i) g.at(i) += gv;
  });
}

Var mean_all(const Var& a) {
  const double inv = 1.0 / static_cast<double>(a->value.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < a->value.size(); ++i) acc += a->value.at(i);
  return make(Tensor::scalar(acc * inv), {a}, [inv](Node& self) {
    if (!wants(*self.parents[0])) return;
    Tensor& g = grad_buf(*self.parents[0]);
    const double gv = self.grad.at(0) * inv;
    for (std::size_t i = 0; i < g.size(); ++i) g.at(i) += gv;
  });
}

Var mean_over_rows(const Var& a) {
  const std::size_t m = a->value.rows(), n = a->value.cols();
  Tensor out({n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(j) += a->value.at2(i, j);
  const double inv = 1.0 / static_cast<double>(m);
  for (std::size_t j = 0; j < n; ++j) out.at(j) *= inv;
  return make(std::move(out), {a}, [m, n, inv](Node& self) {
    if (!wants(*self.parents[0])) return;
    Tensor& g = grad_buf(*self.parents[0]);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) g.at2(i, j) += self.grad.at(j) * inv;
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::logic_error("concat_rows: no parts");
  const std::size_t n = parts[0]->value.cols();
  std::size_t m = 0;
  for (const auto& p : parts) {
    if (p->value.cols() != n) throw std::logic_error("concat_rows: width mismatch");
    m += p->value.rows();
  }
  Tensor out({m, n});
  std::size_t r = 0;
  for (const auto& p : parts) {
    std::copy(p->value.data(), p->value.data() + p->value.size(), out.data() + r * n);
    r += p->value.rows();
  }
  return make(std::move(out), parts, [n](Node& self) {
    std::size_t r = 0;
    for (auto& pp : self.parents) {
      Node& p = *pp;
      const std::size_t rows = p.value.rows();
      if (wants(p)) {
        Tensor& g = grad_buf(p);
        for (std::size_t i = 0; i < rows * n; ++i) g.at(i) += self.grad.at(r * n + i);
      }
      r += rows;
    }
  });
}

Var slice_rows(const Var& a, std::size_t r0, std::size_t r1) {
  const std::size_t n = a->value.cols();
  if (r1 <= r0 || r1 > a->value.rows()) throw std::logic_error("slice_rows: bad range");
  Tensor out({r1 - r0, n});
  std::copy(a->value.data() + r0 * n, a->value.data() + r1 * n, out.data());
  return make(std::move(out), {a}, [r0, n](Node& self) {
    if (!wants(*self.parents[0])) return;
    Tensor& g = grad_buf(*self.parents[0]);
    for (std::size_t i = 0; i < self.grad.size(); ++i) g.at(r0 * n + i) += self.grad.at(i);
  });
}

Var slice_cols(const Var& a, std::size_t c0, std::size_t c1) {
  const std::size_t m = a->value.rows(), n = a->value.cols();
  if (c1 <= c0 || c1 > n) throw std::logic_error("slice_cols: bad range");
  Tensor out({m, c1 - c0});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = c0; j < c1; ++j) out.at2(i, j - c0) = a->value.at2(i, j);
  return make(std::move(out), {a}, [m, c0, c1](Node& self) {
    if (!wants(*self.parents[0])) return;
    Tensor& g = grad_buf(*self.parents[0]);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = c0; j < c1; ++j) g.at2(i, j) += self.grad.at2(i, j - c0);
  });
}

Var reshape(const Var& a, std::vector<std::size_t> shape) {
  Tensor out(shape);
  if (out.size() != a->value.size()) throw std::logic_error("reshape: size mismatch");
  std::copy(a->value.data(), a->value.data() + a->value.size(), out.data());
  return make(std::move(out), {a}, [](Node& self) {
    if (!wants(*self.parents[0])) return;
    Tensor& g = grad_buf(*self.parents[0]);
    for (std::size_t i = 0; i < g.size(); ++i) g.at(i) += self.grad.at(i);
  });
}

Var pick_per_row(const Var& a, const std::vector<std::size_t>& ids) {
  const std::size_t m = a->value.rows(), n = a->value.cols();
  if (ids.size() != m) throw std::logic_error("pick_per_row: id count mismatch");
  Tensor out({m});
  for (std::size_t i = 0; i < m; ++i) {
    if (ids[i] >= n) throw std::logic_error("pick_per_row: id out of range");
    out.at(i) = a->value.at2(i, ids[i]);
  }
  return make(std::move(out), {a}, [ids](Node& self) {
    if (!wants(*self.parents[0])) return;
    Tensor& g = grad_buf(*self.parents[0]);
    for (std::size_t i = 0; i < ids.size(); ++i) g.at2(i, ids[i]) += self.grad.at(i);
  });
}

Var max_entry(const Var& a) {
  std::size_t idx = 0;
  for (std::size_t i = 1; i < a->value.size(); ++i)
    if (a->value.at(i) > a->value.at(idx)) idx = i;
  return make(Tensor::scalar(a->value.at(idx)), {a}, [idx](Node& self) {
    if (!wants(*self.parents[0])) return;
    grad_buf(*self.parents[0]).at(idx) += self.grad.at(0);
  });
}

Var embed_rows(const Var& table, const std::vector<std::size_t>& ids) {
  const std::size_t d = table->value.cols();
  Tensor out({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= table->value.rows()) throw std::logic_error("embed_rows: id out of range");
    std::copy(table->value.data() + ids[i] * d, table->value.data() + (ids[i] + 1) * d,
              out.data() + i * d);
  }
  return make(std::move(out), {table}, [ids, d](Node& self) {
    if (!wants(*self.parents[0])) return;
    Tensor& g = grad_buf(*self.parents[0]);
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) g.at2(ids[i], j) += self.grad.at2(i, j);
  });
}

Var conv3x3(const Var& x, const Var& w, const Var& b) {
  const std::size_t cin = x->value.dim(0), h = x->value.dim(1), wd = x->value.dim(2);
  const std::size_t cout = w->value.dim(0);
  if (w->value.dim(1) != cin || w->value.dim(2) != 3 || w->value.dim(3) != 3)
    throw std::logic_error("conv3x3: weight shape mismatch");
  if (b->value.size() != cout) throw std::logic_error("conv3x3: bias shape mismatch");
  Tensor out({cout, h, wd});
  for (std::size_t co = 0; co < cout; ++co) {
    const double bias = b->value.at(co);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < wd; ++xx) {
        double acc = bias;
        for (std::size_t ci = 0; ci < cin; ++ci)
          for (int dy = -1; dy <= 1; ++dy) {
            const long sy = static_cast<long>(y) + dy;
            if (sy < 0 || sy >= static_cast<long>(h)) continue;
            for (int dx = -1; dx <= 1; ++dx) {
              const long sx = static_cast<long>(xx) + dx;
              if (sx < 0 || sx >= static_cast<long>(wd)) continue;
              acc += w->value.at(((co * cin + ci) * 3 + (dy + 1)) * 3 + (dx + 1)) *
                     x->value.at3(ci, sy, sx);
            }
          }
        out.at3(co, y, xx) = acc;
      }
  }
  return make(std::move(out), {x, w, b}, [cin, h, wd, cout](Node& self) {
    Node& px = *self.parents[0];
    Node& pw = *self.parents[1];
    Node& pb = *self.parents[2];
    const bool gx = wants(px), gw = wants(pw), gb = wants(pb);
    Tensor* xg = gx ? &grad_buf(px) : nullptr;
    Tensor* wg = gw ? &grad_buf(pw) : nullptr;
    Tensor* bg = gb ? &grad_buf(pb) : nullptr;
    for (std::size_t co = 0; co < cout; ++co)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t xx = 0; xx < wd; ++xx) {
          const double gv = self.grad.at3(co, y, xx);
          if (gv == 0.0) continue;
          if (gb) bg->at(co) += gv;
          if (!gx && !gw) continue;
          for (std::size_t ci = 0; ci < cin; ++ci)
            for (int dy = -1; dy <= 1; ++dy) {
              const long sy = static_cast<long>(y) + dy;
              if (sy < 0 || sy >= static_cast<long>(h)) continue;
              for (int dx = -1; dx <= 1; ++dx) {
                const long sx = static_cast<long>(xx) + dx;
                if (sx < 0 || sx >= static_cast<long>(wd)) continue;
                const std::size_t wi = ((co * cin + ci) * 3 + (dy + 1)) * 3 + (dx + 1);
                if (xg) xg->at3(ci, sy, sx) += gv * pw.value.at(wi);
                if (wg) wg->at(wi) += gv * px.value.at3(ci, sy, sx);
              }
            }
        }
  });
}

Var conv1x1(const Var& x, const Var& w, const Var& b) {
  const std::size_t cin = x->value.dim(0), h = x->value.dim(1), wd = x->value.dim(2);
  const std::size_t cout = w->value.rows();
  if (w->value.cols() != cin) throw std::logic_error("conv1x1: weight shape mismatch");
  if (b->value.size() != cout) throw std::logic_error("conv1x1: bias shape mismatch");
  Tensor out({cout, h, wd});
  for (std::size_t co = 0; co < cout; ++co)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < wd; ++xx) {
        double acc = b->value.at(co);
        for (std::size_t ci = 0; ci < cin; ++ci)
          acc += w->value.at2(co, ci) * x->value.at3(ci, y, xx);
        out.at3(co, y, xx) = acc;
      }
  return make(std::move(out), {x, w, b}, [cin, h, wd, cout](Node& self) {
    Node& px = *self.parents[0];
    Node& pw = *self.parents[1];
    Node& pb = *self.parents[2];
    for (std::size_t co = 0; co < cout; ++co)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t xx = 0; xx < wd; ++xx) {
          const double gv = self.grad.at3(co, y, xx);
          if (gv == 0.0) continue;
          if (wants(pb)) grad_buf(pb).at(co) += gv;
          for (std::size_t ci = 0; ci < cin; ++ci) {
            if (wants(px)) grad_buf(px).at3(ci, y, xx) += gv * pw.value.at2(co, ci);
            if (wants(pw)) grad_buf(pw).at2(co, ci) += gv * px.value.at3(ci, y, xx);
          }
        }
  });
}

Var upsample2x(const Var& x) {
  const std::size_t c = x->value.dim(0), h = x->value.dim(1), w = x->value.dim(2);
  Tensor out({c, 2 * h, 2 * w});
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx) {
        const double v = x->value.at3(ci, y, xx);
        out.at3(ci, 2 * y, 2 * xx) = v;
        out.at3(ci, 2 * y, 2 * xx + 1) = v;
        out.at3(ci, 2 * y + 1, 2 * xx) = v;
        out.at3(ci, 2 * y + 1, 2 * xx + 1) = v;
      }
  return make(std::move(out), {x}, [c, h, w](Node& self) {
    if (!wants(*self.parents[0])) return;
    Tensor& g = grad_buf(*self.parents[0]);
    for (std::size_t ci = 0; ci < c; ++ci)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t xx = 0; xx < w; ++xx)
          g.at3(ci, y, xx) += self.grad.at3(ci, 2 * y, 2 * xx) +
                              self.grad.at3(ci, 2 * y, 2 * xx + 1) +
                              self.grad.at3(ci, 2 * y + 1, 2 * xx) +
                              self.grad.at3(ci, 2 * y + 1, 2 * xx + 1);
  });
}

Var avgpool2d(const Var& a, std::size_t f) {
  const std::size_t h = a->value.rows(), w = a->value.cols();
  if (f == 0 || h % f != 0 || w % f != 0) throw std::logic_error("avgpool2d: factor must divide dims");
  const std::size_t oh = h / f, ow = w / f;
  const double inv = 1.0 / static_cast<double>(f * f);
  Tensor out({oh, ow});
  for (std::size_t i = 0; i < oh; ++i)
    for (std::size_t j = 0; j < ow; ++j) {
      double acc = 0.0;
      for (std::size_t dy = 0; dy < f; ++dy)
        for (std::size_t dx = 0; dx < f; ++dx) acc += a->value.at2(i * f + dy, j * f + dx);
      out.at2(i, j) = acc * inv;
    }
  return make(std::move(out), {a}, [f, oh, ow, inv](Node& self) {
    if (!wants(*self.parents[0])) return;
    Tensor& g = grad_buf(*self.parents[0]);
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        const double gv = self.grad.at2(i, j) * inv;
        for (std::size_t dy = 0; dy < f; ++dy)
          for (std::size_t dx = 0; dx < f; ++dx) g.at2(i * f + dy, j * f + dx) += gv;
      }
  });
}

Var layer_norm_rows(const Var& a, const Var& gain, const Var& bias) {
  const std::size_t m = a->value.rows(), n = a->value.cols();
  if (gain->value.size() != n || bias->value.size() != n)
    throw std::logic_error("layer_norm_rows: parameter width mismatch");
  constexpr double kEps = 1e-5;
  Tensor out({m, n});
  Tensor xhat({m, n});
  Tensor inv_std({m});
  for (std::size_t i = 0; i < m; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += a->value.at2(i, j);
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = a->value.at2(i, j) - mean;
      var += d * d;
    }
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + kEps);
    inv_std.at(i) = is;
    for (std::size_t j = 0; j < n; ++j) {
      const double xh = (a->value.at2(i, j) - mean) * is;
      xhat.at2(i, j) = xh;
      out.at2(i, j) = gain->value.at(j) * xh + bias->value.at(j);
    }
  }
  return make(std::move(out), {a, gain, bias},
              [m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                Node& pa = *self.parents[0];
                Node& pg = *self.parents[1];
                Node& pb = *self.parents[2];
                if (wants(pg) || wants(pb)) {
                  for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) {
                      const double gv = self.grad.at2(i, j);
                      if (wants(pg)) grad_buf(pg).at(j) += gv * xhat.at2(i, j);
                      if (wants(pb)) grad_buf(pb).at(j) += gv;
                    }
                }
                if (!wants(pa)) return;
                Tensor& g = grad_buf(pa);
                const double invn = 1.0 / static_cast<double>(n);
                for (std::size_t i = 0; i < m; ++i) {
                  double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                  for (std::size_t j = 0; j < n; ++j) {
                    const double dxh = self.grad.at2(i, j) * pg.value.at(j);
                    sum_dxhat += dxh;
                    sum_dxhat_xhat += dxh * xhat.at2(i, j);
                  }
                  for (std::size_t j = 0; j < n; ++j) {
                    const double dxh = self.grad.at2(i, j) * pg.value.at(j);
                    g.at2(i, j) += inv_std.at(i) *
                                   (dxh - invn * sum_dxhat - invn * xhat.at2(i, j) * sum_dxhat_xhat);
                  }
                }
              });
}

Var cosine(const Var& u, const Var& v) {
  if (u->value.size() != v->value.size()) throw std::logic_error("cosine: length mismatch");
  const std::size_t n = u->value.size();
  double uu = 0.0, vv = 0.0, uv = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    uu += u->value.at(i) * u->value.at(i);
    vv += v->value.at(i) * v->value.at(i);
    uv += u->value.at(i) * v->value.at(i);
  }
  const double nu = std::sqrt(uu), nv = std::sqrt(vv);
  constexpr double kGuard = 1e-12;
  if (nu < kGuard || nv < kGuard) {
    // Degenerate direction: similarity is defined as exactly 0, gradient 0.
    return make(Tensor::scalar(0.0), {u, v}, [](Node&) {});
  }
  const double c = uv / (nu * nv);
  return make(Tensor::scalar(c), {u, v}, [n, nu, nv, c](Node& self) {
    Node& pu = *self.parents[0];
    Node& pv = *self.parents[1];
    const double gv = self.grad.at(0);
    const double inv = 1.0 / (nu * nv);
    if (wants(pu)) {
      Tensor& g = grad_buf(pu);
      for (std::size_t i = 0; i < n; ++i)
        g.at(i) += gv * (pv.value.at(i) * inv - c * pu.value.at(i) / (nu * nu));
    }
    if (wants(pv)) {
      Tensor& g = grad_buf(pv);
      for (std::size_t i = 0; i < n; ++i)
        g.at(i) += gv * (pu.value.at(i) * inv - c * pv.value.at(i) / (nv * nv));
    }
  });
}

}  // namespace fabgpt::ag
