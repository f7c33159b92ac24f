#include "pcpe/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_map>

namespace pcpe {

using detail::Node;

namespace {

thread_local bool g_grad_enabled = true;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

using Parents = std::vector<std::shared_ptr<Node>>;
using BackwardFn = std::function<void(Node&)>;

void check_finite(const char* op, const std::vector<double>& v) {
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) {
      std::ostringstream os;
      os << op << ": non-finite value " << v[i] << " at flat index " << i;
      throw NumericError(os.str());
    }
  }
}

Tensor make_result(const char* op, Shape shape, std::vector<double> value,
                   Parents parents, BackwardFn fn) {
  check_finite(op, value);
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool track = g_grad_enabled &&
               std::any_of(parents.begin(), parents.end(),
                           [](const auto& p) { return p->requires_grad; });
  if (track) {
    node->requires_grad = true;
    node->leaf = false;
    node->parents = std::move(parents);
    node->backward = std::move(fn);
  }
  return Tensor(std::move(node));
}

/// Grad buffer of parent i if it participates in differentiation.
std::vector<double>* pgrad(Node& self, std::size_t i) {
  Node& p = *self.parents[i];
  return p.requires_grad ? &p.grad_buffer() : nullptr;
}

const std::vector<double>& pval(Node& self, std::size_t i) {
  return self.parents[i]->value;
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

void require_rank2(const char* op, const Tensor& a) {
  if (a.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " +
                         shape_str(a.shape()));
  }
}

void require_defined(const char* op, const Tensor& a) {
  if (!a.defined()) throw StateError(std::string(op) + ": undefined tensor");
}

}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
  std::size_t n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(n, v), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
  for (auto e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive: " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("tensor data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
  }
  check_finite("tensor", data);
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::vector(std::vector<double> data, bool requires_grad) {
  Shape s{data.size()};
  return from(std::move(s), std::move(data), requires_grad);
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> data,
                      bool requires_grad) {
  return from({rows, cols}, std::move(data), requires_grad);
}

Tensor Tensor::scalar(double v) { return from({}, {v}); }

Tensor Tensor::normal(Shape shape, double stddev, std::mt19937_64& rng,
                      bool requires_grad) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> data(shape_numel(shape));
  for (auto& x : data) x = dist(rng);
  return from(std::move(shape), std::move(data), requires_grad);
}

std::size_t Tensor::cols() const {
  return node_->shape.empty() ? 1 : node_->shape.back();
}

std::size_t Tensor::rows() const { return size() / cols(); }

double Tensor::item() const {
  if (size() != 1) {
    throw DimensionError("item() on non-scalar tensor " + shape_str(shape()));
  }
  return node_->value[0];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  if (c >= cols() || r >= rows()) {
    throw DimensionError("index out of range for " + shape_str(shape()));
  }
  return node_->value[r * cols() + c];
}

std::span<const double> Tensor::grad() const {
  if (node_->grad.empty()) node_->grad.assign(node_->value.size(), 0.0);
  return node_->grad;
}

void Tensor::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

std::span<double> Tensor::mutable_data() {
  if (!node_->leaf) throw StateError("mutable_data on a non-leaf tensor");
  return node_->value;
}

std::span<double> Tensor::mutable_grad() { return node_->grad_buffer(); }

Tensor Tensor::detach() const {
  auto node = std::make_shared<Node>();
  node->shape = node_->shape;
  node->value = node_->value;
  return Tensor(std::move(node));
}

Tensor Tensor::clone(bool requires_grad) const {
  Tensor t = detach();
  t.node_->requires_grad = requires_grad;
  return t;
}

// ---- grad mode & tape ------------------------------------------------------

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tape Tape::build(const Tensor& root) {
  require_defined("tape", root);
  Tape tape;
  std::unordered_map<Node*, std::size_t> position;
  // Iterative post-order DFS: a node is emitted after all of its parents.
  std::vector<std::pair<Node*, std::size_t>> stack;
  std::unordered_map<Node*, bool> entered;
  stack.emplace_back(root.node().get(), 0);
  entered[root.node().get()] = true;
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (node->consumed) {
      throw StateError("backward: graph already consumed by a previous backward pass");
    }
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && !entered[parent]) {
        entered[parent] = true;
        stack.emplace_back(parent, 0);
      }
      continue;
    }
    position[node] = tape.nodes_.size();
    tape.nodes_.push_back(node);
    std::vector<std::size_t> pp;
    for (auto& p : node->parents) {
      if (p->requires_grad) pp.push_back(position.at(p.get()));
    }
    tape.parent_positions_.push_back(std::move(pp));
    stack.pop_back();
  }
  return tape;
}

void backward(const Tensor& loss) {
  require_defined("backward", loss);
  if (loss.size() != 1) {
    throw DimensionError("backward: loss must be a scalar, got " + shape_str(loss.shape()));
  }
  if (loss.node()->consumed) {
    throw StateError("backward: called twice on the same graph without rebuilding it");
  }
  if (!loss.requires_grad() || loss.node()->leaf) {
    throw StateError("backward: loss has no recorded history (empty tape)");
  }
  Tape tape = Tape::build(loss);
  auto& seed = loss.node()->grad_buffer();
  seed[0] += 1.0;
  for (std::size_t i = tape.nodes_.size(); i-- > 0;) {
    Node* n = tape.nodes_[i];
    if (n->leaf) continue;
    n->grad_buffer();
    n->backward(*n);
  }
  // Release the graph; leaves keep their accumulated grads.
  for (Node* n : tape.nodes_) {
    if (n->leaf) continue;
    n->consumed = true;
    n->backward = nullptr;
    n->parents.clear();
    n->grad.clear();
    n->grad.shrink_to_fit();
  }
}

// ---- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  std::vector<double> out(a.size());
  auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return make_result("add", a.shape(), std::move(out), {a.node(), b.node()},
                     [](Node& self) {
                       for (std::size_t k = 0; k < 2; ++k) {
                         if (auto* g = pgrad(self, k)) {
                           for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
                         }
                       }
                     });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  std::vector<double> out(a.size());
  auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return make_result("sub", a.shape(), std::move(out), {a.node(), b.node()},
                     [](Node& self) {
                       if (auto* g = pgrad(self, 0)) {
                         for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
                       }
                       if (auto* g = pgrad(self, 1)) {
                         for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
                       }
                     });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  std::vector<double> out(a.size());
  auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return make_result("mul", a.shape(), std::move(out), {a.node(), b.node()},
                     [](Node& self) {
                       const auto& x = pval(self, 0);
                       const auto& y = pval(self, 1);
                       if (auto* g = pgrad(self, 0)) {
                         for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * y[i];
                       }
                       if (auto* g = pgrad(self, 1)) {
                         for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * x[i];
                       }
                     });
}

Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& x : out) x *= s;
  return make_result("scale", a.shape(), std::move(out), {a.node()}, [s](Node& self) {
    if (auto* g = pgrad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * s;
    }
  });
}

Tensor add_scalar(const Tensor& a, double s) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& x : out) x += s;
  return make_result("add_scalar", a.shape(), std::move(out), {a.node()}, [](Node& self) {
    if (auto* g = pgrad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
  });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Tensor gelu(const Tensor& x) {
  std::vector<double> out(x.size());
  auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    double v = xv[i];
    out[i] = 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
  }
  return make_result("gelu", x.shape(), std::move(out), {x.node()}, [](Node& self) {
    auto* g = pgrad(self, 0);
    if (!g) return;
    const auto& xv = pval(self, 0);
    for (std::size_t i = 0; i < g->size(); ++i) {
      double v = xv[i];
      double t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
      double d = 0.5 * (1.0 + t) +
                 0.5 * v * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
      (*g)[i] += self.grad[i] * d;
    }
  });
}

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) v = v > 0.0 ? v : 0.0;
  return make_result("relu", x.shape(), std::move(out), {x.node()}, [](Node& self) {
    auto* g = pgrad(self, 0);
    if (!g) return;
    const auto& xv = pval(self, 0);
    for (std::size_t i = 0; i < g->size(); ++i) {
      if (xv[i] > 0.0) (*g)[i] += self.grad[i];
    }
  });
}

Tensor sigmoid(const Tensor& x) {
  std::vector<double> out(x.size());
  auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    double v = xv[i];
    if (v >= 0.0) {
      out[i] = 1.0 / (1.0 + std::exp(-v));
    } else {
      double e = std::exp(v);
      out[i] = e / (1.0 + e);
    }
  }
  auto y = std::make_shared<std::vector<double>>(out);
  return make_result("sigmoid", x.shape(), std::move(out), {x.node()}, [y](Node& self) {
    if (auto* g = pgrad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) {
        (*g)[i] += self.grad[i] * (*y)[i] * (1.0 - (*y)[i]);
      }
    }
  });
}

Tensor dropout(const Tensor& x, double rate, std::mt19937_64& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw ConfigError("dropout rate must be < 1");
  std::bernoulli_distribution keep(1.0 - rate);
  auto factor = std::make_shared<std::vector<double>>(x.size());
  std::vector<double> out(x.size());
  auto xv = x.data();
  const double inv = 1.0 / (1.0 - rate);
  for (std::size_t i = 0; i < out.size(); ++i) {
    (*factor)[i] = keep(rng) ? inv : 0.0;
    out[i] = xv[i] * (*factor)[i];
  }
  return make_result("dropout", x.shape(), std::move(out), {x.node()}, [factor](Node& self) {
    if (auto* g = pgrad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * (*factor)[i];
    }
  });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  const std::size_t n = x.cols();
  if (bias.size() != n) {
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) +
                         " does not match last axis of " + shape_str(x.shape()));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  auto bv = bias.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % n];
  return make_result("add_bias", x.shape(), std::move(out), {x.node(), bias.node()},
                     [n](Node& self) {
                       if (auto* g = pgrad(self, 0)) {
                         for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
                       }
                       if (auto* g = pgrad(self, 1)) {
                         for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i % n] += self.grad[i];
                       }
                     });
}

// ---- linear algebra ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t p = a.dim(0), q = a.dim(1), r = b.dim(1);
  std::vector<double> out(p * r);
  MutMap(out.data(), p, r).noalias() =
      ConstMap(a.data().data(), p, q) * ConstMap(b.data().data(), q, r);
  return make_result("matmul", {p, r}, std::move(out), {a.node(), b.node()},
                     [p, q, r](Node& self) {
                       ConstMap dc(self.grad.data(), p, r);
                       if (auto* g = pgrad(self, 0)) {
                         MutMap(g->data(), p, q).noalias() +=
                             dc * ConstMap(pval(self, 1).data(), q, r).transpose();
                       }
                       if (auto* g = pgrad(self, 1)) {
                         MutMap(g->data(), q, r).noalias() +=
                             ConstMap(pval(self, 0).data(), p, q).transpose() * dc;
                       }
                     });
}

Tensor transpose(const Tensor& a) {
  require_rank2("transpose", a);
  const std::size_t p = a.dim(0), q = a.dim(1);
  std::vector<double> out(p * q);
  auto av = a.data();
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < q; ++j) out[j * p + i] = av[i * q + j];
  return make_result("transpose", {q, p}, std::move(out), {a.node()}, [p, q](Node& self) {
    if (auto* g = pgrad(self, 0)) {
      for (std::size_t i = 0; i < p; ++i)
        for (std::size_t j = 0; j < q; ++j) (*g)[i * q + j] += self.grad[j * p + i];
    }
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.size()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                         shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return make_result("reshape", std::move(shape), std::move(out), {a.node()}, [](Node& self) {
    if (auto* g = pgrad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
  });
}

Tensor rowwise_dot(const Tensor& a, const Tensor& b) {
  require_same_shape("rowwise_dot", a, b);
  const std::size_t k = a.rows(), d = a.cols();
  std::vector<double> out(k, 0.0);
  auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < k; ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) s += av[i * d + c] * bv[i * d + c];
    out[i] = s;
  }
  return make_result("rowwise_dot", {k}, std::move(out), {a.node(), b.node()},
                     [k, d](Node& self) {
                       const auto& x = pval(self, 0);
                       const auto& y = pval(self, 1);
                       if (auto* g = pgrad(self, 0)) {
                         for (std::size_t i = 0; i < k; ++i)
                           for (std::size_t c = 0; c < d; ++c)
                             (*g)[i * d + c] += self.grad[i] * y[i * d + c];
                       }
                       if (auto* g = pgrad(self, 1)) {
                         for (std::size_t i = 0; i < k; ++i)
                           for (std::size_t c = 0; c < d; ++c)
                             (*g)[i * d + c] += self.grad[i] * x[i * d + c];
                       }
                     });
}

Tensor scale_rows(const Tensor& a, const Tensor& w) {
  const std::size_t k = a.rows(), d = a.cols();
  if (w.size() != k) {
    throw DimensionError("scale_rows: weights " + shape_str(w.shape()) + " vs rows of " +
                         shape_str(a.shape()));
  }
  std::vector<double> out(a.size());
  auto av = a.data(), wv = w.data();
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t c = 0; c < d; ++c) out[i * d + c] = wv[i] * av[i * d + c];
  return make_result("scale_rows", a.shape(), std::move(out), {a.node(), w.node()},
                     [k, d](Node& self) {
                       const auto& x = pval(self, 0);
                       const auto& wv = pval(self, 1);
                       if (auto* g = pgrad(self, 0)) {
                         for (std::size_t i = 0; i < k; ++i)
                           for (std::size_t c = 0; c < d; ++c)
                             (*g)[i * d + c] += self.grad[i * d + c] * wv[i];
                       }
                       if (auto* g = pgrad(self, 1)) {
                         for (std::size_t i = 0; i < k; ++i) {
                           double s = 0.0;
                           for (std::size_t c = 0; c < d; ++c)
                             s += self.grad[i * d + c] * x[i * d + c];
                           (*g)[i] += s;
                         }
                       }
                     });
}

// ---- reductions ------------------------------------------------------------

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return make_result("sum", {}, {s}, {x.node()}, [](Node& self) {
    if (auto* g = pgrad(self, 0)) {
      for (auto& v : *g) v += self.grad[0];
    }
  });
}

Tensor mean(const Tensor& x) {
  // Running mean: exact for constant inputs.
  double m = 0.0;
  std::size_t n = 0;
  for (double v : x.data()) m += (v - m) / static_cast<double>(++n);
  return make_result("mean", {}, {m}, {x.node()}, [](Node& self) {
    if (auto* g = pgrad(self, 0)) {
      const double s = self.grad[0] / static_cast<double>(g->size());
      for (auto& v : *g) v += s;
    }
  });
}

Tensor sum_rows(const Tensor& x) {
  const std::size_t r = x.rows(), c = x.cols();
  std::vector<double> out(c, 0.0);
  auto xv = x.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j] += xv[i * c + j];
  return make_result("sum_rows", {c}, std::move(out), {x.node()}, [r, c](Node& self) {
    if (auto* g = pgrad(self, 0)) {
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) (*g)[i * c + j] += self.grad[j];
    }
  });
}

Tensor masked_mean_rows(const Tensor& x, std::span<const std::uint8_t> mask) {
  const std::size_t l = x.rows(), d = x.cols();
  if (mask.size() != l) {
    throw DimensionError("masked_mean_rows: mask length " + std::to_string(mask.size()) +
                         " vs " + std::to_string(l) + " rows");
  }
  std::size_t kept = 0;
  for (auto m : mask) kept += m ? 1 : 0;
  if (kept == 0) throw InputError("masked_mean_rows: every row is masked");
  std::vector<double> out(d, 0.0);
  auto xv = x.data();
  for (std::size_t i = 0; i < l; ++i) {
    if (!mask[i]) continue;
    for (std::size_t c = 0; c < d; ++c) out[c] += xv[i * d + c];
  }
  const double inv = 1.0 / static_cast<double>(kept);
  for (auto& v : out) v *= inv;
  Mask keep(mask.begin(), mask.end());
  return make_result("masked_mean_rows", {d}, std::move(out), {x.node()},
                     [keep = std::move(keep), l, d, inv](Node& self) {
                       if (auto* g = pgrad(self, 0)) {
                         for (std::size_t i = 0; i < l; ++i) {
                           if (!keep[i]) continue;
                           for (std::size_t c = 0; c < d; ++c)
                             (*g)[i * d + c] += self.grad[c] * inv;
                         }
                       }
                     });
}

Tensor masked_segment_max(const Tensor& s, std::size_t segment,
                          std::span<const std::uint8_t> mask) {
  require_rank2("masked_segment_max", s);
  const std::size_t r = s.dim(0), total = s.dim(1);
  if (segment == 0 || total % segment != 0 || mask.size() != total) {
    throw DimensionError("masked_segment_max: " + std::to_string(total) +
                         " columns cannot be split into segments of " +
                         std::to_string(segment) + " with mask of " +
                         std::to_string(mask.size()));
  }
  const std::size_t k = total / segment;
  std::vector<double> out(r * k);
  auto argmax = std::make_shared<std::vector<std::size_t>>(r * k);
  auto sv = s.data();
  for (std::size_t seg = 0; seg < k; ++seg) {
    bool any = false;
    for (std::size_t w = 0; w < segment; ++w) any = any || mask[seg * segment + w];
    if (!any) {
      throw InputError("masked_segment_max: segment " + std::to_string(seg) +
                       " has no unmasked column");
    }
  }
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t seg = 0; seg < k; ++seg) {
      std::size_t best = total;
      for (std::size_t w = 0; w < segment; ++w) {
        std::size_t col = seg * segment + w;
        if (!mask[col]) continue;
        if (best == total || sv[i * total + col] > sv[i * total + best]) best = col;
      }
      out[i * k + seg] = sv[i * total + best];
      (*argmax)[i * k + seg] = best;
    }
  }
  return make_result("masked_segment_max", {r, k}, std::move(out), {s.node()},
                     [argmax, r, k, total](Node& self) {
                       if (auto* g = pgrad(self, 0)) {
                         for (std::size_t i = 0; i < r * k; ++i)
                           (*g)[(i / k) * total + (*argmax)[i]] += self.grad[i];
                       }
                     });
}

// ---- normalisation & attention ---------------------------------------------

namespace {

Tensor softmax_impl(const char* op, const Tensor& x, const std::uint8_t* mask) {
  const std::size_t n = x.cols(), r = x.rows();
  if (mask) {
    bool any = false;
    for (std::size_t i = 0; i < n; ++i) any = any || mask[i];
    if (!any) throw InputError(std::string(op) + ": every position is masked");
  }
  std::vector<double> out(x.size(), 0.0);
  auto xv = x.data();
  for (std::size_t i = 0; i < r; ++i) {
    const double* in = &xv[i * n];
    double* o = &out[i * n];
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      if (!mask || mask[j]) mx = std::max(mx, in[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (mask && !mask[j]) continue;
      o[j] = std::exp(in[j] - mx);
      z += o[j];
    }
    for (std::size_t j = 0; j < n; ++j) o[j] /= z;
  }
  auto y = std::make_shared<std::vector<double>>(out);
  return make_result(op, x.shape(), std::move(out), {x.node()}, [y, n, r](Node& self) {
    auto* g = pgrad(self, 0);
    if (!g) return;
    for (std::size_t i = 0; i < r; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += (*y)[i * n + j] * self.grad[i * n + j];
      for (std::size_t j = 0; j < n; ++j)
        (*g)[i * n + j] += (*y)[i * n + j] * (self.grad[i * n + j] - dot);
    }
  });
}

}  // namespace

Tensor softmax_last(const Tensor& x) { return softmax_impl("softmax_last", x, nullptr); }

Tensor masked_softmax_last(const Tensor& x, std::span<const std::uint8_t> mask) {
  if (mask.size() != x.cols()) {
    throw DimensionError("masked_softmax_last: mask length " + std::to_string(mask.size()) +
                         " vs last axis of " + shape_str(x.shape()));
  }
  return softmax_impl("masked_softmax_last", x, mask.data());
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t d = x.cols(), r = x.rows();
  if (gain.size() != d || bias.size() != d) {
    throw DimensionError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" +
                         shape_str(bias.shape()) + " vs " + shape_str(x.shape()));
  }
  if (!(eps > 0.0)) throw ConfigError("layer_norm: eps must be positive");
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  auto rstd = std::make_shared<std::vector<double>>(r);
  std::vector<double> out(x.size());
  auto xv = x.data(), gv = gain.data(), bv = bias.data();
  for (std::size_t i = 0; i < r; ++i) {
    double mu = 0.0;
    for (std::size_t c = 0; c < d; ++c) mu += xv[i * d + c];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      double t = xv[i * d + c] - mu;
      var += t * t;
    }
    var /= static_cast<double>(d);
    double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[i] = rs;
    for (std::size_t c = 0; c < d; ++c) {
      double h = (xv[i * d + c] - mu) * rs;
      (*xhat)[i * d + c] = h;
      out[i * d + c] = h * gv[c] + bv[c];
    }
  }
  return make_result(
      "layer_norm", x.shape(), std::move(out), {x.node(), gain.node(), bias.node()},
      [xhat, rstd, d, r](Node& self) {
        const auto& gv = pval(self, 1);
        auto* gx = pgrad(self, 0);
        auto* gg = pgrad(self, 1);
        auto* gb = pgrad(self, 2);
        std::vector<double> dh(d);
        for (std::size_t i = 0; i < r; ++i) {
          const double* dy = &self.grad[i * d];
          const double* h = &(*xhat)[i * d];
          if (gg)
            for (std::size_t c = 0; c < d; ++c) (*gg)[c] += dy[c] * h[c];
          if (gb)
            for (std::size_t c = 0; c < d; ++c) (*gb)[c] += dy[c];
          if (!gx) continue;
          double m1 = 0.0, m2 = 0.0;
          for (std::size_t c = 0; c < d; ++c) {
            dh[c] = dy[c] * gv[c];
            m1 += dh[c];
            m2 += dh[c] * h[c];
          }
          m1 /= static_cast<double>(d);
          m2 /= static_cast<double>(d);
          for (std::size_t c = 0; c < d; ++c)
            (*gx)[i * d + c] += (*rstd)[i] * (dh[c] - m1 - h[c] * m2);
        }
      });
}

Tensor self_attention(const Tensor& qkv, std::size_t n_seq, std::size_t len,
                      std::size_t n_heads, std::span<const std::uint8_t> mask) {
  require_rank2("self_attention", qkv);
  const std::size_t three_d = qkv.dim(1);
  if (three_d % 3 != 0 || qkv.dim(0) != n_seq * len || mask.size() != n_seq * len ||
      n_heads == 0 || (three_d / 3) % n_heads != 0) {
    throw DimensionError("self_attention: qkv " + shape_str(qkv.shape()) + " with " +
                         std::to_string(n_seq) + " sequences of " + std::to_string(len) +
                         " and " + std::to_string(n_heads) + " heads");
  }
  const std::size_t d = three_d / 3, dh = d / n_heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  auto probs = std::make_shared<std::vector<double>>(n_seq * n_heads * len * len, 0.0);
  Mask keep(mask.begin(), mask.end());
  std::vector<double> out(n_seq * len * d, 0.0);
  auto x = qkv.data();
  std::vector<double> logits(len);
  for (std::size_t s = 0; s < n_seq; ++s) {
    const std::size_t base = s * len;
    bool any = false;
    for (std::size_t j = 0; j < len; ++j) any = any || keep[base + j];
    if (!any) continue;
    for (std::size_t h = 0; h < n_heads; ++h) {
      const std::size_t qo = h * dh, ko = d + h * dh, vo = 2 * d + h * dh;
      double* P = &(*probs)[((s * n_heads) + h) * len * len];
      for (std::size_t i = 0; i < len; ++i) {
        const double* qi = &x[(base + i) * three_d + qo];
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < len; ++j) {
          if (!keep[base + j]) continue;
          const double* kj = &x[(base + j) * three_d + ko];
          double dot = 0.0;
          for (std::size_t c = 0; c < dh; ++c) dot += qi[c] * kj[c];
          logits[j] = dot * sc;
          mx = std::max(mx, logits[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < len; ++j) {
          if (!keep[base + j]) continue;
          P[i * len + j] = std::exp(logits[j] - mx);
          z += P[i * len + j];
        }
        double* oi = &out[(base + i) * d + h * dh];
        for (std::size_t j = 0; j < len; ++j) {
          if (!keep[base + j]) continue;
          P[i * len + j] /= z;
          const double* vj = &x[(base + j) * three_d + vo];
          for (std::size_t c = 0; c < dh; ++c) oi[c] += P[i * len + j] * vj[c];
        }
      }
    }
  }
  return make_result(
      "self_attention", {n_seq * len, d}, std::move(out), {qkv.node()},
      [probs, keep = std::move(keep), n_seq, len, n_heads, d, dh, sc](Node& self) {
        auto* g = pgrad(self, 0);
        if (!g) return;
        const auto& x = pval(self, 0);
        const std::size_t three_d = 3 * d;
        std::vector<double> dp(len);
        for (std::size_t s = 0; s < n_seq; ++s) {
          const std::size_t base = s * len;
          for (std::size_t h = 0; h < n_heads; ++h) {
            const std::size_t qo = h * dh, ko = d + h * dh, vo = 2 * d + h * dh;
            const double* P = &(*probs)[((s * n_heads) + h) * len * len];
            for (std::size_t i = 0; i < len; ++i) {
              const double* doi = &self.grad[(base + i) * d + h * dh];
              double rowdot = 0.0;
              for (std::size_t j = 0; j < len; ++j) {
                dp[j] = 0.0;
                if (!keep[base + j] || P[i * len + j] == 0.0) continue;
                const double* vj = &x[(base + j) * three_d + vo];
                double* gvj = &(*g)[(base + j) * three_d + vo];
                double acc = 0.0;
                for (std::size_t c = 0; c < dh; ++c) {
                  gvj[c] += P[i * len + j] * doi[c];
                  acc += doi[c] * vj[c];
                }
                dp[j] = acc;
                rowdot += P[i * len + j] * acc;
              }
              const double* qi = &x[(base + i) * three_d + qo];
              double* gqi = &(*g)[(base + i) * three_d + qo];
              for (std::size_t j = 0; j < len; ++j) {
                if (!keep[base + j] || P[i * len + j] == 0.0) continue;
                const double ds = P[i * len + j] * (dp[j] - rowdot) * sc;
                const double* kj = &x[(base + j) * three_d + ko];
                double* gkj = &(*g)[(base + j) * three_d + ko];
                for (std::size_t c = 0; c < dh; ++c) {
                  gqi[c] += ds * kj[c];
                  gkj[c] += ds * qi[c];
                }
              }
            }
          }
        }
      });
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> targets) {
  require_rank2("softmax_cross_entropy", logits);
  const std::size_t b = logits.dim(0), c = logits.dim(1);
  if (targets.size() != b) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(targets.size()) +
                         " targets for " + std::to_string(b) + " rows");
  }
  auto probs = std::make_shared<std::vector<double>>(b * c);
  auto lv = logits.data();
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    if (targets[i] >= c) throw InputError("softmax_cross_entropy: target out of range");
    const double* row = &lv[i * c];
    double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    for (std::size_t j = 0; j < c; ++j) (*probs)[i * c + j] = std::exp(row[j] - mx) / z;
    const double li = std::log(z) + (mx - row[targets[i]]);
    loss += (li - loss) / static_cast<double>(i + 1);
  }
  std::vector<std::size_t> tgt(targets.begin(), targets.end());
  return make_result("softmax_cross_entropy", {}, {loss}, {logits.node()},
                     [probs, tgt = std::move(tgt), b, c](Node& self) {
                       auto* g = pgrad(self, 0);
                       if (!g) return;
                       const double s = self.grad[0] / static_cast<double>(b);
                       for (std::size_t i = 0; i < b; ++i) {
                         for (std::size_t j = 0; j < c; ++j) {
                           double t = (j == tgt[i]) ? 1.0 : 0.0;
                           (*g)[i * c + j] += s * ((*probs)[i * c + j] - t);
                         }
                       }
                     });
}

// ---- indexing --------------------------------------------------------------

Tensor embedding(const Tensor& table, std::span<const std::size_t> ids) {
  require_rank2("embedding", table);
  const std::size_t v = table.dim(0), d = table.dim(1);
  if (ids.empty()) throw InputError("embedding lookup: empty id list");
  std::vector<double> out(ids.size() * d);
  auto tv = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= v) {
      throw InputError("embedding lookup: id " + std::to_string(ids[i]) +
                       " out of range for table with " + std::to_string(v) + " rows");
    }
    std::copy_n(&tv[ids[i] * d], d, &out[i * d]);
  }
  std::vector<std::size_t> idx(ids.begin(), ids.end());
  return make_result("embedding", {ids.size(), d}, std::move(out), {table.node()},
                     [idx = std::move(idx), d](Node& self) {
                       if (auto* g = pgrad(self, 0)) {
                         for (std::size_t i = 0; i < idx.size(); ++i)
                           for (std::size_t c = 0; c < d; ++c)
                             (*g)[idx[i] * d + c] += self.grad[i * d + c];
                       }
                     });
}

Tensor rows(const Tensor& x, std::size_t start, std::size_t count) {
  const std::size_t r = x.rows(), c = x.cols();
  if (count == 0 || start + count > r) {
    throw DimensionError("rows: range [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") out of " + shape_str(x.shape()));
  }
  auto xv = x.data();
  std::vector<double> out(xv.begin() + start * c, xv.begin() + (start + count) * c);
  return make_result("rows", {count, c}, std::move(out), {x.node()},
                     [start, c](Node& self) {
                       if (auto* g = pgrad(self, 0)) {
                         for (std::size_t i = 0; i < self.grad.size(); ++i)
                           (*g)[start * c + i] += self.grad[i];
                       }
                     });
}

Tensor row(const Tensor& x, std::size_t i) {
  return reshape(rows(x, i, 1), {x.cols()});
}

Tensor cols(const Tensor& x, std::size_t start, std::size_t count) {
  require_rank2("cols", x);
  const std::size_t r = x.dim(0), c = x.dim(1);
  if (count == 0 || start + count > c) {
    throw DimensionError("cols: range out of " + shape_str(x.shape()));
  }
  std::vector<double> out(r * count);
  auto xv = x.data();
  for (std::size_t i = 0; i < r; ++i)
    std::copy_n(&xv[i * c + start], count, &out[i * count]);
  return make_result("cols", {r, count}, std::move(out), {x.node()},
                     [r, c, start, count](Node& self) {
                       if (auto* g = pgrad(self, 0)) {
                         for (std::size_t i = 0; i < r; ++i)
                           for (std::size_t j = 0; j < count; ++j)
                             (*g)[i * c + start + j] += self.grad[i * count + j];
                       }
                     });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: nothing to concatenate");
  const std::size_t c = parts.front().cols();
  std::size_t total = 0;
  Parents parents;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    if (p.rank() > 2 || p.cols() != c) {
      throw DimensionError("concat_rows: " + shape_str(p.shape()) + " does not have " +
                           std::to_string(c) + " columns");
    }
    offsets.push_back(total);
    total += p.rows();
    parents.push_back(p.node());
  }
  std::vector<double> out;
  out.reserve(total * c);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return make_result("concat_rows", {total, c}, std::move(out), std::move(parents),
                     [offsets = std::move(offsets), c](Node& self) {
                       for (std::size_t k = 0; k < self.parents.size(); ++k) {
                         if (auto* g = pgrad(self, k)) {
                           for (std::size_t i = 0; i < g->size(); ++i)
                             (*g)[i] += self.grad[offsets[k] * c + i];
                         }
                       }
                     });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: nothing to concatenate");
  const std::size_t r = parts.front().rows();
  std::size_t total = 0;
  Parents parents;
  std::vector<std::size_t> offsets, widths;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(0) != r) {
      throw DimensionError("concat_cols: " + shape_str(p.shape()) + " does not have " +
                           std::to_string(r) + " rows");
    }
    offsets.push_back(total);
    widths.push_back(p.dim(1));
    total += p.dim(1);
    parents.push_back(p.node());
  }
  std::vector<double> out(r * total);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto pv = parts[k].data();
    for (std::size_t i = 0; i < r; ++i)
      std::copy_n(&pv[i * widths[k]], widths[k], &out[i * total + offsets[k]]);
  }
  return make_result("concat_cols", {r, total}, std::move(out), std::move(parents),
                     [offsets = std::move(offsets), widths = std::move(widths), r,
                      total](Node& self) {
                       for (std::size_t k = 0; k < self.parents.size(); ++k) {
                         if (auto* g = pgrad(self, k)) {
                           for (std::size_t i = 0; i < r; ++i)
                             for (std::size_t j = 0; j < widths[k]; ++j)
                               (*g)[i * widths[k] + j] += self.grad[i * total + offsets[k] + j];
                         }
                       }
                     });
}

}  // namespace pcpe
