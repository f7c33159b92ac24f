#pragma once

// Dense row-major float64 tensors with a reverse-mode autodiff tape.
//
// A Tensor is a cheap handle onto a shared node. Ops record a node with a
// backward closure whenever gradient mode is on and at least one input
// requires grad; otherwise the result is a plain value. Every op rejects
// non-finite output with NumericError.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "pcpe/errors.hpp"

namespace pcpe {

using Shape = std::vector<std::size_t>;
/// One byte per position, 1 = keep, 0 = masked out.
using Mask = std::vector<std::uint8_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  bool leaf = true;
  bool consumed = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> data,
                     bool requires_grad = false);
  static Tensor vector(std::vector<double> data, bool requires_grad = false);
  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double v);
  static Tensor normal(Shape shape, double stddev, std::mt19937_64& rng,
                       bool requires_grad = true);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t size() const { return node_->value.size(); }
  /// Row count when viewed as [rows x last-dim].
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const { return node_->value; }
  double item() const;
  double at(std::size_t i) const { return node_->value.at(i); }
  double at(std::size_t r, std::size_t c) const;

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  /// Zero-filled span when no gradient has been accumulated yet.
  std::span<const double> grad() const;
  void zero_grad();

  /// Direct write access. Only legal on leaves (parameters, inputs).
  std::span<double> mutable_data();
  std::span<double> mutable_grad();

  /// Same values, no history.
  Tensor detach() const;
  /// Deep copy of the value into a fresh leaf.
  Tensor clone(bool requires_grad) const;

  /// Identity of the underlying storage; shared parameters compare equal.
  const void* id() const { return node_.get(); }

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// Gradient mode is thread-local; evaluation threads run with it disabled so
// no history is recorded and parameters are only read.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Topologically ordered view of the graph reachable from a root.
class Tape {
 public:
  static Tape build(const Tensor& root);

  std::size_t size() const { return nodes_.size(); }
  const std::vector<std::size_t>& parents_of(std::size_t i) const {
    return parent_positions_[i];
  }

 private:
  friend void backward(const Tensor& loss);
  std::vector<detail::Node*> nodes_;
  std::vector<std::vector<std::size_t>> parent_positions_;
};

/// Accumulates d(loss)/d(leaf) into every reachable leaf's grad.
/// Throws StateError if the graph was already consumed or loss has no history.
void backward(const Tensor& loss);

// ---- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor gelu(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor dropout(const Tensor& x, double rate, std::mt19937_64& rng);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

/// Adds bias[n] to every last-axis slice of x[... x n].
Tensor add_bias(const Tensor& x, const Tensor& bias);

// ---- linear algebra ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
/// out[i] = <a_i, b_i> for a, b of shape [k x d].
Tensor rowwise_dot(const Tensor& a, const Tensor& b);
/// out[i, :] = w[i] * a[i, :].
Tensor scale_rows(const Tensor& a, const Tensor& w);

// ---- reductions ------------------------------------------------------------

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Column sums of x[r x c] -> [c].
Tensor sum_rows(const Tensor& x);
/// Mean over rows whose mask is 1 -> [d]. All-masked is an InputError.
Tensor masked_mean_rows(const Tensor& x, std::span<const std::uint8_t> mask);
/// S[r x (k*L)] viewed as k column segments of width L; returns [r x k] of
/// per-segment maxima over unmasked columns.
Tensor masked_segment_max(const Tensor& s, std::size_t segment,
                          std::span<const std::uint8_t> mask);

// ---- normalisation & attention ---------------------------------------------

Tensor softmax_last(const Tensor& x);
/// Masked positions get weight exactly 0. All-masked slices are an InputError.
Tensor masked_softmax_last(const Tensor& x, std::span<const std::uint8_t> mask);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps);
/// Multi-head scaled dot-product self-attention over n_seq padded sequences
/// stacked as qkv[(n_seq*len) x 3d]. Keys whose mask is 0 get zero weight;
/// sequences with no unmasked key produce zero rows.
Tensor self_attention(const Tensor& qkv, std::size_t n_seq, std::size_t len,
                      std::size_t n_heads, std::span<const std::uint8_t> mask);
/// Mean softmax cross-entropy of logits[b x c] against target column indices.
Tensor softmax_cross_entropy(const Tensor& logits,
                             std::span<const std::size_t> targets);

// ---- indexing --------------------------------------------------------------

/// Gathers rows of table[V x d] -> [n x d]. Out-of-range ids are InputErrors.
Tensor embedding(const Tensor& table, std::span<const std::size_t> ids);
Tensor rows(const Tensor& x, std::size_t start, std::size_t count);
/// Row i of a matrix as a rank-1 tensor.
Tensor row(const Tensor& x, std::size_t i);
Tensor cols(const Tensor& x, std::size_t start, std::size_t count);
/// Stacks matrices (or vectors as single rows) along the row axis.
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);

}  // namespace pcpe
