#pragma once

#include <functional>
#include <initializer_list>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "q3r/rng.hpp"

namespace q3r {

// Validation failure (bad input, malformed file, shape mismatch).
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Numerical failure (non-finite value in checked mode, failed gradient check).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<int>;

// Checked mode verifies every op output is finite. On by default; the cost is
// negligible at desk scale.
bool checked_mode();
void set_checked_mode(bool on);

namespace detail {
struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated lazily on first accumulation
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
  }
};
}  // namespace detail

// Dense row-major double tensor. Value semantics over a shared node: copies
// alias the same storage, matching how parameters are shared across steps.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  int numel() const { return static_cast<int>(node_->value.size()); }

  const std::vector<double>& values() const { return node_->value; }
  // Direct mutation is for parameter updates and test setup only; it is not
  // recorded on any tape.
  std::vector<double>& mutable_values() { return node_->value; }

  double at(int i) const { return node_->value[static_cast<size_t>(i)]; }
  double scalar_value() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg) { node_->requires_grad = rg; }

  bool has_grad() const { return !node_->grad.empty(); }
  const std::vector<double>& grad() const;
  void zero_grad() {
    if (!node_->grad.empty()) node_->grad.assign(node_->grad.size(), 0.0);
  }

  std::shared_ptr<detail::Node> node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
  std::shared_ptr<detail::Node> node_;

  friend Tensor make_tensor(Shape, std::vector<double>, bool);
};

Tensor make_tensor(Shape shape, std::vector<double> data, bool requires_grad);

// Ordered record of executed operations. Forward execution appends entries in
// topological order; backward() replays them once, in reverse.
class Tape {
 public:
  void record(std::shared_ptr<detail::Node> out, std::function<void()> fn) {
    entries_.push_back({std::move(out), std::move(fn)});
  }

  // loss must be a scalar recorded on this tape. Populates grad on every
  // requires_grad leaf reachable from it; accumulation is additive across
  // uses within a pass, and across passes for leaves (intermediate grads are
  // reset at the start of each pass).
  void backward(const Tensor& loss);

  size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

 private:
  struct Entry {
    std::shared_ptr<detail::Node> out;
    std::function<void()> fn;
  };
  std::vector<Entry> entries_;
};

Tape* active_tape();

// RAII activation of a tape for the current thread.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

// ---- forward ops ----------------------------------------------------------
// All ops allocate fresh outputs, propagate requires_grad, and record a
// backward closure on the active tape when any input requires grad.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise
Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);
// vec * s with s a scalar tensor; gradients flow to both.
Tensor scale(const Tensor& vec, const Tensor& s);
// Elementwise min; at ties the gradient routes to the first operand.
Tensor emin(const Tensor& a, const Tensor& b);

Tensor sigmoid(const Tensor& a);
Tensor relu(const Tensor& a);
// log(x + 1e-12); the project-wide log guard.
Tensor log_guarded(const Tensor& a);

Tensor matmul(const Tensor& a, const Tensor& b);     // [m,k]x[k,n] -> [m,n]
Tensor matvec(const Tensor& m, const Tensor& v);     // [m,n]x[n] -> [m]
Tensor matvec_t(const Tensor& m, const Tensor& w);   // [m,n]^T x[m] -> [n]
// x[in] -> [out] or x[P,in] -> [P,out]; W is [in,out]. The per-position affine
// map; 1x1 convolutions over regions are this op.
Tensor linear(const Tensor& x, const Tensor& w);
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
Tensor row_mul(const Tensor& m, const Tensor& v);  // [P,d] ⊙ v[d] broadcast

Tensor softmax(const Tensor& v);        // 1-D
Tensor normalize_sum(const Tensor& v);  // v / (sum(v) + 1e-8)
Tensor sum_all(const Tensor& a);        // scalar
Tensor mean_all(const Tensor& a);       // scalar

Tensor concat(const Tensor& a, const Tensor& b);          // 1-D
Tensor stack_rows(const std::vector<Tensor>& rows);       // N x d
Tensor slice_row(const Tensor& m, int row);               // [d]
Tensor gather_rows(const Tensor& table, const std::vector<int>& ids);
Tensor reshape(const Tensor& a, Shape shape);
Tensor select(const Tensor& v, int i);  // scalar element of a 1-D tensor
// [K,d] -> [K*K, 2d], row i*K+j = concat(x_i, x_j). Edge features of a scene
// graph whose nodes are the K region vectors.
Tensor concat_pairs(const Tensor& x);

// -log softmax(logits)[label], computed with the log-sum-exp shift.
Tensor cross_entropy(const Tensor& logits, int label);
Tensor l1_distance(const Tensor& a, const Tensor& b);  // scalar
// sum_i p_i log((p_i+1e-12)/(q_i+1e-12)); checked mode validates that both
// inputs are distributions.
Tensor kl_divergence(const Tensor& p, const Tensor& q);

// softmax((log softmax(logits) + g)/tau) with g ~ Gumbel(0,1) drawn from rng.
// straight_through replaces the forward value with one-hot(argmax), keeping
// the soft gradient.
Tensor gumbel_softmax(const Tensor& logits, SeededRng& rng, double tau,
                      bool straight_through = false);

// ---- numerical oracle -----------------------------------------------------

// Compares reverse-mode gradients of f() against central finite differences
// over every coordinate of every leaf. Returns the max relative error with
// denominator max(|a|,|b|,1e-8).
double grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& leaves,
                  double eps = 1e-5);

}  // namespace q3r
