#include "q3r/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>

namespace q3r {

namespace {

std::atomic<bool> g_checked{true};
thread_local Tape* t_active_tape = nullptr;

int shape_numel(const Shape& s) {
  int n = 1;
  for (int d : s) {
    if (d < 0) throw ValidationError("negative dimension in shape");
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

void check_finite(const Tensor& t, const char* op) {
  if (!checked_mode()) return;
  for (double v : t.values()) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("non-finite value produced by op '") + op + "'");
    }
  }
}

void require(bool cond, const std::string& msg) {
  if (!cond) throw ValidationError(msg);
}

using NodePtr = std::shared_ptr<detail::Node>;

bool should_record(std::initializer_list<const Tensor*> ins) {
  if (t_active_tape == nullptr) return false;
  for (const Tensor* t : ins) {
    if (t->requires_grad()) return true;
  }
  return false;
}

// Accumulates src into dst->grad, allocating on first touch.
void axpy_grad(const NodePtr& dst, const std::vector<double>& src) {
  dst->ensure_grad();
  for (size_t i = 0; i < src.size(); ++i) dst->grad[i] += src[i];
}

}  // namespace

bool checked_mode() { return g_checked.load(std::memory_order_relaxed); }
void set_checked_mode(bool on) { g_checked.store(on, std::memory_order_relaxed); }

Tape* active_tape() { return t_active_tape; }

TapeScope::TapeScope(Tape& tape) : prev_(t_active_tape) { t_active_tape = &tape; }
TapeScope::~TapeScope() { t_active_tape = prev_; }

void Tape::backward(const Tensor& loss) {
  require(loss.defined() && loss.numel() == 1, "backward requires a scalar loss");
  if (!loss.requires_grad()) {
    throw ValidationError("backward on a detached tensor (nothing requires grad)");
  }
  // Intermediate grads are owned by the pass; only leaves carry state across.
  for (Entry& e : entries_) e.out->grad.clear();
  loss.node()->ensure_grad();
  loss.node()->grad[0] += 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->fn();
}

Tensor make_tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  int n = shape_numel(shape);
  return make_tensor(std::move(shape), std::vector<double>(static_cast<size_t>(n), 0.0),
                     requires_grad);
}

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
  int n = shape_numel(shape);
  return make_tensor(std::move(shape), std::vector<double>(static_cast<size_t>(n), v),
                     requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  require(static_cast<size_t>(shape_numel(shape)) == data.size(),
          "data length does not match shape " + shape_str(shape));
  return make_tensor(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return make_tensor({1}, {v}, requires_grad);
}

double Tensor::scalar_value() const {
  require(numel() == 1, "scalar_value on a non-scalar tensor");
  return node_->value[0];
}

const std::vector<double>& Tensor::grad() const {
  static const std::vector<double> empty;
  return node_->grad.empty() ? empty : node_->grad;
}

// ---- elementwise ------------------------------------------------------------

namespace {

template <typename Fwd>
Tensor binary_same_shape(const Tensor& a, const Tensor& b, const char* name, Fwd f) {
  require(a.shape() == b.shape(), std::string(name) + ": shape mismatch " +
                                      shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<double> out(a.values().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = f(a.at(static_cast<int>(i)), b.at(static_cast<int>(i)));
  return make_tensor(a.shape(), std::move(out), a.requires_grad() || b.requires_grad());
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  Tensor out = binary_same_shape(a, b, "add", [](double x, double y) { return x + y; });
  check_finite(out, "add");
  if (should_record({&a, &b})) {
    t_active_tape->record([an = a.node(), bn = b.node(), on = out.node()] {
      if (on->grad.empty()) return;
      if (an->requires_grad) axpy_grad(an, on->grad);
      if (bn->requires_grad) axpy_grad(bn, on->grad);
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  Tensor out = binary_same_shape(a, b, "sub", [](double x, double y) { return x - y; });
  check_finite(out, "sub");
  if (should_record({&a, &b})) {
    t_active_tape->record([an = a.node(), bn = b.node(), on = out.node()] {
      if (on->grad.empty()) return;
      if (an->requires_grad) axpy_grad(an, on->grad);
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] -= on->grad[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  Tensor out = binary_same_shape(a, b, "mul", [](double x, double y) { return x * y; });
  check_finite(out, "mul");
  if (should_record({&a, &b})) {
    t_active_tape->record([an = a.node(), bn = b.node(), on = out.node()] {
      if (on->grad.empty()) return;
      if (an->requires_grad) {
        an->ensure_grad();
        for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * bn->value[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] += on->grad[i] * an->value[i];
      }
    });
  }
  return out;
}

Tensor add_scalar(const Tensor& a, double c) {
  std::vector<double> out(a.values().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + c;
  Tensor t = make_tensor(a.shape(), std::move(out), a.requires_grad());
  check_finite(t, "add_scalar");
  if (should_record({&a})) {
    t_active_tape->record([an = a.node(), on = t.node()] {
      if (on->grad.empty()) return;
      axpy_grad(an, on->grad);
    });
  }
  return t;
}

Tensor mul_scalar(const Tensor& a, double c) {
  std::vector<double> out(a.values().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * c;
  Tensor t = make_tensor(a.shape(), std::move(out), a.requires_grad());
  check_finite(t, "mul_scalar");
  if (should_record({&a})) {
    t_active_tape->record([an = a.node(), on = t.node(), c] {
      if (on->grad.empty()) return;
      an->ensure_grad();
      for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * c;
    });
  }
  return t;
}

Tensor scale(const Tensor& vec, const Tensor& s) {
  require(s.numel() == 1, "scale: scaling factor must be a scalar tensor");
  double sv = s.at(0);
  std::vector<double> out(vec.values().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = vec.values()[i] * sv;
  Tensor t = make_tensor(vec.shape(), std::move(out),
                         vec.requires_grad() || s.requires_grad());
  check_finite(t, "scale");
  if (should_record({&vec, &s})) {
    t_active_tape->record([vn = vec.node(), sn = s.node(), on = t.node()] {
      if (on->grad.empty()) return;
      if (vn->requires_grad) {
        vn->ensure_grad();
        for (size_t i = 0; i < on->grad.size(); ++i) vn->grad[i] += on->grad[i] * sn->value[0];
      }
      if (sn->requires_grad) {
        sn->ensure_grad();
        double acc = 0.0;
        for (size_t i = 0; i < on->grad.size(); ++i) acc += on->grad[i] * vn->value[i];
        sn->grad[0] += acc;
      }
    });
  }
  return t;
}

Tensor emin(const Tensor& a, const Tensor& b) {
  Tensor out = binary_same_shape(a, b, "min", [](double x, double y) { return x <= y ? x : y; });
  check_finite(out, "min");
  if (should_record({&a, &b})) {
    t_active_tape->record([an = a.node(), bn = b.node(), on = out.node()] {
      if (on->grad.empty()) return;
      for (size_t i = 0; i < on->grad.size(); ++i) {
        // ties route to the first operand
        if (an->value[i] <= bn->value[i]) {
          if (an->requires_grad) {
            an->ensure_grad();
            an->grad[i] += on->grad[i];
          }
        } else if (bn->requires_grad) {
          bn->ensure_grad();
          bn->grad[i] += on->grad[i];
        }
      }
    });
  }
  return out;
}

Tensor sigmoid(const Tensor& a) {
  std::vector<double> out(a.values().size());
  for (size_t i = 0; i < out.size(); ++i) {
    double x = a.values()[i];
    out[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  }
  Tensor t = make_tensor(a.shape(), std::move(out), a.requires_grad());
  check_finite(t, "sigmoid");
  if (should_record({&a})) {
    t_active_tape->record([an = a.node(), on = t.node()] {
      if (on->grad.empty()) return;
      an->ensure_grad();
      for (size_t i = 0; i < on->grad.size(); ++i) {
        double y = on->value[i];
        an->grad[i] += on->grad[i] * y * (1.0 - y);
      }
    });
  }
  return t;
}

Tensor relu(const Tensor& a) {
  std::vector<double> out(a.values().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] > 0.0 ? a.values()[i] : 0.0;
  Tensor t = make_tensor(a.shape(), std::move(out), a.requires_grad());
  if (should_record({&a})) {
    t_active_tape->record([an = a.node(), on = t.node()] {
      if (on->grad.empty()) return;
      an->ensure_grad();
      for (size_t i = 0; i < on->grad.size(); ++i) {
        if (an->value[i] > 0.0) an->grad[i] += on->grad[i];
      }
    });
  }
  return t;
}

Tensor log_guarded(const Tensor& a) {
  constexpr double kEps = 1e-12;
  std::vector<double> out(a.values().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::log(a.values()[i] + kEps);
  Tensor t = make_tensor(a.shape(), std::move(out), a.requires_grad());
  check_finite(t, "log");
  if (should_record({&a})) {
    t_active_tape->record([an = a.node(), on = t.node()] {
      if (on->grad.empty()) return;
      an->ensure_grad();
      for (size_t i = 0; i < on->grad.size(); ++i) {
        an->grad[i] += on->grad[i] / (an->value[i] + kEps);
      }
    });
  }
  return t;
}

// ---- linear algebra ---------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.ndim() == 2 && b.ndim() == 2, "matmul: expects 2-D operands");
  require(a.dim(1) == b.dim(0), "matmul: inner dimensions disagree " +
                                    shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
  const auto& av = a.values();
  const auto& bv = b.values();
  for (int i = 0; i < m; ++i) {
    for (int p = 0; p < k; ++p) {
      double aip = av[static_cast<size_t>(i) * k + p];
      if (aip == 0.0) continue;
      for (int j = 0; j < n; ++j) {
        out[static_cast<size_t>(i) * n + j] += aip * bv[static_cast<size_t>(p) * n + j];
      }
    }
  }
  Tensor t = make_tensor({m, n}, std::move(out), a.requires_grad() || b.requires_grad());
  check_finite(t, "matmul");
  if (should_record({&a, &b})) {
    t_active_tape->record([an = a.node(), bn = b.node(), on = t.node(), m, k, n] {
      if (on->grad.empty()) return;
      if (an->requires_grad) {
        an->ensure_grad();
        for (int i = 0; i < m; ++i)
          for (int p = 0; p < k; ++p) {
            double acc = 0.0;
            for (int j = 0; j < n; ++j)
              acc += on->grad[static_cast<size_t>(i) * n + j] * bn->value[static_cast<size_t>(p) * n + j];
            an->grad[static_cast<size_t>(i) * k + p] += acc;
          }
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (int p = 0; p < k; ++p)
          for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int i = 0; i < m; ++i)
              acc += an->value[static_cast<size_t>(i) * k + p] * on->grad[static_cast<size_t>(i) * n + j];
            bn->grad[static_cast<size_t>(p) * n + j] += acc;
          }
      }
    });
  }
  return t;
}

Tensor matvec(const Tensor& m, const Tensor& v) {
  require(m.ndim() == 2 && v.ndim() == 1 && m.dim(1) == v.dim(0),
          "matvec: shapes disagree " + shape_str(m.shape()) + " vs " + shape_str(v.shape()));
  int rows = m.dim(0), cols = m.dim(1);
  std::vector<double> out(static_cast<size_t>(rows), 0.0);
  for (int i = 0; i < rows; ++i) {
    double acc = 0.0;
    for (int j = 0; j < cols; ++j) acc += m.values()[static_cast<size_t>(i) * cols + j] * v.values()[static_cast<size_t>(j)];
    out[static_cast<size_t>(i)] = acc;
  }
  Tensor t = make_tensor({rows}, std::move(out), m.requires_grad() || v.requires_grad());
  check_finite(t, "matvec");
  if (should_record({&m, &v})) {
    t_active_tape->record([mn = m.node(), vn = v.node(), on = t.node(), rows, cols] {
      if (on->grad.empty()) return;
      if (mn->requires_grad) {
        mn->ensure_grad();
        for (int i = 0; i < rows; ++i)
          for (int j = 0; j < cols; ++j)
            mn->grad[static_cast<size_t>(i) * cols + j] += on->grad[static_cast<size_t>(i)] * vn->value[static_cast<size_t>(j)];
      }
      if (vn->requires_grad) {
        vn->ensure_grad();
        for (int j = 0; j < cols; ++j) {
          double acc = 0.0;
          for (int i = 0; i < rows; ++i)
            acc += mn->value[static_cast<size_t>(i) * cols + j] * on->grad[static_cast<size_t>(i)];
          vn->grad[static_cast<size_t>(j)] += acc;
        }
      }
    });
  }
  return t;
}

Tensor matvec_t(const Tensor& m, const Tensor& w) {
  require(m.ndim() == 2 && w.ndim() == 1 && m.dim(0) == w.dim(0),
          "matvec_t: shapes disagree " + shape_str(m.shape()) + " vs " + shape_str(w.shape()));
  int rows = m.dim(0), cols = m.dim(1);
  std::vector<double> out(static_cast<size_t>(cols), 0.0);
  for (int i = 0; i < rows; ++i) {
    double wi = w.values()[static_cast<size_t>(i)];
    if (wi == 0.0) continue;
    for (int j = 0; j < cols; ++j) out[static_cast<size_t>(j)] += wi * m.values()[static_cast<size_t>(i) * cols + j];
  }
  Tensor t = make_tensor({cols}, std::move(out), m.requires_grad() || w.requires_grad());
  check_finite(t, "matvec_t");
  if (should_record({&m, &w})) {
    t_active_tape->record([mn = m.node(), wn = w.node(), on = t.node(), rows, cols] {
      if (on->grad.empty()) return;
      if (mn->requires_grad) {
        mn->ensure_grad();
        for (int i = 0; i < rows; ++i)
          for (int j = 0; j < cols; ++j)
            mn->grad[static_cast<size_t>(i) * cols + j] += wn->value[static_cast<size_t>(i)] * on->grad[static_cast<size_t>(j)];
      }
      if (wn->requires_grad) {
        wn->ensure_grad();
        for (int i = 0; i < rows; ++i) {
          double acc = 0.0;
          for (int j = 0; j < cols; ++j)
            acc += mn->value[static_cast<size_t>(i) * cols + j] * on->grad[static_cast<size_t>(j)];
          wn->grad[static_cast<size_t>(i)] += acc;
        }
      }
    });
  }
  return t;
}

namespace {

Tensor linear_impl(const Tensor& x, const Tensor& w, const Tensor* b) {
  require(w.ndim() == 2, "linear: weight must be 2-D [in,out]");
  int in = w.dim(0), out_dim = w.dim(1);
  if (b != nullptr) {
    require(b->ndim() == 1 && b->dim(0) == out_dim, "linear: bias shape mismatch");
  }
  if (x.ndim() == 1) {
    require(x.dim(0) == in, "linear: input dim " + shape_str(x.shape()) +
                                " does not match weight " + shape_str(w.shape()));
    Tensor y = matvec_t(w, x);
    return b ? add(y, *b) : y;
  }
  require(x.ndim() == 2 && x.dim(1) == in, "linear: input " + shape_str(x.shape()) +
                                               " does not match weight " + shape_str(w.shape()));
  Tensor y = matmul(x, w);
  if (!b) return y;
  // broadcast bias over rows
  int rows = x.dim(0);
  std::vector<double> bi(static_cast<size_t>(rows) * out_dim);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < out_dim; ++j) bi[static_cast<size_t>(i) * out_dim + j] = b->values()[static_cast<size_t>(j)];
  Tensor bb = make_tensor({rows, out_dim}, std::move(bi), b->requires_grad());
  if (should_record({b})) {
    t_active_tape->record([bn = b->node(), bbn = bb.node(), rows, out_dim] {
      if (bbn->grad.empty()) return;
      bn->ensure_grad();
      for (int i = 0; i < rows; ++i)
        for (int j = 0; j < out_dim; ++j)
          bn->grad[static_cast<size_t>(j)] += bbn->grad[static_cast<size_t>(i) * out_dim + j];
    });
  }
  return add(y, bb);
}

}  // namespace

Tensor linear(const Tensor& x, const Tensor& w) { return linear_impl(x, w, nullptr); }
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return linear_impl(x, w, &b); }

Tensor row_mul(const Tensor& m, const Tensor& v) {
  require(m.ndim() == 2 && v.ndim() == 1 && m.dim(1) == v.dim(0),
          "row_mul: shapes disagree " + shape_str(m.shape()) + " vs " + shape_str(v.shape()));
  int rows = m.dim(0), cols = m.dim(1);
  std::vector<double> out(m.values().size());
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j)
      out[static_cast<size_t>(i) * cols + j] = m.values()[static_cast<size_t>(i) * cols + j] * v.values()[static_cast<size_t>(j)];
  Tensor t = make_tensor(m.shape(), std::move(out), m.requires_grad() || v.requires_grad());
  check_finite(t, "row_mul");
  if (should_record({&m, &v})) {
    t_active_tape->record([mn = m.node(), vn = v.node(), on = t.node(), rows, cols] {
      if (on->grad.empty()) return;
      if (mn->requires_grad) {
        mn->ensure_grad();
        for (int i = 0; i < rows; ++i)
          for (int j = 0; j < cols; ++j)
            mn->grad[static_cast<size_t>(i) * cols + j] += on->grad[static_cast<size_t>(i) * cols + j] * vn->value[static_cast<size_t>(j)];
      }
      if (vn->requires_grad) {
        vn->ensure_grad();
        for (int j = 0; j < cols; ++j) {
          double acc = 0.0;
          for (int i = 0; i < rows; ++i)
            acc += on->grad[static_cast<size_t>(i) * cols + j] * mn->value[static_cast<size_t>(i) * cols + j];
          vn->grad[static_cast<size_t>(j)] += acc;
        }
      }
    });
  }
  return t;
}

// ---- reductions and reshaping ----------------------------------------------

Tensor softmax(const Tensor& v) {
  require(v.ndim() == 1 && v.numel() > 0, "softmax: expects a non-empty 1-D tensor");
  double mx = *std::max_element(v.values().begin(), v.values().end());
  std::vector<double> out(v.values().size());
  double sum = 0.0;
  for (size_t i = 0; i < out.size(); ++i) {
    out[i] = std::exp(v.values()[i] - mx);
    sum += out[i];
  }
  for (double& x : out) x /= sum;
  Tensor t = make_tensor(v.shape(), std::move(out), v.requires_grad());
  check_finite(t, "softmax");
  if (should_record({&v})) {
    t_active_tape->record([vn = v.node(), on = t.node()] {
      if (on->grad.empty()) return;
      vn->ensure_grad();
      double dot = 0.0;
      for (size_t i = 0; i < on->grad.size(); ++i) dot += on->grad[i] * on->value[i];
      for (size_t i = 0; i < on->grad.size(); ++i)
        vn->grad[i] += on->value[i] * (on->grad[i] - dot);
    });
  }
  return t;
}

Tensor normalize_sum(const Tensor& v) {
  constexpr double kEps = 1e-8;
  require(v.ndim() == 1, "normalize_sum: expects a 1-D tensor");
  double s = std::accumulate(v.values().begin(), v.values().end(), 0.0);
  double denom = s + kEps;
  std::vector<double> out(v.values().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = v.values()[i] / denom;
  Tensor t = make_tensor(v.shape(), std::move(out), v.requires_grad());
  check_finite(t, "normalize_sum");
  if (should_record({&v})) {
    t_active_tape->record([vn = v.node(), on = t.node(), denom] {
      if (on->grad.empty()) return;
      vn->ensure_grad();
      double dot = 0.0;
      for (size_t i = 0; i < on->grad.size(); ++i) dot += on->grad[i] * vn->value[i];
      dot /= (denom * denom);
      for (size_t i = 0; i < on->grad.size(); ++i)
        vn->grad[i] += on->grad[i] / denom - dot;
    });
  }
  return t;
}

Tensor sum_all(const Tensor& a) {
  double s = std::accumulate(a.values().begin(), a.values().end(), 0.0);
  Tensor t = make_tensor({1}, {s}, a.requires_grad());
  check_finite(t, "sum");
  if (should_record({&a})) {
    t_active_tape->record([an = a.node(), on = t.node()] {
      if (on->grad.empty()) return;
      an->ensure_grad();
      for (double& g : an->grad) g += on->grad[0];
    });
  }
  return t;
}

Tensor mean_all(const Tensor& a) {
  require(a.numel() > 0, "mean: empty tensor");
  double s = std::accumulate(a.values().begin(), a.values().end(), 0.0);
  double inv = 1.0 / a.numel();
  Tensor t = make_tensor({1}, {s * inv}, a.requires_grad());
  check_finite(t, "mean");
  if (should_record({&a})) {
    t_active_tape->record([an = a.node(), on = t.node(), inv] {
      if (on->grad.empty()) return;
      an->ensure_grad();
      for (double& g : an->grad) g += on->grad[0] * inv;
    });
  }
  return t;
}

Tensor concat(const Tensor& a, const Tensor& b) {
  require(a.ndim() == 1 && b.ndim() == 1, "concat: expects 1-D tensors");
  std::vector<double> out;
  out.reserve(a.values().size() + b.values().size());
  out.insert(out.end(), a.values().begin(), a.values().end());
  out.insert(out.end(), b.values().begin(), b.values().end());
  Tensor t = make_tensor({a.dim(0) + b.dim(0)}, std::move(out),
                         a.requires_grad() || b.requires_grad());
  if (should_record({&a, &b})) {
    t_active_tape->record([an = a.node(), bn = b.node(), on = t.node()] {
      if (on->grad.empty()) return;
      size_t na = an->value.size();
      if (an->requires_grad) {
        an->ensure_grad();
        for (size_t i = 0; i < na; ++i) an->grad[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (size_t i = 0; i < bn->value.size(); ++i) bn->grad[i] += on->grad[na + i];
      }
    });
  }
  return t;
}

Tensor stack_rows(const std::vector<Tensor>& rows) {
  require(!rows.empty(), "stack_rows: no rows");
  int d = rows[0].dim(0);
  bool rg = false;
  std::vector<double> out;
  out.reserve(rows.size() * static_cast<size_t>(d));
  for (const Tensor& r : rows) {
    require(r.ndim() == 1 && r.dim(0) == d, "stack_rows: row length mismatch");
    out.insert(out.end(), r.values().begin(), r.values().end());
    rg = rg || r.requires_grad();
  }
  Tensor t = make_tensor({static_cast<int>(rows.size()), d}, std::move(out), rg);
  if (t_active_tape != nullptr && rg) {
    std::vector<NodePtr> nodes;
    nodes.reserve(rows.size());
    for (const Tensor& r : rows) nodes.push_back(r.node());
    t_active_tape->record([nodes = std::move(nodes), on = t.node(), d] {
      if (on->grad.empty()) return;
      for (size_t r = 0; r < nodes.size(); ++r) {
        if (!nodes[r]->requires_grad) continue;
        nodes[r]->ensure_grad();
        for (int j = 0; j < d; ++j)
          nodes[r]->grad[static_cast<size_t>(j)] += on->grad[r * static_cast<size_t>(d) + static_cast<size_t>(j)];
      }
    });
  }
  return t;
}

Tensor slice_row(const Tensor& m, int row) {
  require(m.ndim() == 2 && row >= 0 && row < m.dim(0), "slice_row: row out of range");
  int cols = m.dim(1);
  std::vector<double> out(m.values().begin() + static_cast<size_t>(row) * cols,
                          m.values().begin() + static_cast<size_t>(row + 1) * cols);
  Tensor t = make_tensor({cols}, std::move(out), m.requires_grad());
  if (should_record({&m})) {
    t_active_tape->record([mn = m.node(), on = t.node(), row, cols] {
      if (on->grad.empty()) return;
      mn->ensure_grad();
      for (int j = 0; j < cols; ++j)
        mn->grad[static_cast<size_t>(row) * cols + j] += on->grad[static_cast<size_t>(j)];
    });
  }
  return t;
}

Tensor gather_rows(const Tensor& table, const std::vector<int>& ids) {
  require(table.ndim() == 2, "gather_rows: table must be 2-D");
  int rows = table.dim(0), cols = table.dim(1);
  std::vector<double> out;
  out.reserve(ids.size() * static_cast<size_t>(cols));
  for (int id : ids) {
    require(id >= 0 && id < rows, "gather_rows: index " + std::to_string(id) + " out of range");
    out.insert(out.end(), table.values().begin() + static_cast<size_t>(id) * cols,
               table.values().begin() + static_cast<size_t>(id + 1) * cols);
  }
  Tensor t = make_tensor({static_cast<int>(ids.size()), cols}, std::move(out), table.requires_grad());
  if (should_record({&table})) {
    t_active_tape->record([tn = table.node(), on = t.node(), ids, cols] {
      if (on->grad.empty()) return;
      tn->ensure_grad();
      for (size_t r = 0; r < ids.size(); ++r)
        for (int j = 0; j < cols; ++j)
          tn->grad[static_cast<size_t>(ids[r]) * cols + j] += on->grad[r * static_cast<size_t>(cols) + static_cast<size_t>(j)];
    });
  }
  return t;
}

Tensor reshape(const Tensor& a, Shape shape) {
  require(shape_numel(shape) == a.numel(), "reshape: element count mismatch");
  Tensor t = make_tensor(std::move(shape), a.values(), a.requires_grad());
  if (should_record({&a})) {
    t_active_tape->record([an = a.node(), on = t.node()] {
      if (on->grad.empty()) return;
      axpy_grad(an, on->grad);
    });
  }
  return t;
}

Tensor select(const Tensor& v, int i) {
  require(v.ndim() == 1 && i >= 0 && i < v.dim(0), "select: index out of range");
  Tensor t = make_tensor({1}, {v.at(i)}, v.requires_grad());
  if (should_record({&v})) {
    t_active_tape->record([vn = v.node(), on = t.node(), i] {
      if (on->grad.empty()) return;
      vn->ensure_grad();
      vn->grad[static_cast<size_t>(i)] += on->grad[0];
    });
  }
  return t;
}

Tensor concat_pairs(const Tensor& x) {
  require(x.ndim() == 2, "concat_pairs: expects [K,d]");
  int k = x.dim(0), d = x.dim(1);
  std::vector<double> out(static_cast<size_t>(k) * k * 2 * d);
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j) {
      size_t base = (static_cast<size_t>(i) * k + j) * 2 * d;
      for (int c = 0; c < d; ++c) {
        out[base + static_cast<size_t>(c)] = x.values()[static_cast<size_t>(i) * d + c];
        out[base + static_cast<size_t>(d + c)] = x.values()[static_cast<size_t>(j) * d + c];
      }
    }
  Tensor t = make_tensor({k * k, 2 * d}, std::move(out), x.requires_grad());
  if (should_record({&x})) {
    t_active_tape->record([xn = x.node(), on = t.node(), k, d] {
      if (on->grad.empty()) return;
      xn->ensure_grad();
      for (int i = 0; i < k; ++i)
        for (int j = 0; j < k; ++j) {
          size_t base = (static_cast<size_t>(i) * k + j) * 2 * d;
          for (int c = 0; c < d; ++c) {
            xn->grad[static_cast<size_t>(i) * d + c] += on->grad[base + static_cast<size_t>(c)];
            xn->grad[static_cast<size_t>(j) * d + c] += on->grad[base + static_cast<size_t>(d + c)];
          }
        }
    });
  }
  return t;
}

// ---- losses -----------------------------------------------------------------

Tensor cross_entropy(const Tensor& logits, int label) {
  require(logits.ndim() == 1 && logits.numel() > 0, "cross_entropy: logits must be 1-D");
  require(label >= 0 && label < logits.dim(0), "cross_entropy: label out of range");
  double mx = *std::max_element(logits.values().begin(), logits.values().end());
  double sum = 0.0;
  for (double v : logits.values()) sum += std::exp(v - mx);
  double lse = mx + std::log(sum);
  Tensor t = make_tensor({1}, {lse - logits.at(label)}, logits.requires_grad());
  check_finite(t, "cross_entropy");
  if (should_record({&logits})) {
    t_active_tape->record([ln = logits.node(), on = t.node(), label, mx, sum] {
      if (on->grad.empty()) return;
      ln->ensure_grad();
      double g = on->grad[0];
      for (size_t i = 0; i < ln->value.size(); ++i) {
        double p = std::exp(ln->value[i] - mx) / sum;
        ln->grad[i] += g * (p - (static_cast<int>(i) == label ? 1.0 : 0.0));
      }
    });
  }
  return t;
}

Tensor l1_distance(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "l1_distance: shape mismatch");
  double s = 0.0;
  for (size_t i = 0; i < a.values().size(); ++i) s += std::abs(a.values()[i] - b.values()[i]);
  Tensor t = make_tensor({1}, {s}, a.requires_grad() || b.requires_grad());
  check_finite(t, "l1_distance");
  if (should_record({&a, &b})) {
    t_active_tape->record([an = a.node(), bn = b.node(), on = t.node()] {
      if (on->grad.empty()) return;
      double g = on->grad[0];
      for (size_t i = 0; i < an->value.size(); ++i) {
        double diff = an->value[i] - bn->value[i];
        double sgn = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
        if (an->requires_grad) {
          an->ensure_grad();
          an->grad[i] += g * sgn;
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          bn->grad[i] -= g * sgn;
        }
      }
    });
  }
  return t;
}

Tensor kl_divergence(const Tensor& p, const Tensor& q) {
  constexpr double kEps = 1e-12;
  require(p.shape() == q.shape(), "kl_divergence: shape mismatch");
  if (checked_mode()) {
    auto is_dist = [](const Tensor& t) {
      double s = std::accumulate(t.values().begin(), t.values().end(), 0.0);
      if (std::abs(s - 1.0) > 1e-6) return false;
      for (double v : t.values())
        if (v < -1e-12) return false;
      return true;
    };
    if (!is_dist(p) || !is_dist(q)) {
      throw NumericError("kl_divergence: inputs must be probability distributions");
    }
  }
  double s = 0.0;
  for (size_t i = 0; i < p.values().size(); ++i) {
    s += p.values()[i] * std::log((p.values()[i] + kEps) / (q.values()[i] + kEps));
  }
  Tensor t = make_tensor({1}, {s}, p.requires_grad() || q.requires_grad());
  check_finite(t, "kl_divergence");
  if (should_record({&p, &q})) {
    t_active_tape->record([pn = p.node(), qn = q.node(), on = t.node()] {
      if (on->grad.empty()) return;
      double g = on->grad[0];
      for (size_t i = 0; i < pn->value.size(); ++i) {
        double pe = pn->value[i] + kEps;
        double qe = qn->value[i] + kEps;
        if (pn->requires_grad) {
          pn->ensure_grad();
          pn->grad[i] += g * (std::log(pe / qe) + pn->value[i] / pe);
        }
        if (qn->requires_grad) {
          qn->ensure_grad();
          qn->grad[i] -= g * pn->value[i] / qe;
        }
      }
    });
  }
  return t;
}

Tensor gumbel_softmax(const Tensor& logits, SeededRng& rng, double tau,
                      bool straight_through) {
  require(logits.ndim() == 1 && logits.numel() > 0, "gumbel_softmax: logits must be 1-D");
  require(tau > 0.0, "gumbel_softmax: tau must be positive");
  std::vector<double> noise(logits.values().size());
  for (double& g : noise) g = rng.gumbel();
  Tensor gn = make_tensor(logits.shape(), std::move(noise), false);
  Tensor logw = log_guarded(softmax(logits));
  Tensor y = softmax(mul_scalar(add(logw, gn), 1.0 / tau));
  if (!straight_through) return y;
  // forward: one-hot(argmax y); backward: pass gradients straight to y
  size_t arg = 0;
  for (size_t i = 1; i < y.values().size(); ++i)
    if (y.values()[i] > y.values()[arg]) arg = i;
  std::vector<double> hard(y.values().size(), 0.0);
  hard[arg] = 1.0;
  Tensor out = make_tensor(y.shape(), std::move(hard), y.requires_grad());
  if (should_record({&y})) {
    t_active_tape->record([yn = y.node(), on = out.node()] {
      if (on->grad.empty()) return;
      axpy_grad(yn, on->grad);
    });
  }
  return out;
}

// ---- finite-difference oracle -------------------------------------------------

double grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& leaves,
                  double eps) {
  Tape tape;
  std::vector<std::vector<double>> analytic;
  for (const Tensor& leaf : leaves) {
    Tensor l = leaf;
    l.zero_grad();
  }
  {
    TapeScope scope(tape);
    Tensor loss = f();
    if (loss.numel() != 1) throw ValidationError("grad_check: f must be scalar-valued");
    tape.backward(loss);
  }
  analytic.reserve(leaves.size());
  for (const Tensor& leaf : leaves) {
    analytic.push_back(leaf.has_grad() ? leaf.grad()
                                       : std::vector<double>(leaf.values().size(), 0.0));
  }

  double max_err = 0.0;
  for (size_t li = 0; li < leaves.size(); ++li) {
    Tensor leaf = leaves[li];
    for (size_t i = 0; i < leaf.values().size(); ++i) {
      double orig = leaf.values()[i];
      leaf.mutable_values()[i] = orig + eps;
      double fp = f().scalar_value();
      leaf.mutable_values()[i] = orig - eps;
      double fm = f().scalar_value();
      leaf.mutable_values()[i] = orig;
      double fd = (fp - fm) / (2.0 * eps);
      double an = analytic[li][i];
      double denom = std::max({std::abs(fd), std::abs(an), 1e-8});
      max_err = std::max(max_err, std::abs(fd - an) / denom);
    }
  }
  return max_err;
}

}  // namespace q3r
