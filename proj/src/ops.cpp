#include "varformer/ops.hpp"

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <limits>
#include <string>

#include "varformer/errors.hpp"

namespace varformer::ops {

namespace {

bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (active_tape() == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
}

template <class Fn>
void record(std::string_view name, std::vector<Tensor> inputs, Tensor& out, Fn&& fn) {
  out.set_requires_grad(true);
  active_tape()->record(name, std::move(inputs), out, std::forward<Fn>(fn));
}

void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

// out = f(x) elementwise with df/dx expressed through x and f(x).
template <class F, class D>
Tensor unary(const Tensor& x, const char* name, F f, D df) {
  std::vector<double> v(x.size());
  auto xd = x.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = f(xd[i]);
  Tensor out(x.shape(), std::move(v));
  if (tracking({&x})) {
    record(name, {x}, out, [x, out, df]() mutable {
      auto g = out.grad();
      auto xd = x.data();
      auto yd = out.data();
      auto gx = x.grad_mut();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * df(xd[i], yd[i]);
    });
  }
  return out;
}

// C[m x n] += A[m x k] * B[k x n]
void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
  }
  std::vector<double> c(m * n, 0.0);
  gemm_acc(a.data().data(), b.data().data(), c.data(), m, k, n);
  Tensor out({m, n}, std::move(c));
  if (tracking({&a, &b})) {
    record("matmul", {a, b}, out, [a, b, out, m, k, n]() mutable {
      const double* g = out.grad().data();
      if (a.requires_grad()) {
        // dA = dC * B^T
        const double* bd = b.data().data();
        double* ga = a.grad_mut().data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * bd[p * n + j];
            ga[i * k + p] += s;
          }
      }
      if (b.requires_grad()) {
        // dB = A^T * dC
        const double* ad = a.data().data();
        double* gb = b.grad_mut().data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            const double aip = ad[i * k + p];
            for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * g[i * n + j];
          }
      }
    });
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> v(m * n);
  auto ad = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) v[j * m + i] = ad[i * n + j];
  Tensor out({n, m}, std::move(v));
  if (tracking({&a})) {
    record("transpose", {a}, out, [a, out, m, n]() mutable {
      auto g = out.grad();
      auto ga = a.grad_mut();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_size(shape) != x.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  Tensor out(std::move(shape), std::vector<double>(x.data().begin(), x.data().end()));
  if (tracking({&x})) {
    record("reshape", {x}, out, [x, out]() mutable {
      auto g = out.grad();
      auto gx = x.grad_mut();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] + b[i];
  Tensor out(a.shape(), std::move(v));
  if (tracking({&a, &b})) {
    record("add", {a, b}, out, [a, b, out]() mutable {
      auto g = out.grad();
      for (const Tensor* t : {&a, &b}) {
        if (!t->requires_grad()) continue;
        auto gt = t->grad_mut();
        for (std::size_t i = 0; i < g.size(); ++i) gt[i] += g[i];
      }
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] - b[i];
  Tensor out(a.shape(), std::move(v));
  if (tracking({&a, &b})) {
    record("sub", {a, b}, out, [a, b, out]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad_mut();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_mut();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] * b[i];
  Tensor out(a.shape(), std::move(v));
  if (tracking({&a, &b})) {
    record("mul", {a, b}, out, [a, b, out]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad_mut();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_mut();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
      }
    });
  }
  return out;
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  require_matrix(x, "add_row_bias");
  const std::size_t n = x.rows(), d = x.cols();
  if (bias.size() != d) {
    throw ShapeError("add_row_bias: bias " + shape_str(bias.shape()) + " does not fit rows of " +
                     shape_str(x.shape()));
  }
  std::vector<double> v(x.size());
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) v[r * d + c] = x[r * d + c] + bias[c];
  Tensor out(x.shape(), std::move(v));
  if (tracking({&x, &bias})) {
    record("add_row_bias", {x, bias}, out, [x, bias, out, n, d]() mutable {
      auto g = out.grad();
      if (x.requires_grad()) {
        auto gx = x.grad_mut();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (bias.requires_grad()) {
        auto gb = bias.grad_mut();
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t c = 0; c < d; ++c) gb[c] += g[r * d + c];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& x, double factor) {
  return unary(
      x, "scale", [factor](double v) { return v * factor; }, [factor](double, double) { return factor; });
}

Tensor div_scalar(const Tensor& x, double divisor) {
  if (divisor == 0.0) throw DomainError("div_scalar: division by zero");
  return unary(
      x, "div_scalar", [divisor](double v) { return v / divisor; },
      [divisor](double, double) { return 1.0 / divisor; });
}

Tensor add_scalar(const Tensor& x, double value) {
  return unary(
      x, "add_scalar", [value](double v) { return v + value; }, [](double, double) { return 1.0; });
}

Tensor reciprocal(const Tensor& x) {
  for (double v : x.data())
    if (v == 0.0) throw DomainError("reciprocal: zero input");
  return unary(
      x, "reciprocal", [](double v) { return 1.0 / v; }, [](double, double y) { return -y * y; });
}

Tensor relu(const Tensor& x) {
  return unary(
      x, "relu", [](double v) { return v < 0.0 ? 0.0 : v; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor softplus(const Tensor& x) {
  return unary(
      x, "softplus", [](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); },
      [](double v, double) { return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); });
}

Tensor log(const Tensor& x) {
  for (double v : x.data())
    if (!(v > 0.0)) throw DomainError("log: input must be strictly positive, got " + std::to_string(v));
  return unary(
      x, "log", [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor exp(const Tensor& x) {
  return unary(
      x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor sqrt(const Tensor& x) {
  for (double v : x.data())
    if (v < 0.0) throw DomainError("sqrt: input must be non-negative, got " + std::to_string(v));
  return unary(
      x, "sqrt", [](double v) { return std::sqrt(v); },
      [](double, double y) { return y > 0.0 ? 0.5 / y : std::numeric_limits<double>::infinity(); });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  Tensor out = Tensor::scalar(s);
  if (tracking({&x})) {
    record("sum", {x}, out, [x, out]() mutable {
      const double g = out.grad()[0];
      for (double& gx : x.grad_mut()) gx += g;
    });
  }
  return out;
}

Tensor mean(const Tensor& x) { return div_scalar(sum(x), static_cast<double>(x.size())); }

Tensor softmax(const Tensor& x, std::size_t axis) {
  std::size_t outer, inner, stride_outer, stride_inner;
  if (x.rank() == 1) {
    if (axis != 0) throw ShapeError("softmax: axis out of range for " + shape_str(x.shape()));
    outer = 1, inner = x.size(), stride_outer = 0, stride_inner = 1;
  } else if (x.rank() == 2) {
    if (axis == 1) {
      outer = x.rows(), inner = x.cols(), stride_outer = x.cols(), stride_inner = 1;
    } else if (axis == 0) {
      outer = x.cols(), inner = x.rows(), stride_outer = 1, stride_inner = x.cols();
    } else {
      throw ShapeError("softmax: axis out of range for " + shape_str(x.shape()));
    }
  } else {
    throw ShapeError("softmax: expected vector or matrix, got " + shape_str(x.shape()));
  }
  std::vector<double> v(x.size());
  auto xd = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    const std::size_t base = o * stride_outer;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < inner; ++i) mx = std::max(mx, xd[base + i * stride_inner]);
    double s = 0.0;
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t idx = base + i * stride_inner;
      v[idx] = std::exp(xd[idx] - mx);
      s += v[idx];
    }
    for (std::size_t i = 0; i < inner; ++i) v[base + i * stride_inner] /= s;
  }
  Tensor out(x.shape(), std::move(v));
  if (tracking({&x})) {
    record("softmax", {x}, out, [x, out, outer, inner, stride_outer, stride_inner]() mutable {
      auto g = out.grad();
      auto y = out.data();
      auto gx = x.grad_mut();
      for (std::size_t o = 0; o < outer; ++o) {
        const std::size_t base = o * stride_outer;
        double dot = 0.0;
        for (std::size_t i = 0; i < inner; ++i) {
          const std::size_t idx = base + i * stride_inner;
          dot += g[idx] * y[idx];
        }
        for (std::size_t i = 0; i < inner; ++i) {
          const std::size_t idx = base + i * stride_inner;
          gx[idx] += y[idx] * (g[idx] - dot);
        }
      }
    });
  }
  return out;
}

Tensor log_softmax(const Tensor& x) {
  require_matrix(x, "log_softmax");
  const std::size_t n = x.rows(), d = x.cols();
  std::vector<double> v(x.size());
  auto xd = x.data();
  for (std::size_t r = 0; r < n; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < d; ++c) mx = std::max(mx, xd[r * d + c]);
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) s += std::exp(xd[r * d + c] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t c = 0; c < d; ++c) v[r * d + c] = xd[r * d + c] - lse;
  }
  Tensor out(x.shape(), std::move(v));
  if (tracking({&x})) {
    record("log_softmax", {x}, out, [x, out, n, d]() mutable {
      auto g = out.grad();
      auto y = out.data();
      auto gx = x.grad_mut();
      for (std::size_t r = 0; r < n; ++r) {
        double gs = 0.0;
        for (std::size_t c = 0; c < d; ++c) gs += g[r * d + c];
        for (std::size_t c = 0; c < d; ++c) gx[r * d + c] += g[r * d + c] - std::exp(y[r * d + c]) * gs;
      }
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_matrix(x, "layer_norm");
  const std::size_t n = x.rows(), d = x.cols();
  if (gain.size() != d || bias.size() != d) {
    throw ShapeError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                     " do not fit " + shape_str(x.shape()));
  }
  std::vector<double> xhat(x.size());
  std::vector<double> inv_std(n);
  std::vector<double> v(x.size());
  auto xd = x.data();
  for (std::size_t r = 0; r < n; ++r) {
    double mu = 0.0;
    for (std::size_t c = 0; c < d; ++c) mu += xd[r * d + c];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      const double z = xd[r * d + c] - mu;
      var += z * z;
    }
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) {
      xhat[r * d + c] = (xd[r * d + c] - mu) * inv_std[r];
      v[r * d + c] = gain[c] * xhat[r * d + c] + bias[c];
    }
  }
  Tensor out(x.shape(), std::move(v));
  if (tracking({&x, &gain, &bias})) {
    record("layer_norm", {x, gain, bias}, out,
           [x, gain, bias, out, n, d, xhat = std::move(xhat), inv_std = std::move(inv_std)]() mutable {
             auto g = out.grad();
             if (gain.requires_grad()) {
               auto gg = gain.grad_mut();
               for (std::size_t r = 0; r < n; ++r)
                 for (std::size_t c = 0; c < d; ++c) gg[c] += g[r * d + c] * xhat[r * d + c];
             }
             if (bias.requires_grad()) {
               auto gb = bias.grad_mut();
               for (std::size_t r = 0; r < n; ++r)
                 for (std::size_t c = 0; c < d; ++c) gb[c] += g[r * d + c];
             }
             if (x.requires_grad()) {
               auto gx = x.grad_mut();
               const double dd = static_cast<double>(d);
               for (std::size_t r = 0; r < n; ++r) {
                 double s1 = 0.0, s2 = 0.0;
                 for (std::size_t c = 0; c < d; ++c) {
                   const double gh = g[r * d + c] * gain[c];
                   s1 += gh;
                   s2 += gh * xhat[r * d + c];
                 }
                 for (std::size_t c = 0; c < d; ++c) {
                   const double gh = g[r * d + c] * gain[c];
                   gx[r * d + c] += inv_std[r] * (gh - s1 / dd - xhat[r * d + c] * s2 / dd);
                 }
               }
             }
           });
  }
  return out;
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t d = parts[0].cols();
  std::size_t n = 0;
  bool any_grad = false;
  for (const auto& p : parts) {
    require_matrix(p, "concat_rows");
    if (p.cols() != d) {
      throw ShapeError("concat_rows: column mismatch " + shape_str(parts[0].shape()) + " vs " +
                       shape_str(p.shape()));
    }
    n += p.rows();
    any_grad = any_grad || p.requires_grad();
  }
  std::vector<double> v;
  v.reserve(n * d);
  for (const auto& p : parts) v.insert(v.end(), p.data().begin(), p.data().end());
  Tensor out({n, d}, std::move(v));
  if (active_tape() != nullptr && any_grad) {
    std::vector<Tensor> ins(parts.begin(), parts.end());
    record("concat_rows", ins, out, [ins, out]() mutable {
      auto g = out.grad();
      std::size_t offset = 0;
      for (auto& p : ins) {
        if (p.requires_grad()) {
          auto gp = p.grad_mut();
          for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[offset + i];
        }
        offset += p.size();
      }
    });
  }
  return out;
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count) {
  require_matrix(x, "slice_rows");
  if (count == 0 || begin + count > x.rows()) {
    throw ShapeError("slice_rows: rows [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                     ") outside " + shape_str(x.shape()));
  }
  const std::size_t d = x.cols();
  auto xd = x.data();
  Tensor out({count, d}, std::vector<double>(xd.begin() + begin * d, xd.begin() + (begin + count) * d));
  if (tracking({&x})) {
    record("slice_rows", {x}, out, [x, out, begin, d]() mutable {
      auto g = out.grad();
      auto gx = x.grad_mut();
      for (std::size_t i = 0; i < g.size(); ++i) gx[begin * d + i] += g[i];
    });
  }
  return out;
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t n = parts[0].rows();
  std::size_t d = 0;
  bool any_grad = false;
  for (const auto& p : parts) {
    require_matrix(p, "concat_cols");
    if (p.rows() != n) {
      throw ShapeError("concat_cols: row mismatch " + shape_str(parts[0].shape()) + " vs " +
                       shape_str(p.shape()));
    }
    d += p.cols();
    any_grad = any_grad || p.requires_grad();
  }
  std::vector<double> v(n * d);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t pc = p.cols();
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < pc; ++c) v[r * d + offset + c] = p[r * pc + c];
    offset += pc;
  }
  Tensor out({n, d}, std::move(v));
  if (active_tape() != nullptr && any_grad) {
    std::vector<Tensor> ins(parts.begin(), parts.end());
    record("concat_cols", ins, out, [ins, out, n, d]() mutable {
      auto g = out.grad();
      std::size_t offset = 0;
      for (auto& p : ins) {
        const std::size_t pc = p.cols();
        if (p.requires_grad()) {
          auto gp = p.grad_mut();
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < pc; ++c) gp[r * pc + c] += g[r * d + offset + c];
        }
        offset += pc;
      }
    });
  }
  return out;
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count) {
  require_matrix(x, "slice_cols");
  if (count == 0 || begin + count > x.cols()) {
    throw ShapeError("slice_cols: columns [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                     ") outside " + shape_str(x.shape()));
  }
  const std::size_t n = x.rows(), d = x.cols();
  std::vector<double> v(n * count);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < count; ++c) v[r * count + c] = x[r * d + begin + c];
  Tensor out({n, count}, std::move(v));
  if (tracking({&x})) {
    record("slice_cols", {x}, out, [x, out, begin, count, n, d]() mutable {
      auto g = out.grad();
      auto gx = x.grad_mut();
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < count; ++c) gx[r * d + begin + c] += g[r * count + c];
    });
  }
  return out;
}

Tensor gather_rows(const Tensor& table, std::span<const int> ids) {
  require_matrix(table, "gather_rows");
  if (ids.empty()) throw ShapeError("gather_rows: empty id list");
  const std::size_t d = table.cols();
  std::vector<double> v(ids.size() * d);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= table.rows()) {
      throw ShapeError("gather_rows: id " + std::to_string(ids[r]) + " outside table " +
                       shape_str(table.shape()));
    }
    for (std::size_t c = 0; c < d; ++c) v[r * d + c] = table[static_cast<std::size_t>(ids[r]) * d + c];
  }
  Tensor out({ids.size(), d}, std::move(v));
  if (tracking({&table})) {
    std::vector<int> idv(ids.begin(), ids.end());
    record("gather_rows", {table}, out, [table, out, idv, d]() mutable {
      auto g = out.grad();
      auto gt = table.grad_mut();
      for (std::size_t r = 0; r < idv.size(); ++r)
        for (std::size_t c = 0; c < d; ++c) gt[static_cast<std::size_t>(idv[r]) * d + c] += g[r * d + c];
    });
  }
  return out;
}

Tensor pick(const Tensor& x, std::span<const int> ids) {
  require_matrix(x, "pick");
  const std::size_t n = x.rows(), d = x.cols();
  if (ids.size() != n) {
    throw ShapeError("pick: " + std::to_string(ids.size()) + " indices for " + shape_str(x.shape()));
  }
  std::vector<double> v(n);
  for (std::size_t r = 0; r < n; ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= d) {
      throw ShapeError("pick: index " + std::to_string(ids[r]) + " outside " + shape_str(x.shape()));
    }
    v[r] = x[r * d + static_cast<std::size_t>(ids[r])];
  }
  Tensor out({n}, std::move(v));
  if (tracking({&x})) {
    std::vector<int> idv(ids.begin(), ids.end());
    record("pick", {x}, out, [x, out, idv, d]() mutable {
      auto g = out.grad();
      auto gx = x.grad_mut();
      for (std::size_t r = 0; r < idv.size(); ++r) gx[r * d + static_cast<std::size_t>(idv[r])] += g[r];
    });
  }
  return out;
}

Tensor conv3x3_s2(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (x.rank() != 3) throw ShapeError("conv3x3_s2: input must be [C x H x W], got " + shape_str(x.shape()));
  const std::size_t ci = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (weight.rank() != 4 || weight.dim(1) != ci || weight.dim(2) != 3 || weight.dim(3) != 3) {
    throw ShapeError("conv3x3_s2: weight " + shape_str(weight.shape()) + " does not fit input " +
                     shape_str(x.shape()));
  }
  const std::size_t co = weight.dim(0);
  if (bias.size() != co) throw ShapeError("conv3x3_s2: bias " + shape_str(bias.shape()) + " for " + std::to_string(co) + " channels");
  const std::size_t ho = h / 2, wo = w / 2;
  if (ho == 0 || wo == 0) throw ShapeError("conv3x3_s2: input " + shape_str(x.shape()) + " too small");

  // Input coordinate for output index o and kernel tap k; -1 means zero padding.
  auto src = [](std::size_t o, std::size_t k) -> long { return static_cast<long>(2 * o + k) - 1; };

  std::vector<double> v(co * ho * wo);
  auto xd = x.data();
  auto wd = weight.data();
  for (std::size_t oc = 0; oc < co; ++oc)
    for (std::size_t i = 0; i < ho; ++i)
      for (std::size_t j = 0; j < wo; ++j) {
        double s = bias[oc];
        for (std::size_t c = 0; c < ci; ++c)
          for (std::size_t ki = 0; ki < 3; ++ki) {
            const long r = src(i, ki);
            if (r < 0) continue;
            for (std::size_t kj = 0; kj < 3; ++kj) {
              const long q = src(j, kj);
              if (q < 0) continue;
              s += wd[((oc * ci + c) * 3 + ki) * 3 + kj] * xd[(c * h + static_cast<std::size_t>(r)) * w + static_cast<std::size_t>(q)];
            }
          }
        v[(oc * ho + i) * wo + j] = s;
      }
  Tensor out({co, ho, wo}, std::move(v));
  if (tracking({&x, &weight, &bias})) {
    record("conv3x3_s2", {x, weight, bias}, out, [x, weight, bias, out, ci, co, h, w, ho, wo, src]() mutable {
      auto g = out.grad();
      auto xd = x.data();
      auto wd = weight.data();
      std::span<double> gx, gw, gb;
      if (x.requires_grad()) gx = x.grad_mut();
      if (weight.requires_grad()) gw = weight.grad_mut();
      if (bias.requires_grad()) gb = bias.grad_mut();
      for (std::size_t oc = 0; oc < co; ++oc)
        for (std::size_t i = 0; i < ho; ++i)
          for (std::size_t j = 0; j < wo; ++j) {
            const double go = g[(oc * ho + i) * wo + j];
            if (!gb.empty()) gb[oc] += go;
            for (std::size_t c = 0; c < ci; ++c)
              for (std::size_t ki = 0; ki < 3; ++ki) {
                const long r = src(i, ki);
                if (r < 0) continue;
                for (std::size_t kj = 0; kj < 3; ++kj) {
                  const long q = src(j, kj);
                  if (q < 0) continue;
                  const std::size_t widx = ((oc * ci + c) * 3 + ki) * 3 + kj;
                  const std::size_t xidx = (c * h + static_cast<std::size_t>(r)) * w + static_cast<std::size_t>(q);
                  if (!gw.empty()) gw[widx] += go * xd[xidx];
                  if (!gx.empty()) gx[xidx] += go * wd[widx];
                }
              }
          }
    });
  }
  return out;
}

Tensor channels_to_frames(const Tensor& x) {
  if (x.rank() != 3) throw ShapeError("channels_to_frames: expected [C x T x F], got " + shape_str(x.shape()));
  const std::size_t c = x.dim(0), t = x.dim(1), f = x.dim(2);
  std::vector<double> v(x.size());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t ti = 0; ti < t; ++ti)
      for (std::size_t fi = 0; fi < f; ++fi) v[ti * c * f + ch * f + fi] = x[(ch * t + ti) * f + fi];
  Tensor out({t, c * f}, std::move(v));
  if (tracking({&x})) {
    record("channels_to_frames", {x}, out, [x, out, c, t, f]() mutable {
      auto g = out.grad();
      auto gx = x.grad_mut();
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t ti = 0; ti < t; ++ti)
          for (std::size_t fi = 0; fi < f; ++fi) gx[(ch * t + ti) * f + fi] += g[ti * c * f + ch * f + fi];
    });
  }
  return out;
}

}  // namespace varformer::ops
