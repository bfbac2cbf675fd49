#include "peftcap/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numbers>
#include <string>

#include "peftcap/errors.hpp"

namespace peftcap::ops {

namespace {

using Lane = double __attribute__((vector_size(64)));
constexpr std::size_t kLane = 8;
constexpr std::size_t kRows = 4;

Lane load_lane(const double* p) {
  Lane v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

void store_lane(double* p, const Lane& v) { std::memcpy(p, &v, sizeof v); }

// C[m×n] += A·B[k×n], with A read through a_at(i, kk). Every output element
// accumulates in increasing kk no matter which path computes it, so tiled and
// edge results are bitwise identical to the plain triple loop.
template <typename AAt>
void gemm_kernel(AAt a_at, const double* b, double* c, std::size_t m, std::size_t k,
                 std::size_t n) {
  std::size_t i = 0;
  for (; i + kRows <= m; i += kRows) {
    std::size_t j = 0;
    for (; j + 2 * kLane <= n; j += 2 * kLane) {
      Lane acc[kRows][2];
      for (std::size_t r = 0; r < kRows; ++r) {
        acc[r][0] = load_lane(c + (i + r) * n + j);
        acc[r][1] = load_lane(c + (i + r) * n + j + kLane);
      }
      for (std::size_t kk = 0; kk < k; ++kk) {
        const Lane b0 = load_lane(b + kk * n + j);
        const Lane b1 = load_lane(b + kk * n + j + kLane);
        for (std::size_t r = 0; r < kRows; ++r) {
          const double av = a_at(i + r, kk);
          acc[r][0] += av * b0;
          acc[r][1] += av * b1;
        }
      }
      for (std::size_t r = 0; r < kRows; ++r) {
        store_lane(c + (i + r) * n + j, acc[r][0]);
        store_lane(c + (i + r) * n + j + kLane, acc[r][1]);
      }
    }
    for (; j < n; ++j) {
      for (std::size_t r = 0; r < kRows; ++r) {
        double s = c[(i + r) * n + j];
        for (std::size_t kk = 0; kk < k; ++kk) s += a_at(i + r, kk) * b[kk * n + j];
        c[(i + r) * n + j] = s;
      }
    }
  }
  for (; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double av = a_at(i, kk);
      const double* brow = b + kk * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m×n] += A[m×k] · B[k×n].
void gemm_nn(const double* a, const double* b, double* c, std::size_t m,
             std::size_t k, std::size_t n) {
  gemm_kernel([a, k](std::size_t i, std::size_t kk) { return a[i * k + kk]; }, b, c, m, k, n);
}

// C[m×n] += A[k×m]ᵀ · B[k×n].
void gemm_tn(const double* a, const double* b, double* c, std::size_t k,
             std::size_t m, std::size_t n) {
  gemm_kernel([a, m](std::size_t i, std::size_t kk) { return a[kk * m + i]; }, b, c, m, k, n);
}

std::vector<double> transpose(const double* a, std::size_t rows, std::size_t cols) {
  std::vector<double> t(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) t[j * rows + i] = a[i * cols + j];
  return t;
}

// C[m×n] += A[m×k] · B[n×k]ᵀ.
void gemm_nt(const double* a, const double* b, double* c, std::size_t m,
             std::size_t k, std::size_t n) {
  auto bt = transpose(b, n, k);
  gemm_nn(a, bt.data(), c, m, k, n);
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got shape " + shape_str(t.shape()));
  }
}

bool is_scalar(const Tensor& t) { return t.rank() == 0; }

enum class Binary { add, sub, mul };

Tensor binary(const Tensor& a, const Tensor& b, Binary kind, const char* name) {
  const bool a_scalar = is_scalar(a) && !is_scalar(b);
  const bool b_scalar = is_scalar(b) && !is_scalar(a);
  if (!a_scalar && !b_scalar && a.shape() != b.shape()) {
    throw DimensionError(std::string(name) + ": incompatible shapes " +
                         shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const Shape shape = a_scalar ? b.shape() : a.shape();
  const std::size_t n = shape_numel(shape);
  auto av = a.data();
  auto bv = b.data();
  auto at = [&](std::size_t i) { return a_scalar ? av[0] : av[i]; };
  auto bt = [&](std::size_t i) { return b_scalar ? bv[0] : bv[i]; };
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    switch (kind) {
      case Binary::add: out[i] = at(i) + bt(i); break;
      case Binary::sub: out[i] = at(i) - bt(i); break;
      case Binary::mul: out[i] = at(i) * bt(i); break;
    }
  }
  return make_result(
      shape, std::move(out), name, {a, b},
      [a, b, kind, a_scalar, b_scalar](std::span<const double>, std::span<const double> g,
                                       GradBuffers& gin) {
        auto av = a.data();
        auto bv = b.data();
        const std::size_t n = g.size();
        if (!gin[0].empty()) {
          for (std::size_t i = 0; i < n; ++i) {
            double d = g[i];
            if (kind == Binary::mul) d *= b_scalar ? bv[0] : bv[i];
            gin[0][a_scalar ? 0 : i] += d;
          }
        }
        if (!gin[1].empty()) {
          for (std::size_t i = 0; i < n; ++i) {
            double d = g[i];
            if (kind == Binary::sub) d = -d;
            if (kind == Binary::mul) d *= a_scalar ? av[0] : av[i];
            gin[1][b_scalar ? 0 : i] += d;
          }
        }
      });
}

// Unary op with derivative expressed through input and output values.
template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& x, const char* name, Fwd fwd, Deriv deriv) {
  auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  return make_result(x.shape(), std::move(out), name, {x},
                     [x, deriv](std::span<const double> y, std::span<const double> g,
                                GradBuffers& gin) {
                       auto xv = x.data();
                       for (std::size_t i = 0; i < g.size(); ++i)
                         gin[0][i] += g[i] * deriv(xv[i], y[i]);
                     });
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x * std::numbers::sqrt2 / 2.0); }

double normal_pdf(double x) {
  return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions disagree for " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  return make_result({m, n}, std::move(out), "matmul", {a, b},
                     [a, b, m, k, n](std::span<const double>, std::span<const double> g,
                                     GradBuffers& gin) {
                       if (!gin[0].empty())
                         gemm_nt(g.data(), b.data().data(), gin[0].data(), m, n, k);
                       if (!gin[1].empty())
                         gemm_tn(a.data().data(), g.data(), gin[1].data(), m, k, n);
                     });
}

Tensor matmul_bt(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul_bt");
  require_rank(b, 2, "matmul_bt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw DimensionError("matmul_bt: inner dimensions disagree for " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  gemm_nt(a.data().data(), b.data().data(), out.data(), m, k, n);
  return make_result({m, n}, std::move(out), "matmul_bt", {a, b},
                     [a, b, m, k, n](std::span<const double>, std::span<const double> g,
                                     GradBuffers& gin) {
                       // dA = G·B, dB = Gᵀ·A
                       if (!gin[0].empty())
                         gemm_nn(g.data(), b.data().data(), gin[0].data(), m, n, k);
                       if (!gin[1].empty())
                         gemm_tn(g.data(), a.data().data(), gin[1].data(), m, n, k);
                     });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  require_rank(x, 2, "linear");
  require_rank(w, 2, "linear");
  const std::size_t m = x.dim(0), k = x.dim(1), n = w.dim(1);
  if (w.dim(0) != k) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " does not match weight " +
                         shape_str(w.shape()));
  }
  const bool has_bias = bias.defined();
  if (has_bias && bias.shape() != Shape{n}) {
    throw DimensionError("linear: bias " + shape_str(bias.shape()) + " does not match weight " +
                         shape_str(w.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  gemm_nn(x.data().data(), w.data().data(), out.data(), m, k, n);
  if (has_bias) {
    auto bv = bias.data();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bv[j];
  }
  std::vector<Tensor> inputs{x, w};
  if (has_bias) inputs.push_back(bias);
  return make_result({m, n}, std::move(out), "linear", std::move(inputs),
                     [x, w, m, k, n, has_bias](std::span<const double>,
                                               std::span<const double> g, GradBuffers& gin) {
                       if (!gin[0].empty())
                         gemm_nt(g.data(), w.data().data(), gin[0].data(), m, n, k);
                       if (!gin[1].empty())
                         gemm_tn(x.data().data(), g.data(), gin[1].data(), m, k, n);
                       if (has_bias && !gin[2].empty()) {
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t j = 0; j < n; ++j) gin[2][j] += g[i * n + j];
                       }
                     });
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  require_rank(x, 2, "add_row_bias");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (bias.shape() != Shape{n}) {
    throw DimensionError("add_row_bias: bias " + shape_str(bias.shape()) + " does not match " +
                         shape_str(x.shape()));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  auto bv = bias.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bv[j];
  return make_result({m, n}, std::move(out), "add_row_bias", {x, bias},
                     [m, n](std::span<const double>, std::span<const double> g,
                            GradBuffers& gin) {
                       if (!gin[0].empty())
                         for (std::size_t i = 0; i < m * n; ++i) gin[0][i] += g[i];
                       if (!gin[1].empty())
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t j = 0; j < n; ++j) gin[1][j] += g[i * n + j];
                     });
}

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, Binary::add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, Binary::sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, Binary::mul, "mul"); }

Tensor scale(const Tensor& x, double factor) {
  return unary(
      x, "scale", [factor](double v) { return v * factor; },
      [factor](double, double) { return factor; });
}

Tensor relu(const Tensor& x) {
  return unary(
      x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor exp(const Tensor& x) {
  return unary(
      x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary(
      x, "log", [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor gelu(const Tensor& x) {
  return unary(
      x, "gelu", [](double v) { return v * normal_cdf(v); },
      [](double v, double) { return normal_cdf(v) + v * normal_pdf(v); });
}

Tensor elementwise(ElementwiseKind kind, std::span<const Tensor> inputs, double factor) {
  const bool is_binary = kind == ElementwiseKind::add || kind == ElementwiseKind::sub ||
                         kind == ElementwiseKind::mul;
  if (inputs.size() != (is_binary ? 2u : 1u)) {
    throw std::invalid_argument("elementwise: wrong number of inputs");
  }
  switch (kind) {
    case ElementwiseKind::add: return add(inputs[0], inputs[1]);
    case ElementwiseKind::sub: return sub(inputs[0], inputs[1]);
    case ElementwiseKind::mul: return mul(inputs[0], inputs[1]);
    case ElementwiseKind::scale: return scale(inputs[0], factor);
    case ElementwiseKind::relu: return relu(inputs[0]);
    case ElementwiseKind::exp: return exp(inputs[0]);
    case ElementwiseKind::log: return log(inputs[0]);
  }
  return {};
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return make_result({}, {s}, "sum", {x},
                     [](std::span<const double>, std::span<const double> g, GradBuffers& gin) {
                       for (auto& v : gin[0]) v += g[0];
                     });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw DimensionError("mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " out of range for " +
                         shape_str(x.shape()));
  }
  std::size_t outer = 1, inner = 1;
  const std::size_t len = x.dim(axis);
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < len; ++i) mx = std::max(mx, xv[base + i * inner]);
      double total = 0.0;
      for (std::size_t i = 0; i < len; ++i) {
        const double e = std::exp(xv[base + i * inner] - mx);
        out[base + i * inner] = e;
        total += e;
      }
      for (std::size_t i = 0; i < len; ++i) out[base + i * inner] /= total;
    }
  }
  return make_result(x.shape(), std::move(out), "softmax", {x},
                     [outer, inner, len](std::span<const double> y, std::span<const double> g,
                                         GradBuffers& gin) {
                       for (std::size_t o = 0; o < outer; ++o) {
                         for (std::size_t in = 0; in < inner; ++in) {
                           const std::size_t base = o * len * inner + in;
                           double dot = 0.0;
                           for (std::size_t i = 0; i < len; ++i)
                             dot += g[base + i * inner] * y[base + i * inner];
                           for (std::size_t i = 0; i < len; ++i) {
                             const std::size_t at = base + i * inner;
                             gin[0][at] += y[at] * (g[at] - dot);
                           }
                         }
                       }
                     });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() == 0) throw DimensionError("layer_norm: scalar input");
  const std::size_t d = x.dim(x.rank() - 1);
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    throw DimensionError("layer_norm: gamma " + shape_str(gamma.shape()) + " / beta " +
                         shape_str(beta.shape()) + " do not match last dim of " +
                         shape_str(x.shape()));
  }
  if (!(eps > 0.0)) {
    throw NumericError("layer_norm: eps must be positive (division hazard on flat rows)");
  }
  const std::size_t rows = x.numel() / d;
  auto xv = x.data();
  auto gv = gamma.data();
  auto bv = beta.data();
  std::vector<double> out(xv.size());
  std::vector<double> xhat(xv.size());
  std::vector<double> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + eps);
    rstd[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mu) * rs;
      xhat[r * d + j] = h;
      out[r * d + j] = gv[j] * h + bv[j];
    }
  }
  return make_result(
      x.shape(), std::move(out), "layer_norm", {x, gamma, beta},
      [gamma, xhat = std::move(xhat), rstd = std::move(rstd), rows, d](
          std::span<const double>, std::span<const double> g, GradBuffers& gin) {
        auto gv = gamma.data();
        std::vector<double> dxhat(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* gr = g.data() + r * d;
          const double* hr = xhat.data() + r * d;
          if (!gin[1].empty())
            for (std::size_t j = 0; j < d; ++j) gin[1][j] += gr[j] * hr[j];
          if (!gin[2].empty())
            for (std::size_t j = 0; j < d; ++j) gin[2][j] += gr[j];
          if (gin[0].empty()) continue;
          double mean_dx = 0.0, mean_dxh = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            dxhat[j] = gr[j] * gv[j];
            mean_dx += dxhat[j];
            mean_dxh += dxhat[j] * hr[j];
          }
          mean_dx /= static_cast<double>(d);
          mean_dxh /= static_cast<double>(d);
          for (std::size_t j = 0; j < d; ++j)
            gin[0][r * d + j] += rstd[r] * (dxhat[j] - mean_dx - hr[j] * mean_dxh);
        }
      });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, int ignore_index) {
  require_rank(logits, 2, "cross_entropy");
  const std::size_t rows = logits.dim(0), vocab = logits.dim(1);
  if (targets.size() != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) +
                         " targets for logits " + shape_str(logits.shape()));
  }
  std::size_t counted = 0;
  for (int t : targets) {
    if (t == ignore_index) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw DimensionError("cross_entropy: target " + std::to_string(t) +
                           " outside vocabulary of " + std::to_string(vocab));
    }
    ++counted;
  }
  if (counted == 0) throw NumericError("cross_entropy: every position is ignored");

  auto xv = logits.data();
  std::vector<double> probs(rows * vocab, 0.0);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] == ignore_index) continue;
    const double* row = xv.data() + r * vocab;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < vocab; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) {
      probs[r * vocab + j] = std::exp(row[j] - mx);
      z += probs[r * vocab + j];
    }
    for (std::size_t j = 0; j < vocab; ++j) probs[r * vocab + j] /= z;
    total += mx + std::log(z) - row[targets[r]];
  }
  const double inv = 1.0 / static_cast<double>(counted);
  std::vector<int> tgt(targets.begin(), targets.end());
  return make_result({}, {total * inv}, "cross_entropy", {logits},
                     [probs = std::move(probs), tgt = std::move(tgt), rows, vocab, inv,
                      ignore_index](std::span<const double>, std::span<const double> g,
                                    GradBuffers& gin) {
                       const double s = g[0] * inv;
                       for (std::size_t r = 0; r < rows; ++r) {
                         if (tgt[r] == ignore_index) continue;
                         for (std::size_t j = 0; j < vocab; ++j)
                           gin[0][r * vocab + j] += s * probs[r * vocab + j];
                         gin[0][r * vocab + static_cast<std::size_t>(tgt[r])] -= s;
                       }
                     });
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  require_rank(table, 2, "embedding");
  const std::size_t rows = table.dim(0), d = table.dim(1);
  auto tv = table.data();
  std::vector<double> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= rows) {
      throw DimensionError("embedding: id " + std::to_string(ids[i]) + " outside table of " +
                           std::to_string(rows) + " rows");
    }
    std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  std::vector<int> idv(ids.begin(), ids.end());
  return make_result({ids.size(), d}, std::move(out), "embedding", {table},
                     [idv = std::move(idv), d](std::span<const double>,
                                               std::span<const double> g, GradBuffers& gin) {
                       for (std::size_t i = 0; i < idv.size(); ++i) {
                         double* dst = gin[0].data() + static_cast<std::size_t>(idv[i]) * d;
                         for (std::size_t j = 0; j < d; ++j) dst[j] += g[i * d + j];
                       }
                     });
}

Tensor concat_rows(const Tensor& top, const Tensor& bottom) {
  require_rank(top, 2, "concat_rows");
  require_rank(bottom, 2, "concat_rows");
  if (top.dim(1) != bottom.dim(1)) {
    throw DimensionError("concat_rows: widths differ for " + shape_str(top.shape()) + " and " +
                         shape_str(bottom.shape()));
  }
  std::vector<double> out;
  out.reserve(top.numel() + bottom.numel());
  out.insert(out.end(), top.data().begin(), top.data().end());
  out.insert(out.end(), bottom.data().begin(), bottom.data().end());
  const std::size_t split = top.numel();
  return make_result({top.dim(0) + bottom.dim(0), top.dim(1)}, std::move(out), "concat_rows",
                     {top, bottom},
                     [split](std::span<const double>, std::span<const double> g,
                             GradBuffers& gin) {
                       if (!gin[0].empty())
                         for (std::size_t i = 0; i < split; ++i) gin[0][i] += g[i];
                       if (!gin[1].empty())
                         for (std::size_t i = 0; i < gin[1].size(); ++i)
                           gin[1][i] += g[split + i];
                     });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                 bool causal, std::size_t blocks, bool shared_kv) {
  require_rank(q, 2, "attention");
  require_rank(k, 2, "attention");
  require_rank(v, 2, "attention");
  const std::size_t d = q.dim(1);
  if (k.dim(1) != d || v.shape() != k.shape()) {
    throw DimensionError("attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) +
                         ", v " + shape_str(v.shape()) + " disagree");
  }
  if (heads == 0 || d % heads != 0) {
    throw DimensionError("attention: width " + std::to_string(d) + " not divisible into " +
                         std::to_string(heads) + " heads");
  }
  if (blocks == 0 || q.dim(0) % blocks != 0 || (!shared_kv && k.dim(0) % blocks != 0)) {
    throw DimensionError("attention: rows not divisible into " + std::to_string(blocks) +
                         " blocks");
  }
  const std::size_t tq = q.dim(0) / blocks;
  const std::size_t s_len = shared_kv ? k.dim(0) : k.dim(0) / blocks;
  if (causal && tq != s_len) {
    throw DimensionError("attention: causal masking needs equal query and key lengths");
  }
  const std::size_t dh = d / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  auto qv = q.data();
  auto kv = k.data();
  auto vv = v.data();

  std::vector<double> probs(blocks * heads * tq * s_len, 0.0);
  std::vector<double> out(q.numel(), 0.0);
  for (std::size_t b = 0; b < blocks; ++b) {
    const std::size_t kb = shared_kv ? 0 : b;
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t t = 0; t < tq; ++t) {
        double* prow = probs.data() + ((b * heads + h) * tq + t) * s_len;
        const double* qrow = qv.data() + (b * tq + t) * d + h * dh;
        const std::size_t lim = causal ? t + 1 : s_len;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t s = 0; s < lim; ++s) {
          const double* krow = kv.data() + (kb * s_len + s) * d + h * dh;
          double dot = 0.0;
          for (std::size_t j = 0; j < dh; ++j) dot += qrow[j] * krow[j];
          prow[s] = dot * sc;
          mx = std::max(mx, prow[s]);
        }
        double z = 0.0;
        for (std::size_t s = 0; s < lim; ++s) {
          prow[s] = std::exp(prow[s] - mx);
          z += prow[s];
        }
        double* orow = out.data() + (b * tq + t) * d + h * dh;
        for (std::size_t s = 0; s < lim; ++s) {
          prow[s] /= z;
          const double* vrow = vv.data() + (kb * s_len + s) * d + h * dh;
          for (std::size_t j = 0; j < dh; ++j) orow[j] += prow[s] * vrow[j];
        }
      }
    }
  }

  return make_result(
      q.shape(), std::move(out), "attention", {q, k, v},
      [q, k, v, probs = std::move(probs), blocks, heads, tq, s_len, d, dh, sc, causal,
       shared_kv](std::span<const double>, std::span<const double> g, GradBuffers& gin) {
        auto qv = q.data();
        auto kv = k.data();
        auto vv = v.data();
        std::vector<double> dp(s_len);
        for (std::size_t b = 0; b < blocks; ++b) {
          const std::size_t kb = shared_kv ? 0 : b;
          for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t t = 0; t < tq; ++t) {
              const double* prow = probs.data() + ((b * heads + h) * tq + t) * s_len;
              const double* grow = g.data() + (b * tq + t) * d + h * dh;
              const double* qrow = qv.data() + (b * tq + t) * d + h * dh;
              const std::size_t lim = causal ? t + 1 : s_len;
              double dot = 0.0;
              for (std::size_t s = 0; s < lim; ++s) {
                const double* vrow = vv.data() + (kb * s_len + s) * d + h * dh;
                double acc = 0.0;
                for (std::size_t j = 0; j < dh; ++j) acc += grow[j] * vrow[j];
                dp[s] = acc;
                dot += acc * prow[s];
              }
              for (std::size_t s = 0; s < lim; ++s) {
                const std::size_t krow_at = (kb * s_len + s) * d + h * dh;
                if (!gin[2].empty()) {
                  double* gvrow = gin[2].data() + krow_at;
                  for (std::size_t j = 0; j < dh; ++j) gvrow[j] += prow[s] * grow[j];
                }
                const double ds = prow[s] * (dp[s] - dot) * sc;
                if (!gin[0].empty()) {
                  double* gqrow = gin[0].data() + (b * tq + t) * d + h * dh;
                  const double* krow = kv.data() + krow_at;
                  for (std::size_t j = 0; j < dh; ++j) gqrow[j] += ds * krow[j];
                }
                if (!gin[1].empty()) {
                  double* gkrow = gin[1].data() + krow_at;
                  for (std::size_t j = 0; j < dh; ++j) gkrow[j] += ds * qrow[j];
                }
              }
            }
          }
        }
      });
}

}  // namespace peftcap::ops
