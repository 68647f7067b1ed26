// SPDX-License-Identifier: Apache-2.0
#include "ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>

#include "error.hpp"

namespace rexmoe {

namespace {

bool recording(std::initializer_list<const Tensor*> inputs) {
  if (Tape::active() == nullptr) return false;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

void record(Tensor& out, Tape::BackwardFn fn) { Tape::active()->record(out, std::move(fn)); }

void require_rank(const Tensor& t, std::int64_t rank, const char* op) {
  if (t.rank() != rank)
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_string(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
}

// Leading dims flattened: returns (rows, last).
std::pair<std::int64_t, std::int64_t> rows_and_last(const Tensor& x, const char* op) {
  if (x.rank() < 1) throw DimensionError(std::string(op) + ": needs rank >= 1");
  const std::int64_t last = x.shape().back();
  return {last == 0 ? 0 : x.numel() / last, last};
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

namespace kernels {

// Register tiles of kRows x kCols outputs held in vector accumulators.
// Every output element is still accumulated over the reduction index in
// ascending order, so tiling never changes results.
using vec8 = double __attribute__((vector_size(64)));
constexpr std::int64_t kRows = 4;
constexpr std::int64_t kCols = 16;

inline vec8 load8(const double* p) {
  vec8 v;
  std::memcpy(&v, p, sizeof v);
  return v;
}
inline void store8(double* p, vec8 v) { std::memcpy(p, &v, sizeof v); }

void gemm_nn(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
             std::int64_t n, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, 0.0);
  std::int64_t i = 0;
  for (; i + kRows <= m; i += kRows) {
    std::int64_t j = 0;
    for (; j + kCols <= n; j += kCols) {
      double* c0 = c + i * n + j;
      vec8 acc[kRows][2];
      for (int r = 0; r < kRows; ++r) {
        acc[r][0] = load8(c0 + r * n);
        acc[r][1] = load8(c0 + r * n + 8);
      }
      const double* ai = a + i * k;
      for (std::int64_t p = 0; p < k; ++p) {
        const vec8 b0 = load8(b + p * n + j);
        const vec8 b1 = load8(b + p * n + j + 8);
        for (int r = 0; r < kRows; ++r) {
          const double x = ai[r * k + p];
          acc[r][0] += x * b0;
          acc[r][1] += x * b1;
        }
      }
      for (int r = 0; r < kRows; ++r) {
        store8(c0 + r * n, acc[r][0]);
        store8(c0 + r * n + 8, acc[r][1]);
      }
    }
    for (std::int64_t r = i; r < i + kRows; ++r) {
      double* cr = c + r * n;
      const double* ar = a + r * k;
      for (std::int64_t p = 0; p < k; ++p) {
        const double x = ar[p];
        const double* bp = b + p * n;
        for (std::int64_t q = j; q < n; ++q) cr[q] += x * bp[q];
      }
    }
  }
  for (; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::int64_t p = 0; p < k; ++p) {
      const double* bp = b + p * n;
      const double x = ai[p];
      for (std::int64_t j = 0; j < n; ++j) ci[j] += x * bp[j];
    }
  }
}

void gemm_tn(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
             std::int64_t n, bool accumulate) {
  if (!accumulate) std::fill(c, c + k * n, 0.0);
  std::int64_t p = 0;
  for (; p + kRows <= k; p += kRows) {
    std::int64_t j = 0;
    for (; j + kCols <= n; j += kCols) {
      double* c0 = c + p * n + j;
      vec8 acc[kRows][2];
      for (int r = 0; r < kRows; ++r) {
        acc[r][0] = load8(c0 + r * n);
        acc[r][1] = load8(c0 + r * n + 8);
      }
      for (std::int64_t i = 0; i < m; ++i) {
        const vec8 b0 = load8(b + i * n + j);
        const vec8 b1 = load8(b + i * n + j + 8);
        const double* ai = a + i * k + p;
        for (int r = 0; r < kRows; ++r) {
          const double x = ai[r];
          acc[r][0] += x * b0;
          acc[r][1] += x * b1;
        }
      }
      for (int r = 0; r < kRows; ++r) {
        store8(c0 + r * n, acc[r][0]);
        store8(c0 + r * n + 8, acc[r][1]);
      }
    }
    if (j < n) {
      for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t r = p; r < p + kRows; ++r) {
          const double x = a[i * k + r];
          for (std::int64_t q = j; q < n; ++q) c[r * n + q] += x * b[i * n + q];
        }
    }
  }
  for (; p < k; ++p) {
    double* cp = c + p * n;
    for (std::int64_t i = 0; i < m; ++i) {
      const double x = a[i * k + p];
      const double* bi = b + i * n;
      for (std::int64_t j = 0; j < n; ++j) cp[j] += x * bi[j];
    }
  }
}

void gemm_nt(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
             std::int64_t n, bool accumulate) {
  std::vector<double> bt(static_cast<std::size_t>(k * n));
  for (std::int64_t j = 0; j < n; ++j)
    for (std::int64_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  gemm_nn(a, bt.data(), c, m, k, n, accumulate);
}

}  // namespace kernels

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw DimensionError("matmul: inner dimensions differ, " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  const bool rec = recording({&a, &b});
  Tensor out = Tensor::zeros({m, n}, rec);
  kernels::gemm_nn(a.data().data(), b.data().data(), out.data().data(), m, k, n, false);
  if (rec) {
    record(out, [a, b, m, k, n](Tensor& o) mutable {
      const double* go = o.grad().data();
      if (a.requires_grad())  // dA = dC . B^T
        kernels::gemm_nt(go, b.data().data(), a.ensure_grad().data(), m, n, k, true);
      if (b.requires_grad())  // dB = A^T . dC
        kernels::gemm_tn(a.data().data(), go, b.ensure_grad().data(), m, k, n, true);
    });
  }
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul_nt");
  require_rank(b, 2, "matmul_nt");
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k)
    throw DimensionError("matmul_nt: inner dimensions differ, " + shape_string(a.shape()) +
                         " x " + shape_string(b.shape()) + "^T");
  const bool rec = recording({&a, &b});
  Tensor out = Tensor::zeros({m, n}, rec);
  kernels::gemm_nt(a.data().data(), b.data().data(), out.data().data(), m, k, n, false);
  if (rec) {
    record(out, [a, b, m, k, n](Tensor& o) mutable {
      const double* go = o.grad().data();
      if (a.requires_grad())  // dA = dC . B
        kernels::gemm_nn(go, b.data().data(), a.ensure_grad().data(), m, n, k, true);
      if (b.requires_grad())  // dB = dC^T . A
        kernels::gemm_tn(go, a.data().data(), b.ensure_grad().data(), m, n, k, true);
    });
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  const bool rec = recording({&a, &b});
  Tensor out = Tensor::zeros(a.shape(), rec);
  auto o = out.data();
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
  if (rec) {
    record(out, [a, b](Tensor& o) mutable {
      auto g = o.grad();
      for (const Tensor* t : {&a, &b}) {
        if (!t->requires_grad()) continue;
        auto gt = t->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gt[i] += g[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  const bool rec = recording({&a, &b});
  Tensor out = Tensor::zeros(a.shape(), rec);
  auto o = out.data();
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * y[i];
  if (rec) {
    record(out, [a, b](Tensor& o) mutable {
      auto g = o.grad();
      if (a.requires_grad()) {
        auto ga = a.ensure_grad();
        auto y = b.data();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
      }
      if (b.requires_grad()) {
        auto gb = b.ensure_grad();
        auto x = a.data();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * x[i];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& x, double factor) {
  const bool rec = recording({&x});
  Tensor out = Tensor::zeros(x.shape(), rec);
  auto o = out.data();
  auto xi = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = xi[i] * factor;
  if (rec) {
    record(out, [x, factor](Tensor& o) mutable {
      auto g = o.grad();
      auto gx = x.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * factor;
    });
  }
  return out;
}

Tensor sum(const Tensor& x) {
  const bool rec = recording({&x});
  double s = 0.0;
  for (double v : x.data()) s += v;
  Tensor out = Tensor::scalar(s, rec);
  if (rec) {
    record(out, [x](Tensor& o) mutable {
      const double g = o.grad()[0];
      for (double& gx : x.ensure_grad()) gx += g;
    });
  }
  return out;
}

Tensor dot_const(const Tensor& x, std::span<const double> weights) {
  if (static_cast<std::int64_t>(weights.size()) != x.numel())
    throw DimensionError("dot_const: " + std::to_string(weights.size()) + " weights for tensor " +
                         shape_string(x.shape()));
  const bool rec = recording({&x});
  double s = 0.0;
  auto xd = x.data();
  for (std::size_t i = 0; i < xd.size(); ++i) s += xd[i] * weights[i];
  Tensor out = Tensor::scalar(s, rec);
  if (rec) {
    std::vector<double> w(weights.begin(), weights.end());
    record(out, [x, w = std::move(w)](Tensor& o) mutable {
      const double g = o.grad()[0];
      auto gx = x.ensure_grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g * w[i];
    });
  }
  return out;
}

Tensor silu(const Tensor& x) {
  const bool rec = recording({&x});
  Tensor out = Tensor::zeros(x.shape(), rec);
  auto o = out.data();
  auto xi = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = xi[i] * sigmoid(xi[i]);
  if (rec) {
    record(out, [x](Tensor& o) mutable {
      auto g = o.grad();
      auto gx = x.ensure_grad();
      auto xi = x.data();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double s = sigmoid(xi[i]);
        gx[i] += g[i] * s * (1.0 + xi[i] * (1.0 - s));
      }
    });
  }
  return out;
}

Tensor softmax(const Tensor& x, std::span<const std::uint8_t> keep) {
  const auto [rows, e] = rows_and_last(x, "softmax");
  if (e < 1) throw DimensionError("softmax: last dimension must be >= 1");
  if (!keep.empty() && static_cast<std::int64_t>(keep.size()) != e)
    throw DimensionError("softmax: keep mask has " + std::to_string(keep.size()) +
                         " slots for last dimension " + std::to_string(e));
  const bool rec = recording({&x});
  Tensor out = Tensor::zeros(x.shape(), rec);
  auto xd = x.data();
  auto od = out.data();
  const auto kept = [&](std::int64_t j) { return keep.empty() || keep[j] != 0; };
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* xr = xd.data() + r * e;
    double* orow = od.data() + r * e;
    double mx = -INFINITY;
    for (std::int64_t j = 0; j < e; ++j)
      if (kept(j)) mx = std::max(mx, xr[j]);
    if (mx == -INFINITY) continue;  // nothing kept: all-zero row
    double total = 0.0;
    for (std::int64_t j = 0; j < e; ++j) {
      if (!kept(j)) continue;
      orow[j] = std::exp(xr[j] - mx);
      total += orow[j];
    }
    for (std::int64_t j = 0; j < e; ++j)
      if (kept(j)) orow[j] /= total;
  }
  if (rec) {
    record(out, [x, rows = rows, e = e](Tensor& o) mutable {
      auto g = o.grad();
      auto y = o.data();
      auto gx = x.ensure_grad();
      for (std::int64_t r = 0; r < rows; ++r) {
        const double* yr = y.data() + r * e;
        const double* gr = g.data() + r * e;
        double dot = 0.0;
        for (std::int64_t j = 0; j < e; ++j) dot += gr[j] * yr[j];
        double* gxr = gx.data() + r * e;
        for (std::int64_t j = 0; j < e; ++j) gxr[j] += yr[j] * (gr[j] - dot);
      }
    });
  }
  return out;
}

Tensor rmsnorm(const Tensor& x, const Tensor& weight, double eps) {
  const auto [rows, d] = rows_and_last(x, "rmsnorm");
  require_rank(weight, 1, "rmsnorm");
  if (weight.dim(0) != d)
    throw DimensionError("rmsnorm: weight " + shape_string(weight.shape()) + " vs input " +
                         shape_string(x.shape()));
  if (!(eps >= 0.0)) throw DimensionError("rmsnorm: eps must be non-negative");
  const bool rec = recording({&x, &weight});
  Tensor out = Tensor::zeros(x.shape(), rec);
  std::vector<double> inv(static_cast<std::size_t>(rows));
  auto xd = x.data();
  auto wd = weight.data();
  auto od = out.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* xr = xd.data() + r * d;
    double ss = 0.0;
    for (std::int64_t j = 0; j < d; ++j) ss += xr[j] * xr[j];
    const double denom = std::sqrt(ss / static_cast<double>(d) + eps);
    inv[r] = denom > 0.0 ? 1.0 / denom : 0.0;
    double* orow = od.data() + r * d;
    for (std::int64_t j = 0; j < d; ++j) orow[j] = xr[j] * inv[r] * wd[j];
  }
  if (rec) {
    record(out, [x, weight, inv = std::move(inv), rows = rows, d = d](Tensor& o) mutable {
      auto g = o.grad();
      auto xd = x.data();
      auto wd = weight.data();
      std::span<double> gx, gw;
      if (x.requires_grad()) gx = x.ensure_grad();
      if (weight.requires_grad()) gw = weight.ensure_grad();
      for (std::int64_t r = 0; r < rows; ++r) {
        const double* xr = xd.data() + r * d;
        const double* gr = g.data() + r * d;
        if (!gw.empty())
          for (std::int64_t j = 0; j < d; ++j) gw[j] += gr[j] * xr[j] * inv[r];
        if (!gx.empty()) {
          // dx = inv * (g.w - n * mean(g.w . n)), n = x * inv
          double dot = 0.0;
          for (std::int64_t j = 0; j < d; ++j) dot += gr[j] * wd[j] * xr[j] * inv[r];
          dot /= static_cast<double>(d);
          double* gxr = gx.data() + r * d;
          for (std::int64_t j = 0; j < d; ++j)
            gxr[j] += inv[r] * (gr[j] * wd[j] - xr[j] * inv[r] * dot);
        }
      }
    });
  }
  return out;
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets) {
  require_rank(logits, 2, "cross_entropy");
  const auto t = logits.dim(0), v = logits.dim(1);
  if (static_cast<std::int64_t>(targets.size()) != t)
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         shape_string(logits.shape()));
  if (t == 0) throw EmptyError("cross_entropy: no positions");
  for (auto id : targets)
    if (id < 0 || id >= v)
      throw OutOfRangeError("cross_entropy: target id " + std::to_string(id) +
                            " outside [0," + std::to_string(v) + ")");
  const bool rec = recording({&logits});
  auto ld = logits.data();
  std::vector<double> probs;
  if (rec) probs.resize(static_cast<std::size_t>(t * v));
  // Extended-precision accumulation keeps the loss within about one rounding
  // of exact, which finite-difference checks at small h rely on.
  long double total = 0.0L;
  for (std::int64_t r = 0; r < t; ++r) {
    const double* lr = ld.data() + r * v;
    double mx = -INFINITY;
    for (std::int64_t j = 0; j < v; ++j) mx = std::max(mx, lr[j]);
    long double s = 0.0L;
    for (std::int64_t j = 0; j < v; ++j) s += std::exp(lr[j] - mx);
    const long double log_s = std::log(s);
    total += static_cast<long double>(mx) - lr[targets[r]] + log_s;
    if (rec) {
      const double lse = static_cast<double>(mx + log_s);
      for (std::int64_t j = 0; j < v; ++j) probs[r * v + j] = std::exp(lr[j] - lse);
    }
  }
  Tensor out = Tensor::scalar(static_cast<double>(total / static_cast<long double>(t)), rec);
  if (rec) {
    std::vector<std::int32_t> tg(targets.begin(), targets.end());
    record(out, [logits, probs = std::move(probs), tg = std::move(tg), t, v](Tensor& o) mutable {
      const double g = o.grad()[0] / static_cast<double>(t);
      auto gl = logits.ensure_grad();
      for (std::int64_t r = 0; r < t; ++r) {
        for (std::int64_t j = 0; j < v; ++j) {
          const double onehot = j == tg[r] ? 1.0 : 0.0;
          gl[r * v + j] += g * (probs[r * v + j] - onehot);
        }
      }
    });
  }
  return out;
}

Tensor embedding(const Tensor& table, std::span<const std::int32_t> ids) {
  require_rank(table, 2, "embedding");
  const auto vocab = table.dim(0), d = table.dim(1);
  for (auto id : ids)
    if (id < 0 || id >= vocab)
      throw OutOfRangeError("embedding: token id " + std::to_string(id) + " outside [0," +
                            std::to_string(vocab) + ")");
  const bool rec = recording({&table});
  const auto n = static_cast<std::int64_t>(ids.size());
  Tensor out = Tensor::zeros({n, d}, rec);
  auto td = table.data();
  auto od = out.data();
  for (std::int64_t r = 0; r < n; ++r)
    std::copy_n(td.data() + ids[r] * d, d, od.data() + r * d);
  if (rec) {
    std::vector<std::int32_t> idv(ids.begin(), ids.end());
    record(out, [table, idv = std::move(idv), d](Tensor& o) mutable {
      auto g = o.grad();
      auto gt = table.ensure_grad();
      for (std::size_t r = 0; r < idv.size(); ++r) {
        double* dst = gt.data() + idv[r] * d;
        const double* src = g.data() + static_cast<std::int64_t>(r) * d;
        for (std::int64_t j = 0; j < d; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

Tensor rope(const Tensor& x, std::int64_t heads, std::int64_t head_dim, std::int64_t seq_len,
            double base) {
  require_rank(x, 2, "rope");
  if (head_dim % 2 != 0) throw DimensionError("rope: head_dim must be even");
  if (x.dim(1) != heads * head_dim)
    throw DimensionError("rope: width " + std::to_string(x.dim(1)) + " != heads*head_dim " +
                         std::to_string(heads * head_dim));
  if (seq_len < 1 || x.dim(0) % seq_len != 0)
    throw DimensionError("rope: rows " + std::to_string(x.dim(0)) + " not a multiple of seq_len " +
                         std::to_string(seq_len));
  const auto rows = x.dim(0), width = x.dim(1), half = head_dim / 2;
  std::vector<double> cosv(static_cast<std::size_t>(seq_len * half));
  std::vector<double> sinv(cosv.size());
  for (std::int64_t p = 0; p < seq_len; ++p) {
    for (std::int64_t i = 0; i < half; ++i) {
      const double freq =
          std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
      const double angle = static_cast<double>(p) * freq;
      cosv[p * half + i] = std::cos(angle);
      sinv[p * half + i] = std::sin(angle);
    }
  }
  const bool rec = recording({&x});
  Tensor out = Tensor::zeros(x.shape(), rec);
  auto xd = x.data();
  auto od = out.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const std::int64_t p = r % seq_len;
    for (std::int64_t h = 0; h < heads; ++h) {
      const double* xh = xd.data() + r * width + h * head_dim;
      double* oh = od.data() + r * width + h * head_dim;
      for (std::int64_t i = 0; i < half; ++i) {
        const double c = cosv[p * half + i], s = sinv[p * half + i];
        const double a = xh[i], b = xh[i + half];
        oh[i] = a * c - b * s;
        oh[i + half] = a * s + b * c;
      }
    }
  }
  if (rec) {
    record(out, [x, cosv = std::move(cosv), sinv = std::move(sinv), rows, width, heads, head_dim,
                 half, seq_len](Tensor& o) mutable {
      auto g = o.grad();
      auto gx = x.ensure_grad();
      for (std::int64_t r = 0; r < rows; ++r) {
        const std::int64_t p = r % seq_len;
        for (std::int64_t h = 0; h < heads; ++h) {
          const double* gh = g.data() + r * width + h * head_dim;
          double* gxh = gx.data() + r * width + h * head_dim;
          for (std::int64_t i = 0; i < half; ++i) {
            const double c = cosv[p * half + i], s = sinv[p * half + i];
            gxh[i] += gh[i] * c + gh[i + half] * s;
            gxh[i + half] += -gh[i] * s + gh[i + half] * c;
          }
        }
      }
    });
  }
  return out;
}

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        const AttentionShape& s) {
  require_rank(q, 2, "causal_attention");
  require_rank(k, 2, "causal_attention");
  require_rank(v, 2, "causal_attention");
  const std::int64_t rows = s.batch * s.seq_len;
  const std::int64_t qw = s.q_heads * s.head_dim, kw = s.kv_heads * s.head_dim;
  if (s.kv_heads < 1 || s.q_heads % s.kv_heads != 0)
    throw DimensionError("causal_attention: q_heads must be a multiple of kv_heads");
  if (q.dim(0) != rows || q.dim(1) != qw || k.dim(0) != rows || k.dim(1) != kw ||
      v.dim(0) != rows || v.dim(1) != kw)
    throw DimensionError("causal_attention: q " + shape_string(q.shape()) + ", k " +
                         shape_string(k.shape()) + ", v " + shape_string(v.shape()) +
                         " inconsistent with batch*seq=" + std::to_string(rows));
  const std::int64_t T = s.seq_len, hd = s.head_dim, group = s.q_heads / s.kv_heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(hd));
  const bool rec = recording({&q, &k, &v});
  Tensor out = Tensor::zeros(q.shape(), rec);
  // Per (batch, q_head) row-major [i][j] probabilities, zero above the diagonal.
  std::vector<double> probs(static_cast<std::size_t>(s.batch * s.q_heads * T * T), 0.0);
  auto qd = q.data(), kd = k.data(), vd = v.data();
  auto od = out.data();

  // Copies a head's [T x hd] slice out of / into a [rows x width] matrix.
  auto gather = [T, hd](const double* src, std::int64_t width, std::int64_t b, std::int64_t head, double* dst) {
    for (std::int64_t i = 0; i < T; ++i)
      std::copy_n(src + (b * T + i) * width + head * hd, hd, dst + i * hd);
  };
  auto scatter_add = [T, hd](const double* src, double* dst, std::int64_t width, std::int64_t b,
                             std::int64_t head) {
    for (std::int64_t i = 0; i < T; ++i) {
      double* d = dst + (b * T + i) * width + head * hd;
      for (std::int64_t c = 0; c < hd; ++c) d[c] += src[i * hd + c];
    }
  };

  std::vector<double> qh(static_cast<std::size_t>(T * hd)), kh(qh.size()), vh(qh.size()), oh(qh.size());
  for (std::int64_t b = 0; b < s.batch; ++b) {
    for (std::int64_t g = 0; g < s.kv_heads; ++g) {
      gather(kd.data(), kw, b, g, kh.data());
      gather(vd.data(), kw, b, g, vh.data());
      for (std::int64_t h = g * group; h < (g + 1) * group; ++h) {
        gather(qd.data(), qw, b, h, qh.data());
        double* P = probs.data() + (b * s.q_heads + h) * T * T;
        kernels::gemm_nt(qh.data(), kh.data(), P, T, hd, T, false);
        for (std::int64_t i = 0; i < T; ++i) {
          double* pi = P + i * T;
          double mx = -INFINITY;
          for (std::int64_t j = 0; j <= i; ++j) {
            pi[j] *= sc;
            mx = std::max(mx, pi[j]);
          }
          double total = 0.0;
          for (std::int64_t j = 0; j <= i; ++j) {
            pi[j] = std::exp(pi[j] - mx);
            total += pi[j];
          }
          for (std::int64_t j = 0; j <= i; ++j) pi[j] /= total;
          std::fill(pi + i + 1, pi + T, 0.0);
        }
        kernels::gemm_nn(P, vh.data(), oh.data(), T, T, hd, false);
        scatter_add(oh.data(), od.data(), qw, b, h);
      }
    }
  }
  if (rec) {
    record(out, [q, k, v, s, probs = std::move(probs), T, hd, group, qw, kw, sc, gather,
                 scatter_add](Tensor& o) mutable {
      auto go = o.grad();
      auto qd = q.data(), kd = k.data(), vd = v.data();
      std::span<double> gq, gk, gv;
      if (q.requires_grad()) gq = q.ensure_grad();
      if (k.requires_grad()) gk = k.ensure_grad();
      if (v.requires_grad()) gv = v.ensure_grad();
      const auto tile = static_cast<std::size_t>(T * hd);
      std::vector<double> qh(tile), kh(tile), vh(tile), goh(tile), gqh(tile), gkh(tile), gvh(tile);
      std::vector<double> dp(static_cast<std::size_t>(T * T));
      for (std::int64_t b = 0; b < s.batch; ++b) {
        for (std::int64_t g = 0; g < s.kv_heads; ++g) {
          gather(kd.data(), kw, b, g, kh.data());
          gather(vd.data(), kw, b, g, vh.data());
          std::fill(gkh.begin(), gkh.end(), 0.0);
          std::fill(gvh.begin(), gvh.end(), 0.0);
          for (std::int64_t h = g * group; h < (g + 1) * group; ++h) {
            const double* P = probs.data() + (b * s.q_heads + h) * T * T;
            gather(go.data(), qw, b, h, goh.data());
            gather(qd.data(), qw, b, h, qh.data());
            // dV += P^T dO, dP = dO V^T
            kernels::gemm_tn(P, goh.data(), gvh.data(), T, T, hd, true);
            kernels::gemm_nt(goh.data(), vh.data(), dp.data(), T, hd, T, false);
            for (std::int64_t i = 0; i < T; ++i) {
              const double* pi = P + i * T;
              double* di = dp.data() + i * T;
              double rowdot = 0.0;
              for (std::int64_t j = 0; j <= i; ++j) rowdot += pi[j] * di[j];
              for (std::int64_t j = 0; j <= i; ++j) di[j] = pi[j] * (di[j] - rowdot) * sc;
              std::fill(di + i + 1, di + T, 0.0);
            }
            // dQ = dS K, dK += dS^T Q
            if (!gq.empty()) {
              kernels::gemm_nn(dp.data(), kh.data(), gqh.data(), T, T, hd, false);
              scatter_add(gqh.data(), gq.data(), qw, b, h);
            }
            kernels::gemm_tn(dp.data(), qh.data(), gkh.data(), T, T, hd, true);
          }
          if (!gk.empty()) scatter_add(gkh.data(), gk.data(), kw, b, g);
          if (!gv.empty()) scatter_add(gvh.data(), gv.data(), kw, b, g);
        }
      }
    });
  }
  return out;
}

Tensor gather_rows(const Tensor& x, std::span<const std::int32_t> rows) {
  require_rank(x, 2, "gather_rows");
  const auto n = x.dim(0), d = x.dim(1);
  for (auto r : rows)
    if (r < 0 || r >= n)
      throw OutOfRangeError("gather_rows: row " + std::to_string(r) + " outside [0," +
                            std::to_string(n) + ")");
  const bool rec = recording({&x});
  const auto m = static_cast<std::int64_t>(rows.size());
  Tensor out = Tensor::zeros({m, d}, rec);
  auto xd = x.data();
  auto od = out.data();
  for (std::int64_t i = 0; i < m; ++i) std::copy_n(xd.data() + rows[i] * d, d, od.data() + i * d);
  if (rec) {
    std::vector<std::int32_t> rv(rows.begin(), rows.end());
    record(out, [x, rv = std::move(rv), d](Tensor& o) mutable {
      auto g = o.grad();
      auto gx = x.ensure_grad();
      for (std::size_t i = 0; i < rv.size(); ++i) {
        double* dst = gx.data() + rv[i] * d;
        const double* src = g.data() + static_cast<std::int64_t>(i) * d;
        for (std::int64_t j = 0; j < d; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

Tensor gather_elements(const Tensor& x, std::span<const std::int32_t> rows,
                       std::span<const std::int32_t> cols) {
  require_rank(x, 2, "gather_elements");
  if (rows.size() != cols.size())
    throw DimensionError("gather_elements: rows and cols differ in length");
  const auto n = x.dim(0), e = x.dim(1);
  for (std::size_t i = 0; i < rows.size(); ++i)
    if (rows[i] < 0 || rows[i] >= n || cols[i] < 0 || cols[i] >= e)
      throw OutOfRangeError("gather_elements: index (" + std::to_string(rows[i]) + "," +
                            std::to_string(cols[i]) + ") outside " + shape_string(x.shape()));
  const bool rec = recording({&x});
  const auto m = static_cast<std::int64_t>(rows.size());
  Tensor out = Tensor::zeros({m}, rec);
  auto xd = x.data();
  auto od = out.data();
  for (std::int64_t i = 0; i < m; ++i) od[i] = xd[rows[i] * e + cols[i]];
  if (rec) {
    std::vector<std::int64_t> flat(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) flat[i] = rows[i] * e + cols[i];
    record(out, [x, flat = std::move(flat)](Tensor& o) mutable {
      auto g = o.grad();
      auto gx = x.ensure_grad();
      for (std::size_t i = 0; i < flat.size(); ++i) gx[flat[i]] += g[i];
    });
  }
  return out;
}

Tensor scale_rows(const Tensor& x, const Tensor& s) {
  require_rank(x, 2, "scale_rows");
  require_rank(s, 1, "scale_rows");
  const auto n = x.dim(0), d = x.dim(1);
  if (s.dim(0) != n)
    throw DimensionError("scale_rows: " + shape_string(s.shape()) + " scales for " +
                         shape_string(x.shape()));
  const bool rec = recording({&x, &s});
  Tensor out = Tensor::zeros(x.shape(), rec);
  auto xd = x.data(), sd = s.data();
  auto od = out.data();
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < d; ++j) od[i * d + j] = sd[i] * xd[i * d + j];
  if (rec) {
    record(out, [x, s, n, d](Tensor& o) mutable {
      auto g = o.grad();
      auto xd = x.data(), sd = s.data();
      if (x.requires_grad()) {
        auto gx = x.ensure_grad();
        for (std::int64_t i = 0; i < n; ++i)
          for (std::int64_t j = 0; j < d; ++j) gx[i * d + j] += sd[i] * g[i * d + j];
      }
      if (s.requires_grad()) {
        auto gs = s.ensure_grad();
        for (std::int64_t i = 0; i < n; ++i) {
          double dot = 0.0;
          for (std::int64_t j = 0; j < d; ++j) dot += g[i * d + j] * xd[i * d + j];
          gs[i] += dot;
        }
      }
    });
  }
  return out;
}

Tensor scatter_add_rows(std::int64_t out_rows, std::int64_t d, const std::vector<Tensor>& parts,
                        const std::vector<std::vector<std::int32_t>>& index) {
  if (parts.size() != index.size())
    throw DimensionError("scatter_add_rows: parts and index lists differ in length");
  bool rec = false;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Tensor& part = parts[p];
    require_rank(part, 2, "scatter_add_rows");
    if (part.dim(1) != d || part.dim(0) != static_cast<std::int64_t>(index[p].size()))
      throw DimensionError("scatter_add_rows: part " + shape_string(part.shape()) + " with " +
                           std::to_string(index[p].size()) + " indices, width " +
                           std::to_string(d));
    for (auto r : index[p])
      if (r < 0 || r >= out_rows)
        throw OutOfRangeError("scatter_add_rows: row " + std::to_string(r) + " outside [0," +
                              std::to_string(out_rows) + ")");
    rec = rec || recording({&part});
  }
  Tensor out = Tensor::zeros({out_rows, d}, rec);
  auto od = out.data();
  for (std::size_t p = 0; p < parts.size(); ++p) {
    auto pd = parts[p].data();
    const auto& idx = index[p];
    for (std::size_t i = 0; i < idx.size(); ++i) {
      double* dst = od.data() + idx[i] * d;
      const double* src = pd.data() + static_cast<std::int64_t>(i) * d;
      for (std::int64_t j = 0; j < d; ++j) dst[j] += src[j];
    }
  }
  if (rec) {
    record(out, [parts, index, d](Tensor& o) mutable {
      auto g = o.grad();
      for (std::size_t p = 0; p < parts.size(); ++p) {
        if (!parts[p].requires_grad()) continue;
        auto gp = parts[p].ensure_grad();
        const auto& idx = index[p];
        for (std::size_t i = 0; i < idx.size(); ++i) {
          const double* src = g.data() + idx[i] * d;
          double* dst = gp.data() + static_cast<std::int64_t>(i) * d;
          for (std::int64_t j = 0; j < d; ++j) dst[j] += src[j];
        }
      }
    });
  }
  return out;
}

}  // namespace rexmoe
