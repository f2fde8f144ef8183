// OpenMP kernels. Loop orders keep the innermost loop contiguous (axpy form)
// so the compiler can vectorize it; each output row/column is owned by one
// thread.

#include <algorithm>
#include <cmath>
#include <vector>

#include "caft/engine/kernels.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace caft::engine::kernels {

bool openmp_enabled() {
#ifdef _OPENMP
  return true;
#else
  return false;
#endif
}

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

namespace parallel {

namespace {

// Below this many multiply-adds a parallel region costs more than it saves.
constexpr std::size_t kParallelWork = 1 << 14;

inline void axpy(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

std::vector<double> transpose(std::span<const double> src, std::size_t rows, std::size_t cols) {
  std::vector<double> dst(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
  }
  return dst;
}

}  // namespace

void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c, MatmulDims d) {
  const bool par = d.m * d.k * d.n >= kParallelWork;
#pragma omp parallel for schedule(static) if (par)
  for (std::size_t i = 0; i < d.m; ++i) {
    double* ci = c.data() + i * d.n;
    std::fill(ci, ci + d.n, 0.0);
    for (std::size_t p = 0; p < d.k; ++p) {
      const double aip = a[i * d.k + p];
      if (aip != 0.0) axpy(aip, b.data() + p * d.n, ci, d.n);
    }
  }
}

void matmul_grad_a(std::span<const double> dc, std::span<const double> b, std::span<double> da, MatmulDims d) {
  const std::vector<double> bt = transpose(b, d.k, d.n);
  const bool par = d.m * d.k * d.n >= kParallelWork;
#pragma omp parallel for schedule(static) if (par)
  for (std::size_t i = 0; i < d.m; ++i) {
    double* dai = da.data() + i * d.k;
    for (std::size_t j = 0; j < d.n; ++j) {
      const double g = dc[i * d.n + j];
      if (g != 0.0) axpy(g, bt.data() + j * d.k, dai, d.k);
    }
  }
}

void matmul_grad_b(std::span<const double> a, std::span<const double> dc, std::span<double> db, MatmulDims d) {
  const std::vector<double> at = transpose(a, d.m, d.k);
  const bool par = d.m * d.k * d.n >= kParallelWork;
#pragma omp parallel for schedule(static) if (par)
  for (std::size_t p = 0; p < d.k; ++p) {
    double* dbp = db.data() + p * d.n;
    const double* ap = at.data() + p * d.m;
    for (std::size_t i = 0; i < d.m; ++i) {
      if (ap[i] != 0.0) axpy(ap[i], dc.data() + i * d.n, dbp, d.n);
    }
  }
}

void layer_norm(std::span<const double> x, std::span<const double> gamma, std::span<const double> beta,
                std::span<double> y, std::span<double> mean, std::span<double> rstd, std::size_t rows,
                std::size_t cols, double eps) {
  const bool par = rows * cols >= kParallelWork;
#pragma omp parallel for schedule(static) if (par)
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * cols;
    double* yr = y.data() + r * cols;
    double mu = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mu += xr[c];
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= static_cast<double>(cols);
    const double rs = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < cols; ++c) yr[c] = (xr[c] - mu) * rs * gamma[c] + beta[c];
    mean[r] = mu;
    rstd[r] = rs;
  }
}

void layer_norm_grad(std::span<const double> dy, std::span<const double> x, std::span<const double> gamma,
                     std::span<const double> mean, std::span<const double> rstd, std::span<double> dx,
                     std::span<double> dgamma, std::span<double> dbeta, std::size_t rows, std::size_t cols) {
  const double inv_n = 1.0 / static_cast<double>(cols);
  const bool par = rows * cols >= kParallelWork;
  if (!dx.empty()) {
#pragma omp parallel for schedule(static) if (par)
    for (std::size_t r = 0; r < rows; ++r) {
      const double* xr = x.data() + r * cols;
      const double* dyr = dy.data() + r * cols;
      double sum_g = 0.0;
      double sum_gx = 0.0;
      for (std::size_t c = 0; c < cols; ++c) {
        const double g = dyr[c] * gamma[c];
        sum_g += g;
        sum_gx += g * (xr[c] - mean[r]) * rstd[r];
      }
      double* dxr = dx.data() + r * cols;
      for (std::size_t c = 0; c < cols; ++c) {
        const double xhat = (xr[c] - mean[r]) * rstd[r];
        dxr[c] += rstd[r] * (dyr[c] * gamma[c] - inv_n * sum_g - xhat * inv_n * sum_gx);
      }
    }
  }
  if (dgamma.empty() && dbeta.empty()) return;
  // Row-outer accumulation keeps the access contiguous; columns are split
  // into blocks so each thread owns a disjoint slice of dgamma/dbeta.
  const std::size_t block = 16;
  const std::size_t nblocks = (cols + block - 1) / block;
#pragma omp parallel for schedule(static) if (par)
  for (std::size_t cb = 0; cb < nblocks; ++cb) {
    const std::size_t c0 = cb * block;
    const std::size_t c1 = std::min(cols, c0 + block);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* xr = x.data() + r * cols;
      const double* dyr = dy.data() + r * cols;
      for (std::size_t c = c0; c < c1; ++c) {
        if (!dgamma.empty()) dgamma[c] += dyr[c] * ((xr[c] - mean[r]) * rstd[r]);
        if (!dbeta.empty()) dbeta[c] += dyr[c];
      }
    }
  }
}

void causal_attention(std::span<const double> qkv, std::span<double> out, std::span<double> probs,
                      AttentionDims d) {
  const std::size_t dm = d.model_dim();
  const std::size_t row = 3 * dm;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d.head_dim));
  const std::size_t pairs = d.batch * d.heads;
  const bool par = pairs > 1 && d.seq * d.seq * d.head_dim * pairs >= kParallelWork;
#pragma omp parallel for schedule(static) if (par)
  for (std::size_t bh = 0; bh < pairs; ++bh) {
    const std::size_t b = bh / d.heads;
    const std::size_t h = bh % d.heads;
    const double* base = qkv.data() + b * d.seq * row;
    for (std::size_t t = 0; t < d.seq; ++t) {
      const double* q = base + t * row + h * d.head_dim;
      double* p = probs.data() + (bh * d.seq + t) * d.seq;
      double mx = -INFINITY;
      for (std::size_t j = 0; j <= t; ++j) {
        const double* k = base + j * row + dm + h * d.head_dim;
        double s = 0.0;
        for (std::size_t e = 0; e < d.head_dim; ++e) s += q[e] * k[e];
        p[j] = s * scale;
        mx = std::max(mx, p[j]);
      }
      double denom = 0.0;
      for (std::size_t j = 0; j <= t; ++j) {
        p[j] = std::exp(p[j] - mx);
        denom += p[j];
      }
      const double inv = 1.0 / denom;
      for (std::size_t j = 0; j <= t; ++j) p[j] *= inv;
      std::fill(p + t + 1, p + d.seq, 0.0);
      double* o = out.data() + (b * d.seq + t) * dm + h * d.head_dim;
      std::fill(o, o + d.head_dim, 0.0);
      for (std::size_t j = 0; j <= t; ++j) axpy(p[j], base + j * row + 2 * dm + h * d.head_dim, o, d.head_dim);
    }
  }
}

void causal_attention_grad(std::span<const double> dout, std::span<const double> qkv, std::span<const double> probs,
                           std::span<double> dqkv, AttentionDims d) {
  const std::size_t dm = d.model_dim();
  const std::size_t row = 3 * dm;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d.head_dim));
  const std::size_t pairs = d.batch * d.heads;
  const bool par = pairs > 1 && d.seq * d.seq * d.head_dim * pairs >= kParallelWork;
#pragma omp parallel for schedule(static) if (par)
  for (std::size_t bh = 0; bh < pairs; ++bh) {
    const std::size_t b = bh / d.heads;
    const std::size_t h = bh % d.heads;
    const double* base = qkv.data() + b * d.seq * row;
    double* gbase = dqkv.data() + b * d.seq * row;
    const std::size_t qoff = h * d.head_dim;
    const std::size_t koff = dm + h * d.head_dim;
    const std::size_t voff = 2 * dm + h * d.head_dim;
    std::vector<double> dp(d.seq);
    for (std::size_t t = 0; t < d.seq; ++t) {
      const double* p = probs.data() + (bh * d.seq + t) * d.seq;
      const double* go = dout.data() + (b * d.seq + t) * dm + h * d.head_dim;
      double dot = 0.0;
      for (std::size_t j = 0; j <= t; ++j) {
        const double* v = base + j * row + voff;
        double s = 0.0;
        for (std::size_t e = 0; e < d.head_dim; ++e) s += go[e] * v[e];
        dp[j] = s;
        dot += p[j] * s;
        axpy(p[j], go, gbase + j * row + voff, d.head_dim);
      }
      const double* q = base + t * row + qoff;
      double* dq = gbase + t * row + qoff;
      for (std::size_t j = 0; j <= t; ++j) {
        const double ds = p[j] * (dp[j] - dot) * scale;
        axpy(ds, base + j * row + koff, dq, d.head_dim);
        axpy(ds, q, gbase + j * row + koff, d.head_dim);
      }
    }
  }
}

void softmax_rows(std::span<const double> x, std::span<double> y, std::size_t rows, std::size_t cols) {
  const bool par = rows * cols >= kParallelWork;
#pragma omp parallel for schedule(static) if (par)
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * cols;
    double* yr = y.data() + r * cols;
    const double mx = *std::max_element(xr, xr + cols);
    double denom = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      yr[c] = std::exp(xr[c] - mx);
      denom += yr[c];
    }
    const double inv = 1.0 / denom;
    for (std::size_t c = 0; c < cols; ++c) yr[c] *= inv;
  }
}

void cross_entropy_rows(std::span<const double> logits, std::span<const std::int32_t> targets,
                        std::span<const std::uint8_t> mask, std::span<double> losses, std::size_t rows,
                        std::size_t cols) {
  const bool par = rows * cols >= kParallelWork;
#pragma omp parallel for schedule(static) if (par)
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) {
      losses[r] = 0.0;
      continue;
    }
    const double* xr = logits.data() + r * cols;
    const double mx = *std::max_element(xr, xr + cols);
    double denom = 0.0;
    for (std::size_t c = 0; c < cols; ++c) denom += std::exp(xr[c] - mx);
    losses[r] = std::log(denom) + mx - xr[static_cast<std::size_t>(targets[r])];
  }
}

void cross_entropy_rows_grad(std::span<const double> logits, std::span<const std::int32_t> targets,
                             std::span<const std::uint8_t> mask, double scale, std::span<double> dlogits,
                             std::size_t rows, std::size_t cols) {
  const bool par = rows * cols >= kParallelWork;
#pragma omp parallel for schedule(static) if (par)
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    const double* xr = logits.data() + r * cols;
    double* gr = dlogits.data() + r * cols;
    const double mx = *std::max_element(xr, xr + cols);
    double denom = 0.0;
    for (std::size_t c = 0; c < cols; ++c) denom += std::exp(xr[c] - mx);
    const double inv = scale / denom;
    for (std::size_t c = 0; c < cols; ++c) gr[c] += std::exp(xr[c] - mx) * inv;
    gr[static_cast<std::size_t>(targets[r])] -= scale;
  }
}

}  // namespace parallel
}  // namespace caft::engine::kernels
