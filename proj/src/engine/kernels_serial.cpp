// Reference kernels: textbook loop orders, no parallelism.

#include <algorithm>
#include <cmath>
#include <vector>

#include "caft/engine/kernels.hpp"

namespace caft::engine::kernels::serial {

void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c, MatmulDims d) {
  for (std::size_t i = 0; i < d.m; ++i) {
    for (std::size_t j = 0; j < d.n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < d.k; ++p) acc += a[i * d.k + p] * b[p * d.n + j];
      c[i * d.n + j] = acc;
    }
  }
}

void matmul_grad_a(std::span<const double> dc, std::span<const double> b, std::span<double> da, MatmulDims d) {
  for (std::size_t i = 0; i < d.m; ++i) {
    for (std::size_t p = 0; p < d.k; ++p) {
      double acc = 0.0;
      for (std::size_t j = 0; j < d.n; ++j) acc += dc[i * d.n + j] * b[p * d.n + j];
      da[i * d.k + p] += acc;
    }
  }
}

void matmul_grad_b(std::span<const double> a, std::span<const double> dc, std::span<double> db, MatmulDims d) {
  for (std::size_t p = 0; p < d.k; ++p) {
    for (std::size_t j = 0; j < d.n; ++j) {
      double acc = 0.0;
      for (std::size_t i = 0; i < d.m; ++i) acc += a[i * d.k + p] * dc[i * d.n + j];
      db[p * d.n + j] += acc;
    }
  }
}

void layer_norm(std::span<const double> x, std::span<const double> gamma, std::span<const double> beta,
                std::span<double> y, std::span<double> mean, std::span<double> rstd, std::size_t rows,
                std::size_t cols, double eps) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * cols;
    double mu = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mu += xr[c];
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= static_cast<double>(cols);
    const double rs = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < cols; ++c) y[r * cols + c] = (xr[c] - mu) * rs * gamma[c] + beta[c];
    mean[r] = mu;
    rstd[r] = rs;
  }
}

void layer_norm_grad(std::span<const double> dy, std::span<const double> x, std::span<const double> gamma,
                     std::span<const double> mean, std::span<const double> rstd, std::span<double> dx,
                     std::span<double> dgamma, std::span<double> dbeta, std::size_t rows, std::size_t cols) {
  const double inv_n = 1.0 / static_cast<double>(cols);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * cols;
    const double* dyr = dy.data() + r * cols;
    double sum_g = 0.0;
    double sum_gx = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      const double xhat = (xr[c] - mean[r]) * rstd[r];
      const double g = dyr[c] * gamma[c];
      sum_g += g;
      sum_gx += g * xhat;
      if (!dgamma.empty()) dgamma[c] += dyr[c] * xhat;
      if (!dbeta.empty()) dbeta[c] += dyr[c];
    }
    if (dx.empty()) continue;
    for (std::size_t c = 0; c < cols; ++c) {
      const double xhat = (xr[c] - mean[r]) * rstd[r];
      const double g = dyr[c] * gamma[c];
      dx[r * cols + c] += rstd[r] * (g - inv_n * sum_g - xhat * inv_n * sum_gx);
    }
  }
}

void causal_attention(std::span<const double> qkv, std::span<double> out, std::span<double> probs,
                      AttentionDims d) {
  const std::size_t dm = d.model_dim();
  const std::size_t row = 3 * dm;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d.head_dim));
  std::vector<double> scores(d.seq);
  for (std::size_t b = 0; b < d.batch; ++b) {
    for (std::size_t h = 0; h < d.heads; ++h) {
      for (std::size_t t = 0; t < d.seq; ++t) {
        const double* q = qkv.data() + (b * d.seq + t) * row + h * d.head_dim;
        double mx = -INFINITY;
        for (std::size_t j = 0; j <= t; ++j) {
          const double* k = qkv.data() + (b * d.seq + j) * row + dm + h * d.head_dim;
          double s = 0.0;
          for (std::size_t e = 0; e < d.head_dim; ++e) s += q[e] * k[e];
          scores[j] = s * scale;
          mx = std::max(mx, scores[j]);
        }
        double denom = 0.0;
        for (std::size_t j = 0; j <= t; ++j) {
          scores[j] = std::exp(scores[j] - mx);
          denom += scores[j];
        }
        double* p = probs.data() + ((b * d.heads + h) * d.seq + t) * d.seq;
        for (std::size_t j = 0; j < d.seq; ++j) p[j] = j <= t ? scores[j] / denom : 0.0;
        double* o = out.data() + (b * d.seq + t) * dm + h * d.head_dim;
        for (std::size_t e = 0; e < d.head_dim; ++e) {
          double acc = 0.0;
          for (std::size_t j = 0; j <= t; ++j) acc += p[j] * qkv[(b * d.seq + j) * row + 2 * dm + h * d.head_dim + e];
          o[e] = acc;
        }
      }
    }
  }
}

void causal_attention_grad(std::span<const double> dout, std::span<const double> qkv, std::span<const double> probs,
                           std::span<double> dqkv, AttentionDims d) {
  const std::size_t dm = d.model_dim();
  const std::size_t row = 3 * dm;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d.head_dim));
  std::vector<double> dp(d.seq);
  for (std::size_t b = 0; b < d.batch; ++b) {
    for (std::size_t h = 0; h < d.heads; ++h) {
      const std::size_t qoff = h * d.head_dim;
      const std::size_t koff = dm + h * d.head_dim;
      const std::size_t voff = 2 * dm + h * d.head_dim;
      for (std::size_t t = 0; t < d.seq; ++t) {
        const double* p = probs.data() + ((b * d.heads + h) * d.seq + t) * d.seq;
        const double* go = dout.data() + (b * d.seq + t) * dm + h * d.head_dim;
        double dot = 0.0;
        for (std::size_t j = 0; j <= t; ++j) {
          const double* v = qkv.data() + (b * d.seq + j) * row + voff;
          double s = 0.0;
          for (std::size_t e = 0; e < d.head_dim; ++e) s += go[e] * v[e];
          dp[j] = s;
          dot += p[j] * s;
          double* dv = dqkv.data() + (b * d.seq + j) * row + voff;
          for (std::size_t e = 0; e < d.head_dim; ++e) dv[e] += p[j] * go[e];
        }
        const double* q = qkv.data() + (b * d.seq + t) * row + qoff;
        double* dq = dqkv.data() + (b * d.seq + t) * row + qoff;
        for (std::size_t j = 0; j <= t; ++j) {
          const double ds = p[j] * (dp[j] - dot) * scale;
          const double* k = qkv.data() + (b * d.seq + j) * row + koff;
          double* dk = dqkv.data() + (b * d.seq + j) * row + koff;
          for (std::size_t e = 0; e < d.head_dim; ++e) {
            dq[e] += ds * k[e];
            dk[e] += ds * q[e];
          }
        }
      }
    }
  }
}

void softmax_rows(std::span<const double> x, std::span<double> y, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * cols;
    double* yr = y.data() + r * cols;
    double mx = -INFINITY;
    for (std::size_t c = 0; c < cols; ++c) mx = std::max(mx, xr[c]);
    double denom = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      yr[c] = std::exp(xr[c] - mx);
      denom += yr[c];
    }
    for (std::size_t c = 0; c < cols; ++c) yr[c] /= denom;
  }
}

void cross_entropy_rows(std::span<const double> logits, std::span<const std::int32_t> targets,
                        std::span<const std::uint8_t> mask, std::span<double> losses, std::size_t rows,
                        std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) {
      losses[r] = 0.0;
      continue;
    }
    const double* xr = logits.data() + r * cols;
    double mx = -INFINITY;
    for (std::size_t c = 0; c < cols; ++c) mx = std::max(mx, xr[c]);
    double denom = 0.0;
    for (std::size_t c = 0; c < cols; ++c) denom += std::exp(xr[c] - mx);
    losses[r] = std::log(denom) + mx - xr[static_cast<std::size_t>(targets[r])];
  }
}

void cross_entropy_rows_grad(std::span<const double> logits, std::span<const std::int32_t> targets,
                             std::span<const std::uint8_t> mask, double scale, std::span<double> dlogits,
                             std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    const double* xr = logits.data() + r * cols;
    double mx = -INFINITY;
    for (std::size_t c = 0; c < cols; ++c) mx = std::max(mx, xr[c]);
    double denom = 0.0;
    for (std::size_t c = 0; c < cols; ++c) denom += std::exp(xr[c] - mx);
    for (std::size_t c = 0; c < cols; ++c) {
      const double p = std::exp(xr[c] - mx) / denom;
      const double onehot = c == static_cast<std::size_t>(targets[r]) ? 1.0 : 0.0;
      dlogits[r * cols + c] += scale * (p - onehot);
    }
  }
}

}  // namespace caft::engine::kernels::serial
