#pragma once

// Raw compute kernels behind the differentiable ops.
//
// Two implementations share one signature set:
//   serial::   naive reference loops, kept as the oracle for tests and the
//              baseline for the benchmark;
//   parallel:: cache-friendlier loop orders with OpenMP over independent
//              output rows/columns. Every output element is produced by one
//              thread in a fixed order, so results do not depend on the
//              thread count.
// Ops in ops.cpp call the parallel:: versions.
//
// Conventions: row-major; "grad" kernels accumulate (+=) into their outputs.

#include <cstddef>
#include <cstdint>
#include <span>

namespace caft::engine::kernels {

struct MatmulDims {
  std::size_t m, k, n;  // (m x k) * (k x n)
};

struct AttentionDims {
  std::size_t batch, seq, heads, head_dim;
  std::size_t model_dim() const { return heads * head_dim; }
};

bool openmp_enabled();
int max_threads();

#define CAFT_KERNEL_DECLS                                                                                         \
  /* c = a * b */                                                                                                 \
  void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c, MatmulDims d);            \
  /* da += dc * b^T */                                                                                            \
  void matmul_grad_a(std::span<const double> dc, std::span<const double> b, std::span<double> da, MatmulDims d);   \
  /* db += a^T * dc */                                                                                            \
  void matmul_grad_b(std::span<const double> a, std::span<const double> dc, std::span<double> db, MatmulDims d);   \
  /* y = (x - mean) * rstd * gamma + beta, per row; mean/rstd saved per row */                                    \
  void layer_norm(std::span<const double> x, std::span<const double> gamma, std::span<const double> beta,          \
                  std::span<double> y, std::span<double> mean, std::span<double> rstd, std::size_t rows,            \
                  std::size_t cols, double eps);                                                                  \
  void layer_norm_grad(std::span<const double> dy, std::span<const double> x, std::span<const double> gamma,       \
                       std::span<const double> mean, std::span<const double> rstd, std::span<double> dx,            \
                       std::span<double> dgamma, std::span<double> dbeta, std::size_t rows, std::size_t cols);      \
  /* qkv: (batch, seq, 3*d) packed [q | k | v]; out: (batch, seq, d); probs: (batch, heads, seq, seq) */           \
  void causal_attention(std::span<const double> qkv, std::span<double> out, std::span<double> probs,               \
                        AttentionDims d);                                                                         \
  void causal_attention_grad(std::span<const double> dout, std::span<const double> qkv,                           \
                             std::span<const double> probs, std::span<double> dqkv, AttentionDims d);             \
  void softmax_rows(std::span<const double> x, std::span<double> y, std::size_t rows, std::size_t cols);           \
  /* per-row -log softmax(x)[target]; rows with mask == 0 produce 0 */                                            \
  void cross_entropy_rows(std::span<const double> logits, std::span<const std::int32_t> targets,                  \
                          std::span<const std::uint8_t> mask, std::span<double> losses, std::size_t rows,          \
                          std::size_t cols);                                                                      \
  /* dlogits += scale * (softmax(x) - onehot(target)) on unmasked rows */                                         \
  void cross_entropy_rows_grad(std::span<const double> logits, std::span<const std::int32_t> targets,             \
                               std::span<const std::uint8_t> mask, double scale, std::span<double> dlogits,        \
                               std::size_t rows, std::size_t cols);

namespace serial {
CAFT_KERNEL_DECLS
}  // namespace serial

namespace parallel {
CAFT_KERNEL_DECLS
}  // namespace parallel

#undef CAFT_KERNEL_DECLS

}  // namespace caft::engine::kernels
