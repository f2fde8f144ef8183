#include "caft/engine/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "caft/common/error.hpp"
#include "caft/engine/kernels.hpp"
#include "caft/engine/tape.hpp"

namespace caft::engine {

namespace k = kernels::parallel;

namespace {

using Backward = std::function<void(detail::Node&)>;

bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (Tape::active() == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
}

// Wraps op output; attaches history only when `track` is set.
Tensor finish(Shape shape, std::vector<double> data, bool track, std::initializer_list<const Tensor*> inputs,
              Backward backward) {
  Tensor out(std::move(shape), std::move(data));
  if (!track) return out;
  detail::Node& node = out.node();
  node.requires_grad = true;
  for (const Tensor* in : inputs) node.inputs.push_back(in->handle());
  node.backward = std::move(backward);
  Tape::active()->record(out);
  return out;
}

inline bool wants(const detail::Node& self, std::size_t i) { return self.inputs[i]->requires_grad; }
inline std::span<double> grad_of(detail::Node& self, std::size_t i) { return self.inputs[i]->grad; }

bool is_suffix(const Shape& full, const Shape& part) {
  if (part.size() > full.size()) return false;
  return std::equal(part.rbegin(), part.rend(), full.rbegin());
}

void require_finite(std::span<const double> values, const char* op) {
  for (double v : values) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite input");
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 1 || b.rank() != 2 || a.shape().back() != b.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + to_string(a.shape()) + " by " + to_string(b.shape()));
  }
  const kernels::MatmulDims d{a.size() / b.dim(0), b.dim(0), b.dim(1)};
  Shape out_shape = a.shape();
  out_shape.back() = d.n;
  std::vector<double> out(d.m * d.n);
  k::matmul(a.data(), b.data(), out, d);
  const bool track = tracking({&a, &b});
  return finish(std::move(out_shape), std::move(out), track, {&a, &b}, [d](detail::Node& self) {
    const auto& a_data = self.inputs[0]->data;
    const auto& b_data = self.inputs[1]->data;
    if (wants(self, 0)) k::matmul_grad_a(self.grad, b_data, grad_of(self, 0), d);
    if (wants(self, 1)) k::matmul_grad_b(a_data, self.grad, grad_of(self, 1), d);
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) {
    std::vector<double> out(a.data().begin(), a.data().end());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.at(i);
    return finish(a.shape(), std::move(out), tracking({&a, &b}), {&a, &b}, [](detail::Node& self) {
      for (std::size_t i = 0; i < 2; ++i) {
        if (!wants(self, i)) continue;
        auto g = grad_of(self, i);
        for (std::size_t j = 0; j < g.size(); ++j) g[j] += self.grad[j];
      }
    });
  }
  if (!is_suffix(a.shape(), b.shape())) {
    throw DimensionError("add: shape " + to_string(b.shape()) + " does not broadcast onto " + to_string(a.shape()));
  }
  const std::size_t inner = b.size();
  const std::size_t outer = a.size() / inner;
  std::vector<double> out(a.data().begin(), a.data().end());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += b.at(i);
  }
  return finish(a.shape(), std::move(out), tracking({&a, &b}), {&a, &b}, [inner, outer](detail::Node& self) {
    if (wants(self, 0)) {
      auto g = grad_of(self, 0);
      for (std::size_t j = 0; j < g.size(); ++j) g[j] += self.grad[j];
    }
    if (wants(self, 1)) {
      auto g = grad_of(self, 1);
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < inner; ++i) g[i] += self.grad[o * inner + i];
      }
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mul: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * b.at(i);
  return finish(a.shape(), std::move(out), tracking({&a, &b}), {&a, &b}, [](detail::Node& self) {
    const auto& x = self.inputs[0]->data;
    const auto& y = self.inputs[1]->data;
    if (wants(self, 0)) {
      auto g = grad_of(self, 0);
      for (std::size_t j = 0; j < g.size(); ++j) g[j] += self.grad[j] * y[j];
    }
    if (wants(self, 1)) {
      auto g = grad_of(self, 1);
      for (std::size_t j = 0; j < g.size(); ++j) g[j] += self.grad[j] * x[j];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * factor;
  return finish(a.shape(), std::move(out), tracking({&a}), {&a}, [factor](detail::Node& self) {
    auto g = grad_of(self, 0);
    for (std::size_t j = 0; j < g.size(); ++j) g[j] += self.grad[j] * factor;
  });
}

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  return finish({1}, {total}, tracking({&a}), {&a}, [](detail::Node& self) {
    auto g = grad_of(self, 0);
    for (double& v : g) v += self.grad[0];
  });
}

Tensor weighted_sum(std::span<const Tensor> scalars, std::span<const double> weights) {
  if (scalars.size() != weights.size()) {
    throw DimensionError("weighted_sum: " + std::to_string(scalars.size()) + " terms but " +
                         std::to_string(weights.size()) + " weights");
  }
  double total = 0.0;
  bool track = false;
  for (std::size_t i = 0; i < scalars.size(); ++i) {
    if (scalars[i].size() != 1) throw DimensionError("weighted_sum: term " + std::to_string(i) + " is not a scalar");
    total += weights[i] * scalars[i].item();
    track = track || tracking({&scalars[i]});
  }
  Tensor out({1}, {total});
  if (!track) return out;
  detail::Node& node = out.node();
  node.requires_grad = true;
  for (const Tensor& s : scalars) node.inputs.push_back(s.handle());
  std::vector<double> w(weights.begin(), weights.end());
  node.backward = [w](detail::Node& self) {
    for (std::size_t i = 0; i < w.size(); ++i) {
      if (wants(self, i)) grad_of(self, i)[0] += w[i] * self.grad[0];
    }
  };
  Tape::active()->record(out);
  return out;
}

Tensor gelu(const Tensor& x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double a = 0.044715;
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x.at(i);
    out[i] = 0.5 * v * (1.0 + std::tanh(c * (v + a * v * v * v)));
  }
  return finish(x.shape(), std::move(out), tracking({&x}), {&x}, [](detail::Node& self) {
    const auto& in = self.inputs[0]->data;
    auto g = grad_of(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = in[i];
      const double t = std::tanh(c * (v + a * v * v * v));
      const double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * c * (1.0 + 3.0 * a * v * v);
      g[i] += self.grad[i] * d;
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t cols = x.shape().back();
  if (gamma.shape() != Shape{cols} || beta.shape() != Shape{cols}) {
    throw DimensionError("layer_norm: gain/bias " + to_string(gamma.shape()) + "/" + to_string(beta.shape()) +
                         " do not match feature size " + std::to_string(cols));
  }
  const std::size_t rows = x.size() / cols;
  std::vector<double> out(x.size());
  std::vector<double> mean(rows);
  std::vector<double> rstd(rows);
  k::layer_norm(x.data(), gamma.data(), beta.data(), out, mean, rstd, rows, cols, eps);
  const bool track = tracking({&x, &gamma, &beta});
  return finish(x.shape(), std::move(out), track, {&x, &gamma, &beta},
                [mean = std::move(mean), rstd = std::move(rstd), rows, cols](detail::Node& self) {
                  std::span<double> dx = wants(self, 0) ? grad_of(self, 0) : std::span<double>{};
                  std::span<double> dg = wants(self, 1) ? grad_of(self, 1) : std::span<double>{};
                  std::span<double> db = wants(self, 2) ? grad_of(self, 2) : std::span<double>{};
                  k::layer_norm_grad(self.grad, self.inputs[0]->data, self.inputs[1]->data, mean, rstd, dx, dg, db,
                                     rows, cols);
                });
}

Tensor embedding(const Tensor& table, std::span<const TokenId> ids, const Shape& index_shape) {
  if (table.rank() != 2) throw DimensionError("embedding: table must be 2-D, got " + to_string(table.shape()));
  if (numel(index_shape) != ids.size()) {
    throw DimensionError("embedding: index shape " + to_string(index_shape) + " does not hold " +
                         std::to_string(ids.size()) + " ids");
  }
  const std::size_t vocab = table.dim(0);
  const std::size_t d = table.dim(1);
  std::vector<double> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw IndexError("token id " + std::to_string(ids[i]) + " outside vocabulary of size " + std::to_string(vocab));
    }
    const double* row = table.data().data() + static_cast<std::size_t>(ids[i]) * d;
    std::copy(row, row + d, out.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  Shape shape = index_shape;
  shape.push_back(d);
  std::vector<TokenId> saved;
  const bool track = tracking({&table});
  if (track) saved.assign(ids.begin(), ids.end());
  return finish(std::move(shape), std::move(out), track, {&table}, [saved = std::move(saved), d](detail::Node& self) {
    auto g = grad_of(self, 0);
    for (std::size_t i = 0; i < saved.size(); ++i) {
      double* row = g.data() + static_cast<std::size_t>(saved[i]) * d;
      for (std::size_t j = 0; j < d; ++j) row[j] += self.grad[i * d + j];
    }
  });
}

Tensor causal_self_attention(const Tensor& qkv, std::size_t n_heads) {
  if (qkv.rank() != 3 || qkv.dim(2) % 3 != 0 || (qkv.dim(2) / 3) % n_heads != 0) {
    throw DimensionError("attention: qkv shape " + to_string(qkv.shape()) + " incompatible with " +
                         std::to_string(n_heads) + " heads");
  }
  const kernels::AttentionDims d{qkv.dim(0), qkv.dim(1), n_heads, qkv.dim(2) / 3 / n_heads};
  std::vector<double> out(d.batch * d.seq * d.model_dim());
  std::vector<double> probs(d.batch * d.heads * d.seq * d.seq);
  k::causal_attention(qkv.data(), out, probs, d);
  const bool track = tracking({&qkv});
  if (!track) probs = {};
  return finish({d.batch, d.seq, d.model_dim()}, std::move(out), track, {&qkv},
                [probs = std::move(probs), d](detail::Node& self) {
                  k::causal_attention_grad(self.grad, self.inputs[0]->data, probs, grad_of(self, 0), d);
                });
}

Tensor softmax(const Tensor& logits, std::size_t axis) {
  const Shape& s = logits.shape();
  if (axis >= s.size()) throw DimensionError("softmax: axis " + std::to_string(axis) + " out of range for " + to_string(s));
  require_finite(logits.data(), "softmax");
  std::size_t outer = 1;
  std::size_t inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];

  std::vector<double> out(logits.size());
  if (inner == 1) {
    k::softmax_rows(logits.data(), out, outer, len);
  } else {
    const auto x = logits.data();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = o * len * inner + i;
        double mx = -INFINITY;
        for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, x[base + j * inner]);
        double denom = 0.0;
        for (std::size_t j = 0; j < len; ++j) {
          out[base + j * inner] = std::exp(x[base + j * inner] - mx);
          denom += out[base + j * inner];
        }
        for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= denom;
      }
    }
  }
  return finish(s, std::move(out), tracking({&logits}), {&logits}, [outer, inner, len](detail::Node& self) {
    auto g = grad_of(self, 0);
    const auto& y = self.data;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = o * len * inner + i;
        double dot = 0.0;
        for (std::size_t j = 0; j < len; ++j) dot += y[base + j * inner] * self.grad[base + j * inner];
        for (std::size_t j = 0; j < len; ++j) {
          const std::size_t at = base + j * inner;
          g[at] += y[at] * (self.grad[at] - dot);
        }
      }
    }
  });
}

Tensor masked_cross_entropy(const Tensor& logits, std::span<const TokenId> targets,
                            std::span<const std::uint8_t> mask) {
  const std::size_t vocab = logits.shape().back();
  const std::size_t rows = logits.size() / vocab;
  if (targets.size() != rows || mask.size() != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(rows) + " rows but " + std::to_string(targets.size()) +
                         " targets / " + std::to_string(mask.size()) + " mask entries");
  }
  std::size_t count = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= vocab) {
      throw IndexError("target id " + std::to_string(targets[r]) + " outside vocabulary of size " +
                       std::to_string(vocab));
    }
    ++count;
  }
  std::vector<double> losses(rows);
  k::cross_entropy_rows(logits.data(), targets, mask, losses, rows, vocab);
  double total = 0.0;
  for (double l : losses) total += l;
  const double mean = count ? total / static_cast<double>(count) : 0.0;

  const bool track = tracking({&logits});
  std::vector<TokenId> t;
  std::vector<std::uint8_t> m;
  if (track) {
    t.assign(targets.begin(), targets.end());
    m.assign(mask.begin(), mask.end());
  }
  return finish({1}, {mean}, track, {&logits},
                [t = std::move(t), m = std::move(m), count, rows, vocab](detail::Node& self) {
                  if (count == 0) return;
                  const double s = self.grad[0] / static_cast<double>(count);
                  k::cross_entropy_rows_grad(self.inputs[0]->data, t, m, s, grad_of(self, 0), rows, vocab);
                });
}

double cross_entropy(const Tensor& probabilities, TokenId target) {
  if (target < 0 || static_cast<std::size_t>(target) >= probabilities.size()) {
    throw IndexError("target id " + std::to_string(target) + " outside distribution of size " +
                     std::to_string(probabilities.size()));
  }
  return -std::log(probabilities.at(static_cast<std::size_t>(target)));
}

Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng) {
  if (p <= 0.0) return x;
  if (p >= 1.0) throw ContractError("dropout probability must be < 1");
  std::bernoulli_distribution keep(1.0 - p);
  const double inv = 1.0 / (1.0 - p);
  std::vector<double> factor(x.size());
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    factor[i] = keep(rng) ? inv : 0.0;
    out[i] = x.at(i) * factor[i];
  }
  return finish(x.shape(), std::move(out), tracking({&x}), {&x}, [factor = std::move(factor)](detail::Node& self) {
    auto g = grad_of(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor[i];
  });
}

}  // namespace caft::engine
