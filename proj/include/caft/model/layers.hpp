#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <random>
#include <string>

#include "caft/engine/tensor.hpp"

namespace caft::model {

using engine::Tensor;

// Dropout state threaded through a forward pass. Dropout is only applied
// when `training` is set and an rng is supplied.
struct ForwardContext {
  bool training = false;
  std::mt19937_64* rng = nullptr;
};

using ParameterVisitor = std::function<void(const std::string& name, Tensor& tensor)>;

// Low-rank update x -> scale * dropout(x) A B added to a frozen linear map.
struct LoraAdapter {
  Tensor a;  // (in, rank)
  Tensor b;  // (rank, out)
  std::size_t rank = 8;
  double alpha = 16.0;
  double dropout = 0.10;

  double scale() const { return alpha / static_cast<double>(rank); }
};

// y = x W + b, W stored (in, out).
struct Linear {
  Tensor weight;
  Tensor bias;
  std::optional<LoraAdapter> lora;

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }

  Tensor forward(const Tensor& x, const ForwardContext& ctx) const;
  void visit(const std::string& prefix, const ParameterVisitor& fn);
  Linear clone() const;
};

struct LayerNormParams {
  Tensor gain;
  Tensor bias;

  Tensor forward(const Tensor& x) const;
  void visit(const std::string& prefix, const ParameterVisitor& fn);
  LayerNormParams clone() const;
};

// Pre-norm transformer block: x + attn(ln1(x)), then + mlp(ln2(x)).
struct TransformerBlock {
  LayerNormParams ln1;
  Linear qkv;
  Linear attn_out;
  LayerNormParams ln2;
  Linear fc;
  Linear proj;
  std::size_t n_heads = 1;

  Tensor forward(const Tensor& x, const ForwardContext& ctx) const;
  void visit(const std::string& prefix, const ParameterVisitor& fn);
  void visit_linears(const std::string& prefix, const std::function<void(const std::string&, Linear&)>& fn);
  TransformerBlock clone() const;
};

// A prediction head: the block that produces z for one future position,
// followed by its own final layer norm ahead of the shared unembedding.
struct HeadBlock {
  TransformerBlock block;
  LayerNormParams ln_f;

  Tensor forward(const Tensor& z, const ForwardContext& ctx) const;
  void visit(const std::string& prefix, const ParameterVisitor& fn);
  HeadBlock clone() const;
};

LayerNormParams make_layer_norm(std::size_t width);
Linear make_linear(std::size_t in, std::size_t out, double stddev, std::mt19937_64& rng);
TransformerBlock make_block(std::size_t d_model, std::size_t n_heads, std::size_t ffn_width, double stddev,
                            double proj_stddev, std::mt19937_64& rng);

}  // namespace caft::model
