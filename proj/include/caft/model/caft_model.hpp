#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "caft/engine/ops.hpp"
#include "caft/engine/optimizer.hpp"
#include "caft/model/config.hpp"
#include "caft/model/layers.hpp"

namespace caft::model {

using engine::NamedTensor;
using engine::TokenId;

// Row-major (batch, seq) token ids.
struct TokenBatch {
  std::vector<TokenId> ids;
  std::size_t batch = 0;
  std::size_t seq = 0;
};

// z_{1:t} for every position: (batch, seq, d_model).
struct TrunkState {
  Tensor z;
};

// logits[k - 1] is head k, shape (batch, seq, vocab).
struct HeadOutputs {
  std::vector<Tensor> logits;

  std::size_t n_heads() const { return logits.size(); }
  const Tensor& head(std::size_t k) const { return logits.at(k - 1); }
};

enum class ParameterGroup { kEmbedding, kTrunk, kFinalHead, kAuxHeads, kUnembedding, kAdapters };

std::string to_string(ParameterGroup group);
// Classifies a parameter name produced by CaftModel::parameters().
ParameterGroup parameter_group(const std::string& name);

// Decoder-only transformer with a shared trunk F_s, head blocks F_h1..F_hn
// and one unembedding matrix F_u used by every head.
class CaftModel {
 public:
  // Random GPT-2 style init; aux heads are copies of head 1.
  static CaftModel create(const ModelConfig& config, std::uint64_t seed);

  CaftModel(CaftModel&&) = default;
  CaftModel& operator=(CaftModel&&) = default;
  CaftModel(const CaftModel&) = delete;
  CaftModel& operator=(const CaftModel&) = delete;

  CaftModel clone() const;

  const ModelConfig& config() const { return config_; }
  std::size_t n_heads() const { return heads_.size(); }

  TrunkState forward_trunk(const TokenBatch& tokens) const;
  HeadOutputs forward_heads(const TrunkState& z) const;
  // Logits of head k (1-based) only.
  Tensor forward_head(const TrunkState& z, std::size_t k) const;
  // Final hidden state of head k before F_u, (batch, seq, d_model).
  Tensor head_hidden(const TrunkState& z, std::size_t k) const;
  HeadOutputs forward(const TokenBatch& tokens) const { return forward_heads(forward_trunk(tokens)); }

  // Parameters in a fixed order with stable dotted names.
  std::vector<NamedTensor> parameters();
  std::size_t parameter_count();
  void visit_parameters(const ParameterVisitor& fn);
  // Linear layers that may carry adapters: trunk blocks and head 1.
  void visit_adaptable_linears(const std::function<void(const std::string&, Linear&)>& fn);
  bool has_adapters();

  const Tensor& unembedding() const { return unembed_; }
  Tensor& unembedding() { return unembed_; }
  HeadBlock& head_block(std::size_t k) { return heads_.at(k - 1); }
  const HeadBlock& head_block(std::size_t k) const { return heads_.at(k - 1); }

  // Enables adapter dropout; forward passes draw masks from `seed`.
  void set_training(bool training, std::uint64_t seed = 0);
  bool training() const { return training_; }

  // Drops every head past the first; the result is a plain next-token model.
  void drop_aux_heads();
  // Replaces heads 2..n_future with fresh deep copies of head 1 (n_future may
  // differ from the current head count). Refused while adapters are attached.
  void rebuild_aux_heads(std::size_t n_future);

 private:
  CaftModel() = default;
  ForwardContext context() const { return {training_, &dropout_rng_}; }

  ModelConfig config_;
  Tensor token_embed_;
  Tensor position_embed_;  // learned parameter or fixed sinusoid table
  std::vector<TransformerBlock> trunk_;
  std::vector<HeadBlock> heads_;
  Tensor unembed_;
  bool training_ = false;
  mutable std::mt19937_64 dropout_rng_;
};

// Builds a model whose parameters are exactly `tensors` (names and shapes
// must match `config`). Throws FormatError on any mismatch.
CaftModel model_from_parameters(const ModelConfig& config, std::vector<NamedTensor> tensors);

// Head-1-only copy with n_future = 1. Adapters must be merged first.
CaftModel export_inference_model(const CaftModel& model);

Tensor sinusoidal_table(std::size_t max_seq_len, std::size_t d_model);

}  // namespace caft::model
