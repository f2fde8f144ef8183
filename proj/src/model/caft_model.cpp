#include "caft/model/caft_model.hpp"

#include <cmath>
#include <map>
#include <numeric>

#include "caft/common/error.hpp"

namespace caft::model {

namespace ops = caft::engine;

namespace {

constexpr double kInitStd = 0.02;

std::string head_prefix(std::size_t k) { return "head." + std::to_string(k); }

}  // namespace

std::string to_string(ParameterGroup group) {
  switch (group) {
    case ParameterGroup::kEmbedding: return "embedding";
    case ParameterGroup::kTrunk: return "trunk";
    case ParameterGroup::kFinalHead: return "final_head";
    case ParameterGroup::kAuxHeads: return "aux_heads";
    case ParameterGroup::kUnembedding: return "unembedding";
    case ParameterGroup::kAdapters: return "adapters";
  }
  return "unknown";
}

ParameterGroup parameter_group(const std::string& name) {
  const auto ends_with = [&](std::string_view suffix) {
    return name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  if (ends_with(".lora_a") || ends_with(".lora_b")) return ParameterGroup::kAdapters;
  if (name.starts_with("embed.")) return ParameterGroup::kEmbedding;
  if (name.starts_with("trunk.")) return ParameterGroup::kTrunk;
  if (name.starts_with("head.1.")) return ParameterGroup::kFinalHead;
  if (name.starts_with("head.")) return ParameterGroup::kAuxHeads;
  if (name == "unembed.weight") return ParameterGroup::kUnembedding;
  throw ContractError("unrecognized parameter name '" + name + "'");
}

Tensor sinusoidal_table(std::size_t max_seq_len, std::size_t d_model) {
  Tensor t = Tensor::zeros({max_seq_len, d_model});
  for (std::size_t pos = 0; pos < max_seq_len; ++pos) {
    for (std::size_t i = 0; i < d_model; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(d_model));
      const double angle = static_cast<double>(pos) * freq;
      t.at(pos * d_model + i) = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return t;
}

CaftModel CaftModel::create(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  CaftModel m;
  m.config_ = config;
  const std::size_t d = config.d_model;
  const double proj_std = kInitStd / std::sqrt(2.0 * static_cast<double>(config.n_layers));

  m.token_embed_ = Tensor::randn({config.vocab_size, d}, kInitStd, rng);
  m.position_embed_ = config.positional_encoding == PositionalEncoding::kLearned
                          ? Tensor::randn({config.max_seq_len, d}, kInitStd, rng)
                          : sinusoidal_table(config.max_seq_len, d);
  for (std::size_t i = 0; i < config.trunk_layers(); ++i) {
    m.trunk_.push_back(make_block(d, config.n_attn_heads, config.ffn_width(), kInitStd, proj_std, rng));
  }
  m.heads_.push_back(
      HeadBlock{make_block(d, config.n_attn_heads, config.ffn_width(), kInitStd, proj_std, rng), make_layer_norm(d)});
  for (std::size_t k = 2; k <= config.n_future; ++k) m.heads_.push_back(m.heads_.front().clone());
  m.unembed_ = Tensor::randn({d, config.vocab_size}, kInitStd, rng);

  m.visit_parameters([](const std::string&, Tensor& t) { t.set_requires_grad(true); });
  return m;
}

CaftModel CaftModel::clone() const {
  CaftModel m;
  m.config_ = config_;
  m.token_embed_ = token_embed_.clone();
  m.position_embed_ = position_embed_.clone();
  for (const auto& b : trunk_) m.trunk_.push_back(b.clone());
  for (const auto& h : heads_) m.heads_.push_back(h.clone());
  m.unembed_ = unembed_.clone();
  m.training_ = training_;
  m.dropout_rng_ = dropout_rng_;
  return m;
}

TrunkState CaftModel::forward_trunk(const TokenBatch& tokens) const {
  if (tokens.batch == 0 || tokens.seq == 0) throw InputError("forward_trunk: empty token batch");
  if (tokens.ids.size() != tokens.batch * tokens.seq) {
    throw DimensionError("forward_trunk: " + std::to_string(tokens.ids.size()) + " ids for batch " +
                         std::to_string(tokens.batch) + " x seq " + std::to_string(tokens.seq));
  }
  if (tokens.seq > config_.max_seq_len) {
    throw LengthError("sequence length " + std::to_string(tokens.seq) + " exceeds max_seq_len " +
                      std::to_string(config_.max_seq_len));
  }
  for (std::size_t i = 0; i < tokens.ids.size(); ++i) {
    const TokenId id = tokens.ids[i];
    if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab_size) {
      throw IndexError("token id " + std::to_string(id) + " at flat index " + std::to_string(i) +
                       " outside vocabulary of size " + std::to_string(config_.vocab_size));
    }
  }
  std::vector<TokenId> positions(tokens.seq);
  std::iota(positions.begin(), positions.end(), 0);

  const ForwardContext ctx = context();
  Tensor x = ops::embedding(token_embed_, tokens.ids, {tokens.batch, tokens.seq});
  x = ops::add(x, ops::embedding(position_embed_, positions, {tokens.seq}));
  for (const auto& block : trunk_) x = block.forward(x, ctx);
  return {x};
}

Tensor CaftModel::head_hidden(const TrunkState& z, std::size_t k) const {
  if (k == 0 || k > heads_.size()) {
    throw IndexError("head " + std::to_string(k) + " requested from a model with " + std::to_string(heads_.size()) +
                     " heads");
  }
  if (z.z.rank() != 3 || z.z.dim(2) != config_.d_model) {
    throw DimensionError("trunk state has shape " + engine::to_string(z.z.shape()) + ", expected (batch, seq, " +
                         std::to_string(config_.d_model) + ")");
  }
  return heads_[k - 1].forward(z.z, context());
}

Tensor CaftModel::forward_head(const TrunkState& z, std::size_t k) const {
  return ops::matmul(head_hidden(z, k), unembed_);
}

HeadOutputs CaftModel::forward_heads(const TrunkState& z) const {
  HeadOutputs out;
  for (std::size_t k = 1; k <= heads_.size(); ++k) out.logits.push_back(forward_head(z, k));
  return out;
}

void CaftModel::visit_parameters(const ParameterVisitor& fn) {
  fn("embed.token", token_embed_);
  if (config_.positional_encoding == PositionalEncoding::kLearned) fn("embed.position", position_embed_);
  for (std::size_t i = 0; i < trunk_.size(); ++i) trunk_[i].visit("trunk." + std::to_string(i), fn);
  for (std::size_t k = 1; k <= heads_.size(); ++k) heads_[k - 1].visit(head_prefix(k), fn);
  fn("unembed.weight", unembed_);
}

std::vector<NamedTensor> CaftModel::parameters() {
  std::vector<NamedTensor> out;
  visit_parameters([&](const std::string& name, Tensor& t) { out.push_back({name, t}); });
  return out;
}

std::size_t CaftModel::parameter_count() {
  std::size_t n = 0;
  visit_parameters([&](const std::string&, Tensor& t) { n += t.size(); });
  return n;
}

void CaftModel::visit_adaptable_linears(const std::function<void(const std::string&, Linear&)>& fn) {
  for (std::size_t i = 0; i < trunk_.size(); ++i) trunk_[i].visit_linears("trunk." + std::to_string(i), fn);
  heads_.front().block.visit_linears(head_prefix(1), fn);
}

bool CaftModel::has_adapters() {
  bool found = false;
  visit_parameters([&](const std::string& name, Tensor&) {
    found = found || parameter_group(name) == ParameterGroup::kAdapters;
  });
  return found;
}

void CaftModel::set_training(bool training, std::uint64_t seed) {
  training_ = training;
  dropout_rng_.seed(seed);
}

void CaftModel::drop_aux_heads() {
  heads_.resize(1);
  config_.n_future = 1;
}

void CaftModel::rebuild_aux_heads(std::size_t n_future) {
  if (n_future == 0) throw ContractError("rebuild_aux_heads: n_future must be at least 1");
  if (has_adapters()) throw ContractError("rebuild_aux_heads: merge LoRA adapters first");
  heads_.resize(1);
  for (std::size_t k = 2; k <= n_future; ++k) heads_.push_back(heads_.front().clone());
  config_.n_future = n_future;
}

CaftModel model_from_parameters(const ModelConfig& config, std::vector<NamedTensor> tensors) {
  CaftModel m = CaftModel::create(config, 0);
  std::map<std::string, Tensor> by_name;
  for (auto& nt : tensors) {
    if (!by_name.emplace(nt.name, nt.tensor).second) throw FormatError("duplicate tensor '" + nt.name + "'");
  }
  std::size_t used = 0;
  m.visit_parameters([&](const std::string& name, Tensor& slot) {
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("missing tensor '" + name + "'");
    if (it->second.shape() != slot.shape()) {
      throw FormatError("tensor '" + name + "' has shape " + engine::to_string(it->second.shape()) + ", expected " +
                        engine::to_string(slot.shape()));
    }
    slot = it->second;
    slot.set_requires_grad(true);
    ++used;
  });
  if (used != by_name.size()) {
    for (const auto& [name, t] : by_name) {
      bool known = false;
      m.visit_parameters([&](const std::string& n, Tensor&) { known = known || n == name; });
      if (!known) throw FormatError("unexpected tensor '" + name + "' for this model config");
    }
  }
  return m;
}

CaftModel export_inference_model(const CaftModel& model) {
  CaftModel out = model.clone();
  if (out.has_adapters()) throw ContractError("export: merge LoRA adapters before exporting");
  out.drop_aux_heads();
  out.set_training(false);
  return out;
}

}  // namespace caft::model
