#include "caft/model/config.hpp"

#include <vector>

#include "caft/common/error.hpp"

namespace caft::model {

std::string to_string(PositionalEncoding pe) {
  return pe == PositionalEncoding::kLearned ? "learned" : "sinusoidal";
}

PositionalEncoding parse_positional_encoding(const std::string& text) {
  if (text == "learned") return PositionalEncoding::kLearned;
  if (text == "sinusoidal") return PositionalEncoding::kSinusoidal;
  throw ConfigError("positional_encoding must be 'learned' or 'sinusoidal', got '" + text + "'");
}

void ModelConfig::validate() const {
  std::vector<std::string> problems;
  if (vocab_size == 0) problems.emplace_back("vocab_size must be positive");
  if (d_model == 0) problems.emplace_back("d_model must be positive");
  if (n_layers < 2) problems.emplace_back("n_layers must be at least 2 (trunk + final block)");
  if (n_attn_heads == 0) {
    problems.emplace_back("n_attn_heads must be positive");
  } else if (d_model % n_attn_heads != 0) {
    problems.emplace_back("d_model (" + std::to_string(d_model) + ") must be divisible by n_attn_heads (" +
                          std::to_string(n_attn_heads) + ")");
  }
  if (max_seq_len == 0) problems.emplace_back("max_seq_len must be positive");
  if (n_future == 0) problems.emplace_back("n_future must be at least 1");
  if (problems.empty()) return;
  std::string msg = "invalid model config:";
  for (const auto& p : problems) msg += "\n  - " + p;
  throw ConfigError(msg);
}

nlohmann::json to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size},     {"d_model", c.d_model},
          {"n_layers", c.n_layers},         {"n_attn_heads", c.n_attn_heads},
          {"max_seq_len", c.max_seq_len},   {"n_future", c.n_future},
          {"positional_encoding", to_string(c.positional_encoding)}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.n_attn_heads = j.at("n_attn_heads").get<std::size_t>();
    c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
    c.n_future = j.at("n_future").get<std::size_t>();
    c.positional_encoding = parse_positional_encoding(j.at("positional_encoding").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

}  // namespace caft::model
