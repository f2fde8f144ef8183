#pragma once

#include <cstddef>
#include <string>

#include "json.hpp"

namespace caft::model {

enum class PositionalEncoding { kLearned, kSinusoidal };

std::string to_string(PositionalEncoding pe);
PositionalEncoding parse_positional_encoding(const std::string& text);

// Shape of a CaftModel. n_layers counts every block on the head-1 path: the
// shared trunk holds n_layers - 1 blocks, the last one is the final block.
// n_future is the number of predicted positions (heads); 1 is a plain
// next-token model.
struct ModelConfig {
  std::size_t vocab_size = 256;
  std::size_t d_model = 64;
  std::size_t n_layers = 3;
  std::size_t n_attn_heads = 4;
  std::size_t max_seq_len = 64;
  std::size_t n_future = 5;
  PositionalEncoding positional_encoding = PositionalEncoding::kLearned;

  std::size_t trunk_layers() const { return n_layers - 1; }
  std::size_t ffn_width() const { return 4 * d_model; }

  // Throws ConfigError listing every violated constraint.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

nlohmann::json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

}  // namespace caft::model
