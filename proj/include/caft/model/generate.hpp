#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include "caft/model/caft_model.hpp"

namespace caft::model {

struct GenerationSettings {
  std::size_t max_new_tokens = 64;
  double temperature = 0.1;  // 0 selects greedy decoding
  double repetition_penalty = 1.0;
  std::optional<TokenId> stop_token;
  std::uint64_t seed = 0;

  void validate() const;
};

struct GenerationResult {
  std::vector<TokenId> tokens;  // prompt followed by the generated continuation
  bool truncated = false;       // stopped early because max_seq_len was reached
};

// Head-1 logits for the token following `sequence`.
std::vector<double> next_token_logits(const CaftModel& model, const std::vector<TokenId>& sequence);

// Applies the repetition penalty to every id already present in `history`:
// positive logits are divided by the penalty, negative ones multiplied.
void apply_repetition_penalty(std::vector<double>& logits, const std::vector<TokenId>& history, double penalty);

// Autoregressive decoding from head 1. Auxiliary heads are never evaluated.
GenerationResult generate(const CaftModel& model, const std::vector<TokenId>& prompt,
                          const GenerationSettings& settings);

}  // namespace caft::model
