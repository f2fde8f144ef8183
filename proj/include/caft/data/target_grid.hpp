#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "caft/data/tokenizer.hpp"

namespace caft::data {

// Future-token targets for every position: cell (b, t, k) holds the token
// at position t + k (0-based positions, k = 1..n_future). Cells whose target
// lies past the sequence end or before the loss window are masked and hold
// kPadId.
struct TargetGrid {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::size_t n_future = 0;
  std::vector<TokenId> targets;
  std::vector<std::uint8_t> mask;

  std::size_t index(std::size_t b, std::size_t t, std::size_t k) const {
    return (b * seq + t) * n_future + (k - 1);
  }
  TokenId target(std::size_t b, std::size_t t, std::size_t k) const { return targets[index(b, t, k)]; }
  bool valid(std::size_t b, std::size_t t, std::size_t k) const { return mask[index(b, t, k)] != 0; }

  // Row-major (batch * seq) slices for head k.
  std::vector<TokenId> head_targets(std::size_t k) const;
  std::vector<std::uint8_t> head_mask(std::size_t k) const;
  std::size_t valid_count(std::size_t k) const;
};

TargetGrid build_target_grid(std::span<const TokenId> tokens, std::size_t n_future);

// One row per sequence, padded to `seq_len`. Targets at positions before
// loss_start[b] are masked (prompt tokens), as is everything past the end.
TargetGrid build_batch_grid(std::span<const std::vector<TokenId>> sequences, std::span<const std::size_t> loss_start,
                            std::size_t n_future, std::size_t seq_len);

}  // namespace caft::data
