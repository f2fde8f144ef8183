#include "caft/data/target_grid.hpp"

#include "caft/common/error.hpp"

namespace caft::data {

std::vector<TokenId> TargetGrid::head_targets(std::size_t k) const {
  std::vector<TokenId> out(batch * seq);
  for (std::size_t r = 0; r < out.size(); ++r) out[r] = targets[r * n_future + (k - 1)];
  return out;
}

std::vector<std::uint8_t> TargetGrid::head_mask(std::size_t k) const {
  std::vector<std::uint8_t> out(batch * seq);
  for (std::size_t r = 0; r < out.size(); ++r) out[r] = mask[r * n_future + (k - 1)];
  return out;
}

std::size_t TargetGrid::valid_count(std::size_t k) const {
  std::size_t n = 0;
  for (std::size_t r = 0; r < batch * seq; ++r) n += mask[r * n_future + (k - 1)] != 0;
  return n;
}

TargetGrid build_target_grid(std::span<const TokenId> tokens, std::size_t n_future) {
  if (tokens.empty()) throw InputError("build_target_grid: empty sequence");
  const std::vector<std::vector<TokenId>> one{{tokens.begin(), tokens.end()}};
  const std::size_t start = 0;
  return build_batch_grid(one, {&start, 1}, n_future, tokens.size());
}

TargetGrid build_batch_grid(std::span<const std::vector<TokenId>> sequences, std::span<const std::size_t> loss_start,
                            std::size_t n_future, std::size_t seq_len) {
  if (n_future == 0) throw ContractError("build_batch_grid: n_future must be at least 1");
  if (sequences.empty()) throw InputError("build_batch_grid: no sequences");
  if (loss_start.size() != sequences.size()) throw ContractError("build_batch_grid: one loss_start per sequence");
  TargetGrid g;
  g.batch = sequences.size();
  g.seq = seq_len;
  g.n_future = n_future;
  g.targets.assign(g.batch * seq_len * n_future, kPadId);
  g.mask.assign(g.targets.size(), 0);
  for (std::size_t b = 0; b < g.batch; ++b) {
    const auto& s = sequences[b];
    if (s.empty()) throw InputError("build_batch_grid: sequence " + std::to_string(b) + " is empty");
    if (s.size() > seq_len) {
      throw LengthError("build_batch_grid: sequence " + std::to_string(b) + " has length " +
                        std::to_string(s.size()) + " > " + std::to_string(seq_len));
    }
    for (std::size_t t = 0; t < s.size(); ++t) {
      for (std::size_t k = 1; k <= n_future; ++k) {
        const std::size_t pos = t + k;
        if (pos >= s.size() || pos < loss_start[b]) continue;
        g.targets[g.index(b, t, k)] = s[pos];
        g.mask[g.index(b, t, k)] = 1;
      }
    }
  }
  return g;
}

}  // namespace caft::data
