#pragma once

#include <random>
#include <vector>

#include "caft/model/caft_model.hpp"

namespace caft::testing {

inline model::ModelConfig tiny_config(std::size_t n_future = 5) {
  model::ModelConfig c;
  c.vocab_size = 23;
  c.d_model = 16;
  c.n_layers = 3;
  c.n_attn_heads = 2;
  c.max_seq_len = 12;
  c.n_future = n_future;
  return c;
}

inline model::TokenBatch random_batch(std::size_t batch, std::size_t seq, std::size_t vocab, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  model::TokenBatch b{std::vector<engine::TokenId>(batch * seq), batch, seq};
  for (auto& id : b.ids) id = static_cast<engine::TokenId>(rng() % vocab);
  return b;
}

// Adds N(0, stddev) noise to every value of `t`.
inline void perturb(engine::Tensor& t, std::mt19937_64& rng, double stddev = 0.1) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : t.data()) v += dist(rng);
}

}  // namespace caft::testing
