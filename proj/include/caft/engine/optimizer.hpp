#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "caft/engine/tensor.hpp"

namespace caft::engine {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct AdamWConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;

  void validate() const;
};

struct MomentBuffers {
  std::vector<double> first;
  std::vector<double> second;
};

// Full-precision AdamW with decoupled weight decay (decay applied to the
// weight before the adaptive step). Moments are keyed by parameter name so
// they survive model reloads.
class AdamW {
 public:
  explicit AdamW(AdamWConfig config = {});

  const AdamWConfig& config() const { return config_; }
  std::uint64_t step_count() const { return step_count_; }

  // Updates every parameter with requires_grad; others are left untouched
  // even if they carry a stale grad buffer. `learning_rate` overrides the
  // configured rate for this step (schedulers pass their value here).
  void step(std::span<const NamedTensor> params, double learning_rate);
  void step(std::span<const NamedTensor> params) { step(params, config_.learning_rate); }

  const std::map<std::string, MomentBuffers>& moments() const { return moments_; }
  // Restores a saved state (resume).
  void restore(std::uint64_t step_count, std::map<std::string, MomentBuffers> moments);

 private:
  AdamWConfig config_;
  std::uint64_t step_count_ = 0;
  std::map<std::string, MomentBuffers> moments_;
};

}  // namespace caft::engine
