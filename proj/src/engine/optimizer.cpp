#include "caft/engine/optimizer.hpp"

#include <cmath>

#include "caft/common/error.hpp"

namespace caft::engine {

void AdamWConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) {
    throw ConfigError("AdamW betas must lie in (0, 1)");
  }
  if (weight_decay < 0.0) throw ConfigError("weight decay must be nonnegative");
}

AdamW::AdamW(AdamWConfig config) : config_(config) { config_.validate(); }

void AdamW::step(std::span<const NamedTensor> params, double learning_rate) {
  for (const auto& p : params) {
    if (p.tensor.requires_grad() && !p.tensor.has_grad()) {
      throw ContractError("optimizer step: trainable parameter '" + p.name + "' has no gradient");
    }
  }
  ++step_count_;
  const double t = static_cast<double>(step_count_);
  const double bc1 = 1.0 - std::pow(config_.beta1, t);
  const double bc2 = 1.0 - std::pow(config_.beta2, t);
  for (const auto& p : params) {
    if (!p.tensor.requires_grad()) continue;
    Tensor param = p.tensor;
    auto values = param.data();
    const auto grad = param.grad();
    MomentBuffers& m = moments_[p.name];
    if (m.first.size() != values.size()) {
      m.first.assign(values.size(), 0.0);
      m.second.assign(values.size(), 0.0);
    }
    const double decay = 1.0 - learning_rate * config_.weight_decay;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double g = grad[i];
      m.first[i] = config_.beta1 * m.first[i] + (1.0 - config_.beta1) * g;
      m.second[i] = config_.beta2 * m.second[i] + (1.0 - config_.beta2) * g * g;
      const double mhat = m.first[i] / bc1;
      const double vhat = m.second[i] / bc2;
      if (config_.weight_decay != 0.0) values[i] *= decay;
      values[i] -= learning_rate * mhat / (std::sqrt(vhat) + config_.eps);
    }
  }
}

void AdamW::restore(std::uint64_t step_count, std::map<std::string, MomentBuffers> moments) {
  step_count_ = step_count;
  moments_ = std::move(moments);
}

}  // namespace caft::engine
