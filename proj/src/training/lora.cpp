#include "caft/training/lora.hpp"

#include <cmath>
#include <random>

#include "caft/common/error.hpp"

namespace caft::training {

void LoraConfig::validate() const {
  std::vector<std::string> problems;
  if (rank == 0) problems.emplace_back("lora_rank must be positive");
  if (!(alpha > 0.0)) problems.emplace_back("lora_alpha must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) problems.emplace_back("lora_dropout must be in [0, 1)");
  if (problems.empty()) return;
  std::string msg = "invalid LoRA config:";
  for (const auto& p : problems) msg += "\n  - " + p;
  throw ConfigError(msg);
}

nlohmann::json to_json(const LoraConfig& c) {
  return {{"lora_rank", c.rank}, {"lora_alpha", c.alpha}, {"lora_dropout", c.dropout}};
}

void attach_lora(model::CaftModel& model, const LoraConfig& config, std::uint64_t seed) {
  config.validate();
  if (model.has_adapters()) throw ContractError("attach_lora: adapters are already attached");
  std::mt19937_64 rng(seed);
  model.visit_adaptable_linears([&](const std::string&, model::Linear& layer) {
    const double stddev = 1.0 / std::sqrt(static_cast<double>(layer.in_features()));
    layer.lora = model::LoraAdapter{engine::Tensor::randn({layer.in_features(), config.rank}, stddev, rng, true),
                                    engine::Tensor::zeros({config.rank, layer.out_features()}, true), config.rank,
                                    config.alpha, config.dropout};
  });
}

void lora_merge(model::Linear& layer, const model::LoraAdapter& adapter) {
  const auto& a = adapter.a.shape();
  const auto& b = adapter.b.shape();
  if (a.size() != 2 || b.size() != 2 || a[1] != adapter.rank || b[0] != adapter.rank) {
    throw ContractError("lora_merge: adapter rank " + std::to_string(adapter.rank) + " does not match A " +
                        engine::to_string(a) + " and B " + engine::to_string(b));
  }
  if (a[0] != layer.in_features() || b[1] != layer.out_features()) {
    throw ContractError("lora_merge: adapter " + engine::to_string(a) + " x " + engine::to_string(b) +
                        " does not fit a layer of shape " + engine::to_string(layer.weight.shape()));
  }
  const std::size_t in = a[0], r = a[1], out = b[1];
  const double s = adapter.scale();
  const auto av = adapter.a.data();
  const auto bv = adapter.b.data();
  auto w = layer.weight.data();
  for (std::size_t i = 0; i < in; ++i) {
    for (std::size_t j = 0; j < out; ++j) {
      double acc = 0.0;
      for (std::size_t q = 0; q < r; ++q) acc += av[i * r + q] * bv[q * out + j];
      w[i * out + j] += s * acc;
    }
  }
}

void lora_merge(model::CaftModel& model) {
  if (!model.has_adapters()) throw ContractError("lora_merge: no adapters attached (already merged?)");
  model.visit_adaptable_linears([&](const std::string&, model::Linear& layer) {
    if (!layer.lora) return;
    lora_merge(layer, *layer.lora);
    layer.lora.reset();
  });
}

}  // namespace caft::training
