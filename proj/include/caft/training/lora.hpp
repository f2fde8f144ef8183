#pragma once

#include <cstddef>
#include <cstdint>

#include "caft/model/caft_model.hpp"
#include "json.hpp"

namespace caft::training {

struct LoraConfig {
  std::size_t rank = 8;
  double alpha = 16.0;
  double dropout = 0.10;

  void validate() const;
};

nlohmann::json to_json(const LoraConfig& c);

// Attaches a fresh adapter to every trunk and head-1 linear layer: A is
// Gaussian with std 1/sqrt(in), B is zero, so the model output is unchanged.
// Throws ContractError if adapters are already attached.
void attach_lora(model::CaftModel& model, const LoraConfig& config, std::uint64_t seed);

// Folds W += (alpha / rank) A B into one layer. Throws ContractError when the
// adapter's matrices disagree with its rank or with the layer shape.
void lora_merge(model::Linear& layer, const model::LoraAdapter& adapter);

// Merges and removes every attached adapter. A model without adapters
// (for instance one merged already) is a ContractError.
void lora_merge(model::CaftModel& model);

}  // namespace caft::training
