#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "caft/data/dataset.hpp"
#include "caft/data/target_grid.hpp"
#include "caft/model/caft_model.hpp"
#include "caft/training/schedule.hpp"
#include "json.hpp"

namespace caft::training {

using engine::Tensor;

struct MetricsRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  std::vector<double> per_head_ce;   // index 0 is head 1
  std::vector<double> per_head_ppl;  // exp(per_head_ce)
  double gamma_value = 0.0;
  double l1 = 0.0;
  double ln_unscaled = 0.0;  // sum_{k>=2} alpha^(k-2) CE_k
  double total = 0.0;
  double learning_rate = 0.0;
};

nlohmann::json to_json(const MetricsRecord& r);

// Mean CE over unmasked cells for heads 1..outputs.n_heads(), one scalar
// tensor per head.
std::vector<Tensor> per_head_ce(const model::HeadOutputs& outputs, const data::TargetGrid& grid);

// sum_{k=2..n} alpha^(k-2) CE_k. Head 1 is excluded.
Tensor aux_head_loss(const model::HeadOutputs& outputs, const data::TargetGrid& grid, double alpha);

struct CaftLoss {
  Tensor total;
  MetricsRecord record;
};

// CE_1 + beta * gamma(t) * sum_{k>=2} alpha^(k-1) CE_k by default; with
// schedule.literal_formula every head, head 1 included, carries
// beta * gamma * alpha^(k-1). Terms with zero weight are left out of the
// graph, so beta = 0 or gamma = 0 reproduces plain CE_1 gradients exactly.
CaftLoss caft_loss(const model::HeadOutputs& outputs, const data::TargetGrid& grid, const LossSchedule& schedule,
                   std::size_t t);

// Global mean CE per head over every unmasked cell of `dataset`, heads
// 1..n_heads, evaluated without recording gradients.
std::vector<double> mean_head_ce(const model::CaftModel& model, std::span<const data::EncodedExample> dataset,
                                 std::size_t n_heads, std::size_t batch_size = 64);

}  // namespace caft::training
