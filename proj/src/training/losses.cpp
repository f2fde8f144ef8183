#include "caft/training/losses.hpp"

#include <cmath>

#include "caft/common/error.hpp"
#include "caft/engine/tape.hpp"

namespace caft::training {

nlohmann::json to_json(const MetricsRecord& r) {
  return {{"step", r.step},       {"epoch", r.epoch},           {"per_head_ce", r.per_head_ce},
          {"per_head_ppl", r.per_head_ppl}, {"gamma", r.gamma_value}, {"l1", r.l1},
          {"ln_unscaled", r.ln_unscaled},   {"total", r.total},   {"lr", r.learning_rate}};
}

std::vector<Tensor> per_head_ce(const model::HeadOutputs& outputs, const data::TargetGrid& grid) {
  if (outputs.n_heads() > grid.n_future) {
    throw DimensionError("target grid has " + std::to_string(grid.n_future) + " future positions for " +
                         std::to_string(outputs.n_heads()) + " heads");
  }
  std::vector<Tensor> ce;
  for (std::size_t k = 1; k <= outputs.n_heads(); ++k) {
    ce.push_back(engine::masked_cross_entropy(outputs.head(k), grid.head_targets(k), grid.head_mask(k)));
  }
  return ce;
}

Tensor aux_head_loss(const model::HeadOutputs& outputs, const data::TargetGrid& grid, double alpha) {
  const std::size_t n = outputs.n_heads();
  if (n < 2) throw ContractError("aux_head_loss: model has no auxiliary heads (n_future = 1)");
  const auto weights = aux_head_weights(alpha, n);
  std::vector<Tensor> terms;
  for (std::size_t k = 2; k <= n; ++k) {
    terms.push_back(engine::masked_cross_entropy(outputs.head(k), grid.head_targets(k), grid.head_mask(k)));
  }
  return engine::weighted_sum(terms, weights);
}

CaftLoss caft_loss(const model::HeadOutputs& outputs, const data::TargetGrid& grid, const LossSchedule& schedule,
                   std::size_t t) {
  const std::size_t n = outputs.n_heads();
  const std::vector<Tensor> ce = per_head_ce(outputs, grid);
  const double g = schedule.gamma_at(t);

  MetricsRecord rec;
  rec.step = t;
  rec.gamma_value = g;
  for (const auto& c : ce) {
    rec.per_head_ce.push_back(c.item());
    rec.per_head_ppl.push_back(std::exp(c.item()));
  }
  rec.l1 = rec.per_head_ce[0];
  const auto unscaled = aux_head_weights(schedule.alpha, n);
  for (std::size_t k = 2; k <= n; ++k) rec.ln_unscaled += unscaled[k - 2] * rec.per_head_ce[k - 1];

  std::vector<Tensor> terms;
  std::vector<double> weights;
  const double aux_scale = schedule.beta * g;
  if (schedule.literal_formula) {
    double a = 1.0;
    for (std::size_t k = 1; k <= n; ++k, a *= schedule.alpha) {
      if (aux_scale * a == 0.0) continue;
      terms.push_back(ce[k - 1]);
      weights.push_back(aux_scale * a);
    }
  } else {
    terms.push_back(ce[0]);
    weights.push_back(1.0);
    if (aux_scale != 0.0) {
      const auto w = caft_aux_weights(schedule.alpha, n);
      for (std::size_t k = 2; k <= n; ++k) {
        terms.push_back(ce[k - 1]);
        weights.push_back(aux_scale * w[k - 2]);
      }
    }
  }
  Tensor total = terms.empty() ? Tensor::scalar(0.0) : engine::weighted_sum(terms, weights);
  rec.total = total.item();
  return {total, rec};
}

std::vector<double> mean_head_ce(const model::CaftModel& model, std::span<const data::EncodedExample> dataset,
                                 std::size_t n_heads, std::size_t batch_size) {
  if (dataset.empty()) throw InputError("evaluation dataset is empty");
  if (n_heads == 0 || n_heads > model.n_heads()) {
    throw ContractError("cannot evaluate " + std::to_string(n_heads) + " heads on a model with " +
                        std::to_string(model.n_heads()));
  }
  engine::NoGradScope no_grad;
  std::vector<double> sums(n_heads, 0.0);
  std::vector<std::size_t> counts(n_heads, 0);
  for (std::size_t start = 0; start < dataset.size(); start += batch_size) {
    const auto slice = dataset.subspan(start, std::min(batch_size, dataset.size() - start));
    const data::Batch batch = data::make_batch(slice, n_heads);
    const model::TrunkState z = model.forward_trunk(batch.tokens);
    for (std::size_t k = 1; k <= n_heads; ++k) {
      const std::size_t valid = batch.grid.valid_count(k);
      if (valid == 0) continue;
      const Tensor ce =
          engine::masked_cross_entropy(model.forward_head(z, k), batch.grid.head_targets(k), batch.grid.head_mask(k));
      sums[k - 1] += ce.item() * static_cast<double>(valid);
      counts[k - 1] += valid;
    }
  }
  std::vector<double> out(n_heads);
  for (std::size_t k = 0; k < n_heads; ++k) {
    if (counts[k] == 0) throw InputError("evaluation dataset has no scorable cells for head " + std::to_string(k + 1));
    out[k] = sums[k] / static_cast<double>(counts[k]);
  }
  return out;
}

}  // namespace caft::training
