#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "caft/data/dataset.hpp"
#include "caft/engine/optimizer.hpp"
#include "caft/model/caft_model.hpp"
#include "caft/training/losses.hpp"
#include "caft/training/plan.hpp"
#include "caft/training/schedule.hpp"

namespace caft::training {

struct EpochRecord {
  std::string stage;  // "aux_head_training", "aux_task_pretrain", "caft_full", ...
  std::size_t epoch = 0;
  std::size_t step = 0;           // optimizer steps taken so far in this stage
  MetricsRecord train_mean;       // mean of the epoch's step records
  std::vector<double> valid_ce;   // held-out CE per evaluated head (index 0 = head 1)
  std::vector<double> valid_ppl;
  double valid_l1 = 0.0;
  bool improved = false;
};

nlohmann::json to_json(const EpochRecord& r);

struct TrainResult {
  std::vector<MetricsRecord> steps;
  std::vector<EpochRecord> epochs;
  std::vector<std::uint64_t> batch_hashes;
  std::vector<std::string> warnings;
  std::size_t total_steps = 0;
  std::size_t best_epoch = 0;
  bool early_stopped = false;
};

// Append-only JSONL sink, flushed per record.
class MetricsWriter {
 public:
  explicit MetricsWriter(const std::filesystem::path& path);
  void write(const nlohmann::json& record);

 private:
  std::ofstream out_;
  std::filesystem::path path_;
};

// Everything needed to continue a stage from an epoch boundary.
struct ResumeState {
  std::string stage;
  std::size_t epochs_done = 0;
  std::size_t step = 0;
  std::uint64_t optimizer_steps = 0;
  std::map<std::string, engine::MomentBuffers> moments;
  double best_l1 = 0.0;
  std::size_t best_epoch = 0;
  std::size_t bad_epochs = 0;
  std::vector<engine::NamedTensor> best_snapshot;
};

void save_resume_state(const std::filesystem::path& path, const ResumeState& state);
ResumeState load_resume_state(const std::filesystem::path& path);

struct TrainerHooks {
  MetricsWriter* metrics = nullptr;
  // Called after every epoch's evaluation with the model and resume state.
  std::function<void(const EpochRecord&, model::CaftModel&, const ResumeState&)> on_epoch_end;
  const ResumeState* resume = nullptr;
};

// Returns the warning text when held-out CE of head 2 exceeds `threshold`.
std::optional<std::string> aux_reliability_warning(const model::CaftModel& model,
                                                   std::span<const data::EncodedExample> heldout, double threshold);

// Trains heads 2..n on the discounted auxiliary loss; everything else frozen.
TrainResult train_aux_heads(model::CaftModel& model, std::span<const data::EncodedExample> train,
                            std::span<const data::EncodedExample> valid, const TrainPlan& plan,
                            const LossSchedule& schedule, const TrainerHooks& hooks = {});

// CAFT fine-tuning (caft_full or caft_lora). Aux heads and F_u stay frozen.
TrainResult caft_finetune(model::CaftModel& model, std::span<const data::EncodedExample> train,
                          std::span<const data::EncodedExample> valid, const TrainPlan& plan,
                          const LossSchedule& schedule, const TrainerHooks& hooks = {});

// Next-token training of a fresh base model, unembedding included. Aux heads
// are frozen and unused; call CaftModel::rebuild_aux_heads afterwards so they start as
// copies of the trained head 1.
TrainResult pretrain(model::CaftModel& model, std::span<const data::EncodedExample> train,
                     std::span<const data::EncodedExample> valid, const TrainPlan& plan,
                     const TrainerHooks& hooks = {});

// Next-token baseline (next_token_full or next_token_lora); aux heads unused.
TrainResult next_token_finetune(model::CaftModel& model, std::span<const data::EncodedExample> train,
                                std::span<const data::EncodedExample> valid, const TrainPlan& plan,
                                const TrainerHooks& hooks = {});

std::size_t steps_per_epoch(std::size_t n_examples, std::size_t batch_size);
// Seeded permutation used for the data order of `epoch` (1-based).
std::vector<std::size_t> epoch_order(std::size_t n_examples, std::uint64_t seed, std::size_t epoch);

}  // namespace caft::training
