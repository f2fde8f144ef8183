#pragma once

#include <cstddef>
#include <cstdint>
#include <set>
#include <string>

#include "caft/model/caft_model.hpp"
#include "caft/training/lora.hpp"
#include "json.hpp"

namespace caft::training {

// kPretrain builds the base model from scratch (every group but the aux
// heads is trainable); the other phases follow the fine-tuning recipe.
enum class Phase { kPretrain, kAuxHeadTraining, kCaftFull, kCaftLora, kNextTokenFull, kNextTokenLora };

std::string to_string(Phase phase);
Phase parse_phase(const std::string& text);
bool is_caft(Phase phase);
bool is_lora(Phase phase);
bool is_next_token(Phase phase);

struct EarlyStop {
  bool enabled = true;
  std::size_t patience = 2;  // epochs without a better validation L1
};

struct TrainPlan {
  Phase phase = Phase::kCaftFull;
  std::size_t epochs = 5;
  std::size_t batch_size = 32;
  double peak_lr = 1e-5;
  std::size_t warmup_steps = 50;
  double lr_floor_ratio = 0.1;
  double weight_decay = 0.0;
  EarlyStop early_stop;
  std::size_t aux_task_pretrain_epochs = 0;
  double aux_pretrain_lr = 1e-4;
  LoraConfig lora;
  double ce2_warning_threshold = 4.0;
  std::uint64_t seed = 0;

  void validate() const;
};

// Defaults per phase. Fine-tuning columns follow the published
// hyperparameter table (5 epochs, batch 32, LoRA 8/16/0.10, peak LR 1e-5
// except full next-token fine-tuning at 5e-6); auxiliary-head training uses
// 4 epochs, batch 64, peak LR 1e-4 and 300 warmup steps. Base-model
// pretraining has no published counterpart; its defaults suit the desk-scale
// corpus.
TrainPlan default_plan(Phase phase);

nlohmann::json to_json(const TrainPlan& plan);

// Parameter groups updated in `phase`; everything else is frozen.
std::set<model::ParameterGroup> trainable_groups(Phase phase);

// Sets requires_grad on every parameter according to `phase`, clears stale
// grads, and returns the names of the trainable tensors.
std::set<std::string> apply_freeze(model::CaftModel& model, Phase phase);

}  // namespace caft::training
