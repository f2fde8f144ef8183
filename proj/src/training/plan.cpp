#include "caft/training/plan.hpp"

#include <vector>

#include "caft/common/error.hpp"

namespace caft::training {

using model::ParameterGroup;

std::string to_string(Phase phase) {
  switch (phase) {
    case Phase::kPretrain: return "pretrain";
    case Phase::kAuxHeadTraining: return "aux_head_training";
    case Phase::kCaftFull: return "caft_full";
    case Phase::kCaftLora: return "caft_lora";
    case Phase::kNextTokenFull: return "next_token_full";
    case Phase::kNextTokenLora: return "next_token_lora";
  }
  return "unknown";
}

Phase parse_phase(const std::string& text) {
  for (Phase p : {Phase::kPretrain, Phase::kAuxHeadTraining, Phase::kCaftFull, Phase::kCaftLora, Phase::kNextTokenFull,
                  Phase::kNextTokenLora}) {
    if (to_string(p) == text) return p;
  }
  throw ConfigError("unknown phase '" + text +
                    "' (expected pretrain, aux_head_training, caft_full, caft_lora, next_token_full or next_token_lora)");
}

bool is_caft(Phase phase) { return phase == Phase::kCaftFull || phase == Phase::kCaftLora; }
bool is_lora(Phase phase) { return phase == Phase::kCaftLora || phase == Phase::kNextTokenLora; }
bool is_next_token(Phase phase) { return phase == Phase::kNextTokenFull || phase == Phase::kNextTokenLora; }

void TrainPlan::validate() const {
  std::vector<std::string> problems;
  if (epochs == 0) problems.emplace_back("epochs must be positive");
  if (batch_size == 0) problems.emplace_back("batch_size must be positive");
  if (!(peak_lr > 0.0)) problems.emplace_back("peak_lr must be positive");
  if (!(lr_floor_ratio >= 0.0 && lr_floor_ratio <= 1.0)) problems.emplace_back("lr_floor_ratio must be in [0, 1]");
  if (!(weight_decay >= 0.0)) problems.emplace_back("weight_decay must be >= 0");
  if (early_stop.enabled && early_stop.patience == 0) problems.emplace_back("early_stop.patience must be positive");
  if (!(aux_pretrain_lr > 0.0)) problems.emplace_back("aux_pretrain_lr must be positive");
  if (aux_task_pretrain_epochs > 0 && !is_caft(phase)) {
    problems.emplace_back("aux_task_pretrain_epochs applies to CAFT phases only");
  }
  try {
    lora.validate();
  } catch (const ConfigError& e) {
    problems.emplace_back(e.what());
  }
  if (problems.empty()) return;
  std::string msg = "invalid train plan:";
  for (const auto& p : problems) msg += "\n  - " + p;
  throw ConfigError(msg);
}

TrainPlan default_plan(Phase phase) {
  TrainPlan p;
  p.phase = phase;
  switch (phase) {
    case Phase::kPretrain:
      p.epochs = 10;
      p.peak_lr = 2e-3;
      p.warmup_steps = 100;
      break;
    case Phase::kAuxHeadTraining:
      p.epochs = 4;
      p.batch_size = 64;
      p.peak_lr = 1e-4;
      p.warmup_steps = 300;
      p.early_stop.enabled = false;
      break;
    case Phase::kNextTokenFull:
      p.peak_lr = 5e-6;
      break;
    case Phase::kCaftFull:
    case Phase::kCaftLora:
    case Phase::kNextTokenLora:
      p.peak_lr = 1e-5;
      break;
  }
  return p;
}

nlohmann::json to_json(const TrainPlan& p) {
  nlohmann::json j = {{"phase", to_string(p.phase)},
                      {"epochs", p.epochs},
                      {"batch_size", p.batch_size},
                      {"peak_lr", p.peak_lr},
                      {"warmup_steps", p.warmup_steps},
                      {"lr_floor_ratio", p.lr_floor_ratio},
                      {"weight_decay", p.weight_decay},
                      {"early_stop", {{"enabled", p.early_stop.enabled}, {"patience", p.early_stop.patience}}},
                      {"aux_task_pretrain_epochs", p.aux_task_pretrain_epochs},
                      {"aux_pretrain_lr", p.aux_pretrain_lr},
                      {"ce2_warning_threshold", p.ce2_warning_threshold},
                      {"seed", p.seed}};
  j.update(to_json(p.lora));
  return j;
}

std::set<ParameterGroup> trainable_groups(Phase phase) {
  switch (phase) {
    case Phase::kPretrain:
      return {ParameterGroup::kEmbedding, ParameterGroup::kTrunk, ParameterGroup::kFinalHead,
              ParameterGroup::kUnembedding};
    case Phase::kAuxHeadTraining: return {ParameterGroup::kAuxHeads};
    case Phase::kCaftFull:
    case Phase::kNextTokenFull: return {ParameterGroup::kEmbedding, ParameterGroup::kTrunk, ParameterGroup::kFinalHead};
    case Phase::kCaftLora:
    case Phase::kNextTokenLora: return {ParameterGroup::kAdapters};
  }
  return {};
}

std::set<std::string> apply_freeze(model::CaftModel& model, Phase phase) {
  const auto groups = trainable_groups(phase);
  std::set<std::string> trainable;
  model.visit_parameters([&](const std::string& name, engine::Tensor& t) {
    const bool on = groups.contains(model::parameter_group(name));
    t.set_requires_grad(on);
    t.clear_grad();
    if (on) trainable.insert(name);
  });
  return trainable;
}

}  // namespace caft::training
