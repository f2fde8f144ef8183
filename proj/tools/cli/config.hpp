#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "caft/data/concept_corpus.hpp"
#include "caft/eval/experiment.hpp"
#include "caft/model/config.hpp"
#include "caft/training/plan.hpp"
#include "caft/training/schedule.hpp"
#include "json.hpp"

namespace caft::cli {

inline constexpr int kSchemaVersion = 1;

struct DataSection {
  data::ConceptCorpusSpec corpus;
  std::size_t tokenizer_vocab_size = 192;
  std::size_t tokenizer_lines = 2000;
  std::size_t distill_questions = 0;  // 0 = every question
};

struct EvalSection {
  std::size_t n_runs = 5;
  std::size_t probe_batch_size = 32;
};

// Parsed run configuration. Plan keys are kept as overrides because the
// defaults they override depend on the phase a command runs.
//
//   {"schema_version": 1, "seed": 0,
//    "model": {...}, "data": {...}, "schedule": {...}, "plan": {...}, "eval": {...}}
//
// Plan keys at the top level of "plan" apply to the command's phase; an
// object named after a phase ("pretrain", "aux_head_training", "caft_full",
// ...) holds overrides for that phase only and wins over the flat keys.
struct RunConfig {
  std::uint64_t seed = 0;
  model::ModelConfig model;
  std::optional<std::size_t> model_vocab_size;  // must match the tokenizer when given
  DataSection data;
  training::LossSchedule schedule;
  nlohmann::json plan_overrides = nlohmann::json::object();
  EvalSection eval;

  // default_plan(phase) with the overrides applied and the run seed.
  training::TrainPlan plan_for(training::Phase phase) const;
  // Same overrides on top of an explicit base plan.
  training::TrainPlan plan_for(training::Phase phase, training::TrainPlan base) const;
  // Desk-scale experiment assembled from this config.
  eval::ExperimentConfig experiment(training::Phase caft_phase) const;
};

// Throws ConfigError listing every violation found: unknown keys, wrong
// types, out-of-range values and a missing or unsupported schema_version.
RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

// The full default configuration, every key spelled out.
nlohmann::json default_config_json();

}  // namespace caft::cli
