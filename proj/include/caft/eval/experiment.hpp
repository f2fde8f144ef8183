#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "caft/data/concept_corpus.hpp"
#include "caft/data/distill.hpp"
#include "caft/data/tokenizer.hpp"
#include "caft/eval/concepts.hpp"
#include "caft/eval/metrics.hpp"
#include "caft/model/caft_model.hpp"
#include "caft/training/plan.hpp"
#include "caft/training/schedule.hpp"
#include "caft/training/trainer.hpp"
#include "json.hpp"

namespace caft::eval {

// End-to-end desk-scale comparison: tokenizer and concept corpus, a base
// model pretrained on the general split, aux heads trained on its
// self-distilled answers, then paired CAFT / next-token fine-tuning runs on
// the task split.
struct ExperimentConfig {
  data::ConceptCorpusSpec corpus;
  std::size_t vocab_size = 192;
  std::size_t tokenizer_lines = 2000;
  model::ModelConfig model;  // vocab_size is taken from the trained tokenizer
  std::uint64_t model_seed = 0;
  training::TrainPlan pretrain = training::default_plan(training::Phase::kPretrain);
  std::size_t distill_questions = 0;  // general_train prompts to distill; 0 = all
  training::TrainPlan aux = training::default_plan(training::Phase::kAuxHeadTraining);
  // The CAFT arm; the baseline arm is the same plan with the next-token phase.
  training::TrainPlan finetune = training::default_plan(training::Phase::kCaftFull);
  training::LossSchedule schedule;
  std::size_t n_runs = 5;
  std::uint64_t base_seed = 0;

  void validate() const;
};

// Desk-scale defaults: a 2-layer trunk with d_model 64, a fine-tuning peak
// LR shared by both arms, and one epoch of task aux-head training before CAFT.
ExperimentConfig default_experiment();

struct BaseArtifacts {
  data::Vocabulary vocab;
  data::ConceptCorpus corpus;
  model::CaftModel model;  // pretrained, aux heads trained
  training::TrainResult pretrain;
  training::TrainResult aux;
  std::vector<data::DistilledExample> distilled;
};

using Progress = std::function<void(const std::string&)>;

data::Vocabulary build_tokenizer(const ExperimentConfig& config);
// Pretrains a fresh model on general_train with early stoppage on
// general_valid and copy-initializes the aux heads from the result.
model::CaftModel pretrain_base(const ExperimentConfig& config, const data::Vocabulary& vocab,
                               const data::ConceptCorpus& corpus, training::TrainResult* result = nullptr);
// Self-distilled aux-head training set: general prompts answered by head 1.
std::vector<data::DistilledExample> distill_general(const model::CaftModel& model, const data::Vocabulary& vocab,
                                                    const data::ConceptCorpus& corpus, std::size_t n_questions,
                                                    const std::string& split = "general_train");
BaseArtifacts prepare_base(const ExperimentConfig& config, const Progress& progress = {});

struct ArmRun {
  std::string run_id;
  std::string system;  // "caft" or "next_token"
  std::uint64_t seed = 0;
  double concept_completion_pct = 0.0;
  double test_ppl_head1 = 0.0;
  SampleResults per_sample;
  std::size_t best_epoch = 0;
  std::vector<training::EpochRecord> epochs;
  std::vector<std::string> warnings;
  double seconds = 0.0;
};

struct PairedRun {
  std::uint64_t seed = 0;
  ArmRun caft;
  ArmRun baseline;
  BinComparison bins;  // A = CAFT, B = next-token
};

struct EvalReport {
  std::string system;
  std::string metric = "concept_completion_pct";
  std::vector<double> values;  // one per run
  Summary summary;
};

struct ComparisonReport {
  std::vector<PairedRun> runs;
  EvalReport caft;
  EvalReport baseline;
  Summary delta;                 // paired CAFT - next-token
  Summary conceptual_delta;      // per-run conceptual-bin deltas
  Summary non_conceptual_delta;  // per-run non-conceptual-bin deltas
  ConceptInventory inventory;
  nlohmann::json metadata;
};

// Planted-concept counts of the probe samples, binned around their mean.
ConceptInventory probe_inventory(std::span<const data::ConceptProbe> probes);

// Fine-tunes a clone of `base` on task_train (early stoppage on task_valid)
// and scores concept completion on task_test.
ArmRun run_arm(const model::CaftModel& base, const data::Vocabulary& vocab, const data::ConceptCorpus& corpus,
               const training::TrainPlan& plan, const training::LossSchedule& schedule, std::uint64_t seed);

// Runs n_runs seeded pairs (seeds base_seed + i) from the shared base model.
ComparisonReport compare_runs(const ExperimentConfig& config, const BaseArtifacts& base,
                              const Progress& progress = {});

// Summaries from finished runs; exposed separately for testing.
ComparisonReport aggregate_runs(std::vector<PairedRun> runs, ConceptInventory inventory, nlohmann::json metadata);

// Flat CSV: run_id,system,metric,value.
void write_report_csv(const std::filesystem::path& path, const ComparisonReport& report);
// Per-epoch held-out perplexity per head: stage,epoch,head,ppl.
void write_epoch_ppl_csv(const std::filesystem::path& path, std::span<const training::EpochRecord> epochs);
// Human-readable "Accuracy (%) ± CI" table.
std::string format_summary(const ComparisonReport& report);
nlohmann::json to_json(const ComparisonReport& report);

nlohmann::json to_json(const ExperimentConfig& config);

}  // namespace caft::eval
