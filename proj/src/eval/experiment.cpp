#include "caft/eval/experiment.hpp"

#include <chrono>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "caft/common/error.hpp"

namespace caft::eval {

using training::Phase;

namespace {

void note(const Progress& progress, const std::string& text) {
  spdlog::info("{}", text);
  if (progress) progress(text);
}

Phase baseline_phase(Phase caft) { return caft == Phase::kCaftLora ? Phase::kNextTokenLora : Phase::kNextTokenFull; }

std::vector<data::EncodedExample> encoded(const data::Vocabulary& vocab, const data::ConceptCorpus& corpus,
                                          const std::string& split) {
  return data::encode_all(vocab, corpus.split(split));
}

}  // namespace

void ExperimentConfig::validate() const {
  std::vector<std::string> problems;
  auto collect = [&](const std::string& where, const auto& fn) {
    try {
      fn();
    } catch (const ConfigError& e) {
      problems.push_back(where + ": " + e.what());
    }
  };
  collect("corpus", [&] { corpus.validate(); });
  collect("pretrain", [&] { pretrain.validate(); });
  collect("aux", [&] { aux.validate(); });
  collect("finetune", [&] { finetune.validate(); });
  collect("schedule", [&] { schedule.validate(); });
  if (vocab_size <= data::kNumSpecials) problems.emplace_back("vocab_size must exceed the special tokens");
  if (model.n_future < 2) problems.emplace_back("model.n_future must be at least 2 for a CAFT comparison");
  if (pretrain.phase != Phase::kPretrain) problems.emplace_back("pretrain.phase must be pretrain");
  if (aux.phase != Phase::kAuxHeadTraining) problems.emplace_back("aux.phase must be aux_head_training");
  if (!training::is_caft(finetune.phase)) problems.emplace_back("finetune.phase must be caft_full or caft_lora");
  if (n_runs < 1) problems.emplace_back("n_runs must be at least 1");
  if (problems.empty()) return;
  std::string msg = "invalid experiment config:";
  for (const auto& p : problems) msg += "\n  - " + p;
  throw ConfigError(msg);
}

ExperimentConfig default_experiment() {
  ExperimentConfig c;
  c.model.d_model = 64;
  c.model.n_layers = 3;  // 2 trunk blocks + head 1
  c.model.n_attn_heads = 4;
  c.model.max_seq_len = 96;
  c.model.n_future = 5;

  c.pretrain.epochs = 12;
  c.pretrain.batch_size = 32;
  c.pretrain.peak_lr = 2e-3;
  c.pretrain.warmup_steps = 100;

  c.aux.peak_lr = 1e-3;
  c.aux.warmup_steps = 20;

  c.finetune.peak_lr = 1e-3;
  c.finetune.warmup_steps = 20;
  // Task concepts never occur in the distilled general data, so held-out CE_2
  // on the task starts above the 4.0 reliability threshold: fit the aux heads
  // to the task for one epoch before CAFT.
  c.finetune.aux_task_pretrain_epochs = 1;
  c.finetune.aux_pretrain_lr = c.aux.peak_lr;
  return c;
}

data::Vocabulary build_tokenizer(const ExperimentConfig& config) {
  return data::train_bpe(data::tokenizer_corpus(config.corpus, config.tokenizer_lines), config.vocab_size);
}

model::CaftModel pretrain_base(const ExperimentConfig& config, const data::Vocabulary& vocab,
                               const data::ConceptCorpus& corpus, training::TrainResult* result) {
  model::ModelConfig mc = config.model;
  mc.vocab_size = vocab.size();
  mc.validate();
  std::size_t longest = 0;
  for (const auto& split : data::kCorpusSplits) {
    for (const auto& e : encoded(vocab, corpus, split)) longest = std::max(longest, e.ids.size());
  }
  if (longest > mc.max_seq_len) {
    throw ConfigError("the longest encoded corpus sample has " + std::to_string(longest) +
                      " tokens; raise model.max_seq_len (currently " + std::to_string(mc.max_seq_len) + ")");
  }
  model::CaftModel m = model::CaftModel::create(mc, config.model_seed);
  const auto train = encoded(vocab, corpus, "general_train");
  const auto valid = encoded(vocab, corpus, "general_valid");
  training::TrainResult r = training::pretrain(m, train, valid, config.pretrain);
  m.rebuild_aux_heads(mc.n_future);
  if (result) *result = std::move(r);
  return m;
}

std::vector<data::DistilledExample> distill_general(const model::CaftModel& model, const data::Vocabulary& vocab,
                                                    const data::ConceptCorpus& corpus, std::size_t n_questions,
                                                    const std::string& split) {
  const auto& samples = corpus.split(split);
  const std::size_t n = n_questions == 0 ? samples.size() : std::min(n_questions, samples.size());
  std::vector<std::string> questions;
  for (std::size_t i = 0; i < n; ++i) questions.push_back(samples[i].prompt);
  return data::self_distill(model, vocab, questions);
}

BaseArtifacts prepare_base(const ExperimentConfig& config, const Progress& progress) {
  config.validate();
  note(progress, "training tokenizer");
  data::Vocabulary vocab = build_tokenizer(config);
  note(progress, fmt::format("tokenizer: {} pieces; generating concept corpus", vocab.size()));
  data::ConceptCorpus corpus = data::generate_concept_corpus(config.corpus, vocab);

  note(progress, "pretraining base model on general_train");
  training::TrainResult pre;
  model::CaftModel m = pretrain_base(config, vocab, corpus, &pre);

  note(progress, "self-distilling aux-head targets from head 1");
  auto distilled = distill_general(m, vocab, corpus, config.distill_questions);
  const auto distilled_valid = distill_general(m, vocab, corpus, 0, "general_valid");
  const auto train = data::encode_all(vocab, data::examples_of(distilled));
  const auto valid = data::encode_all(vocab, data::examples_of(distilled_valid));

  note(progress, "training aux heads");
  training::TrainPlan aux = config.aux;
  aux.seed = config.model_seed;
  training::TrainResult aux_result = training::train_aux_heads(m, train, valid, aux, config.schedule);
  return {std::move(vocab), std::move(corpus), std::move(m), std::move(pre), std::move(aux_result),
          std::move(distilled)};
}

ConceptInventory probe_inventory(std::span<const data::ConceptProbe> probes) {
  std::map<std::size_t, std::size_t> counts;
  for (const auto& p : probes) ++counts[p.sample_id];
  std::vector<SampleConcepts> samples;
  for (const auto& [id, n] : counts) samples.push_back({id, {}, n});
  return make_inventory(std::move(samples));
}

ArmRun run_arm(const model::CaftModel& base, const data::Vocabulary& vocab, const data::ConceptCorpus& corpus,
               const training::TrainPlan& plan, const training::LossSchedule& schedule, std::uint64_t seed) {
  const auto start = std::chrono::steady_clock::now();
  const auto train = encoded(vocab, corpus, "task_train");
  const auto valid = encoded(vocab, corpus, "task_valid");
  const auto test = encoded(vocab, corpus, "task_test");

  training::TrainPlan p = plan;
  p.seed = seed;
  model::CaftModel m = base.clone();
  training::TrainResult r = training::is_caft(p.phase) ? training::caft_finetune(m, train, valid, p, schedule)
                                                       : training::next_token_finetune(m, train, valid, p);
  if (m.has_adapters()) training::lora_merge(m);

  const auto probes = data::concept_probes(vocab, corpus.split("task_test"), corpus.group("task"));
  ProbeScore score = score_concept_probes(m, probes);

  ArmRun run;
  run.system = training::is_caft(p.phase) ? "caft" : "next_token";
  run.seed = seed;
  run.run_id = fmt::format("seed{}-{}", seed, run.system);
  run.concept_completion_pct = score.overall.pct();
  run.test_ppl_head1 = eval_perplexity(m, test, 1)[0];
  run.per_sample = std::move(score.per_sample);
  run.best_epoch = r.best_epoch;
  run.epochs = std::move(r.epochs);
  run.warnings = std::move(r.warnings);
  run.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return run;
}

ComparisonReport compare_runs(const ExperimentConfig& config, const BaseArtifacts& base, const Progress& progress) {
  if (config.n_runs < 1) throw InputError("compare_runs: n_runs must be at least 1");
  if (!training::is_caft(config.finetune.phase)) throw ContractError("compare_runs: finetune plan must be a CAFT phase");
  if (base.model.n_heads() < 2) throw ContractError("compare_runs: base model has no aux heads; run train-aux first");

  const auto probes = data::concept_probes(base.vocab, base.corpus.split("task_test"), base.corpus.group("task"));
  ConceptInventory inventory = probe_inventory(probes);

  training::TrainPlan baseline = config.finetune;
  baseline.phase = baseline_phase(config.finetune.phase);
  baseline.aux_task_pretrain_epochs = 0;

  std::vector<PairedRun> runs;
  for (std::size_t i = 0; i < config.n_runs; ++i) {
    const std::uint64_t seed = config.base_seed + i;
    PairedRun pr;
    pr.seed = seed;
    note(progress, fmt::format("run {}/{} (seed {}): {}", i + 1, config.n_runs, seed, to_string(config.finetune.phase)));
    pr.caft = run_arm(base.model, base.vocab, base.corpus, config.finetune, config.schedule, seed);
    note(progress, fmt::format("run {}/{} (seed {}): {}", i + 1, config.n_runs, seed, to_string(baseline.phase)));
    pr.baseline = run_arm(base.model, base.vocab, base.corpus, baseline, config.schedule, seed);
    pr.bins = bin_by_conceptual_density(inventory, pr.caft.per_sample, pr.baseline.per_sample);
    note(progress, fmt::format("seed {}: CAFT {:.2f}% vs next-token {:.2f}% (conceptual {:+.2f}, non-conceptual {:+.2f})",
                               seed, pr.caft.concept_completion_pct, pr.baseline.concept_completion_pct,
                               pr.bins.conceptual_delta(), pr.bins.non_conceptual_delta()));
    runs.push_back(std::move(pr));
  }

  nlohmann::json meta = {{"config", to_json(config)},
                         {"vocab_fingerprint", base.vocab.fingerprint()},
                         {"n_probes", probes.size()},
                         {"checkpoint_selection", "per-run best epoch by validation L1"},
                         {"base_model", "shared across seeds; seeds vary fine-tuning order, dropout and adapter init"}};
  return aggregate_runs(std::move(runs), std::move(inventory), std::move(meta));
}

ComparisonReport aggregate_runs(std::vector<PairedRun> runs, ConceptInventory inventory, nlohmann::json metadata) {
  if (runs.empty()) throw InputError("aggregate_runs: no runs");
  ComparisonReport rep;
  rep.caft.system = "caft";
  rep.baseline.system = "next_token";
  std::vector<double> delta, cdelta, ndelta;
  for (const auto& r : runs) {
    rep.caft.values.push_back(r.caft.concept_completion_pct);
    rep.baseline.values.push_back(r.baseline.concept_completion_pct);
    delta.push_back(r.caft.concept_completion_pct - r.baseline.concept_completion_pct);
    cdelta.push_back(r.bins.conceptual_delta());
    ndelta.push_back(r.bins.non_conceptual_delta());
  }
  rep.caft.summary = summarize(rep.caft.values);
  rep.baseline.summary = summarize(rep.baseline.values);
  rep.delta = summarize(delta);
  rep.conceptual_delta = summarize(cdelta);
  rep.non_conceptual_delta = summarize(ndelta);
  metadata["seeds"] = nlohmann::json::array();
  for (const auto& r : runs) metadata["seeds"].push_back(r.seed);
  rep.runs = std::move(runs);
  rep.inventory = std::move(inventory);
  rep.metadata = std::move(metadata);
  return rep;
}

void write_report_csv(const std::filesystem::path& path, const ComparisonReport& report) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write report '" + path.string() + "'");
  out << std::setprecision(10);
  out << "run_id,system,metric,value\n";
  auto row = [&](const std::string& run, const std::string& system, const std::string& metric, double value) {
    out << run << ',' << system << ',' << metric << ',' << value << '\n';
  };
  for (const auto& r : report.runs) {
    for (const ArmRun* arm : {&r.caft, &r.baseline}) {
      const bool a = arm == &r.caft;
      row(arm->run_id, arm->system, "concept_completion_pct", arm->concept_completion_pct);
      row(arm->run_id, arm->system, "conceptual_pct", a ? r.bins.conceptual_a : r.bins.conceptual_b);
      row(arm->run_id, arm->system, "non_conceptual_pct", a ? r.bins.non_conceptual_a : r.bins.non_conceptual_b);
      row(arm->run_id, arm->system, "test_ppl_head1", arm->test_ppl_head1);
      row(arm->run_id, arm->system, "best_epoch", static_cast<double>(arm->best_epoch));
      row(arm->run_id, arm->system, "seed", static_cast<double>(arm->seed));
    }
  }
  auto summary_rows = [&](const std::string& system, const std::string& metric, const Summary& s) {
    row("all", system, metric + "_mean", s.mean);
    if (s.ci95_halfwidth) row("all", system, metric + "_ci95", *s.ci95_halfwidth);
  };
  summary_rows("caft", "concept_completion_pct", report.caft.summary);
  summary_rows("next_token", "concept_completion_pct", report.baseline.summary);
  summary_rows("delta", "concept_completion_pct", report.delta);
  summary_rows("delta", "conceptual_pct", report.conceptual_delta);
  summary_rows("delta", "non_conceptual_pct", report.non_conceptual_delta);
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

void write_epoch_ppl_csv(const std::filesystem::path& path, std::span<const training::EpochRecord> epochs) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << std::setprecision(10) << "stage,epoch,head,ppl\n";
  for (const auto& e : epochs) {
    for (std::size_t k = 0; k < e.valid_ppl.size(); ++k) {
      out << e.stage << ',' << e.epoch << ',' << k + 1 << ',' << e.valid_ppl[k] << '\n';
    }
  }
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

namespace {

std::string cell(const Summary& s) {
  if (!s.ci95_halfwidth) return fmt::format("{:.2f}", s.mean);
  return fmt::format("{:.2f} ± {:.3f}", s.mean, *s.ci95_halfwidth);
}

std::string pooled_cell(const std::vector<PairedRun>& runs, bool caft, bool conceptual) {
  std::vector<double> v;
  for (const auto& r : runs) {
    v.push_back(conceptual ? (caft ? r.bins.conceptual_a : r.bins.conceptual_b)
                           : (caft ? r.bins.non_conceptual_a : r.bins.non_conceptual_b));
  }
  return cell(summarize(v));
}

}  // namespace

std::string format_summary(const ComparisonReport& report) {
  std::ostringstream os;
  const std::size_t n = report.runs.size();
  os << fmt::format("Concept completion, {} run{} (mean concepts per sample {:.2f}; {} conceptual / {} non-conceptual)\n",
                    n, n == 1 ? "" : "s", report.inventory.mean_count, report.inventory.conceptual.size(),
                    report.inventory.non_conceptual.size());
  os << fmt::format("{:<12} | {:>20} | {:>20} | {:>20}\n", "System", "Accuracy (%) ± CI", "Conceptual (%)",
                    "Non-conceptual (%)");
  os << std::string(12, '-') << "-+-" << std::string(20, '-') << "-+-" << std::string(20, '-') << "-+-"
     << std::string(20, '-') << '\n';
  os << fmt::format("{:<12} | {:>20} | {:>20} | {:>20}\n", "CAFT", cell(report.caft.summary),
                    pooled_cell(report.runs, true, true), pooled_cell(report.runs, true, false));
  os << fmt::format("{:<12} | {:>20} | {:>20} | {:>20}\n", "Next-token", cell(report.baseline.summary),
                    pooled_cell(report.runs, false, true), pooled_cell(report.runs, false, false));
  os << fmt::format("{:<12} | {:>20} | {:>20} | {:>20}\n", "Delta", cell(report.delta), cell(report.conceptual_delta),
                    cell(report.non_conceptual_delta));
  os << "Seeds:";
  for (const auto& r : report.runs) os << ' ' << r.seed;
  os << '\n';
  return os.str();
}

nlohmann::json to_json(const ComparisonReport& report) {
  nlohmann::json runs = nlohmann::json::array();
  for (const auto& r : report.runs) {
    nlohmann::json pr = {{"seed", r.seed}, {"bins", to_json(r.bins)}};
    for (const ArmRun* arm : {&r.caft, &r.baseline}) {
      nlohmann::json epochs = nlohmann::json::array();
      for (const auto& e : arm->epochs) epochs.push_back(training::to_json(e));
      pr[arm->system] = {{"run_id", arm->run_id},
                         {"concept_completion_pct", arm->concept_completion_pct},
                         {"test_ppl_head1", arm->test_ppl_head1},
                         {"best_epoch", arm->best_epoch},
                         {"warnings", arm->warnings},
                         {"seconds", arm->seconds},
                         {"epochs", epochs}};
    }
    runs.push_back(pr);
  }
  return {{"caft", {{"values", report.caft.values}, {"summary", to_json(report.caft.summary)}}},
          {"next_token", {{"values", report.baseline.values}, {"summary", to_json(report.baseline.summary)}}},
          {"delta", to_json(report.delta)},
          {"conceptual_delta", to_json(report.conceptual_delta)},
          {"non_conceptual_delta", to_json(report.non_conceptual_delta)},
          {"inventory",
           {{"mean_count", report.inventory.mean_count},
            {"n_conceptual", report.inventory.conceptual.size()},
            {"n_non_conceptual", report.inventory.non_conceptual.size()}}},
          {"runs", runs},
          {"metadata", report.metadata}};
}

nlohmann::json to_json(const ExperimentConfig& c) {
  return {{"corpus", data::to_json(c.corpus)},
          {"vocab_size", c.vocab_size},
          {"tokenizer_lines", c.tokenizer_lines},
          {"model", model::to_json(c.model)},
          {"model_seed", c.model_seed},
          {"pretrain", training::to_json(c.pretrain)},
          {"distill_questions", c.distill_questions},
          {"aux", training::to_json(c.aux)},
          {"finetune", training::to_json(c.finetune)},
          {"schedule", training::to_json(c.schedule)},
          {"n_runs", c.n_runs},
          {"base_seed", c.base_seed}};
}

}  // namespace caft::eval
