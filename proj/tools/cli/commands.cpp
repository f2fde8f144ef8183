#include "cli/commands.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>

#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "caft/common/error.hpp"
#include "caft/common/hash.hpp"
#include "caft/data/concept_corpus.hpp"
#include "caft/data/dataset.hpp"
#include "caft/data/distill.hpp"
#include "caft/data/tokenizer.hpp"
#include "caft/engine/tape.hpp"
#include "caft/eval/experiment.hpp"
#include "caft/eval/metrics.hpp"
#include "caft/model/checkpoint.hpp"
#include "caft/training/lora.hpp"
#include "caft/training/trainer.hpp"
#include "cli/config.hpp"

namespace caft::cli {
namespace fs = std::filesystem;
using nlohmann::json;
using training::Phase;

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return kConfigError;
  if (dynamic_cast<const ContractError*>(&e)) return kContractError;
  if (dynamic_cast<const IoError*>(&e) || dynamic_cast<const InputError*>(&e)) return kIoError;
  return kRuntimeError;
}

fs::path run_root() {
  const char* env = std::getenv(kRunRootEnv);
  return env && *env ? fs::path(env) : fs::path("runs");
}

namespace {

std::string read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string file_digest(const fs::path& path) { return hex64(fnv1a(read_bytes(path))); }

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

// A run directory named by the hash of everything that determines its
// contents: command, flags, effective configuration and input file digests.
class RunDir {
 public:
  RunDir(const std::string& command, json identity, const std::string& override_dir, bool force) {
    identity["command"] = command;
    const std::string digest = hex64(fnv1a(identity.dump()));
    path_ = override_dir.empty() ? run_root() / (command + "-" + digest) : fs::path(override_dir);
    if (fs::exists(path_ / "run.json")) {
      if (!force) {
        throw IoError("run directory '" + path_.string() +
                      "' already holds a run with this configuration; pass --force to replace it");
      }
      std::error_code ec;
      fs::remove_all(path_, ec);
      if (ec) throw IoError("cannot clear '" + path_.string() + "': " + ec.message());
    }
    std::error_code ec;
    fs::create_directories(path_, ec);
    if (ec) throw IoError("cannot create run directory '" + path_.string() + "': " + ec.message());
    record_ = {{"status", "running"}, {"digest", digest}, {"identity", std::move(identity)}};
    write_json(path_ / "run.json", record_);
  }

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

  void finish(json outputs, const std::vector<std::string>& warnings = {}) {
    record_["status"] = "done";
    record_["outputs"] = std::move(outputs);
    record_["warnings"] = warnings;
    write_json(path_ / "run.json", record_);
  }

 private:
  fs::path path_;
  json record_;
};

struct Common {
  std::string config;
  std::string run_dir;
  bool force = false;
};

void add_common(CLI::App* cmd, Common& c, bool with_config = true) {
  if (with_config) cmd->add_option("--config", c.config, "JSON run configuration (defaults when omitted)");
  cmd->add_option("--run-dir", c.run_dir, "Write into this directory instead of a content-addressed one");
  cmd->add_flag("--force", c.force, "Replace an existing run directory");
}

RunConfig config_of(const Common& c) {
  return c.config.empty() ? parse_run_config(default_config_json()) : load_run_config(c.config);
}

json corpus_json(const RunConfig& cfg) {
  json j = data::to_json(cfg.data.corpus);
  j["tokenizer_vocab_size"] = cfg.data.tokenizer_vocab_size;
  j["tokenizer_lines"] = cfg.data.tokenizer_lines;
  j["distill_questions"] = cfg.data.distill_questions;
  return j;
}

json inputs_json(const std::vector<std::pair<std::string, std::string>>& files) {
  json j = json::object();
  for (const auto& [name, path] : files) j[name] = {{"path", fs::absolute(path).string()}, {"fnv1a", file_digest(path)}};
  return j;
}

// Identity digests use input contents, not their paths.
json digest_only(const json& inputs) {
  json j = json::object();
  for (const auto& [name, v] : inputs.items()) j[name] = v.at("fnv1a");
  return j;
}

std::vector<data::EncodedExample> load_encoded(const data::Vocabulary& vocab, const std::string& path) {
  return data::encode_all(vocab, data::read_jsonl(path));
}

void check_vocab(const model::CaftModel& m, const data::Vocabulary& vocab) {
  if (m.config().vocab_size != vocab.size()) {
    throw ContractError("checkpoint vocab_size " + std::to_string(m.config().vocab_size) +
                        " does not match the tokenizer's " + std::to_string(vocab.size()) + " pieces");
  }
}

void report_training(std::ostream& out, const RunDir& dir, const training::TrainResult& r) {
  for (const auto& w : r.warnings) out << "warning: " << w << "\n";
  eval::write_epoch_ppl_csv(dir / "epoch_ppl.csv", r.epochs);
  out << "epochs run: " << r.epochs.size() << ", best epoch: " << r.best_epoch << "\n";
  if (!r.epochs.empty()) {
    const auto& last = r.epochs.back();
    out << "held-out ppl per head at the last epoch:";
    for (double p : last.valid_ppl) out << " " << p;
    out << "\n";
  }
}

training::TrainerHooks hooks_for(training::MetricsWriter& metrics) {
  training::TrainerHooks hooks;
  hooks.metrics = &metrics;
  return hooks;
}

json training_outputs(const training::TrainResult& r) {
  return {{"checkpoint", "model.ckpt"},
          {"metrics", "metrics.jsonl"},
          {"epoch_ppl", "epoch_ppl.csv"},
          {"best_epoch", r.best_epoch},
          {"epochs", r.epochs.size()},
          {"total_steps", r.total_steps}};
}

json effective(const RunConfig& cfg, const training::TrainPlan& plan) {
  return {{"seed", cfg.seed},
          {"model", model::to_json(cfg.model)},
          {"schedule", training::to_json(cfg.schedule)},
          {"plan", training::to_json(plan)}};
}

// Deterministic token batch used by export verification.
model::TokenBatch probe_batch(const model::ModelConfig& config) {
  const std::size_t batch = 10;
  const std::size_t seq = std::min<std::size_t>(24, config.max_seq_len);
  std::mt19937_64 rng(0x70726f6265ULL);
  std::uniform_int_distribution<int> token(static_cast<int>(data::kNumSpecials),
                                           static_cast<int>(config.vocab_size) - 1);
  model::TokenBatch b{std::vector<engine::TokenId>(batch * seq), batch, seq};
  for (std::size_t i = 0; i < b.ids.size(); ++i) b.ids[i] = i % seq == 0 ? data::kBosId : token(rng);
  return b;
}

// ---------------------------------------------------------------- commands

int cmd_init(const std::string& out_path, bool force, std::ostream& out) {
  if (fs::exists(out_path) && !force) throw IoError("'" + out_path + "' exists; pass --force to overwrite it");
  write_json(out_path, default_config_json());
  out << "wrote default config to " << out_path << "\n";
  return kOk;
}

int cmd_train_tokenizer(const Common& c, const std::string& text_path, std::ostream& out) {
  const RunConfig cfg = config_of(c);
  std::vector<std::string> lines;
  json inputs = json::object();
  if (!text_path.empty()) {
    std::istringstream in(read_bytes(text_path));
    for (std::string line; std::getline(in, line);) lines.push_back(line);
    inputs = inputs_json({{"text", text_path}});
  } else {
    lines = data::tokenizer_corpus(cfg.data.corpus, cfg.data.tokenizer_lines);
  }
  RunDir dir("train-tokenizer", {{"data", corpus_json(cfg)}, {"inputs", digest_only(inputs)}}, c.run_dir, c.force);
  const data::Vocabulary vocab = data::train_bpe(lines, cfg.data.tokenizer_vocab_size);
  vocab.save(dir / "tokenizer.json");
  out << "tokenizer: " << vocab.size() << " pieces, fingerprint " << vocab.fingerprint() << "\n";
  out << "run directory: " << dir.path().string() << "\n";
  dir.finish({{"tokenizer", "tokenizer.json"}, {"pieces", vocab.size()}, {"inputs", inputs}});
  return kOk;
}

int cmd_gen_corpus(const Common& c, const std::string& tokenizer, std::ostream& out) {
  const RunConfig cfg = config_of(c);
  const json inputs = inputs_json({{"tokenizer", tokenizer}});
  RunDir dir("gen-corpus", {{"data", corpus_json(cfg)}, {"inputs", digest_only(inputs)}}, c.run_dir, c.force);
  const data::Vocabulary vocab = data::Vocabulary::load(tokenizer);
  const data::ConceptCorpus corpus = data::generate_concept_corpus(cfg.data.corpus, vocab);
  json files = json::object();
  for (const auto& split : data::kCorpusSplits) {
    data::write_jsonl(dir / (split + ".jsonl"), corpus.split(split));
    files[split] = split + ".jsonl";
    out << split << ": " << corpus.split(split).size() << " samples\n";
  }
  write_json(dir / "manifest.json", corpus.manifest(vocab));
  out << "run directory: " << dir.path().string() << "\n";
  dir.finish({{"splits", files}, {"manifest", "manifest.json"}, {"inputs", inputs}});
  return kOk;
}

struct TrainInputs {
  std::string checkpoint;
  std::string tokenizer;
  std::string train;
  std::string valid;
};

int cmd_pretrain(const Common& c, const TrainInputs& in, std::ostream& out) {
  const RunConfig cfg = config_of(c);
  const training::TrainPlan plan = cfg.plan_for(Phase::kPretrain);
  const json inputs = inputs_json({{"tokenizer", in.tokenizer}, {"train", in.train}, {"valid", in.valid}});
  RunDir dir("pretrain", {{"config", effective(cfg, plan)}, {"inputs", digest_only(inputs)}}, c.run_dir, c.force);
  const data::Vocabulary vocab = data::Vocabulary::load(in.tokenizer);
  model::ModelConfig mc = cfg.model;
  if (cfg.model_vocab_size && *cfg.model_vocab_size != vocab.size()) {
    throw ConfigError("model.vocab_size " + std::to_string(*cfg.model_vocab_size) + " does not match the tokenizer's " +
                      std::to_string(vocab.size()) + " pieces");
  }
  mc.vocab_size = vocab.size();
  model::CaftModel m = model::CaftModel::create(mc, cfg.seed);
  const auto train = load_encoded(vocab, in.train);
  const auto valid = load_encoded(vocab, in.valid);
  training::MetricsWriter metrics(dir / "metrics.jsonl");
  const training::TrainResult r = training::pretrain(m, train, valid, plan, hooks_for(metrics));
  m.rebuild_aux_heads(mc.n_future);
  model::save_model(dir / "model.ckpt", m);
  report_training(out, dir, r);
  out << "run directory: " << dir.path().string() << "\n";
  json outputs = training_outputs(r);
  outputs["inputs"] = inputs;
  dir.finish(outputs, r.warnings);
  return kOk;
}

int cmd_distill(const Common& c, const std::string& checkpoint, const std::string& tokenizer,
                const std::vector<std::string>& questions, std::ostream& out) {
  const RunConfig cfg = config_of(c);
  std::vector<std::pair<std::string, std::string>> files = {{"checkpoint", checkpoint}, {"tokenizer", tokenizer}};
  std::map<std::string, std::string> stems;
  for (const auto& q : questions) {
    const std::string stem = fs::path(q).stem().string();
    if (!stems.emplace(stem, q).second) throw ConfigError("two question files share the name '" + stem + "'");
    files.emplace_back("questions/" + stem, q);
  }
  const json inputs = inputs_json(files);
  RunDir dir("distill", {{"distill_questions", cfg.data.distill_questions}, {"inputs", digest_only(inputs)}},
             c.run_dir, c.force);
  const model::CaftModel m = model::load_model(checkpoint);
  const data::Vocabulary vocab = data::Vocabulary::load(tokenizer);
  check_vocab(m, vocab);
  json outputs = {{"inputs", inputs}};
  for (const auto& [stem, path] : stems) {
    const auto samples = data::read_jsonl(path);
    const std::size_t cap = cfg.data.distill_questions;
    const std::size_t n = cap == 0 ? samples.size() : std::min(cap, samples.size());
    std::vector<std::string> prompts;
    for (std::size_t i = 0; i < n; ++i) prompts.push_back(samples[i].prompt);
    const auto distilled = data::self_distill(m, vocab, prompts);
    const std::size_t truncated = static_cast<std::size_t>(
        std::count_if(distilled.begin(), distilled.end(), [](const auto& d) { return d.truncated; }));
    data::write_jsonl(dir / (stem + ".jsonl"), data::examples_of(distilled));
    out << stem << ": " << distilled.size() << " answers (" << truncated << " truncated)\n";
    outputs[stem] = {{"file", stem + ".jsonl"}, {"examples", distilled.size()}, {"truncated", truncated}};
  }
  out << "run directory: " << dir.path().string() << "\n";
  dir.finish(outputs);
  return kOk;
}

int cmd_train_aux(const Common& c, const TrainInputs& in, std::ostream& out) {
  const RunConfig cfg = config_of(c);
  if (cfg.model.n_future < 2) {
    throw ContractError("train-aux needs model.n_future >= 2 (got " + std::to_string(cfg.model.n_future) +
                        "): with a single head there are no auxiliary heads to train");
  }
  const training::TrainPlan plan = cfg.plan_for(Phase::kAuxHeadTraining);
  const json inputs = inputs_json(
      {{"checkpoint", in.checkpoint}, {"tokenizer", in.tokenizer}, {"train", in.train}, {"valid", in.valid}});
  model::CaftModel m = model::load_model(in.checkpoint);
  const data::Vocabulary vocab = data::Vocabulary::load(in.tokenizer);
  check_vocab(m, vocab);
  RunDir dir("train-aux", {{"config", effective(cfg, plan)}, {"inputs", digest_only(inputs)}}, c.run_dir, c.force);
  if (m.n_heads() != cfg.model.n_future) {
    spdlog::info("copy-initializing {} auxiliary heads from head 1", cfg.model.n_future - 1);
    m.rebuild_aux_heads(cfg.model.n_future);
  }
  out << "training " << m.n_heads() - 1 << " auxiliary heads\n";
  const auto train = load_encoded(vocab, in.train);
  const auto valid = load_encoded(vocab, in.valid);
  training::MetricsWriter metrics(dir / "metrics.jsonl");
  const training::TrainResult r = training::train_aux_heads(m, train, valid, plan, cfg.schedule, hooks_for(metrics));
  model::save_model(dir / "model.ckpt", m);
  report_training(out, dir, r);
  out << "run directory: " << dir.path().string() << "\n";
  json outputs = training_outputs(r);
  outputs["inputs"] = inputs;
  dir.finish(outputs, r.warnings);
  return kOk;
}

int cmd_finetune(const Common& c, const TrainInputs& in, bool caft, bool lora, std::ostream& out) {
  const RunConfig cfg = config_of(c);
  const Phase phase = caft ? (lora ? Phase::kCaftLora : Phase::kCaftFull)
                           : (lora ? Phase::kNextTokenLora : Phase::kNextTokenFull);
  const training::TrainPlan plan = cfg.plan_for(phase);
  const json inputs = inputs_json(
      {{"checkpoint", in.checkpoint}, {"tokenizer", in.tokenizer}, {"train", in.train}, {"valid", in.valid}});
  model::CaftModel m = model::load_model(in.checkpoint);
  const data::Vocabulary vocab = data::Vocabulary::load(in.tokenizer);
  check_vocab(m, vocab);
  if (caft && m.n_heads() < 2) {
    throw ContractError("--caft needs a multi-head checkpoint, but '" + in.checkpoint +
                        "' has no auxiliary heads; run train-aux first");
  }
  RunDir dir("finetune", {{"config", effective(cfg, plan)}, {"inputs", digest_only(inputs)}}, c.run_dir, c.force);
  const auto train = load_encoded(vocab, in.train);
  const auto valid = load_encoded(vocab, in.valid);
  training::MetricsWriter metrics(dir / "metrics.jsonl");
  out << "phase " << training::to_string(phase) << ", peak LR " << plan.peak_lr << "\n";
  const training::TrainResult r = caft ? training::caft_finetune(m, train, valid, plan, cfg.schedule, hooks_for(metrics))
                                       : training::next_token_finetune(m, train, valid, plan, hooks_for(metrics));
  if (m.has_adapters()) training::lora_merge(m);
  model::save_model(dir / "model.ckpt", m);
  report_training(out, dir, r);
  out << "run directory: " << dir.path().string() << "\n";
  json outputs = training_outputs(r);
  outputs["inputs"] = inputs;
  outputs["phase"] = training::to_string(phase);
  dir.finish(outputs, r.warnings);
  return kOk;
}

std::vector<data::PlantedConcept> concepts_from_manifest(const json& manifest, const data::Vocabulary& vocab) {
  if (manifest.value("vocabulary", std::string()) != vocab.fingerprint()) {
    throw ContractError("the corpus manifest was built with a different tokenizer");
  }
  std::vector<data::PlantedConcept> concepts;
  try {
    for (const auto& c : manifest.at("concepts")) {
      concepts.push_back({c.at("text").get<std::string>(), c.at("cue").get<std::string>(),
                          c.at("group").get<std::string>(), c.at("tokens").get<std::vector<data::TokenId>>()});
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("corpus manifest: ") + e.what());
  }
  return concepts;
}

int cmd_eval(const Common& c, const std::string& checkpoint, const std::string& tokenizer, const std::string& data_path,
             const std::string& manifest_path, std::ostream& out) {
  const RunConfig cfg = config_of(c);
  std::vector<std::pair<std::string, std::string>> files = {
      {"checkpoint", checkpoint}, {"tokenizer", tokenizer}, {"data", data_path}};
  if (!manifest_path.empty()) files.emplace_back("manifest", manifest_path);
  const json inputs = inputs_json(files);
  RunDir dir("eval", {{"probe_batch_size", cfg.eval.probe_batch_size}, {"inputs", digest_only(inputs)}}, c.run_dir,
             c.force);
  const model::CaftModel m = model::load_model(checkpoint);
  const data::Vocabulary vocab = data::Vocabulary::load(tokenizer);
  check_vocab(m, vocab);
  const auto samples = data::read_jsonl(data_path);
  const auto encoded = data::encode_all(vocab, samples);
  const std::vector<double> ppl = eval::eval_perplexity(m, encoded);
  json result = {{"examples", samples.size()}, {"ppl", ppl}, {"inputs", inputs}};
  for (std::size_t k = 0; k < ppl.size(); ++k) {
    out << "head " << k + 1 << " ppl " << std::setprecision(17) << ppl[k] << "\n";
  }
  if (!manifest_path.empty()) {
    json manifest;
    try {
      manifest = json::parse(read_bytes(manifest_path));
    } catch (const json::parse_error& e) {
      throw FormatError("corpus manifest '" + manifest_path + "' is not valid JSON: " + e.what());
    }
    const auto concepts = concepts_from_manifest(manifest, vocab);
    const auto probes = data::concept_probes(vocab, samples, concepts);
    const auto score = eval::score_concept_probes(m, probes, cfg.eval.probe_batch_size);
    result["concept_completion"] = {
        {"correct", score.overall.correct}, {"total", score.overall.total}, {"pct", score.overall.pct()}};
    out << "concept completion " << std::setprecision(6) << score.overall.pct() << "% (" << score.overall.correct
        << "/" << score.overall.total << ")\n";
  }
  write_json(dir / "eval.json", result);
  out << "run directory: " << dir.path().string() << "\n";
  dir.finish({{"eval", "eval.json"}, {"inputs", inputs}});
  return kOk;
}

int cmd_compare(const Common& c, bool lora, std::ostream& out) {
  const RunConfig cfg = config_of(c);
  const eval::ExperimentConfig e = cfg.experiment(lora ? Phase::kCaftLora : Phase::kCaftFull);
  e.validate();
  RunDir dir("compare", {{"experiment", eval::to_json(e)}}, c.run_dir, c.force);
  const auto progress = [](const std::string& msg) { spdlog::info("{}", msg); };
  const eval::BaseArtifacts base = eval::prepare_base(e, progress);
  {
    model::CaftModel copy = base.model.clone();
    model::save_model(dir / "base_model.ckpt", copy);
  }
  base.vocab.save(dir / "tokenizer.json");
  const eval::ComparisonReport report = eval::compare_runs(e, base, progress);
  eval::write_report_csv(dir / "report.csv", report);
  write_json(dir / "report.json", eval::to_json(report));
  const std::string summary = eval::format_summary(report);
  write_text(dir / "summary.txt", summary);
  for (const auto& pair : report.runs) {
    for (const auto* arm : {&pair.caft, &pair.baseline}) {
      eval::write_epoch_ppl_csv(dir / ("epoch_ppl_" + arm->run_id + ".csv"), arm->epochs);
    }
  }
  out << summary;
  out << "run directory: " << dir.path().string() << "\n";
  dir.finish({{"report_csv", "report.csv"},
              {"report_json", "report.json"},
              {"summary", "summary.txt"},
              {"base_model", "base_model.ckpt"}});
  return kOk;
}

int cmd_export(const std::string& in_path, const std::string& out_path, std::ostream& out) {
  if (!fs::exists(in_path)) throw IoError("checkpoint '" + in_path + "' does not exist");
  if (fs::exists(out_path) && fs::equivalent(in_path, out_path)) {
    throw ContractError("refusing to overwrite the input checkpoint '" + in_path + "'");
  }
  model::CaftModel m = model::load_model(in_path);
  if (m.has_adapters()) throw ContractError("checkpoint carries LoRA adapters; merge them first");
  if (m.n_heads() == 1) {
    fs::copy_file(in_path, out_path, fs::copy_options::overwrite_existing);
    out << "notice: '" << in_path << "' has no auxiliary heads; copied unchanged to '" << out_path << "'\n";
    return kOk;
  }
  model::CaftModel exported = model::export_inference_model(m);
  model::save_model(out_path, exported);
  // Verify against the file as written, not the in-memory copy.
  const model::CaftModel reloaded = model::load_model(out_path);
  const model::TokenBatch batch = probe_batch(m.config());
  engine::NoGradScope no_grad;
  const auto before = m.forward_head(m.forward_trunk(batch), 1).data();
  const auto after = reloaded.forward_head(reloaded.forward_trunk(batch), 1).data();
  double max_diff = 0.0;
  for (std::size_t i = 0; i < before.size(); ++i) max_diff = std::max(max_diff, std::abs(before[i] - after[i]));
  out << "exported " << m.n_heads() - 1 << " auxiliary heads away: " << fs::file_size(in_path) << " -> "
      << fs::file_size(out_path) << " bytes\n";
  out << "head-1 logits max abs diff on the probe batch: " << max_diff << "\n";
  if (max_diff != 0.0) {
    fs::remove(out_path);
    throw ContractError("export verification failed: head-1 logits changed by " + std::to_string(max_diff));
  }
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Concept-aware fine-tuning toolkit", "caft"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every subcommand");

  std::string init_out = "caft_config.json";
  bool init_force = false;
  auto* init = app.add_subcommand("init", "Write the default configuration");
  init->add_option("--out", init_out, "Destination file");
  init->add_flag("--force", init_force, "Overwrite an existing file");

  Common tok_common;
  std::string tok_text;
  auto* tok = app.add_subcommand("train-tokenizer", "Learn a BPE vocabulary");
  add_common(tok, tok_common);
  tok->add_option("--text", tok_text, "Training text, one line per sample (synthetic corpus text when omitted)")
      ->check(CLI::ExistingFile);

  Common gen_common;
  std::string gen_tokenizer;
  auto* gen = app.add_subcommand("gen-corpus", "Generate the synthetic concept corpus");
  add_common(gen, gen_common);
  gen->add_option("--tokenizer", gen_tokenizer, "tokenizer.json")->required();

  Common pre_common;
  TrainInputs pre_in;
  auto* pre = app.add_subcommand("pretrain", "Train a base model from scratch");
  add_common(pre, pre_common);
  pre->add_option("--tokenizer", pre_in.tokenizer, "tokenizer.json")->required();
  pre->add_option("--train", pre_in.train, "Training JSONL")->required();
  pre->add_option("--valid", pre_in.valid, "Validation JSONL")->required();

  Common dis_common;
  std::string dis_checkpoint, dis_tokenizer;
  std::vector<std::string> dis_questions;
  auto* dis = app.add_subcommand("distill", "Answer questions with head 1 to build aux-head training data");
  add_common(dis, dis_common);
  dis->add_option("--checkpoint", dis_checkpoint, "Model checkpoint")->required();
  dis->add_option("--tokenizer", dis_tokenizer, "tokenizer.json")->required();
  dis->add_option("--questions", dis_questions, "JSONL files whose prompts are answered")->required();

  Common aux_common;
  TrainInputs aux_in;
  auto* aux = app.add_subcommand("train-aux", "Train the auxiliary heads on self-distilled data");
  add_common(aux, aux_common);
  aux->add_option("--checkpoint", aux_in.checkpoint, "Base checkpoint")->required();
  aux->add_option("--tokenizer", aux_in.tokenizer, "tokenizer.json")->required();
  aux->add_option("--train", aux_in.train, "Distilled training JSONL")->required();
  aux->add_option("--valid", aux_in.valid, "Distilled validation JSONL")->required();

  Common ft_common;
  TrainInputs ft_in;
  bool ft_caft = false, ft_next = false, ft_lora = false, ft_full = false;
  auto* ft = app.add_subcommand("finetune", "CAFT or next-token fine-tuning");
  add_common(ft, ft_common);
  ft->add_option("--checkpoint", ft_in.checkpoint, "Input checkpoint")->required();
  ft->add_option("--tokenizer", ft_in.tokenizer, "tokenizer.json")->required();
  ft->add_option("--train", ft_in.train, "Training JSONL")->required();
  ft->add_option("--valid", ft_in.valid, "Validation JSONL")->required();
  auto* f_caft = ft->add_flag("--caft", ft_caft, "Concept-aware loss");
  auto* f_next = ft->add_flag("--next-token", ft_next, "Plain next-token loss");
  auto* f_lora = ft->add_flag("--lora", ft_lora, "Train LoRA adapters (merged before saving)");
  auto* f_full = ft->add_flag("--full", ft_full, "Train the full trunk and head 1");
  f_caft->excludes(f_next);
  f_lora->excludes(f_full);

  Common ev_common;
  std::string ev_checkpoint, ev_tokenizer, ev_data, ev_manifest;
  auto* ev = app.add_subcommand("eval", "Per-head perplexity and concept completion");
  add_common(ev, ev_common);
  ev->add_option("--checkpoint", ev_checkpoint, "Model checkpoint")->required();
  ev->add_option("--tokenizer", ev_tokenizer, "tokenizer.json")->required();
  ev->add_option("--data", ev_data, "Evaluation JSONL")->required();
  ev->add_option("--manifest", ev_manifest, "Corpus manifest; enables concept-completion scoring");

  Common cmp_common;
  bool cmp_lora = false;
  auto* cmp = app.add_subcommand("compare", "Seeded paired CAFT vs next-token runs with a report");
  add_common(cmp, cmp_common);
  cmp->add_flag("--lora", cmp_lora, "Compare the LoRA variants instead of full fine-tuning");

  std::string ex_in, ex_out;
  auto* ex = app.add_subcommand("export", "Strip auxiliary heads for inference");
  ex->add_option("--checkpoint", ex_in, "Multi-head checkpoint")->required();
  ex->add_option("--out", ex_out, "Destination checkpoint")->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend() - (args.empty() ? 0 : 1));
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kConfigError;
  }

  try {
    if (*init) return cmd_init(init_out, init_force, out);
    if (*tok) return cmd_train_tokenizer(tok_common, tok_text, out);
    if (*gen) return cmd_gen_corpus(gen_common, gen_tokenizer, out);
    if (*pre) return cmd_pretrain(pre_common, pre_in, out);
    if (*dis) return cmd_distill(dis_common, dis_checkpoint, dis_tokenizer, dis_questions, out);
    if (*aux) return cmd_train_aux(aux_common, aux_in, out);
    if (*ft) {
      if (ft_caft == ft_next || ft_lora == ft_full) {
        err << "error: finetune needs exactly one of --caft/--next-token and one of --lora/--full\n";
        return kConfigError;
      }
      return cmd_finetune(ft_common, ft_in, ft_caft, ft_lora, out);
    }
    if (*ev) return cmd_eval(ev_common, ev_checkpoint, ev_tokenizer, ev_data, ev_manifest, out);
    if (*cmp) return cmd_compare(cmp_common, cmp_lora, out);
    if (*ex) return cmd_export(ex_in, ex_out, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
  return kRuntimeError;
}

}  // namespace caft::cli
