#include "cli/config.hpp"

#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <vector>

#include "caft/common/error.hpp"

namespace caft::cli {
namespace {

using nlohmann::json;
using training::Phase;

using Setter = std::function<void(const json&)>;
using Fields = std::map<std::string, Setter>;

// Validators report "header:\n  - a\n  - b"; returns {a, b}, or the whole
// message when it has no bullets.
std::vector<std::string> problem_lines(const std::string& message) {
  std::vector<std::string> lines;
  std::size_t pos = 0;
  while ((pos = message.find("\n  - ", pos)) != std::string::npos) {
    pos += 5;
    const std::size_t end = message.find('\n', pos);
    lines.push_back(message.substr(pos, end == std::string::npos ? std::string::npos : end - pos));
  }
  if (lines.empty()) lines.push_back(message);
  return lines;
}

// Collects every problem before anything is thrown.
class Reader {
 public:
  std::vector<std::string> problems;

  void read(const json& obj, const std::string& where, const Fields& fields) {
    if (!obj.is_object()) {
      problems.push_back(where + ": expected an object");
      return;
    }
    for (const auto& [key, value] : obj.items()) {
      const std::string path = where.empty() ? key : where + "." + key;
      const auto it = fields.find(key);
      if (it == fields.end()) {
        problems.push_back(path + ": unknown key");
        continue;
      }
      try {
        it->second(value);
      } catch (const Error& e) {
        problems.push_back(path + ": " + e.what());
      }
    }
  }

  void check(const std::string& section, const std::function<void()>& validate) {
    try {
      validate();
    } catch (const ConfigError& e) {
      for (const auto& line : problem_lines(e.what())) problems.push_back(section + ": " + line);
    }
  }
};

bool is_count(const json& v) {
  return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
}

template <class T>
Setter uint_field(T& dst) {
  return [&dst](const json& v) {
    if (!is_count(v)) throw ConfigError("expected a non-negative integer");
    dst = v.get<T>();
  };
}

Setter real_field(double& dst) {
  return [&dst](const json& v) {
    if (!v.is_number()) throw ConfigError("expected a number");
    dst = v.get<double>();
  };
}

Setter bool_field(bool& dst) {
  return [&dst](const json& v) {
    if (!v.is_boolean()) throw ConfigError("expected true or false");
    dst = v.get<bool>();
  };
}

Setter string_field(const std::function<void(const std::string&)>& parse) {
  return [parse](const json& v) {
    if (!v.is_string()) throw ConfigError("expected a string");
    parse(v.get<std::string>());
  };
}

Fields plan_fields(training::TrainPlan& p) {
  return {{"epochs", uint_field(p.epochs)},
          {"batch_size", uint_field(p.batch_size)},
          {"peak_lr", real_field(p.peak_lr)},
          {"warmup_steps", uint_field(p.warmup_steps)},
          {"lr_floor_ratio", real_field(p.lr_floor_ratio)},
          {"weight_decay", real_field(p.weight_decay)},
          {"early_stop", bool_field(p.early_stop.enabled)},
          {"patience", uint_field(p.early_stop.patience)},
          {"aux_task_pretrain_epochs", uint_field(p.aux_task_pretrain_epochs)},
          {"aux_pretrain_lr", real_field(p.aux_pretrain_lr)},
          {"lora_rank", uint_field(p.lora.rank)},
          {"lora_alpha", real_field(p.lora.alpha)},
          {"lora_dropout", real_field(p.lora.dropout)},
          {"ce2_warning_threshold", real_field(p.ce2_warning_threshold)}};
}

const std::vector<Phase> kAllPhases = {Phase::kPretrain,      Phase::kAuxHeadTraining, Phase::kCaftFull,
                                       Phase::kCaftLora,      Phase::kNextTokenFull,   Phase::kNextTokenLora};

// Applies flat keys, then the phase's own object. Problems go to `reader`.
void apply_plan(const json& overrides, Phase phase, training::TrainPlan& plan, Reader& reader,
                const std::string& where) {
  json flat = json::object();
  for (const auto& [key, value] : overrides.items()) {
    bool is_phase = false;
    for (Phase p : kAllPhases) is_phase = is_phase || key == training::to_string(p);
    if (!is_phase) flat[key] = value;
  }
  reader.read(flat, where, plan_fields(plan));
  const std::string own = training::to_string(phase);
  if (overrides.contains(own)) reader.read(overrides.at(own), where + "." + own, plan_fields(plan));
}

training::TrainPlan plan_or_throw(const json& overrides, Phase phase, training::TrainPlan base, std::uint64_t seed) {
  Reader reader;
  base.phase = phase;
  apply_plan(overrides, phase, base, reader, "plan");
  base.seed = seed;
  if (!reader.problems.empty()) {
    std::string msg = "invalid plan overrides:";
    for (const auto& p : reader.problems) msg += "\n  - " + p;
    throw ConfigError(msg);
  }
  return base;
}

}  // namespace

training::TrainPlan RunConfig::plan_for(Phase phase) const { return plan_for(phase, training::default_plan(phase)); }

training::TrainPlan RunConfig::plan_for(Phase phase, training::TrainPlan base) const {
  return plan_or_throw(plan_overrides, phase, std::move(base), seed);
}

eval::ExperimentConfig RunConfig::experiment(Phase caft_phase) const {
  if (!training::is_caft(caft_phase)) throw ContractError("experiment: the compared arm must be a CAFT phase");
  const eval::ExperimentConfig defaults = eval::default_experiment();
  eval::ExperimentConfig e = defaults;
  e.corpus = data.corpus;
  e.vocab_size = data.tokenizer_vocab_size;
  e.tokenizer_lines = data.tokenizer_lines;
  e.distill_questions = data.distill_questions;
  e.model = model;
  e.model_seed = seed;
  // Only phase-scoped objects reach the pretrain and aux stages; flat keys
  // describe the compared fine-tuning arms.
  json scoped = json::object();
  for (Phase p : {Phase::kPretrain, Phase::kAuxHeadTraining}) {
    const std::string name = training::to_string(p);
    if (plan_overrides.contains(name)) scoped[name] = plan_overrides.at(name);
  }
  e.pretrain = plan_or_throw(scoped, Phase::kPretrain, defaults.pretrain, seed);
  e.aux = plan_or_throw(scoped, Phase::kAuxHeadTraining, defaults.aux, seed);
  training::TrainPlan finetune = defaults.finetune;
  if (training::is_lora(caft_phase)) {
    // The LoRA column differs from the full one only in the adapter fields.
    finetune.lora = training::default_plan(caft_phase).lora;
  }
  e.finetune = plan_or_throw(plan_overrides, caft_phase, finetune, seed);
  e.schedule = schedule;
  e.n_runs = eval.n_runs;
  e.base_seed = seed;
  return e;
}

RunConfig parse_run_config(const json& j) {
  Reader reader;
  RunConfig c;
  c.model = eval::default_experiment().model;
  if (!j.is_object()) throw ConfigError("config: expected a JSON object at the top level");

  if (!j.contains("schema_version")) {
    reader.problems.emplace_back("schema_version: missing (expected " + std::to_string(kSchemaVersion) + ")");
  } else if (!is_count(j.at("schema_version")) || j.at("schema_version").get<int>() != kSchemaVersion) {
    reader.problems.push_back("schema_version: unsupported value " + j.at("schema_version").dump() + " (expected " +
                              std::to_string(kSchemaVersion) + ")");
  }

  const Fields model_fields = {
      {"vocab_size",
       [&c](const json& v) {
         if (!is_count(v)) throw ConfigError("expected a non-negative integer");
         c.model_vocab_size = v.get<std::size_t>();
       }},
      {"d_model", uint_field(c.model.d_model)},
      {"n_layers", uint_field(c.model.n_layers)},
      {"n_attn_heads", uint_field(c.model.n_attn_heads)},
      {"max_seq_len", uint_field(c.model.max_seq_len)},
      {"n_future", uint_field(c.model.n_future)},
      {"positional_encoding",
       string_field([&c](const std::string& s) { c.model.positional_encoding = model::parse_positional_encoding(s); })},
  };
  auto& cs = c.data.corpus;
  const Fields data_fields = {
      {"n_atoms", uint_field(cs.n_atoms)},
      {"n_concepts", uint_field(cs.n_concepts)},
      {"n_general_concepts", uint_field(cs.n_general_concepts)},
      {"concept_len_min", uint_field(cs.concept_len_min)},
      {"concept_len_max", uint_field(cs.concept_len_max)},
      {"corpus_size", uint_field(cs.corpus_size)},
      {"general_size", uint_field(cs.general_size)},
      {"max_concepts_per_sample", uint_field(cs.max_concepts_per_sample)},
      {"lexicon_size", uint_field(cs.lexicon_size)},
      {"max_fillers", uint_field(cs.max_fillers)},
      {"valid_fraction", real_field(cs.valid_fraction)},
      {"test_fraction", real_field(cs.test_fraction)},
      {"corpus_seed", uint_field(cs.seed)},
      {"tokenizer_vocab_size", uint_field(c.data.tokenizer_vocab_size)},
      {"tokenizer_lines", uint_field(c.data.tokenizer_lines)},
      {"distill_questions", uint_field(c.data.distill_questions)},
  };
  const Fields schedule_fields = {
      {"caft_alpha", real_field(c.schedule.alpha)},
      {"caft_beta", real_field(c.schedule.beta)},
      {"caft_gamma",
       string_field([&c](const std::string& s) { c.schedule.gamma_kind = training::parse_gamma_kind(s); })},
      {"literal_formula", bool_field(c.schedule.literal_formula)},
  };
  const Fields eval_fields = {
      {"n_runs", uint_field(c.eval.n_runs)},
      {"probe_batch_size", uint_field(c.eval.probe_batch_size)},
  };

  Fields top = {
      {"schema_version", [](const json&) {}},
      {"seed", uint_field(c.seed)},
      {"model", [&](const json& v) { reader.read(v, "model", model_fields); }},
      {"data", [&](const json& v) { reader.read(v, "data", data_fields); }},
      {"schedule", [&](const json& v) { reader.read(v, "schedule", schedule_fields); }},
      {"eval", [&](const json& v) { reader.read(v, "eval", eval_fields); }},
      {"plan",
       [&](const json& v) {
         if (!v.is_object()) throw ConfigError("expected an object");
         c.plan_overrides = v;
       }},
  };
  reader.read(j, "", top);

  // Plan overrides are checked against every phase they could reach; a
  // problem shared by all phases is reported once without a phase list.
  {
    std::set<std::string> seen;
    std::map<std::string, std::vector<std::string>> phases_of;
    std::vector<std::string> order;
    for (Phase phase : kAllPhases) {
      Reader plan_reader;
      training::TrainPlan plan = training::default_plan(phase);
      apply_plan(c.plan_overrides, phase, plan, plan_reader, "plan");
      for (const auto& p : plan_reader.problems) {
        if (seen.insert(p).second) reader.problems.push_back(p);
      }
      // aux_task_pretrain_epochs is ignored outside CAFT rather than
      // reported once per non-CAFT phase.
      if (!training::is_caft(phase)) plan.aux_task_pretrain_epochs = 0;
      try {
        plan.validate();
      } catch (const ConfigError& e) {
        for (const auto& line : problem_lines(e.what())) {
          if (!phases_of.contains(line)) order.push_back(line);
          phases_of[line].push_back(training::to_string(phase));
        }
      }
    }
    for (const auto& line : order) {
      const auto& phases = phases_of[line];
      std::string scope;
      if (phases.size() != kAllPhases.size()) {
        for (const auto& p : phases) scope += (scope.empty() ? " (" : ", ") + p;
        scope += ")";
      }
      reader.problems.push_back("plan" + scope + ": " + line);
    }
  }

  reader.check("model", [&] { c.model.validate(); });
  reader.check("data", [&] { c.data.corpus.validate(); });
  if (c.data.tokenizer_vocab_size <= data::kNumSpecials) {
    reader.problems.emplace_back("data.tokenizer_vocab_size must exceed the 3 special tokens");
  }
  if (c.data.tokenizer_lines == 0) reader.problems.emplace_back("data.tokenizer_lines must be positive");
  reader.check("schedule", [&] { c.schedule.validate(); });
  if (c.eval.n_runs == 0) reader.problems.emplace_back("eval.n_runs must be positive");
  if (c.eval.probe_batch_size == 0) reader.problems.emplace_back("eval.probe_batch_size must be positive");

  if (!reader.problems.empty()) {
    std::string msg = "invalid config (" + std::to_string(reader.problems.size()) + " problem" +
                      (reader.problems.size() == 1 ? "" : "s") + "):";
    for (const auto& p : reader.problems) msg += "\n  - " + p;
    throw ConfigError(msg);
  }
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config file '" + path.string() + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return parse_run_config(j);
}

json default_config_json() {
  const eval::ExperimentConfig e = eval::default_experiment();
  const auto& m = e.model;
  const auto& s = e.corpus;
  return {
      {"schema_version", kSchemaVersion},
      {"seed", 0},
      {"model",
       {{"d_model", m.d_model},
        {"n_layers", m.n_layers},
        {"n_attn_heads", m.n_attn_heads},
        {"max_seq_len", m.max_seq_len},
        {"n_future", m.n_future},
        {"positional_encoding", model::to_string(m.positional_encoding)}}},
      {"data",
       {{"n_atoms", s.n_atoms},
        {"n_concepts", s.n_concepts},
        {"n_general_concepts", s.n_general_concepts},
        {"concept_len_min", s.concept_len_min},
        {"concept_len_max", s.concept_len_max},
        {"corpus_size", s.corpus_size},
        {"general_size", s.general_size},
        {"max_concepts_per_sample", s.max_concepts_per_sample},
        {"lexicon_size", s.lexicon_size},
        {"max_fillers", s.max_fillers},
        {"valid_fraction", s.valid_fraction},
        {"test_fraction", s.test_fraction},
        {"corpus_seed", s.seed},
        {"tokenizer_vocab_size", e.vocab_size},
        {"tokenizer_lines", e.tokenizer_lines},
        {"distill_questions", e.distill_questions}}},
      {"schedule",
       {{"caft_alpha", e.schedule.alpha},
        {"caft_beta", e.schedule.beta},
        {"caft_gamma", training::to_string(e.schedule.gamma_kind)},
        {"literal_formula", e.schedule.literal_formula}}},
      // Empty: every phase starts from its published defaults.
      {"plan", json::object()},
      {"eval", {{"n_runs", e.n_runs}, {"probe_batch_size", 32}}},
  };
}

}  // namespace caft::cli
