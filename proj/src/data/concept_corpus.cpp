#include "caft/data/concept_corpus.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "caft/common/error.hpp"
#include "caft/common/hash.hpp"

namespace caft::data {

namespace {

constexpr const char* kAsk = "ask";
constexpr const char* kIs = "is";
constexpr std::size_t kMaxAttempts = 200000;

std::size_t below(std::mt19937_64& rng, std::size_t n) { return static_cast<std::size_t>(rng() % n); }

std::string random_word(std::mt19937_64& rng, std::size_t n_atoms, std::size_t min_len, std::size_t max_len) {
  const std::size_t len = min_len + below(rng, max_len - min_len + 1);
  std::string w(len, 'a');
  for (char& c : w) c = static_cast<char>('a' + below(rng, n_atoms));
  return w;
}

std::string join_words(const std::vector<std::string>& words) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) out += (i ? " " : "") + words[i];
  return out;
}

struct Binding {
  std::string cue;
  std::string text;  // empty for tokenizer text
};

// One sample over `pool`; returns prompt and completion and the bindings used.
Example draw_sample(std::mt19937_64& rng, const ConceptCorpusSpec& spec, const std::vector<Binding>& pool,
                    const std::vector<std::string>& fillers, std::vector<std::size_t>* used) {
  const std::size_t m = 1 + below(rng, std::min(spec.max_concepts_per_sample, pool.size()));
  std::vector<std::size_t> idx(pool.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  for (std::size_t i = 0; i < m; ++i) std::swap(idx[i], idx[i + below(rng, idx.size() - i)]);
  idx.resize(m);

  std::vector<std::string> cues;
  std::string completion;
  for (std::size_t i : idx) {
    cues.push_back(pool[i].cue);
    completion += " " + pool[i].cue + " " + kIs;
    if (!pool[i].text.empty()) completion += " " + pool[i].text;
    const std::size_t n_fill = below(rng, spec.max_fillers + 1);
    for (std::size_t f = 0; f < n_fill; ++f) completion += " " + fillers[below(rng, fillers.size())];
  }
  completion += " .";
  if (used) *used = idx;
  return {std::string(kAsk) + " " + join_words(cues) + " :", completion};
}

}  // namespace

void ConceptCorpusSpec::validate() const {
  std::vector<std::string> problems;
  if (n_atoms < 2 || n_atoms > 26) problems.emplace_back("n_atoms must be in [2, 26]");
  if (n_concepts == 0) problems.emplace_back("n_concepts must be positive");
  if (n_general_concepts == 0) problems.emplace_back("n_general_concepts must be positive");
  if (concept_len_min < 2) problems.emplace_back("concept_len_min must be at least 2 (concepts span several tokens)");
  if (concept_len_max < concept_len_min) problems.emplace_back("concept_len_max must be >= concept_len_min");
  if (corpus_size < 3) problems.emplace_back("corpus_size must be at least 3");
  if (general_size < 2) problems.emplace_back("general_size must be at least 2");
  if (max_concepts_per_sample == 0) problems.emplace_back("max_concepts_per_sample must be positive");
  if (lexicon_size == 0) problems.emplace_back("lexicon_size must be positive");
  if (!(valid_fraction > 0.0 && test_fraction > 0.0 && valid_fraction + test_fraction < 1.0)) {
    problems.emplace_back("valid_fraction and test_fraction must be positive with sum below 1");
  }
  if (problems.empty()) return;
  std::string msg = "invalid corpus spec:";
  for (const auto& p : problems) msg += "\n  - " + p;
  throw ConfigError(msg);
}

nlohmann::json to_json(const ConceptCorpusSpec& s) {
  return {{"n_atoms", s.n_atoms},
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
          {"seed", s.seed}};
}

ConceptCorpusSpec corpus_spec_from_json(const nlohmann::json& j) {
  ConceptCorpusSpec s;
  try {
    s.n_atoms = j.at("n_atoms").get<std::size_t>();
    s.n_concepts = j.at("n_concepts").get<std::size_t>();
    s.n_general_concepts = j.at("n_general_concepts").get<std::size_t>();
    s.concept_len_min = j.at("concept_len_min").get<std::size_t>();
    s.concept_len_max = j.at("concept_len_max").get<std::size_t>();
    s.corpus_size = j.at("corpus_size").get<std::size_t>();
    s.general_size = j.at("general_size").get<std::size_t>();
    s.max_concepts_per_sample = j.at("max_concepts_per_sample").get<std::size_t>();
    s.lexicon_size = j.at("lexicon_size").get<std::size_t>();
    s.max_fillers = j.at("max_fillers").get<std::size_t>();
    s.valid_fraction = j.at("valid_fraction").get<double>();
    s.test_fraction = j.at("test_fraction").get<double>();
    s.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("corpus spec: ") + e.what());
  }
  s.validate();
  return s;
}

Lexicon build_lexicon(const ConceptCorpusSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed ^ 0x6c6578696b6f6eULL);
  std::set<std::string> taken{kAsk, kIs};
  const auto fresh = [&](std::size_t min_len, std::size_t max_len) {
    for (std::size_t attempt = 0; attempt < kMaxAttempts; ++attempt) {
      std::string w = random_word(rng, spec.n_atoms, min_len, max_len);
      if (taken.insert(w).second) return w;
    }
    throw InputError("build_lexicon: cannot find enough distinct words over " + std::to_string(spec.n_atoms) +
                     " letters");
  };
  Lexicon lex;
  for (std::size_t i = 0; i < spec.lexicon_size; ++i) lex.fillers.push_back(fresh(2, 4));
  for (std::size_t i = 0; i < spec.n_general_concepts; ++i) lex.general_cues.push_back(fresh(3, 5));
  for (std::size_t i = 0; i < spec.n_concepts; ++i) lex.task_cues.push_back(fresh(3, 5));
  return lex;
}

std::vector<std::string> tokenizer_corpus(const ConceptCorpusSpec& spec, std::size_t n_lines) {
  const Lexicon lex = build_lexicon(spec);
  std::vector<Binding> pool;
  for (const auto& c : lex.general_cues) pool.push_back({c, ""});
  for (const auto& c : lex.task_cues) pool.push_back({c, ""});
  std::mt19937_64 rng(spec.seed ^ 0x746f6b656e73ULL);
  std::vector<std::string> lines;
  for (std::size_t i = 0; i < n_lines; ++i) {
    const Example ex = draw_sample(rng, spec, pool, lex.fillers, nullptr);
    lines.push_back(ex.prompt + ex.completion);
  }
  return lines;
}

const std::vector<Example>& ConceptCorpus::split(const std::string& name) const {
  const auto it = splits.find(name);
  if (it == splits.end()) throw InputError("corpus has no split '" + name + "'");
  return it->second;
}

std::vector<PlantedConcept> ConceptCorpus::group(const std::string& name) const {
  std::vector<PlantedConcept> out;
  for (const auto& c : concepts) {
    if (c.group == name) out.push_back(c);
  }
  return out;
}

nlohmann::json ConceptCorpus::manifest(const Vocabulary& vocab) const {
  nlohmann::json concepts_json = nlohmann::json::array();
  for (const auto& c : concepts) {
    std::vector<std::string> pieces;
    for (TokenId id : c.tokens) pieces.push_back(vocab.piece(id));
    nlohmann::json counts;
    for (const auto& [split_name, per_concept] : occurrences) {
      const auto it = per_concept.find(c.text);
      counts[split_name] = it == per_concept.end() ? 0 : it->second;
    }
    concepts_json.push_back({{"text", c.text},
                             {"cue", c.cue},
                             {"group", c.group},
                             {"tokens", c.tokens},
                             {"pieces", pieces},
                             {"token_span", c.tokens.size()},
                             {"counts", counts}});
  }
  nlohmann::json splits_json;
  for (const auto& [name, examples] : splits) {
    splits_json[name] = {{"samples", examples.size()}, {"fnv1a", hex64(dataset_hash(examples))}};
  }
  return {{"spec", to_json(spec)},
          {"vocabulary", vocab.fingerprint()},
          {"concepts", concepts_json},
          {"splits", splits_json}};
}

ConceptCorpus generate_concept_corpus(const ConceptCorpusSpec& spec, const Vocabulary& vocab) {
  spec.validate();
  const Lexicon lex = build_lexicon(spec);
  std::set<std::string> taken(lex.fillers.begin(), lex.fillers.end());
  taken.insert(lex.general_cues.begin(), lex.general_cues.end());
  taken.insert(lex.task_cues.begin(), lex.task_cues.end());
  taken.insert(kAsk);
  taken.insert(kIs);

  ConceptCorpus corpus;
  corpus.spec = spec;
  std::mt19937_64 rng(spec.seed ^ 0x636f6e63657074ULL);
  const auto make_concepts = [&](const std::vector<std::string>& cues, const std::string& group) {
    for (const auto& cue : cues) {
      bool placed = false;
      for (std::size_t attempt = 0; attempt < kMaxAttempts && !placed; ++attempt) {
        std::string text = random_word(rng, spec.n_atoms, 2 * spec.concept_len_min, 3 * spec.concept_len_max);
        if (taken.contains(text)) continue;
        auto tokens = vocab.encode(" " + text);
        if (tokens.size() < spec.concept_len_min || tokens.size() > spec.concept_len_max) continue;
        taken.insert(text);
        corpus.concepts.push_back({std::move(text), cue, group, std::move(tokens)});
        placed = true;
      }
      if (!placed) {
        throw InputError("generate_concept_corpus: no concept with " + std::to_string(spec.concept_len_min) + ".." +
                         std::to_string(spec.concept_len_max) + " tokens found under this vocabulary");
      }
    }
  };
  make_concepts(lex.general_cues, "general");
  make_concepts(lex.task_cues, "task");

  const auto pool_of = [&](const std::string& group) {
    std::vector<Binding> pool;
    for (const auto& c : corpus.concepts) {
      if (c.group == group) pool.push_back({c.cue, c.text});
    }
    return pool;
  };

  const auto emit = [&](const std::string& split, const std::vector<Binding>& pool, std::size_t count,
                        std::set<std::string>& seen_prompts, bool must_be_new) {
    auto& examples = corpus.splits[split];
    auto& occ = corpus.occurrences[split];
    for (const auto& b : pool) occ[b.text] = 0;
    for (std::size_t i = 0; i < count; ++i) {
      std::vector<std::size_t> used;
      Example ex;
      std::size_t attempt = 0;
      do {
        if (++attempt > kMaxAttempts) {
          throw InputError("generate_concept_corpus: cannot draw " + std::to_string(count) +
                           " samples with unseen prompts for split " + split);
        }
        ex = draw_sample(rng, spec, pool, lex.fillers, &used);
      } while (must_be_new && seen_prompts.contains(ex.prompt));
      for (std::size_t u : used) ++occ[pool[u].text];
      examples.push_back(std::move(ex));
    }
    for (const auto& ex : examples) seen_prompts.insert(ex.prompt);
  };

  const auto sizes = [](std::size_t total, double fraction) {
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(static_cast<double>(total) * fraction)));
  };

  const auto general = pool_of("general");
  std::set<std::string> general_prompts;
  const std::size_t gv = sizes(spec.general_size, spec.valid_fraction);
  emit("general_train", general, spec.general_size - gv, general_prompts, false);
  emit("general_valid", general, gv, general_prompts, true);

  const auto task = pool_of("task");
  std::set<std::string> task_prompts;
  const std::size_t tv = sizes(spec.corpus_size, spec.valid_fraction);
  const std::size_t tt = sizes(spec.corpus_size, spec.test_fraction);
  emit("task_train", task, spec.corpus_size - tv - tt, task_prompts, false);
  emit("task_valid", task, tv, task_prompts, true);
  emit("task_test", task, tt, task_prompts, true);
  return corpus;
}

std::vector<ConceptProbe> concept_probes(const Vocabulary& vocab, std::span<const Example> samples,
                                         std::span<const PlantedConcept> concepts) {
  std::vector<ConceptProbe> probes;
  for (std::size_t s = 0; s < samples.size(); ++s) {
    const auto& ex = samples[s];
    std::vector<std::pair<std::size_t, const PlantedConcept*>> hits;
    for (const auto& c : concepts) {
      const std::string needle = " " + c.text;
      for (std::size_t pos = ex.completion.find(needle); pos != std::string::npos;
           pos = ex.completion.find(needle, pos + 1)) {
        const std::size_t end = pos + needle.size();
        if (end == ex.completion.size() || ex.completion[end] == ' ') hits.emplace_back(pos, &c);
      }
    }
    std::sort(hits.begin(), hits.end());
    const auto prompt_ids = vocab.encode(ex.prompt);
    for (const auto& [pos, c] : hits) {
      ConceptProbe p;
      p.sample_id = s;
      p.context.push_back(kBosId);
      p.context.insert(p.context.end(), prompt_ids.begin(), prompt_ids.end());
      const auto prefix = vocab.encode(std::string_view(ex.completion).substr(0, pos));
      p.context.insert(p.context.end(), prefix.begin(), prefix.end());
      p.expected = c->tokens;
      probes.push_back(std::move(p));
    }
  }
  return probes;
}

std::size_t count_word(const std::string& text, const std::string& word) {
  std::size_t n = 0;
  for (const auto& unit : pretokenize(text)) {
    const std::string_view w = unit.starts_with(' ') ? std::string_view(unit).substr(1) : std::string_view(unit);
    n += w == word;
  }
  return n;
}

}  // namespace caft::data
