#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "caft/data/dataset.hpp"
#include "caft/data/tokenizer.hpp"
#include "json.hpp"

namespace caft::data {

// Synthetic instruction corpus with planted multi-token concepts.
//
// Every sample asks about a list of cue words ("ask c1 c2 :"); the
// completion names each cue followed by "is" and the concept bound to that
// cue, with random filler words in between. Concepts are random strings over
// the first n_atoms letters that never appear in the tokenizer corpus, so
// BPE leaves them split into several pieces.
struct ConceptCorpusSpec {
  std::size_t n_atoms = 12;
  std::size_t n_concepts = 24;          // task concepts
  std::size_t n_general_concepts = 24;  // concepts of the general (pretraining) corpus
  std::size_t concept_len_min = 3;      // tokens
  std::size_t concept_len_max = 5;
  std::size_t corpus_size = 1600;  // task samples across train/valid/test
  std::size_t general_size = 3000;
  std::size_t max_concepts_per_sample = 7;
  std::size_t lexicon_size = 64;  // filler words
  std::size_t max_fillers = 2;    // between consecutive concept mentions
  double valid_fraction = 0.1;
  double test_fraction = 0.1;
  std::uint64_t seed = 1;

  void validate() const;
  bool operator==(const ConceptCorpusSpec&) const = default;
};

nlohmann::json to_json(const ConceptCorpusSpec& spec);
ConceptCorpusSpec corpus_spec_from_json(const nlohmann::json& j);

// Words drawn from the spec; all are visible to the tokenizer.
struct Lexicon {
  std::vector<std::string> fillers;
  std::vector<std::string> general_cues;
  std::vector<std::string> task_cues;
};

Lexicon build_lexicon(const ConceptCorpusSpec& spec);

// Text for BPE training: sample-shaped lines with the concept slots left
// empty. Deterministic in the spec.
std::vector<std::string> tokenizer_corpus(const ConceptCorpusSpec& spec, std::size_t n_lines = 2000);

struct PlantedConcept {
  std::string text;
  std::string cue;
  std::string group;  // "general" or "task"
  std::vector<TokenId> tokens;  // span of " " + text under the vocabulary
};

struct ConceptCorpus {
  ConceptCorpusSpec spec;
  std::vector<PlantedConcept> concepts;
  // general_train, general_valid, task_train, task_valid, task_test
  std::map<std::string, std::vector<Example>> splits;
  // occurrences[split][concept text]
  std::map<std::string, std::map<std::string, std::size_t>> occurrences;

  const std::vector<Example>& split(const std::string& name) const;
  std::vector<PlantedConcept> group(const std::string& name) const;
  nlohmann::json manifest(const Vocabulary& vocab) const;
};

inline const std::vector<std::string> kCorpusSplits = {"general_train", "general_valid", "task_train", "task_valid",
                                                       "task_test"};

// Pure function of (spec, vocab). Throws InputError if no concept of the
// requested token length can be found.
ConceptCorpus generate_concept_corpus(const ConceptCorpusSpec& spec, const Vocabulary& vocab);

// Completion-prefix probes: each planted concept occurrence in a sample
// becomes a context (prompt + completion up to the concept) and the expected
// concept token span.
struct ConceptProbe {
  std::size_t sample_id = 0;
  std::vector<TokenId> context;
  std::vector<TokenId> expected;
};

std::vector<ConceptProbe> concept_probes(const Vocabulary& vocab, std::span<const Example> samples,
                                         std::span<const PlantedConcept> concepts);

// Number of standalone occurrences of `word` (space-delimited) in `text`.
std::size_t count_word(const std::string& text, const std::string& word);

}  // namespace caft::data
