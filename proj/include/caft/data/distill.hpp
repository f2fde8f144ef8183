#pragma once

#include <span>
#include <string>
#include <vector>

#include "caft/data/dataset.hpp"
#include "caft/data/tokenizer.hpp"
#include "caft/model/generate.hpp"

namespace caft::data {

struct DistilledExample {
  Example example;
  std::vector<TokenId> response_ids;  // generated ids, eos excluded
  bool truncated = false;
};

// Greedy head-1 settings used when the caller supplies none.
model::GenerationSettings default_distill_settings();

// Answers every question with head 1 of `model`. Generation stops at eos or
// at max_seq_len (logged as a warning); a truncated answer is shortened until
// its encoded example, eos included, fits max_seq_len. Output order matches
// `questions`.
std::vector<DistilledExample> self_distill(const model::CaftModel& model, const Vocabulary& vocab,
                                           std::span<const std::string> questions,
                                           model::GenerationSettings settings = default_distill_settings());

std::vector<Example> examples_of(std::span<const DistilledExample> distilled);

}  // namespace caft::data
