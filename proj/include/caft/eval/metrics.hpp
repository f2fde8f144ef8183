#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "caft/data/concept_corpus.hpp"
#include "caft/data/dataset.hpp"
#include "caft/eval/concepts.hpp"
#include "caft/model/caft_model.hpp"
#include "json.hpp"

namespace caft::eval {

// exp(mean CE) per head over every unmasked cell; index 0 is head 1.
// `n_heads` = 0 evaluates every head of the model.
std::vector<double> eval_perplexity(const model::CaftModel& model, std::span<const data::EncodedExample> dataset,
                                    std::size_t n_heads = 0);

// Concept completion by greedy head-1 decoding: a probe counts as solved
// when the first |expected| greedy tokens after its context equal the
// expected span. Scored with one teacher-forced pass per probe, which gives
// the same verdict as step-by-step greedy decoding (ties go to the lowest
// id in both).
struct ProbeScore {
  SampleResults per_sample;
  Tally overall;
};

ProbeScore score_concept_probes(const model::CaftModel& model, std::span<const data::ConceptProbe> probes,
                                std::size_t batch_size = 32);

// Mean with a two-sided 95% Student-t half-width; no half-width for n < 2.
struct Summary {
  std::size_t n = 0;
  double mean = 0.0;
  double stddev = 0.0;
  std::optional<double> ci95_halfwidth;
};

Summary summarize(std::span<const double> values);
nlohmann::json to_json(const Summary& s);

}  // namespace caft::eval
