#include "caft/eval/metrics.hpp"

#include <cmath>

#include <boost/math/distributions/students_t.hpp>

#include "caft/common/error.hpp"
#include "caft/engine/tape.hpp"
#include "caft/training/losses.hpp"

namespace caft::eval {

std::vector<double> eval_perplexity(const model::CaftModel& model, std::span<const data::EncodedExample> dataset,
                                    std::size_t n_heads) {
  const auto ce = training::mean_head_ce(model, dataset, n_heads == 0 ? model.n_heads() : n_heads);
  std::vector<double> ppl;
  for (double c : ce) ppl.push_back(std::exp(c));
  return ppl;
}

ProbeScore score_concept_probes(const model::CaftModel& model, std::span<const data::ConceptProbe> probes,
                                std::size_t batch_size) {
  if (batch_size == 0) throw ContractError("score_concept_probes: batch_size must be positive");
  engine::NoGradScope no_grad;
  ProbeScore score;
  const std::size_t vocab = model.config().vocab_size;
  for (std::size_t start = 0; start < probes.size(); start += batch_size) {
    const auto slice = probes.subspan(start, std::min(batch_size, probes.size() - start));
    std::size_t seq = 0;
    for (const auto& p : slice) {
      if (p.context.empty() || p.expected.empty()) throw InputError("concept probe with an empty context or span");
      seq = std::max(seq, p.context.size() + p.expected.size() - 1);
    }
    if (seq > model.config().max_seq_len) {
      throw LengthError("concept probe of length " + std::to_string(seq) + " exceeds max_seq_len " +
                        std::to_string(model.config().max_seq_len));
    }
    // Right padding is harmless under causal attention.
    model::TokenBatch tokens{std::vector<engine::TokenId>(slice.size() * seq, data::kPadId), slice.size(), seq};
    for (std::size_t b = 0; b < slice.size(); ++b) {
      std::size_t t = 0;
      for (auto id : slice[b].context) tokens.ids[b * seq + t++] = id;
      for (std::size_t j = 0; j + 1 < slice[b].expected.size(); ++j) tokens.ids[b * seq + t++] = slice[b].expected[j];
    }
    const engine::Tensor logits = model.forward_head(model.forward_trunk(tokens), 1);
    const auto values = logits.data();
    for (std::size_t b = 0; b < slice.size(); ++b) {
      const auto& p = slice[b];
      bool solved = true;
      for (std::size_t j = 0; j < p.expected.size() && solved; ++j) {
        const std::size_t pos = p.context.size() - 1 + j;
        const double* row = values.data() + (b * seq + pos) * vocab;
        std::size_t best = 0;
        for (std::size_t v = 1; v < vocab; ++v) {
          if (row[v] > row[best]) best = v;
        }
        solved = best == static_cast<std::size_t>(p.expected[j]);
      }
      Tally& t = score.per_sample[p.sample_id];
      ++t.total;
      ++score.overall.total;
      if (solved) {
        ++t.correct;
        ++score.overall.correct;
      }
    }
  }
  return score;
}

Summary summarize(std::span<const double> values) {
  if (values.empty()) throw InputError("summarize: no values");
  Summary s;
  s.n = values.size();
  for (double v : values) s.mean += v;
  s.mean /= static_cast<double>(s.n);
  if (s.n < 2) return s;
  double ss = 0.0;
  for (double v : values) ss += (v - s.mean) * (v - s.mean);
  s.stddev = std::sqrt(ss / static_cast<double>(s.n - 1));
  const boost::math::students_t dist(static_cast<double>(s.n - 1));
  s.ci95_halfwidth = boost::math::quantile(boost::math::complement(dist, 0.025)) * s.stddev /
                     std::sqrt(static_cast<double>(s.n));
  return s;
}

nlohmann::json to_json(const Summary& s) {
  nlohmann::json j = {{"n", s.n}, {"mean", s.mean}, {"stddev", s.stddev}};
  j["ci95_halfwidth"] = s.ci95_halfwidth ? nlohmann::json(*s.ci95_halfwidth) : nlohmann::json(nullptr);
  return j;
}

}  // namespace caft::eval
