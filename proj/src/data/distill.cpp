#include "caft/data/distill.hpp"

#include <limits>

#include <spdlog/spdlog.h>

#include "caft/common/error.hpp"
#include "caft/data/dataset.hpp"

namespace caft::data {

model::GenerationSettings default_distill_settings() {
  model::GenerationSettings s;
  s.temperature = 0.0;
  s.max_new_tokens = std::numeric_limits<std::size_t>::max();
  return s;
}

std::vector<DistilledExample> self_distill(const model::CaftModel& model, const Vocabulary& vocab,
                                           std::span<const std::string> questions,
                                           model::GenerationSettings settings) {
  if (questions.empty()) throw InputError("self_distill: no questions");
  settings.stop_token = kEosId;
  std::vector<DistilledExample> out;
  out.reserve(questions.size());
  std::size_t truncated = 0;
  for (std::size_t i = 0; i < questions.size(); ++i) {
    std::vector<TokenId> prompt{kBosId};
    const auto q = vocab.encode(questions[i]);
    prompt.insert(prompt.end(), q.begin(), q.end());
    model::GenerationSettings s = settings;
    s.seed = settings.seed + i;
    const auto result = model::generate(model, prompt, s);

    DistilledExample d;
    d.response_ids.assign(result.tokens.begin() + static_cast<long>(prompt.size()), result.tokens.end());
    if (!d.response_ids.empty() && d.response_ids.back() == kEosId) d.response_ids.pop_back();
    d.truncated = result.truncated;
    d.example = {questions[i], vocab.decode(d.response_ids)};
    // A cut-off answer must still fit once re-encoded with eos appended.
    while (d.truncated && !d.response_ids.empty() &&
           encode_example(vocab, d.example).ids.size() > model.config().max_seq_len) {
      d.response_ids.pop_back();
      d.example.completion = vocab.decode(d.response_ids);
    }
    if (d.truncated) {
      ++truncated;
      spdlog::warn("self_distill: response to question {} reached max_seq_len {} and was truncated", i,
                   model.config().max_seq_len);
    }
    out.push_back(std::move(d));
  }
  if (truncated > 0) spdlog::warn("self_distill: {} of {} responses truncated", truncated, questions.size());
  return out;
}

std::vector<Example> examples_of(std::span<const DistilledExample> distilled) {
  std::vector<Example> out;
  out.reserve(distilled.size());
  for (const auto& d : distilled) out.push_back(d.example);
  return out;
}

}  // namespace caft::data
