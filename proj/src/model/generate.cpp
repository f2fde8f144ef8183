#include "caft/model/generate.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "caft/common/error.hpp"
#include "caft/engine/tape.hpp"

namespace caft::model {

void GenerationSettings::validate() const {
  if (!(temperature >= 0.0) || !std::isfinite(temperature)) {
    throw ConfigError("temperature must be finite and >= 0, got " + std::to_string(temperature));
  }
  if (!(repetition_penalty > 0.0) || !std::isfinite(repetition_penalty)) {
    throw ConfigError("repetition_penalty must be finite and > 0, got " + std::to_string(repetition_penalty));
  }
}

std::vector<double> next_token_logits(const CaftModel& model, const std::vector<TokenId>& sequence) {
  engine::NoGradScope no_grad;
  const std::size_t d = model.config().d_model;
  const std::size_t vocab = model.config().vocab_size;
  const TrunkState z = model.forward_trunk({sequence, 1, sequence.size()});
  const Tensor hidden = model.head_hidden(z, 1);
  const auto h = hidden.data().subspan((sequence.size() - 1) * d, d);
  const auto w = model.unembedding().data();
  std::vector<double> logits(vocab, 0.0);
  for (std::size_t i = 0; i < d; ++i) {
    const double hi = h[i];
    const double* row = w.data() + i * vocab;
    for (std::size_t v = 0; v < vocab; ++v) logits[v] += hi * row[v];
  }
  return logits;
}

void apply_repetition_penalty(std::vector<double>& logits, const std::vector<TokenId>& history, double penalty) {
  if (penalty == 1.0) return;
  const std::set<TokenId> seen(history.begin(), history.end());
  for (TokenId id : seen) {
    if (id < 0 || static_cast<std::size_t>(id) >= logits.size()) continue;
    double& l = logits[static_cast<std::size_t>(id)];
    l = l > 0.0 ? l / penalty : l * penalty;
  }
}

GenerationResult generate(const CaftModel& model, const std::vector<TokenId>& prompt,
                          const GenerationSettings& settings) {
  settings.validate();
  if (prompt.empty()) throw InputError("generate: prompt must be nonempty");
  const std::size_t max_len = model.config().max_seq_len;
  if (prompt.size() > max_len) {
    throw LengthError("generate: prompt length " + std::to_string(prompt.size()) + " exceeds max_seq_len " +
                      std::to_string(max_len));
  }

  GenerationResult result{prompt, false};
  std::mt19937_64 rng(settings.seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  for (std::size_t step = 0; step < settings.max_new_tokens; ++step) {
    if (result.tokens.size() >= max_len) {
      result.truncated = true;
      break;
    }
    std::vector<double> logits = next_token_logits(model, result.tokens);
    apply_repetition_penalty(logits, result.tokens, settings.repetition_penalty);

    TokenId next = 0;
    if (settings.temperature == 0.0) {
      next = static_cast<TokenId>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    } else {
      const double top = *std::max_element(logits.begin(), logits.end());
      double total = 0.0;
      for (double& l : logits) {
        l = std::exp((l - top) / settings.temperature);
        total += l;
      }
      double u = unif(rng) * total;
      next = static_cast<TokenId>(logits.size() - 1);
      for (std::size_t v = 0; v < logits.size(); ++v) {
        u -= logits[v];
        if (u < 0.0) {
          next = static_cast<TokenId>(v);
          break;
        }
      }
    }
    result.tokens.push_back(next);
    if (settings.stop_token && next == *settings.stop_token) break;
  }
  return result;
}

}  // namespace caft::model
