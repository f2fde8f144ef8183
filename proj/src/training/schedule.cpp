#include "caft/training/schedule.hpp"

#include <cmath>
#include <numbers>

#include <spdlog/spdlog.h>

#include "caft/common/error.hpp"

namespace caft::training {

std::string to_string(GammaKind kind) {
  switch (kind) {
    case GammaKind::kConstant: return "constant";
    case GammaKind::kSine: return "sine";
    case GammaKind::kRSine: return "rsine";
  }
  return "unknown";
}

GammaKind parse_gamma_kind(const std::string& text) {
  if (text == "constant") return GammaKind::kConstant;
  if (text == "sine") return GammaKind::kSine;
  if (text == "rsine" || text == "RSine") return GammaKind::kRSine;
  throw ConfigError("gamma kind must be one of constant, sine, rsine; got '" + text + "'");
}

double gamma(std::size_t t, std::size_t total_steps, GammaKind kind) {
  if (total_steps == 0) throw ContractError("gamma: total_steps must be positive");
  if (kind == GammaKind::kConstant) return 1.0;
  if (t > total_steps) {
    spdlog::warn("gamma: step {} is past total_steps {}; clamping to 0", t, total_steps);
    return 0.0;
  }
  if (t == total_steps && kind == GammaKind::kRSine) return 0.0;
  const double frac = static_cast<double>(t) / static_cast<double>(total_steps);
  const double phase = kind == GammaKind::kRSine ? 1.0 - frac : frac;
  return std::sin(phase * std::numbers::pi / 2.0);
}

void LossSchedule::validate() const {
  std::vector<std::string> problems;
  if (!(alpha > 0.0 && alpha <= 1.0)) problems.emplace_back("caft_alpha must be in (0, 1]");
  if (!(beta >= 0.0) || !std::isfinite(beta)) problems.emplace_back("caft_beta must be finite and >= 0");
  if (total_steps == 0) problems.emplace_back("total_steps must be positive");
  if (problems.empty()) return;
  std::string msg = "invalid loss schedule:";
  for (const auto& p : problems) msg += "\n  - " + p;
  throw ConfigError(msg);
}

nlohmann::json to_json(const LossSchedule& s) {
  return {{"caft_alpha", s.alpha},
          {"caft_beta", s.beta},
          {"caft_gamma", to_string(s.gamma_kind)},
          {"total_steps", s.total_steps},
          {"literal_formula", s.literal_formula}};
}

std::vector<double> aux_head_weights(double alpha, std::size_t n_future) {
  std::vector<double> w;
  double v = 1.0;
  for (std::size_t k = 2; k <= n_future; ++k, v *= alpha) w.push_back(v);
  return w;
}

std::vector<double> caft_aux_weights(double alpha, std::size_t n_future) {
  std::vector<double> w;
  double v = alpha;
  for (std::size_t k = 2; k <= n_future; ++k, v *= alpha) w.push_back(v);
  return w;
}

double LrSchedule::at(std::size_t step) const {
  if (warmup_steps > 0 && step < warmup_steps) {
    return peak * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  }
  const std::size_t decay_steps = total_steps > warmup_steps ? total_steps - warmup_steps : 1;
  const double progress =
      std::min(1.0, static_cast<double>(step - std::min(step, warmup_steps)) / static_cast<double>(decay_steps));
  const double floor = floor_ratio * peak;
  return floor + (peak - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace caft::training
