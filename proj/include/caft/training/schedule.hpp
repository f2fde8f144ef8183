#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "json.hpp"

namespace caft::training {

enum class GammaKind { kConstant, kSine, kRSine };

std::string to_string(GammaKind kind);
GammaKind parse_gamma_kind(const std::string& text);

// Auxiliary-loss weight at step t of T. rsine: sin((1 - t/T) pi/2),
// sine: sin((t/T) pi/2), constant: 1. Steps past T clamp to 0 with a
// warning.
double gamma(std::size_t t, std::size_t total_steps, GammaKind kind);

struct LossSchedule {
  double alpha = 0.8;
  double beta = 0.01;
  GammaKind gamma_kind = GammaKind::kRSine;
  std::size_t total_steps = 1;
  // Apply beta * gamma * alpha^(k-1) to every head, head 1 included, exactly
  // as the printed CAFT formula reads. Off by default.
  bool literal_formula = false;

  double gamma_at(std::size_t t) const { return gamma(t, total_steps, gamma_kind); }
  void validate() const;
};

nlohmann::json to_json(const LossSchedule& s);

// alpha^(k-2) for heads k = 2..n (index 0 is head 2).
std::vector<double> aux_head_weights(double alpha, std::size_t n_future);
// alpha^(k-1) for heads k = 2..n (index 0 is head 2).
std::vector<double> caft_aux_weights(double alpha, std::size_t n_future);

// Linear warmup to `peak` over `warmup_steps`, then cosine decay to
// floor_ratio * peak at `total_steps`.
struct LrSchedule {
  double peak = 1e-4;
  std::size_t warmup_steps = 0;
  std::size_t total_steps = 1;
  double floor_ratio = 0.1;

  double at(std::size_t step) const;
};

}  // namespace caft::training
