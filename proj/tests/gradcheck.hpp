#pragma once

// Finite-difference oracle for gradient tests. Deliberately independent of
// the tape: it only evaluates the scalar function under NoGradScope.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "caft/engine/tape.hpp"
#include "caft/engine/tensor.hpp"

namespace caft::testing {

// Central differences of `loss` with respect to the listed entries of
// `param` (all entries when `indices` is empty).
inline std::vector<double> numeric_gradient(engine::Tensor param, const std::function<double()>& loss,
                                            const std::vector<std::size_t>& indices = {}, double h = 1e-5) {
  engine::NoGradScope no_grad;
  std::vector<std::size_t> where = indices;
  if (where.empty()) {
    where.resize(param.size());
    for (std::size_t i = 0; i < where.size(); ++i) where[i] = i;
  }
  std::vector<double> out;
  out.reserve(where.size());
  for (std::size_t i : where) {
    const double saved = param.at(i);
    param.at(i) = saved + h;
    const double up = loss();
    param.at(i) = saved - h;
    const double down = loss();
    param.at(i) = saved;
    out.push_back((up - down) / (2.0 * h));
  }
  return out;
}

inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::fabs(analytic - numeric) / std::max({floor, std::fabs(analytic), std::fabs(numeric)});
}

// Worst relative error between the tape gradient stored in `param` and the
// finite-difference estimate at `indices`.
inline double max_relative_error(const engine::Tensor& param, const std::vector<double>& numeric,
                                 const std::vector<std::size_t>& indices = {}) {
  double worst = 0.0;
  for (std::size_t j = 0; j < numeric.size(); ++j) {
    const std::size_t i = indices.empty() ? j : indices[j];
    worst = std::max(worst, relative_error(param.grad()[i], numeric[j]));
  }
  return worst;
}

// A deterministic sample of at most `count` flat indices into a tensor.
inline std::vector<std::size_t> sample_indices(std::size_t size, std::size_t count, std::mt19937_64& rng) {
  std::vector<std::size_t> all(size);
  for (std::size_t i = 0; i < size; ++i) all[i] = i;
  if (size <= count) return all;
  std::shuffle(all.begin(), all.end(), rng);
  all.resize(count);
  std::sort(all.begin(), all.end());
  return all;
}

}  // namespace caft::testing
