#pragma once

#include <cstddef>
#include <memory>
#include <vector>

#include "caft/engine/tensor.hpp"

namespace caft::engine {

// Records differentiable ops for one training step.
//
// Constructing a Tape makes it the active tape for the current thread until
// it is destroyed; ops only build graph nodes while a tape is active and at
// least one input requires grad. Nodes are appended in execution order, so
// the recorded list is topologically sorted by construction.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  void record(const Tensor& result);

  // Reverse-mode pass from a scalar loss. Grad buffers of every node and leaf
  // reachable from `loss` are reset first, so repeated calls on the same
  // recording yield identical gradients. Leaves with requires_grad == false
  // never receive a buffer.
  void backward(const Tensor& loss);

  std::size_t size() const { return nodes_.size(); }
  // Number of recorded nodes whose backward ran during the last pass.
  std::size_t last_visit_count() const { return last_visits_; }

 private:
  std::vector<std::shared_ptr<detail::Node>> nodes_;
  Tape* previous_ = nullptr;
  std::size_t last_visits_ = 0;
};

// Suspends recording for the enclosing scope (evaluation, generation).
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* saved_;
};

}  // namespace caft::engine
