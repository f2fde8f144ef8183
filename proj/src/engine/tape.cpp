#include "caft/engine/tape.hpp"

#include <unordered_map>
#include <unordered_set>

#include "caft/common/error.hpp"

namespace caft::engine {

namespace {
thread_local Tape* g_active = nullptr;
}

Tape::Tape() : previous_(g_active) { g_active = this; }

Tape::~Tape() { g_active = previous_; }

Tape* Tape::active() { return g_active; }

void Tape::record(const Tensor& result) { nodes_.push_back(result.handle()); }

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " +
                        (loss.defined() ? to_string(loss.shape()) : std::string("<undefined>")));
  }
  detail::Node* root = &loss.node();

  std::unordered_map<const detail::Node*, std::size_t> position;
  position.reserve(nodes_.size());
  for (std::size_t i = 0; i < nodes_.size(); ++i) position.emplace(nodes_[i].get(), i);
  const auto root_it = position.find(root);
  if (root_it == position.end()) {
    throw ContractError("backward(): loss was not produced by an op recorded on this tape");
  }

  // Mark the ancestors of the loss; only those take part in the pass.
  std::vector<char> reachable(nodes_.size(), 0);
  std::unordered_set<detail::Node*> leaves;
  reachable[root_it->second] = 1;
  for (std::size_t i = root_it->second + 1; i-- > 0;) {
    if (!reachable[i]) continue;
    for (const auto& input : nodes_[i]->inputs) {
      if (!input->requires_grad) continue;
      auto it = position.find(input.get());
      if (it != position.end()) {
        reachable[it->second] = 1;
      } else {
        leaves.insert(input.get());
      }
    }
  }

  for (std::size_t i = 0; i <= root_it->second; ++i) {
    if (reachable[i]) nodes_[i]->grad.assign(nodes_[i]->data.size(), 0.0);
  }
  for (detail::Node* leaf : leaves) leaf->grad.assign(leaf->data.size(), 0.0);

  root->grad[0] = 1.0;
  last_visits_ = 0;
  for (std::size_t i = root_it->second + 1; i-- > 0;) {
    if (!reachable[i]) continue;
    detail::Node& node = *nodes_[i];
    if (node.backward) node.backward(node);
    ++last_visits_;
  }
}

NoGradScope::NoGradScope() : saved_(g_active) { g_active = nullptr; }

NoGradScope::~NoGradScope() { g_active = saved_; }

}  // namespace caft::engine
