#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace caft::engine {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

namespace detail {

// One value in the computation graph. Leaves (parameters, inputs) have no
// backward function; op results recorded on a Tape carry their inputs and a
// closure that accumulates this node's grad into the inputs' grads.
struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a backward pass touches the node
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;
};

}  // namespace detail

// Dense row-major float64 tensor with shared ownership. Copying a Tensor
// copies the handle; use clone() for an independent buffer.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor randn(Shape shape, double stddev, std::mt19937_64& rng, bool requires_grad = false);
  static Tensor from_matrix(const std::vector<std::vector<double>>& rows, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const;

  std::span<double> data();
  std::span<const double> data() const;
  double& at(std::size_t flat) { return data()[flat]; }
  double at(std::size_t flat) const { return data()[flat]; }
  double item() const;

  bool requires_grad() const;
  void set_requires_grad(bool value);

  bool has_grad() const;
  std::span<double> grad();
  std::span<const double> grad() const;
  void zero_grad();   // allocate (or reset) a zero grad buffer
  void clear_grad();  // drop the grad buffer

  // Deep copy of the values; no history, same requires_grad flag.
  Tensor clone() const;
  bool shares_storage_with(const Tensor& other) const { return node_ == other.node_; }

  detail::Node& node() const;
  const std::shared_ptr<detail::Node>& handle() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

// Bitwise equality of shapes and values.
bool bit_equal(const Tensor& a, const Tensor& b);
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace caft::engine
