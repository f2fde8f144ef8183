#include "caft/engine/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

#include "caft/common/error.hpp"

namespace caft::engine {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  if (numel(shape) != data.size()) {
    throw DimensionError("tensor shape " + to_string(shape) + " holds " + std::to_string(numel(shape)) +
                         " values, got " + std::to_string(data.size()));
  }
  node_ = std::make_shared<detail::Node>();
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const std::size_t n = numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({1}, {value}, requires_grad); }

Tensor Tensor::randn(Shape shape, double stddev, std::mt19937_64& rng, bool requires_grad) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> values(numel(shape));
  for (double& v : values) v = dist(rng);
  return Tensor(std::move(shape), std::move(values), requires_grad);
}

Tensor Tensor::from_matrix(const std::vector<std::vector<double>>& rows, bool requires_grad) {
  if (rows.empty()) throw DimensionError("from_matrix: no rows");
  const std::size_t cols = rows.front().size();
  std::vector<double> values;
  values.reserve(rows.size() * cols);
  for (const auto& row : rows) {
    if (row.size() != cols) throw DimensionError("from_matrix: ragged rows");
    values.insert(values.end(), row.begin(), row.end());
  }
  return Tensor({rows.size(), cols}, std::move(values), requires_grad);
}

detail::Node& Tensor::node() const {
  if (!node_) throw ContractError("use of an undefined tensor");
  return *node_;
}

const Shape& Tensor::shape() const { return node().shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + to_string(s));
  return s[axis];
}

std::size_t Tensor::size() const { return node().data.size(); }

std::span<double> Tensor::data() { return node().data; }
std::span<const double> Tensor::data() const { return node().data; }

double Tensor::item() const {
  if (size() != 1) throw DimensionError("item() on tensor of shape " + to_string(shape()));
  return node().data[0];
}

bool Tensor::requires_grad() const { return node().requires_grad; }
void Tensor::set_requires_grad(bool value) { node().requires_grad = value; }

bool Tensor::has_grad() const { return !node().grad.empty(); }
std::span<double> Tensor::grad() { return node().grad; }
std::span<const double> Tensor::grad() const { return node().grad; }

void Tensor::zero_grad() { node().grad.assign(node().data.size(), 0.0); }
void Tensor::clear_grad() {
  node().grad.clear();
  node().grad.shrink_to_fit();
}

Tensor Tensor::clone() const {
  const detail::Node& n = node();
  return Tensor(n.shape, n.data, n.requires_grad);
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  return std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(double)) == 0;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("max_abs_diff: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::fabs(a.at(i) - b.at(i)));
  return worst;
}

}  // namespace caft::engine
