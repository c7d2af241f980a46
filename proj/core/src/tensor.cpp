#include "tfn/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <istream>
#include <ostream>
#include <sstream>
#include <unordered_set>

namespace tfn {
namespace {

thread_local bool g_grad_enabled = true;

void check_shape(const Shape& shape) {
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] <= 0) {
      throw ShapeError("tensor dimension " + std::to_string(i) + " must be positive, got " +
                       std::to_string(shape[i]));
    }
  }
}

}  // namespace

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::span<Real> detail::Node::ensure_grad() {
  if (grad.empty()) grad.assign(value.size(), Real(0));
  return grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), Real(0), requires_grad);
}

Tensor Tensor::full(Shape shape, Real value, bool requires_grad) {
  check_shape(shape);
  auto node = std::make_shared<detail::Node>();
  node->value.assign(static_cast<std::size_t>(shape_numel(shape)), value);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::from_data(Shape shape, std::vector<Real> data, bool requires_grad) {
  check_shape(shape);
  if (static_cast<std::int64_t>(data.size()) != shape_numel(shape)) {
    throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                     to_string(shape));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(Real value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const {
  if (!node_) throw ShapeError("use of undefined tensor");
  return node_->shape;
}

std::int64_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range");
  return s[axis];
}

std::size_t Tensor::numel() const { return node_ ? node_->value.size() : 0; }

std::span<const Real> Tensor::data() const {
  if (!node_) throw ShapeError("use of undefined tensor");
  return node_->value;
}

std::span<Real> Tensor::mutable_data() {
  if (!node_) throw ShapeError("use of undefined tensor");
  if (!node_->is_leaf) throw ShapeError("operation results are immutable");
  return node_->value;
}

Real Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() requires a single-element tensor, shape " +
                                     to_string(shape()));
  return node_->value[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
bool Tensor::is_leaf() const { return node_ && node_->is_leaf; }
bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const Real> Tensor::grad() const {
  if (!node_) throw ShapeError("use of undefined tensor");
  return node_->grad;
}

std::span<Real> Tensor::mutable_grad() {
  if (!node_) throw ShapeError("use of undefined tensor");
  return node_->ensure_grad();
}

void Tensor::zero_grad() {
  if (node_) std::fill(node_->grad.begin(), node_->grad.end(), Real(0));
}

Tensor Tensor::detach() const {
  return from_data(shape(), std::vector<Real>(data().begin(), data().end()), false);
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

void backward(const Tensor& loss) {
  if (!loss.defined()) throw ShapeError("backward on undefined tensor");
  if (loss.numel() != 1) {
    throw ShapeError("backward requires a scalar loss, got shape " + to_string(loss.shape()));
  }
  const auto& root = loss.node();
  if (root->consumed) throw std::logic_error("backward already ran on this graph");
  if (!root->requires_grad) throw std::logic_error("loss does not depend on any tensor requiring grad");

  // Iterative post-order DFS gives a topological order of the recorded graph.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{root.get(), 0}};
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (node->consumed) throw std::logic_error("backward through a graph that was already differentiated");
    if (next < node->inputs.size()) {
      detail::Node* child = node->inputs[next++].get();
      if (child && child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }

  root->ensure_grad()[0] += Real(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (node->is_leaf) continue;
    if (node->backward) node->backward(*node);
  }
  for (detail::Node* node : order) {
    if (node->is_leaf) continue;
    node->consumed = true;
    node->backward = nullptr;
    node->inputs.clear();
  }
}

namespace {

template <typename T>
void write_le(std::ostream& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T read_le(std::istream& in) {
  unsigned char bytes[sizeof(T)];
  in.read(reinterpret_cast<char*>(bytes), sizeof(T));
  if (!in) throw std::runtime_error("truncated tensor stream");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

}  // namespace

void write_tensor(std::ostream& out, const Tensor& tensor) {
  out.write("TFNT", 4);
  write_le<std::uint32_t>(out, kTensorFormatVersion);
  const auto& shape = tensor.shape();
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(shape.size()));
  for (auto d : shape) write_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  constexpr std::uint8_t tag = sizeof(Real) == 4 ? kDtypeF32 : kDtypeF64;
  write_le<std::uint8_t>(out, tag);
  for (Real v : tensor.data()) write_le<Real>(out, v);
  if (!out) throw std::runtime_error("failed writing tensor");
}

Tensor read_tensor(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "TFNT", 4) != 0) throw std::runtime_error("bad tensor magic");
  const auto version = read_le<std::uint32_t>(in);
  if (version != kTensorFormatVersion) {
    throw std::runtime_error("unsupported tensor format version " + std::to_string(version));
  }
  const auto rank = read_le<std::uint32_t>(in);
  if (rank == 0 || rank > 16) throw std::runtime_error("implausible tensor rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) d = read_le<std::uint32_t>(in);
  const auto tag = read_le<std::uint8_t>(in);
  check_shape(shape);
  std::vector<Real> data(static_cast<std::size_t>(shape_numel(shape)));
  if (tag == kDtypeF32) {
    for (auto& v : data) v = static_cast<Real>(read_le<float>(in));
  } else if (tag == kDtypeF64) {
    for (auto& v : data) v = static_cast<Real>(read_le<double>(in));
  } else {
    throw std::runtime_error("unknown tensor dtype tag " + std::to_string(tag));
  }
  return Tensor::from_data(std::move(shape), std::move(data));
}

}  // namespace tfn
