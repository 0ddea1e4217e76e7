#pragma once

// Reverse-mode automatic differentiation over dense row-major float64 tensors.
//
// Every op returns a fresh Tensor. When gradient recording is enabled and at
// least one input requires a gradient, the result carries a TapeNode linking
// it to its inputs together with a closure that propagates the incoming
// gradient back. backward() walks that DAG once in reverse topological order.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace lcs::ad {

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

using Shape = std::vector<std::size_t>;

enum class OpKind {
  Leaf,
  MatMul,
  Add,
  AddBias,
  Mul,
  Scale,
  Embedding,
  Softmax,
  LayerNorm,
  Relu,
  Concat,
  Slice,
  Transpose,
  MaskedFill,
  CrossEntropy,
  Mean,
  Sum,
  Attention,
  Dropout,
};

inline std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Leaf: return "leaf";
    case OpKind::MatMul: return "matmul";
    case OpKind::Add: return "add";
    case OpKind::AddBias: return "add_bias";
    case OpKind::Mul: return "mul";
    case OpKind::Scale: return "scale";
    case OpKind::Embedding: return "embedding";
    case OpKind::Softmax: return "softmax";
    case OpKind::LayerNorm: return "layer_norm";
    case OpKind::Relu: return "relu";
    case OpKind::Concat: return "concat";
    case OpKind::Slice: return "slice";
    case OpKind::Transpose: return "transpose";
    case OpKind::MaskedFill: return "masked_fill";
    case OpKind::CrossEntropy: return "cross_entropy";
    case OpKind::Mean: return "mean";
    case OpKind::Sum: return "sum";
    case OpKind::Attention: return "attention";
    case OpKind::Dropout: return "dropout";
  }
  return "unknown";
}

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {
inline thread_local int no_grad_depth = 0;
}  // namespace detail

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

// Disables tape recording for the lifetime of the guard (inference paths).
class NoGradGuard {
 public:
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

struct TapeNode {
  OpKind kind = OpKind::Leaf;
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until something flows into it
  bool requires_grad = false;
  std::vector<std::shared_ptr<TapeNode>> inputs;
  std::function<void(TapeNode&)> backward_fn;

  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : node_(std::make_shared<TapeNode>()) {
    if (shape.empty()) shape = {1};
    for (std::size_t d : shape) {
      if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
    }
    if (ad::numel(shape) != data.size()) {
      throw DimensionError("shape " + shape_str(shape) + " does not match " +
                           std::to_string(data.size()) + " elements");
    }
    node_->shape = std::move(shape);
    node_->value = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<double> data(ad::numel(shape.empty() ? Shape{1} : shape), 0.0);
    return Tensor(std::move(shape), std::move(data), requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    std::vector<double> data(ad::numel(shape.empty() ? Shape{1} : shape), value);
    return Tensor(std::move(shape), std::move(data), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor({1}, {value}, requires_grad);
  }

  static Tensor from_node(std::shared_ptr<TapeNode> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const double> data() const { return node_->value; }
  // Direct write access, meant for leaves (optimizer updates, perturbation checks).
  std::span<double> mutable_data() { return node_->value; }
  const std::vector<double>& values() const { return node_->value; }

  double item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  double at(std::initializer_list<std::size_t> index) const {
    if (index.size() != rank()) throw DimensionError("index rank mismatch");
    std::size_t flat = 0;
    std::size_t i = 0;
    for (std::size_t idx : index) {
      if (idx >= node_->shape[i]) throw DimensionError("index out of range");
      flat = flat * node_->shape[i] + idx;
      ++i;
    }
    return node_->value[flat];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) {
    if (!is_leaf()) throw ContractError("requires_grad can only be toggled on leaf tensors");
    node_->requires_grad = flag;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  Tensor grad_tensor() const {
    if (!has_grad()) return zeros(shape());
    return Tensor(shape(), node_->grad);
  }
  void zero_grad() { node_->grad.clear(); }

  bool is_leaf() const { return node_->kind == OpKind::Leaf; }
  OpKind op_kind() const { return node_->kind; }

  Tensor detach() const { return Tensor(shape(), node_->value, false); }
  Tensor clone() const { return Tensor(shape(), node_->value, requires_grad()); }

  const std::shared_ptr<TapeNode>& node() const { return node_; }

 private:
  std::shared_ptr<TapeNode> node_;
};

namespace detail {

inline void require_defined(const Tensor& t, std::string_view op) {
  if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor input");
}

inline void require_finite(const Tensor& t, std::string_view op) {
  const auto& v = t.data();
  if (!Eigen::Map<const Eigen::ArrayXd>(v.data(), static_cast<Eigen::Index>(v.size())).allFinite()) {
    throw NumericError(std::string(op) + ": non-finite input value");
  }
}

inline void check_input(const Tensor& t, std::string_view op) {
  require_defined(t, op);
  require_finite(t, op);
}

// Wraps a freshly computed value as a tensor, recording it on the tape when any
// input requires a gradient and recording is enabled.
inline Tensor make_result(OpKind kind, Shape shape, std::vector<double> value,
                          std::vector<Tensor> inputs, std::function<void(TapeNode&)> backward_fn) {
  auto node = std::make_shared<TapeNode>();
  node->kind = kind;
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (const auto& in : inputs) node->inputs.push_back(in.node());
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor::from_node(std::move(node));
}

inline bool wants(const std::shared_ptr<TapeNode>& n) { return n->requires_grad; }

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

inline std::size_t last_dim(const Tensor& t) { return t.shape().back(); }

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

// a[M,K] @ b[K,N], or a[M,K] @ b[N,K]^T when transpose_b is set.
inline Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b = false) {
  detail::check_input(a, "matmul");
  detail::check_input(b, "matmul");
  if (a.rank() != 2 || b.rank() != 2) throw DimensionError("matmul expects rank-2 operands");
  const std::size_t m = a.dim(0), k = a.dim(1);
  const std::size_t kb = transpose_b ? b.dim(1) : b.dim(0);
  const std::size_t n = transpose_b ? b.dim(0) : b.dim(1);
  if (k != kb) {
    throw DimensionError("matmul shape mismatch " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()) + (transpose_b ? "^T" : ""));
  }
  std::vector<double> out(m * n);
  detail::ConstMap am(a.data().data(), m, k);
  detail::ConstMap bm(b.data().data(), b.dim(0), b.dim(1));
  detail::MutMap om(out.data(), m, n);
  if (transpose_b) {
    om.noalias() = am * bm.transpose();
  } else {
    om.noalias() = am * bm;
  }
  return detail::make_result(
      OpKind::MatMul, {m, n}, std::move(out), {a, b}, [m, k, n, transpose_b](TapeNode& self) {
        auto& an = self.inputs[0];
        auto& bn = self.inputs[1];
        detail::ConstMap g(self.grad.data(), m, n);
        detail::ConstMap am(an->value.data(), m, k);
        detail::ConstMap bm(bn->value.data(), bn->shape[0], bn->shape[1]);
        if (detail::wants(an)) {
          detail::MutMap ga(an->grad_buffer().data(), m, k);
          if (transpose_b) {
            ga.noalias() += g * bm;
          } else {
            ga.noalias() += g * bm.transpose();
          }
        }
        if (detail::wants(bn)) {
          detail::MutMap gb(bn->grad_buffer().data(), bn->shape[0], bn->shape[1]);
          if (transpose_b) {
            gb.noalias() += g.transpose() * am;
          } else {
            gb.noalias() += am.transpose() * g;
          }
        }
      });
}

inline Tensor transpose(const Tensor& x) {
  detail::check_input(x, "transpose");
  if (x.rank() != 2) throw DimensionError("transpose expects a rank-2 tensor");
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x.data()[i * c + j];
  return detail::make_result(OpKind::Transpose, {c, r}, std::move(out), {x}, [r, c](TapeNode& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
  });
}

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_input(a, "add");
  detail::check_input(b, "add");
  if (a.shape() != b.shape()) {
    throw DimensionError("add shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return detail::make_result(OpKind::Add, a.shape(), std::move(out), {a, b}, [](TapeNode& self) {
    for (auto& in : self.inputs) {
      if (!detail::wants(in)) continue;
      auto& g = in->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

// x[..., D] + bias[D], the bias broadcast over every leading row.
inline Tensor add_bias(const Tensor& x, const Tensor& bias) {
  detail::check_input(x, "add_bias");
  detail::check_input(bias, "add_bias");
  const std::size_t d = detail::last_dim(x);
  if (bias.numel() != d) {
    throw DimensionError("add_bias: bias of " + std::to_string(bias.numel()) +
                         " elements against last dim " + std::to_string(d));
  }
  const std::size_t rows = x.numel() / d;
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = x.data()[r * d + j] + bias.data()[j];
  return detail::make_result(OpKind::AddBias, x.shape(), std::move(out), {x, bias}, [rows, d](TapeNode& self) {
    auto& xn = self.inputs[0];
    auto& bn = self.inputs[1];
    if (detail::wants(xn)) {
      auto& g = xn->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (detail::wants(bn)) {
      auto& g = bn->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) g[j] += self.grad[r * d + j];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_input(a, "mul");
  detail::check_input(b, "mul");
  if (a.shape() != b.shape()) {
    throw DimensionError("mul shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return detail::make_result(OpKind::Mul, a.shape(), std::move(out), {a, b}, [](TapeNode& self) {
    auto& an = self.inputs[0];
    auto& bn = self.inputs[1];
    if (detail::wants(an)) {
      auto& g = an->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bn->value[i];
    }
    if (detail::wants(bn)) {
      auto& g = bn->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * an->value[i];
    }
  });
}

inline Tensor scale(const Tensor& x, double factor) {
  detail::check_input(x, "scale");
  if (!std::isfinite(factor)) throw NumericError("scale: non-finite factor");
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * factor;
  return detail::make_result(OpKind::Scale, x.shape(), std::move(out), {x}, [factor](TapeNode& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

inline Tensor relu(const Tensor& x) {
  detail::check_input(x, "relu");
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] > 0.0 ? x.data()[i] : 0.0;
  return detail::make_result(OpKind::Relu, x.shape(), std::move(out), {x}, [](TapeNode& self) {
    auto& in = self.inputs[0];
    auto& g = in->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (in->value[i] > 0.0) g[i] += self.grad[i];
  });
}

// Replaces every element whose mask entry is nonzero with `value`; the
// replaced elements receive no gradient.
inline Tensor masked_fill(const Tensor& x, std::span<const std::uint8_t> mask, double value) {
  detail::check_input(x, "masked_fill");
  if (mask.size() != x.numel()) throw DimensionError("masked_fill: mask size does not match tensor");
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = mask[i] ? value : x.data()[i];
  std::vector<std::uint8_t> saved(mask.begin(), mask.end());
  return detail::make_result(OpKind::MaskedFill, x.shape(), std::move(out), {x},
                             [saved = std::move(saved)](TapeNode& self) {
                               auto& g = self.inputs[0]->grad_buffer();
                               for (std::size_t i = 0; i < g.size(); ++i)
                                 if (!saved[i]) g[i] += self.grad[i];
                             });
}

// Inverted dropout with a counter-based mask: element i of call `stream` is
// kept iff hash(seed, stream, i) >= p. p == 0 is the identity.
inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline Tensor dropout(const Tensor& x, double p, std::uint64_t seed, std::uint64_t stream) {
  detail::check_input(x, "dropout");
  if (p < 0.0 || p >= 1.0) throw ContractError("dropout probability must lie in [0,1)");
  if (p == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - p);
  std::vector<double> factor(x.numel());
  const std::uint64_t base = mix64(seed ^ mix64(stream));
  for (std::size_t i = 0; i < factor.size(); ++i) {
    const double u = static_cast<double>(mix64(base + i) >> 11) * 0x1.0p-53;
    factor[i] = u >= p ? keep_scale : 0.0;
  }
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * factor[i];
  return detail::make_result(OpKind::Dropout, x.shape(), std::move(out), {x},
                             [factor = std::move(factor)](TapeNode& self) {
                               auto& g = self.inputs[0]->grad_buffer();
                               for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor[i];
                             });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& x) {
  detail::check_input(x, "sum");
  double total = 0.0;
  for (double v : x.data()) total += v;
  return detail::make_result(OpKind::Sum, {1}, {total}, {x}, [](TapeNode& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (double& v : g) v += self.grad[0];
  });
}

inline Tensor mean(const Tensor& x) {
  detail::check_input(x, "mean");
  double total = 0.0;
  for (double v : x.data()) total += v;
  const double n = static_cast<double>(x.numel());
  return detail::make_result(OpKind::Mean, {1}, {total / n}, {x}, [n](TapeNode& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (double& v : g) v += self.grad[0] / n;
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  detail::check_input(x, "slice");
  if (axis >= x.rank()) throw DimensionError("slice: axis out of range");
  if (begin >= end || end > x.dim(axis)) throw DimensionError("slice: invalid range");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t full = x.dim(axis), len = end - begin;
  Shape shape = x.shape();
  shape[axis] = len;
  std::vector<double> out(outer * len * inner);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(x.data().data() + (o * full + begin) * inner, len * inner, out.data() + o * len * inner);
  return detail::make_result(OpKind::Slice, std::move(shape), std::move(out), {x},
                             [outer, inner, full, begin, len](TapeNode& self) {
                               auto& g = self.inputs[0]->grad_buffer();
                               for (std::size_t o = 0; o < outer; ++o)
                                 for (std::size_t i = 0; i < len * inner; ++i)
                                   g[(o * full + begin) * inner + i] += self.grad[o * len * inner + i];
                             });
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  for (const auto& p : parts) detail::check_input(p, "concat");
  const Shape& ref = parts.front().shape();
  if (axis >= ref.size()) throw DimensionError("concat: axis out of range");
  std::size_t total = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    if (p.rank() != ref.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t i = 0; i < ref.size(); ++i)
      if (i != axis && p.dim(i) != ref[i]) throw DimensionError("concat: shape mismatch off the concat axis");
    widths.push_back(p.dim(axis));
    total += p.dim(axis);
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= ref[i];
  for (std::size_t i = axis + 1; i < ref.size(); ++i) inner *= ref[i];
  Shape shape = ref;
  shape[axis] = total;
  std::vector<double> out(outer * total * inner);
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(parts[p].data().data() + o * widths[p] * inner, widths[p] * inner,
                  out.data() + (o * total + offset) * inner);
    offset += widths[p];
  }
  return detail::make_result(OpKind::Concat, std::move(shape), std::move(out), parts,
                             [outer, inner, total, widths](TapeNode& self) {
                               std::size_t offset = 0;
                               for (std::size_t p = 0; p < self.inputs.size(); ++p) {
                                 auto& in = self.inputs[p];
                                 if (detail::wants(in)) {
                                   auto& g = in->grad_buffer();
                                   for (std::size_t o = 0; o < outer; ++o)
                                     for (std::size_t i = 0; i < widths[p] * inner; ++i)
                                       g[o * widths[p] * inner + i] += self.grad[(o * total + offset) * inner + i];
                                 }
                                 offset += widths[p];
                               }
                             });
}

// ---------------------------------------------------------------------------
// Embedding lookup: rows of weight[V,D] gathered by id. An id of -1 yields a
// zero row that receives no gradient.

inline Tensor embedding(const Tensor& weight, std::span<const long> ids) {
  detail::check_input(weight, "embedding");
  if (weight.rank() != 2) throw DimensionError("embedding weight must be rank 2");
  if (ids.empty()) throw DimensionError("embedding: empty id list");
  const std::size_t v = weight.dim(0), d = weight.dim(1);
  for (long id : ids) {
    if (id < -1 || id >= static_cast<long>(v)) {
      throw DimensionError("embedding id " + std::to_string(id) + " outside vocabulary of " + std::to_string(v));
    }
  }
  std::vector<double> out(ids.size() * d, 0.0);
  for (std::size_t r = 0; r < ids.size(); ++r)
    if (ids[r] >= 0) std::copy_n(weight.data().data() + ids[r] * d, d, out.data() + r * d);
  std::vector<long> saved(ids.begin(), ids.end());
  return detail::make_result(OpKind::Embedding, {ids.size(), d}, std::move(out), {weight},
                             [saved = std::move(saved), d](TapeNode& self) {
                               auto& g = self.inputs[0]->grad_buffer();
                               for (std::size_t r = 0; r < saved.size(); ++r) {
                                 if (saved[r] < 0) continue;
                                 double* dst = g.data() + saved[r] * d;
                                 const double* src = self.grad.data() + r * d;
                                 for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
                               }
                             });
}

// ---------------------------------------------------------------------------
// Normalization

inline Tensor softmax(const Tensor& x) {
  detail::check_input(x, "softmax");
  const std::size_t d = detail::last_dim(x);
  const std::size_t rows = x.numel() / d;
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data().data() + r * d;
    double* o = out.data() + r * d;
    const double mx = *std::max_element(in, in + d);
    double z = 0.0;
    for (std::size_t j = 0; j < d; ++j) z += (o[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < d; ++j) o[j] /= z;
  }
  return detail::make_result(OpKind::Softmax, x.shape(), std::move(out), {x}, [rows, d](TapeNode& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.value.data() + r * d;
      const double* gy = self.grad.data() + r * d;
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += y[j] * gy[j];
      for (std::size_t j = 0; j < d; ++j) g[r * d + j] += y[j] * (gy[j] - dot);
    }
  });
}

// Normalizes over the last axis with population variance, then applies gain and bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  detail::check_input(x, "layer_norm");
  detail::check_input(gamma, "layer_norm");
  detail::check_input(beta, "layer_norm");
  if (!(eps > 0.0)) throw ContractError("layer_norm epsilon must be positive");
  const std::size_t d = detail::last_dim(x);
  if (gamma.numel() != d || beta.numel() != d) throw DimensionError("layer_norm: gain/bias size mismatch");
  const std::size_t rows = x.numel() / d;
  std::vector<double> out(x.numel());
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data().data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += in[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (in[j] - mu) * inv_std[r];
      out[r * d + j] = xhat[r * d + j] * gamma.data()[j] + beta.data()[j];
    }
  }
  return detail::make_result(
      OpKind::LayerNorm, x.shape(), std::move(out), {x, gamma, beta},
      [rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](TapeNode& self) {
        auto& xn = self.inputs[0];
        auto& gn = self.inputs[1];
        auto& bn = self.inputs[2];
        const double* gamma = gn->value.data();
        if (detail::wants(gn)) {
          auto& g = gn->grad_buffer();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) g[j] += self.grad[r * d + j] * xhat[r * d + j];
        }
        if (detail::wants(bn)) {
          auto& g = bn->grad_buffer();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) g[j] += self.grad[r * d + j];
        }
        if (detail::wants(xn)) {
          auto& g = xn->grad_buffer();
          const double inv_d = 1.0 / static_cast<double>(d);
          for (std::size_t r = 0; r < rows; ++r) {
            double mean_g = 0.0, mean_gx = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double gh = self.grad[r * d + j] * gamma[j];
              mean_g += gh;
              mean_gx += gh * xhat[r * d + j];
            }
            mean_g *= inv_d;
            mean_gx *= inv_d;
            for (std::size_t j = 0; j < d; ++j) {
              const double gh = self.grad[r * d + j] * gamma[j];
              g[r * d + j] += inv_std[r] * (gh - mean_g - xhat[r * d + j] * mean_gx);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Label-smoothed cross-entropy, fused with a stable log-sum-exp.
//
// Per valid row i with target y the smoothed target distribution is
// q = (1 - eps) * onehot(y) + eps / V, and the row loss is -sum_v q_v log p_v.
// Rows whose target equals ignore_index are excluded; the result is the mean
// over the remaining rows.

inline Tensor cross_entropy(const Tensor& logits, std::span<const long> targets, double smoothing,
                            long ignore_index = -1) {
  detail::check_input(logits, "cross_entropy");
  if (logits.rank() != 2) throw DimensionError("cross_entropy expects logits[N,V]");
  const std::size_t n = logits.dim(0), v = logits.dim(1);
  if (targets.size() != n) throw DimensionError("cross_entropy: target count does not match rows");
  if (smoothing < 0.0 || smoothing >= 1.0) throw ContractError("label smoothing must lie in [0,1)");
  std::size_t valid = 0;
  for (long t : targets) {
    if (t == ignore_index) continue;
    if (t < 0 || t >= static_cast<long>(v)) throw DimensionError("cross_entropy: target outside vocabulary");
    ++valid;
  }
  if (valid == 0) throw ContractError("cross_entropy: no non-ignored targets");
  std::vector<double> probs(n * v, 0.0);
  double total = 0.0;
  const double uniform = smoothing / static_cast<double>(v);
  for (std::size_t r = 0; r < n; ++r) {
    if (targets[r] == ignore_index) continue;
    const double* row = logits.data().data() + r * v;
    const double mx = *std::max_element(row, row + v);
    double* p = probs.data() + r * v;
    double z = 0.0, row_sum = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
      p[j] = std::exp(row[j] - mx);
      z += p[j];
      row_sum += row[j];
    }
    const double lse = mx + std::log(z);
    const double inv_z = 1.0 / z;
    for (std::size_t j = 0; j < v; ++j) p[j] *= inv_z;
    const double sum_nll = static_cast<double>(v) * lse - row_sum;
    const double nll = lse - row[targets[r]];
    total += (1.0 - smoothing) * nll + uniform * sum_nll;
  }
  const double inv_valid = 1.0 / static_cast<double>(valid);
  std::vector<long> saved(targets.begin(), targets.end());
  return detail::make_result(
      OpKind::CrossEntropy, {1}, {total * inv_valid}, {logits},
      [probs = std::move(probs), saved = std::move(saved), n, v, smoothing, uniform, inv_valid,
       ignore_index](TapeNode& self) {
        auto& g = self.inputs[0]->grad_buffer();
        const double up = self.grad[0] * inv_valid;
        for (std::size_t r = 0; r < n; ++r) {
          if (saved[r] == ignore_index) continue;
          for (std::size_t j = 0; j < v; ++j) g[r * v + j] += up * (probs[r * v + j] - uniform);
          g[r * v + saved[r]] -= up * (1.0 - smoothing);
        }
      });
}

// ---------------------------------------------------------------------------
// Fused multi-head scaled dot-product attention.
//
// q is [B*Lq, D], k and v are [B*Lk, D], heads split D into equal slices.
// allowed[b, i, j] != 0 lets query i of batch b attend key j. A query row with
// no allowed key produces a zero output.

struct AttentionDims {
  std::size_t batch = 0;
  std::size_t q_len = 0;
  std::size_t k_len = 0;
  std::size_t heads = 1;
};

inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionDims& dims,
                        std::span<const std::uint8_t> allowed) {
  detail::check_input(q, "attention");
  detail::check_input(k, "attention");
  detail::check_input(v, "attention");
  const auto [b_n, lq, lk, h_n] = dims;
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2) throw DimensionError("attention expects rank-2 inputs");
  const std::size_t d = q.dim(1);
  if (h_n == 0 || d % h_n != 0) throw DimensionError("attention: model dim not divisible by heads");
  if (q.dim(0) != b_n * lq || k.dim(0) != b_n * lk || v.dim(0) != b_n * lk || k.dim(1) != d || v.dim(1) != d) {
    throw DimensionError("attention: inconsistent q/k/v shapes");
  }
  if (allowed.size() != b_n * lq * lk) throw DimensionError("attention: mask size mismatch");
  const std::size_t dh = d / h_n;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> probs(b_n * h_n * lq * lk, 0.0);
  std::vector<double> out(b_n * lq * d, 0.0);
  const double* qd = q.data().data();
  const double* kd = k.data().data();
  const double* vd = v.data().data();
  std::vector<double> scores(lk);
  for (std::size_t b = 0; b < b_n; ++b) {
    for (std::size_t h = 0; h < h_n; ++h) {
      for (std::size_t i = 0; i < lq; ++i) {
        const double* qi = qd + (b * lq + i) * d + h * dh;
        const std::uint8_t* mrow = allowed.data() + (b * lq + i) * lk;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < lk; ++j) {
          if (!mrow[j]) continue;
          const double* kj = kd + (b * lk + j) * d + h * dh;
          double s = 0.0;
          for (std::size_t t = 0; t < dh; ++t) s += qi[t] * kj[t];
          scores[j] = s * inv_sqrt;
          mx = std::max(mx, scores[j]);
        }
        if (mx == -std::numeric_limits<double>::infinity()) continue;
        double* p = probs.data() + ((b * h_n + h) * lq + i) * lk;
        double z = 0.0;
        for (std::size_t j = 0; j < lk; ++j)
          if (mrow[j]) z += (p[j] = std::exp(scores[j] - mx));
        double* oi = out.data() + (b * lq + i) * d + h * dh;
        for (std::size_t j = 0; j < lk; ++j) {
          if (!mrow[j]) continue;
          p[j] /= z;
          const double* vj = vd + (b * lk + j) * d + h * dh;
          for (std::size_t t = 0; t < dh; ++t) oi[t] += p[j] * vj[t];
        }
      }
    }
  }
  return detail::make_result(
      OpKind::Attention, {b_n * lq, d}, std::move(out), {q, k, v},
      [probs = std::move(probs), b_n, lq, lk, h_n, d, dh, inv_sqrt](TapeNode& self) {
        auto& qn = self.inputs[0];
        auto& kn = self.inputs[1];
        auto& vn = self.inputs[2];
        const bool gq = detail::wants(qn), gk = detail::wants(kn), gv = detail::wants(vn);
        double* dq = gq ? qn->grad_buffer().data() : nullptr;
        double* dk = gk ? kn->grad_buffer().data() : nullptr;
        double* dv = gv ? vn->grad_buffer().data() : nullptr;
        const double* qd = qn->value.data();
        const double* kd = kn->value.data();
        const double* vd = vn->value.data();
        std::vector<double> dp(lk), ds(lk);
        for (std::size_t b = 0; b < b_n; ++b) {
          for (std::size_t h = 0; h < h_n; ++h) {
            for (std::size_t i = 0; i < lq; ++i) {
              const double* p = probs.data() + ((b * h_n + h) * lq + i) * lk;
              const double* go = self.grad.data() + (b * lq + i) * d + h * dh;
              double dot = 0.0;
              for (std::size_t j = 0; j < lk; ++j) {
                if (p[j] == 0.0) {
                  dp[j] = 0.0;
                  continue;
                }
                const double* vj = vd + (b * lk + j) * d + h * dh;
                double s = 0.0;
                for (std::size_t t = 0; t < dh; ++t) s += go[t] * vj[t];
                dp[j] = s;
                dot += p[j] * s;
                if (gv) {
                  double* dvj = dv + (b * lk + j) * d + h * dh;
                  for (std::size_t t = 0; t < dh; ++t) dvj[t] += p[j] * go[t];
                }
              }
              for (std::size_t j = 0; j < lk; ++j) ds[j] = p[j] * (dp[j] - dot) * inv_sqrt;
              const double* qi = qd + (b * lq + i) * d + h * dh;
              double* dqi = gq ? dq + (b * lq + i) * d + h * dh : nullptr;
              for (std::size_t j = 0; j < lk; ++j) {
                if (ds[j] == 0.0) continue;
                const double* kj = kd + (b * lk + j) * d + h * dh;
                if (gq)
                  for (std::size_t t = 0; t < dh; ++t) dqi[t] += ds[j] * kj[t];
                if (gk) {
                  double* dkj = dk + (b * lk + j) * d + h * dh;
                  for (std::size_t t = 0; t < dh; ++t) dkj[t] += ds[j] * qi[t];
                }
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Backward pass

namespace detail {

inline std::vector<TapeNode*> topological_order(TapeNode* root) {
  std::vector<TapeNode*> order;
  std::unordered_set<TapeNode*> visited;
  std::vector<std::pair<TapeNode*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      TapeNode* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;  // post-order: inputs before consumers
}

}  // namespace detail

// Accumulates d(loss)/d(leaf) into every reachable leaf that requires a
// gradient, then releases the recorded tape.
inline void backward(const Tensor& loss) {
  if (!loss.defined()) throw ContractError("backward: undefined loss");
  if (loss.numel() != 1) throw ContractError("backward requires a scalar loss, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) throw ContractError("backward: loss is not tape-recorded");
  TapeNode* root = loss.node().get();
  auto order = detail::topological_order(root);
  root->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TapeNode* node = *it;
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
  }
  for (TapeNode* node : order) {
    if (node->kind == OpKind::Leaf) continue;
    node->backward_fn = nullptr;
    node->inputs.clear();
    node->grad.clear();
  }
}

using NamedTensors = std::map<std::string, Tensor>;

// Runs backward and returns the gradient of every named parameter (zeros for
// parameters the loss does not depend on).
inline NamedTensors backward(const Tensor& loss, const NamedTensors& params) {
  for (const auto& [name, p] : params) {
    (void)name;
    auto node = p.node();
    node->grad.clear();
  }
  backward(loss);
  NamedTensors grads;
  for (const auto& [name, p] : params) grads.emplace(name, p.grad_tensor());
  return grads;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient verification.

struct FiniteDifferenceOptions {
  std::size_t max_coords_per_tensor = 24;  // all coordinates when the tensor is smaller
  std::uint64_t seed = 7;
};

// Compares analytic gradients of `f` against central differences at a sample of
// coordinates. Returns max |a - c| / (|a| + |c| + 1e-12).
template <class Fn>
double finite_difference_check(Fn&& f, NamedTensors& params, double eps,
                               const FiniteDifferenceOptions& opts = {}) {
  if (!(eps > 0.0) || eps > 1e-2) throw ContractError("finite_difference_check: eps must lie in (0, 1e-2]");
  for (auto& [name, p] : params) {
    (void)name;
    p.zero_grad();
  }
  const double probe_a = [&] {
    NoGradGuard guard;
    return f().item();
  }();
  const double probe_b = [&] {
    NoGradGuard guard;
    return f().item();
  }();
  if (probe_a != probe_b) throw ContractError("finite_difference_check: f is not deterministic");

  Tensor loss = f();
  const bool recorded = loss.requires_grad();
  if (recorded) backward(loss);

  std::mt19937_64 rng(opts.seed);
  double worst = 0.0;
  for (auto& [name, p] : params) {
    (void)name;
    const std::size_t n = p.numel();
    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (n > opts.max_coords_per_tensor) {
      for (std::size_t i = 0; i < opts.max_coords_per_tensor; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng() % (n - i));
        std::swap(coords[i], coords[j]);
      }
      coords.resize(opts.max_coords_per_tensor);
    }
    const std::vector<double> analytic = p.has_grad() ? std::vector<double>(p.grad().begin(), p.grad().end())
                                                      : std::vector<double>(n, 0.0);
    auto values = p.mutable_data();
    for (std::size_t c : coords) {
      const double orig = values[c];
      double plus = 0.0, minus = 0.0;
      {
        NoGradGuard guard;
        values[c] = orig + eps;
        plus = f().item();
        values[c] = orig - eps;
        minus = f().item();
        values[c] = orig;
      }
      const double numeric = (plus - minus) / (2.0 * eps);
      const double a = analytic[c];
      const double err = std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + 1e-12);
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace lcs::ad
