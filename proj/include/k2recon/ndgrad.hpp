#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// float64 tensors. One Tape per sample; tapes are not shared across threads.

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "k2recon/error.hpp"

namespace k2recon::ndgrad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    validate_shape();
    data_.assign(numel(shape_), fill);
  }

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    if (numel(shape_) != data_.size()) {
      throw ContractViolation("tensor shape " + to_string(shape_) + " does not match data length " +
                              std::to_string(data_.size()));
    }
  }

  static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  std::size_t rank() const { return shape_.size(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& storage() { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double item() const {
    if (data_.size() != 1) throw ContractViolation("item() on tensor of shape " + to_string(shape_));
    return data_[0];
  }

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool on) { requires_grad_ = on; }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void validate_shape() const {
    for (auto e : shape_) {
      if (e == 0) throw ContractViolation("tensor extents must be >= 1, got " + to_string(shape_));
    }
  }

  Shape shape_;
  std::vector<double> data_;
  bool requires_grad_ = false;
};

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Everything a backward rule may read. `needs[i]` is false for inputs that
/// do not lead to any requires_grad leaf; rules may skip those.
struct BackwardContext {
  const Tensor& grad_out;
  const Tensor& output;
  std::span<const Tensor* const> inputs;
  std::span<const bool> needs;
};

/// Returns one gradient per input; an empty Tensor means "no contribution".
using BackwardFn = std::function<std::vector<Tensor>(const BackwardContext&)>;

class Gradients {
 public:
  bool contains(Var v) const { return grads_.count(v.id()) != 0; }
  const Tensor& operator[](Var v) const {
    auto it = grads_.find(v.id());
    if (it == grads_.end()) throw ContractViolation("no gradient recorded for node " + std::to_string(v.id()));
    return it->second;
  }
  std::size_t size() const { return grads_.size(); }

 private:
  friend class Tape;
  std::map<std::size_t, Tensor> grads_;
};

class Tape {
 public:
  struct Node {
    std::string op;
    Tensor value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    bool is_leaf = false;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value) {
    Node n;
    n.op = "leaf";
    n.requires_grad = value.requires_grad();
    n.is_leaf = true;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  Var parameter(Tensor value) {
    value.set_requires_grad(true);
    return leaf(std::move(value));
  }

  Var constant(Tensor value) {
    value.set_requires_grad(false);
    return leaf(std::move(value));
  }

  /// Extension point: records an op whose backward rule is supplied by the caller.
  Var record(std::string_view op, Tensor value, const std::vector<Var>& inputs, BackwardFn backward) {
    Node n;
    n.op = std::string(op);
    n.value = std::move(value);
    n.backward = std::move(backward);
    for (const Var& v : inputs) {
      if (v.tape_ != this) throw ContractViolation(std::string(op) + ": input belongs to a different tape");
      n.inputs.push_back(v.id_);
      n.requires_grad = n.requires_grad || nodes_[v.id_].requires_grad;
    }
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  const Node& node(std::size_t id) const { return nodes_.at(id); }
  std::size_t size() const { return nodes_.size(); }

  /// Reverse topological sweep from a scalar loss. Only requires_grad leaves
  /// reachable from the loss receive an entry.
  Gradients backward(Var loss) const {
    if (loss.tape_ != this) throw ContractViolation("backward: loss belongs to a different tape");
    const Tensor& lv = nodes_[loss.id_].value;
    if (lv.size() != 1) throw ContractViolation("backward: loss must be scalar, got shape " + to_string(lv.shape()));

    std::vector<std::optional<Tensor>> grads(loss.id_ + 1);
    grads[loss.id_] = Tensor(lv.shape(), 1.0);
    Gradients out;
    for (std::size_t id = loss.id_ + 1; id-- > 0;) {
      const Node& n = nodes_[id];
      if (!grads[id] || !n.requires_grad) continue;
      if (n.is_leaf) {
        out.grads_.emplace(id, std::move(*grads[id]));
        continue;
      }
      std::vector<const Tensor*> inputs;
      inputs.reserve(n.inputs.size());
      // std::vector<bool> has no contiguous storage to span over.
      auto needs_ptr = std::make_unique<bool[]>(n.inputs.size());
      for (std::size_t i = 0; i < n.inputs.size(); ++i) {
        inputs.push_back(&nodes_[n.inputs[i]].value);
        needs_ptr[i] = nodes_[n.inputs[i]].requires_grad;
      }

      BackwardContext ctx{*grads[id], n.value, inputs, std::span<const bool>(needs_ptr.get(), n.inputs.size())};
      std::vector<Tensor> in_grads = n.backward(ctx);
      if (in_grads.size() != n.inputs.size()) {
        throw ContractViolation(n.op + ": backward returned " + std::to_string(in_grads.size()) +
                                " gradients for " + std::to_string(n.inputs.size()) + " inputs");
      }
      grads[id].reset();
      for (std::size_t i = 0; i < n.inputs.size(); ++i) {
        const std::size_t in = n.inputs[i];
        if (!needs_ptr[i] || in_grads[i].empty()) continue;
        if (in_grads[i].shape() != nodes_[in].value.shape()) {
          throw ContractViolation(n.op + ": gradient shape " + to_string(in_grads[i].shape()) +
                                  " does not match input shape " + to_string(nodes_[in].value.shape()));
        }
        if (!grads[in]) {
          grads[in] = std::move(in_grads[i]);
        } else {
          auto dst = grads[in]->data();
          auto src = in_grads[i].data();
          for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
        }
      }
    }
    return out;
  }

 private:
  std::deque<Node> nodes_;
};

inline const Tensor& Var::value() const {
  if (!tape_) throw ContractViolation("use of an unbound Var");
  return tape_->value(id_);
}

namespace detail {

inline void require_same_shape(const Var& a, const Var& b, std::string_view op) {
  if (a.shape() != b.shape()) {
    throw ContractViolation(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                            to_string(b.shape()));
  }
}

inline Tape& tape_of(const Var& a, const Var& b) {
  if (!a.valid() || a.tape() != b.tape()) throw ContractViolation("operands live on different tapes");
  return *a.tape();
}

template <typename F>
Tensor map_binary(const Tensor& a, const Tensor& b, F f) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a[i], b[i]);
  return out;
}

template <typename F>
Tensor map_unary(const Tensor& a, F f) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a[i]);
  return out;
}

}  // namespace detail

inline Var add(Var a, Var b) {
  detail::require_same_shape(a, b, "add");
  Tape& t = detail::tape_of(a, b);
  return t.record("add", detail::map_binary(a.value(), b.value(), std::plus<>()), {a, b},
                  [](const BackwardContext& c) { return std::vector<Tensor>{c.grad_out, c.grad_out}; });
}

inline Var sub(Var a, Var b) {
  detail::require_same_shape(a, b, "sub");
  Tape& t = detail::tape_of(a, b);
  return t.record("sub", detail::map_binary(a.value(), b.value(), std::minus<>()), {a, b},
                  [](const BackwardContext& c) {
                    return std::vector<Tensor>{c.grad_out, detail::map_unary(c.grad_out, std::negate<>())};
                  });
}

inline Var mul(Var a, Var b) {
  detail::require_same_shape(a, b, "mul");
  Tape& t = detail::tape_of(a, b);
  return t.record("mul", detail::map_binary(a.value(), b.value(), std::multiplies<>()), {a, b},
                  [](const BackwardContext& c) {
                    std::vector<Tensor> g(2);
                    if (c.needs[0]) g[0] = detail::map_binary(c.grad_out, *c.inputs[1], std::multiplies<>());
                    if (c.needs[1]) g[1] = detail::map_binary(c.grad_out, *c.inputs[0], std::multiplies<>());
                    return g;
                  });
}

inline Var div(Var a, Var b) {
  detail::require_same_shape(a, b, "div");
  Tape& t = detail::tape_of(a, b);
  return t.record("div", detail::map_binary(a.value(), b.value(), std::divides<>()), {a, b},
                  [](const BackwardContext& c) {
                    std::vector<Tensor> g(2);
                    const Tensor& x = *c.inputs[0];
                    const Tensor& y = *c.inputs[1];
                    if (c.needs[0]) g[0] = detail::map_binary(c.grad_out, y, std::divides<>());
                    if (c.needs[1]) {
                      g[1] = Tensor(y.shape());
                      for (std::size_t i = 0; i < y.size(); ++i) g[1][i] = -c.grad_out[i] * x[i] / (y[i] * y[i]);
                    }
                    return g;
                  });
}

inline Var scale(Var a, double s) {
  return a.tape()->record("scale", detail::map_unary(a.value(), [s](double v) { return s * v; }), {a},
                          [s](const BackwardContext& c) {
                            return std::vector<Tensor>{detail::map_unary(c.grad_out, [s](double v) { return s * v; })};
                          });
}

/// Repeats a one-element tensor into `shape`. Stands in for broadcasting.
inline Var tile(Var s, Shape shape) {
  if (s.value().size() != 1) throw ContractViolation("tile: source must have one element, got " + to_string(s.shape()));
  Tensor out(std::move(shape), s.value()[0]);
  return s.tape()->record("tile", std::move(out), {s}, [](const BackwardContext& c) {
    double acc = 0.0;
    for (double v : c.grad_out.data()) acc += v;
    return std::vector<Tensor>{Tensor(c.inputs[0]->shape(), acc)};
  });
}

inline Var reshape(Var a, Shape shape) {
  if (numel(shape) != a.value().size()) {
    throw ContractViolation("reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
  }
  std::vector<double> data(a.value().data().begin(), a.value().data().end());
  return a.tape()->record("reshape", Tensor(std::move(shape), std::move(data)), {a}, [](const BackwardContext& c) {
    std::vector<double> d(c.grad_out.data().begin(), c.grad_out.data().end());
    return std::vector<Tensor>{Tensor(c.inputs[0]->shape(), std::move(d))};
  });
}

/// Multiplies every element of `a` by the scalar node `s`.
inline Var mul_scalar(Var a, Var s) { return mul(a, tile(s, a.shape())); }

/// Real inner product sum_i a_i b_i as a one-element tensor.
inline Var dot(Var a, Var b) {
  detail::require_same_shape(a, b, "dot");
  Tape& t = detail::tape_of(a, b);
  double acc = 0.0;
  for (std::size_t i = 0; i < a.value().size(); ++i) acc += a.value()[i] * b.value()[i];
  return t.record("dot", Tensor::scalar(acc), {a, b}, [](const BackwardContext& c) {
    const double g = c.grad_out[0];
    std::vector<Tensor> out(2);
    if (c.needs[0]) out[0] = detail::map_unary(*c.inputs[1], [g](double v) { return g * v; });
    if (c.needs[1]) out[1] = detail::map_unary(*c.inputs[0], [g](double v) { return g * v; });
    return out;
  });
}

inline Var leaky_relu(Var x, double slope = 0.01) {
  return x.tape()->record("leaky_relu", detail::map_unary(x.value(), [slope](double v) { return v > 0 ? v : slope * v; }),
                          {x}, [slope](const BackwardContext& c) {
                            return std::vector<Tensor>{detail::map_binary(
                                c.grad_out, *c.inputs[0], [slope](double g, double v) { return v > 0 ? g : slope * g; })};
                          });
}

inline double softplus_value(double v) { return v > 30.0 ? v : std::log1p(std::exp(v)); }

inline Var softplus(Var x) {
  return x.tape()->record("softplus", detail::map_unary(x.value(), softplus_value), {x}, [](const BackwardContext& c) {
    return std::vector<Tensor>{detail::map_binary(c.grad_out, *c.inputs[0], [](double g, double v) {
      return g / (1.0 + std::exp(-v));
    })};
  });
}

enum class ReduceKind { sum, mean, l2norm, l1norm };

inline Var reduce(Var x, ReduceKind kind) {
  const Tensor& v = x.value();
  double r = 0.0;
  switch (kind) {
    case ReduceKind::sum:
      for (double e : v.data()) r += e;
      break;
    case ReduceKind::mean:
      for (double e : v.data()) r += e;
      r /= static_cast<double>(v.size());
      break;
    case ReduceKind::l2norm:
      for (double e : v.data()) r += e * e;
      r = std::sqrt(r);
      break;
    case ReduceKind::l1norm:
      for (double e : v.data()) r += std::abs(e);
      break;
  }
  return x.tape()->record("reduce", Tensor::scalar(r), {x}, [kind](const BackwardContext& c) {
    const Tensor& in = *c.inputs[0];
    const double g = c.grad_out[0];
    Tensor gi(in.shape());
    switch (kind) {
      case ReduceKind::sum:
        std::fill(gi.data().begin(), gi.data().end(), g);
        break;
      case ReduceKind::mean:
        std::fill(gi.data().begin(), gi.data().end(), g / static_cast<double>(in.size()));
        break;
      case ReduceKind::l2norm: {
        const double norm = c.output[0];
        // Subgradient 0 at the origin.
        if (norm > 0.0) {
          for (std::size_t i = 0; i < in.size(); ++i) gi[i] = g * in[i] / norm;
        }
        break;
      }
      case ReduceKind::l1norm:
        for (std::size_t i = 0; i < in.size(); ++i) gi[i] = in[i] > 0 ? g : (in[i] < 0 ? -g : 0.0);
        break;
    }
    return std::vector<Tensor>{std::move(gi)};
  });
}

namespace detail {

struct ConvGeometry {
  std::size_t cin, h, w, cout, kh, kw;
  std::size_t rows() const { return cin * kh * kw; }
  std::size_t pixels() const { return h * w; }
};

inline void im2col(const ConvGeometry& g, std::span<const double> in, std::vector<double>& cols) {
  cols.assign(g.rows() * g.pixels(), 0.0);
  const long ph = static_cast<long>(g.kh / 2), pw = static_cast<long>(g.kw / 2);
  const long H = static_cast<long>(g.h), W = static_cast<long>(g.w);
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        double* row = cols.data() + ((c * g.kh + i) * g.kw + j) * g.pixels();
        const long dy = static_cast<long>(i) - ph, dx = static_cast<long>(j) - pw;
        for (long y = 0; y < H; ++y) {
          const long sy = y + dy;
          if (sy < 0 || sy >= H) continue;
          const double* src = in.data() + (c * g.h + sy) * g.w;
          const long x0 = std::max(0L, -dx), x1 = std::min(W, W - dx);
          for (long x = x0; x < x1; ++x) row[y * W + x] = src[x + dx];
        }
      }
    }
  }
}

inline void col2im(const ConvGeometry& g, const std::vector<double>& cols, std::span<double> out) {
  std::fill(out.begin(), out.end(), 0.0);
  const long ph = static_cast<long>(g.kh / 2), pw = static_cast<long>(g.kw / 2);
  const long H = static_cast<long>(g.h), W = static_cast<long>(g.w);
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        const double* row = cols.data() + ((c * g.kh + i) * g.kw + j) * g.pixels();
        const long dy = static_cast<long>(i) - ph, dx = static_cast<long>(j) - pw;
        for (long y = 0; y < H; ++y) {
          const long sy = y + dy;
          if (sy < 0 || sy >= H) continue;
          double* dst = out.data() + (c * g.h + sy) * g.w;
          const long x0 = std::max(0L, -dx), x1 = std::min(W, W - dx);
          for (long x = x0; x < x1; ++x) dst[x + dx] += row[y * W + x];
        }
      }
    }
  }
}

}  // namespace detail

/// Stride-1 cross-correlation with zero "same" padding.
/// input [C_in,H,W], weight [C_out,C_in,kh,kw], bias [C_out] -> [C_out,H,W].
inline Var conv2d(Var input, Var weight, Var bias) {
  const Shape& is = input.shape();
  const Shape& ws = weight.shape();
  if (is.size() != 3 || ws.size() != 4) {
    throw ContractViolation("conv2d: expected input [C,H,W] and weight [O,C,kh,kw], got " + to_string(is) + " and " +
                            to_string(ws));
  }
  if (ws[1] != is[0]) {
    throw ContractViolation("conv2d: channel mismatch, input " + to_string(is) + " weight " + to_string(ws));
  }
  if (ws[2] % 2 == 0 || ws[3] % 2 == 0) throw ContractViolation("conv2d: kernel extents must be odd, got " + to_string(ws));
  if (bias.shape() != Shape{ws[0]}) {
    throw ContractViolation("conv2d: bias shape " + to_string(bias.shape()) + " does not match " + std::to_string(ws[0]) +
                            " output channels");
  }
  const detail::ConvGeometry g{is[0], is[1], is[2], ws[0], ws[2], ws[3]};
  std::vector<double> cols;
  detail::im2col(g, input.value().data(), cols);
  Tensor out({g.cout, g.h, g.w});
  const auto M = static_cast<int>(g.cout), N = static_cast<int>(g.pixels()), K = static_cast<int>(g.rows());
  for (std::size_t o = 0; o < g.cout; ++o) {
    std::fill_n(out.data().begin() + static_cast<long>(o * g.pixels()), g.pixels(), bias.value()[o]);
  }
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, M, N, K, 1.0, weight.value().data().data(), K, cols.data(), N,
              1.0, out.data().data(), N);

  return input.tape()->record("conv2d", std::move(out), {input, weight, bias}, [g](const BackwardContext& c) {
    const auto M = static_cast<int>(g.cout), N = static_cast<int>(g.pixels()), K = static_cast<int>(g.rows());
    const Tensor& in = *c.inputs[0];
    const Tensor& w = *c.inputs[1];
    std::vector<Tensor> grads(3);
    if (c.needs[1]) {
      std::vector<double> cols;
      detail::im2col(g, in.data(), cols);
      grads[1] = Tensor(w.shape());
      cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, M, K, N, 1.0, c.grad_out.data().data(), N, cols.data(), N, 0.0,
                  grads[1].data().data(), K);
    }
    if (c.needs[2]) {
      grads[2] = Tensor({g.cout});
      for (std::size_t o = 0; o < g.cout; ++o) {
        double acc = 0.0;
        for (std::size_t p = 0; p < g.pixels(); ++p) acc += c.grad_out[o * g.pixels() + p];
        grads[2][o] = acc;
      }
    }
    if (c.needs[0]) {
      std::vector<double> gcols(g.rows() * g.pixels());
      cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, K, N, M, 1.0, w.data().data(), K, c.grad_out.data().data(), N,
                  0.0, gcols.data(), N);
      grads[0] = Tensor(in.shape());
      detail::col2im(g, gcols, grads[0].data());
    }
    return grads;
  });
}

}  // namespace k2recon::ndgrad
