#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "opgfpad/errors.hpp"
#include "opgfpad/tensor.hpp"

// Define-by-run reverse-mode autodiff over Tensor<T>. Every op's backward is
// itself expressed with tape ops, so gradients stay differentiable and the
// gradient-penalty term (a function of an input gradient) can be trained
// through directly.

namespace opgfpad::netcore {

template <typename T>
class Var;

template <typename T>
struct Node {
  Tensor<T> value;
  std::vector<Var<T>> parents;
  // Given the gradient of the output and a per-parent "needed" mask, return
  // gradients for the needed parents (defaulted Vars elsewhere).
  std::function<std::vector<Var<T>>(const Var<T>&, const std::vector<char>&)> vjp;
  bool requires_grad = false;
  std::uint64_t id = 0;
};

inline std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

template <typename T>
class Var {
public:
  Var() = default;

  static Var constant(Tensor<T> v) { return Var(std::move(v), false); }
  static Var leaf(Tensor<T> v) { return Var(std::move(v), true); }

  static Var op(Tensor<T> v, std::vector<Var> parents,
                std::function<std::vector<Var>(const Var&, const std::vector<char>&)> vjp) {
    Var out(std::move(v), false);
    for (const Var& p : parents)
      if (p.requires_grad()) out.n_->requires_grad = true;
    if (out.n_->requires_grad) {
      out.n_->parents = std::move(parents);
      out.n_->vjp = std::move(vjp);
    }
    return out;
  }

  bool defined() const { return n_ != nullptr; }
  const Tensor<T>& value() const { return n_->value; }
  bool requires_grad() const { return n_ && n_->requires_grad; }
  Node<T>* node() const { return n_.get(); }

private:
  Var(Tensor<T> v, bool req) : n_(std::make_shared<Node<T>>()) {
    n_->value = std::move(v);
    n_->requires_grad = req;
    n_->id = next_node_id();
  }

  std::shared_ptr<Node<T>> n_;
};

// ---------------------------------------------------------------------------
// Elementwise ops

namespace detail {

template <typename T>
void check_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (!a.value().same_shape(b.value()))
    throw ShapeError(std::string(op) + ": shape mismatch " + a.value().shape_str() + " vs " +
                     b.value().shape_str());
}

}  // namespace detail

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::check_same_shape(a, b, "add");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.value().data[i];
  return Var<T>::op(std::move(out), {a, b}, [](const Var<T>& g, const std::vector<char>& need) {
    return std::vector<Var<T>>{need[0] ? g : Var<T>{}, need[1] ? g : Var<T>{}};
  });
}

template <typename T>
Var<T> neg(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.data) v = -v;
  return Var<T>::op(std::move(out), {a}, [](const Var<T>& g, const std::vector<char>&) {
    return std::vector<Var<T>>{neg(g)};
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::check_same_shape(a, b, "sub");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] -= b.value().data[i];
  return Var<T>::op(std::move(out), {a, b}, [](const Var<T>& g, const std::vector<char>& need) {
    return std::vector<Var<T>>{need[0] ? g : Var<T>{}, need[1] ? neg(g) : Var<T>{}};
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::check_same_shape(a, b, "mul");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= b.value().data[i];
  return Var<T>::op(std::move(out), {a, b}, [a, b](const Var<T>& g, const std::vector<char>& need) {
    return std::vector<Var<T>>{need[0] ? mul(g, b) : Var<T>{}, need[1] ? mul(g, a) : Var<T>{}};
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.data) v *= s;
  return Var<T>::op(std::move(out), {a}, [s](const Var<T>& g, const std::vector<char>&) {
    return std::vector<Var<T>>{scale(g, s)};
  });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.data) v += s;
  return Var<T>::op(std::move(out), {a}, [](const Var<T>& g, const std::vector<char>&) {
    return std::vector<Var<T>>{g};
  });
}

// Elementwise product with a constant tensor (activation masks, dropout).
template <typename T>
Var<T> mul_const(const Var<T>& a, Tensor<T> m) {
  if (!a.value().same_shape(m)) throw ShapeError("mul_const: shape mismatch");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= m.data[i];
  auto mask = std::make_shared<Tensor<T>>(std::move(m));
  return Var<T>::op(std::move(out), {a}, [mask](const Var<T>& g, const std::vector<char>&) {
    return std::vector<Var<T>>{mul_const(g, *mask)};
  });
}

template <typename T>
Var<T> reciprocal(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.data) v = T(1) / v;
  return Var<T>::op(std::move(out), {a}, [a](const Var<T>& g, const std::vector<char>&) {
    Var<T> r = reciprocal(a);
    return std::vector<Var<T>>{neg(mul(g, mul(r, r)))};
  });
}

template <typename T>
Var<T> sqrt_v(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.data) v = std::sqrt(v);
  return Var<T>::op(std::move(out), {a}, [a](const Var<T>& g, const std::vector<char>&) {
    return std::vector<Var<T>>{mul(scale(g, T(0.5)), reciprocal(sqrt_v(a)))};
  });
}

template <typename T>
Var<T> log_v(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.data) v = std::log(v);
  return Var<T>::op(std::move(out), {a}, [a](const Var<T>& g, const std::vector<char>&) {
    return std::vector<Var<T>>{mul(g, reciprocal(a))};
  });
}

// Clamp with straight-through mask gradient (zero outside the range).
template <typename T>
Var<T> clamp(const Var<T>& a, T lo, T hi) {
  Tensor<T> out = a.value();
  Tensor<T> mask(out.shape);
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    T v = out.data[i];
    mask.data[i] = (v >= lo && v <= hi) ? T(1) : T(0);
    out.data[i] = v < lo ? lo : (v > hi ? hi : v);
  }
  auto m = std::make_shared<Tensor<T>>(std::move(mask));
  return Var<T>::op(std::move(out), {a}, [m](const Var<T>& g, const std::vector<char>&) {
    return std::vector<Var<T>>{mul_const(g, *m)};
  });
}

// ---------------------------------------------------------------------------
// Activations

template <typename T>
Var<T> relu(const Var<T>& a) {
  Tensor<T> out = a.value();
  Tensor<T> mask(out.shape);
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    bool pos = out.data[i] > T(0);
    mask.data[i] = pos ? T(1) : T(0);
    if (!pos) out.data[i] = T(0);
  }
  auto m = std::make_shared<Tensor<T>>(std::move(mask));
  return Var<T>::op(std::move(out), {a}, [m](const Var<T>& g, const std::vector<char>&) {
    return std::vector<Var<T>>{mul_const(g, *m)};
  });
}

template <typename T>
Var<T> leaky_relu(const Var<T>& a, T slope) {
  Tensor<T> out = a.value();
  Tensor<T> mask(out.shape);
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    bool pos = out.data[i] > T(0);
    mask.data[i] = pos ? T(1) : slope;
    if (!pos) out.data[i] *= slope;
  }
  auto m = std::make_shared<Tensor<T>>(std::move(mask));
  return Var<T>::op(std::move(out), {a}, [m](const Var<T>& g, const std::vector<char>&) {
    return std::vector<Var<T>>{mul_const(g, *m)};
  });
}

template <typename T>
Var<T> tanh_v(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.data) v = std::tanh(v);
  return Var<T>::op(std::move(out), {a}, [a](const Var<T>& g, const std::vector<char>&) {
    Var<T> t = tanh_v(a);
    Var<T> one = Var<T>::constant(Tensor<T>(t.value().shape, T(1)));
    return std::vector<Var<T>>{mul(g, sub(one, mul(t, t)))};
  });
}

template <typename T>
Var<T> sigmoid_v(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.data) v = T(1) / (T(1) + std::exp(-v));
  return Var<T>::op(std::move(out), {a}, [a](const Var<T>& g, const std::vector<char>&) {
    Var<T> s = sigmoid_v(a);
    Var<T> one = Var<T>::constant(Tensor<T>(s.value().shape, T(1)));
    return std::vector<Var<T>>{mul(g, mul(s, sub(one, s)))};
  });
}

// ---------------------------------------------------------------------------
// Shape ops

template <typename T>
Var<T> reshape(const Var<T>& a, std::vector<std::int64_t> shape) {
  Tensor<T> out = a.value().reshaped(std::move(shape));
  auto orig = a.value().shape;
  return Var<T>::op(std::move(out), {a}, [orig](const Var<T>& g, const std::vector<char>&) {
    return std::vector<Var<T>>{reshape(g, orig)};
  });
}

template <typename T>
Var<T> slice_channels(const Var<T>& a, std::int64_t lo, std::int64_t hi);

// Channel-concatenation of NCHW tensors.
template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw ShapeError("concat_channels: no inputs");
  const auto& s0 = xs[0].value().shape;
  std::int64_t total_c = 0;
  for (const auto& x : xs) {
    const auto& s = x.value().shape;
    if (s.size() != 4 || s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3])
      throw ShapeError("concat_channels: incompatible shapes");
    total_c += s[1];
  }
  const std::int64_t n = s0[0], hw = s0[2] * s0[3];
  Tensor<T> out({n, total_c, s0[2], s0[3]});
  std::int64_t c_off = 0;
  for (const auto& x : xs) {
    const std::int64_t c = x.value().dim(1);
    for (std::int64_t i = 0; i < n; ++i)
      std::copy_n(x.value().data.data() + i * c * hw, c * hw,
                  out.data.data() + (i * total_c + c_off) * hw);
    c_off += c;
  }
  std::vector<std::int64_t> offsets;
  std::int64_t off = 0;
  for (const auto& x : xs) {
    offsets.push_back(off);
    off += x.value().dim(1);
  }
  std::vector<Var<T>> parents = xs;
  return Var<T>::op(std::move(out), std::move(parents),
                    [offsets, total_c](const Var<T>& g, const std::vector<char>& need) {
                      std::vector<Var<T>> grads(offsets.size());
                      for (std::size_t i = 0; i < offsets.size(); ++i) {
                        std::int64_t hi =
                            i + 1 < offsets.size() ? offsets[i + 1] : total_c;
                        if (need[i]) grads[i] = slice_channels(g, offsets[i], hi);
                      }
                      return grads;
                    });
}

// Embed a channel range into a zero tensor with total_c channels (adjoint of
// slice_channels).
template <typename T>
Var<T> embed_channels(const Var<T>& a, std::int64_t lo, std::int64_t total_c) {
  const auto& s = a.value().shape;
  if (s.size() != 4) throw ShapeError("embed_channels expects a 4-d tensor");
  const std::int64_t n = s[0], c = s[1], hw = s[2] * s[3];
  Tensor<T> out({n, total_c, s[2], s[3]});
  for (std::int64_t i = 0; i < n; ++i)
    std::copy_n(a.value().data.data() + i * c * hw, c * hw,
                out.data.data() + (i * total_c + lo) * hw);
  return Var<T>::op(std::move(out), {a}, [lo, c](const Var<T>& g, const std::vector<char>&) {
    return std::vector<Var<T>>{slice_channels(g, lo, lo + c)};
  });
}

template <typename T>
Var<T> slice_channels(const Var<T>& a, std::int64_t lo, std::int64_t hi) {
  const auto& s = a.value().shape;
  if (s.size() != 4) throw ShapeError("slice_channels expects a 4-d tensor");
  if (lo < 0 || hi > s[1] || lo >= hi) throw ShapeError("slice_channels: bad range");
  const std::int64_t n = s[0], c = hi - lo, total_c = s[1], hw = s[2] * s[3];
  Tensor<T> out({n, c, s[2], s[3]});
  for (std::int64_t i = 0; i < n; ++i)
    std::copy_n(a.value().data.data() + (i * total_c + lo) * hw, c * hw,
                out.data.data() + i * c * hw);
  return Var<T>::op(std::move(out), {a},
                    [lo, total_c](const Var<T>& g, const std::vector<char>&) {
                      return std::vector<Var<T>>{embed_channels(g, lo, total_c)};
                    });
}

// ---------------------------------------------------------------------------
// Broadcast / reduction pairs

// {C} broadcast over {N,C,H,W}
template <typename T>
Var<T> sum_channel(const Var<T>& a);

template <typename T>
Var<T> broadcast_channel(const Var<T>& v, std::vector<std::int64_t> shape) {
  if (v.value().rank() != 1 || shape.size() != 4 || v.value().dim(0) != shape[1])
    throw ShapeError("broadcast_channel: expected {C} against NCHW");
  Tensor<T> out(shape);
  const std::int64_t n = shape[0], c = shape[1], hw = shape[2] * shape[3];
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < c; ++j)
      std::fill_n(out.data.data() + (i * c + j) * hw, hw, v.value().data[j]);
  return Var<T>::op(std::move(out), {v}, [](const Var<T>& g, const std::vector<char>&) {
    return std::vector<Var<T>>{sum_channel(g)};
  });
}

template <typename T>
Var<T> sum_channel(const Var<T>& a) {
  const auto& s = a.value().shape;
  if (s.size() != 4) throw ShapeError("sum_channel expects a 4-d tensor");
  const std::int64_t n = s[0], c = s[1], hw = s[2] * s[3];
  Tensor<T> out({c});
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < c; ++j) {
      const T* p = a.value().data.data() + (i * c + j) * hw;
      T acc = 0;
      for (std::int64_t k = 0; k < hw; ++k) acc += p[k];
      out.data[j] += acc;
    }
  auto shape = s;
  return Var<T>::op(std::move(out), {a}, [shape](const Var<T>& g, const std::vector<char>&) {
    return std::vector<Var<T>>{broadcast_channel(g, shape)};
  });
}

template <typename T>
Var<T> add_channel(const Var<T>& a, const Var<T>& b) {
  const auto& s = a.value().shape;
  if (s.size() != 4 || b.value().rank() != 1 || b.value().dim(0) != s[1])
    throw ShapeError("add_channel: expected NCHW plus {C}");
  Tensor<T> out = a.value();
  const std::int64_t n = s[0], c = s[1], hw = s[2] * s[3];
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < c; ++j) {
      T* p = out.data.data() + (i * c + j) * hw;
      const T v = b.value().data[j];
      for (std::int64_t k = 0; k < hw; ++k) p[k] += v;
    }
  return Var<T>::op(std::move(out), {a, b}, [](const Var<T>& g, const std::vector<char>& need) {
    return std::vector<Var<T>>{need[0] ? g : Var<T>{}, need[1] ? sum_channel(g) : Var<T>{}};
  });
}

template <typename T>
Var<T> mul_channel(const Var<T>& a, const Var<T>& b) {
  const auto& s = a.value().shape;
  if (s.size() != 4 || b.value().rank() != 1 || b.value().dim(0) != s[1])
    throw ShapeError("mul_channel: expected NCHW plus {C}");
  Tensor<T> out = a.value();
  const std::int64_t n = s[0], c = s[1], hw = s[2] * s[3];
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < c; ++j) {
      T* p = out.data.data() + (i * c + j) * hw;
      const T v = b.value().data[j];
      for (std::int64_t k = 0; k < hw; ++k) p[k] *= v;
    }
  return Var<T>::op(std::move(out), {a, b}, [a, b](const Var<T>& g, const std::vector<char>& need) {
    return std::vector<Var<T>>{need[0] ? mul_channel(g, b) : Var<T>{},
                               need[1] ? sum_channel(mul(g, a)) : Var<T>{}};
  });
}

// {N} broadcast over the non-batch dims
template <typename T>
Var<T> sum_sample(const Var<T>& a);

template <typename T>
Var<T> broadcast_sample(const Var<T>& v, std::vector<std::int64_t> shape) {
  if (v.value().rank() != 1 || shape.empty() || v.value().dim(0) != shape[0])
    throw ShapeError("broadcast_sample: expected {N} against batch tensor");
  Tensor<T> out(shape);
  const std::int64_t n = shape[0], inner = out.numel() / n;
  for (std::int64_t i = 0; i < n; ++i)
    std::fill_n(out.data.data() + i * inner, inner, v.value().data[i]);
  return Var<T>::op(std::move(out), {v}, [](const Var<T>& g, const std::vector<char>&) {
    return std::vector<Var<T>>{sum_sample(g)};
  });
}

template <typename T>
Var<T> sum_sample(const Var<T>& a) {
  const auto& s = a.value().shape;
  if (s.empty()) throw ShapeError("sum_sample expects a batch tensor");
  const std::int64_t n = s[0], inner = a.value().numel() / n;
  Tensor<T> out({n});
  for (std::int64_t i = 0; i < n; ++i) {
    const T* p = a.value().data.data() + i * inner;
    T acc = 0;
    for (std::int64_t k = 0; k < inner; ++k) acc += p[k];
    out.data[i] = acc;
  }
  auto shape = s;
  return Var<T>::op(std::move(out), {a}, [shape](const Var<T>& g, const std::vector<char>&) {
    return std::vector<Var<T>>{broadcast_sample(g, shape)};
  });
}

template <typename T>
Var<T> mul_sample(const Var<T>& a, const Var<T>& b) {
  const auto& s = a.value().shape;
  if (b.value().rank() != 1 || s.empty() || b.value().dim(0) != s[0])
    throw ShapeError("mul_sample: expected batch tensor plus {N}");
  Tensor<T> out = a.value();
  const std::int64_t n = s[0], inner = out.numel() / n;
  for (std::int64_t i = 0; i < n; ++i) {
    T* p = out.data.data() + i * inner;
    const T v = b.value().data[i];
    for (std::int64_t k = 0; k < inner; ++k) p[k] *= v;
  }
  return Var<T>::op(std::move(out), {a, b}, [a, b](const Var<T>& g, const std::vector<char>& need) {
    return std::vector<Var<T>>{need[0] ? mul_sample(g, b) : Var<T>{},
                               need[1] ? sum_sample(mul(g, a)) : Var<T>{}};
  });
}

// scalar {1} reductions
template <typename T>
Var<T> sum_all(const Var<T>& a);

template <typename T>
Var<T> broadcast_all(const Var<T>& v, std::vector<std::int64_t> shape) {
  if (v.value().numel() != 1) throw ShapeError("broadcast_all expects a scalar");
  Tensor<T> out(shape, v.value().data[0]);
  return Var<T>::op(std::move(out), {v}, [](const Var<T>& g, const std::vector<char>&) {
    return std::vector<Var<T>>{sum_all(g)};
  });
}

template <typename T>
Var<T> sum_all(const Var<T>& a) {
  Tensor<T> out({1});
  T acc = 0;
  for (T v : a.value().data) acc += v;
  out.data[0] = acc;
  auto shape = a.value().shape;
  return Var<T>::op(std::move(out), {a}, [shape](const Var<T>& g, const std::vector<char>&) {
    return std::vector<Var<T>>{broadcast_all(g, shape)};
  });
}

template <typename T>
Var<T> mean_all(const Var<T>& a) {
  return scale(sum_all(a), T(1) / static_cast<T>(a.value().numel()));
}

// ---------------------------------------------------------------------------
// Matmul

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b, bool trans_a = false, bool trans_b = false) {
  if (a.value().rank() != 2 || b.value().rank() != 2) throw ShapeError("matmul expects matrices");
  const std::int64_t m = trans_a ? a.value().dim(1) : a.value().dim(0);
  const std::int64_t k = trans_a ? a.value().dim(0) : a.value().dim(1);
  const std::int64_t kb = trans_b ? b.value().dim(1) : b.value().dim(0);
  const std::int64_t n = trans_b ? b.value().dim(0) : b.value().dim(1);
  if (k != kb)
    throw ShapeError("matmul: inner dimensions differ, " + a.value().shape_str() + " vs " +
                     b.value().shape_str());
  Tensor<T> out({m, n});
  gemm(a.value().data.data(), b.value().data.data(), out.data.data(), m, k, n, trans_a, trans_b);
  return Var<T>::op(std::move(out), {a, b},
                    [a, b, trans_a, trans_b](const Var<T>& g, const std::vector<char>& need) {
                      std::vector<Var<T>> grads(2);
                      if (need[0])
                        grads[0] = trans_a ? matmul(b, g, trans_b, true)
                                           : matmul(g, b, false, !trans_b);
                      if (need[1])
                        grads[1] = trans_b ? matmul(g, a, true, trans_a)
                                           : matmul(a, g, !trans_a, false);
                      return grads;
                    });
}

// ---------------------------------------------------------------------------
// Convolution triple; conv_input_grad doubles as the transposed-conv forward.

template <typename T>
Var<T> conv2d_op(const Var<T>& x, const Var<T>& w, int stride, int pad);
template <typename T>
Var<T> conv_input_grad(const Var<T>& dy, const Var<T>& w, std::int64_t in_h, std::int64_t in_w,
                       int stride, int pad);
template <typename T>
Var<T> conv_weight_grad(const Var<T>& x, const Var<T>& dy, std::int64_t k_h, std::int64_t k_w,
                        int stride, int pad);

template <typename T>
Var<T> conv2d_op(const Var<T>& x, const Var<T>& w, int stride, int pad) {
  Tensor<T> out = conv2d_fwd(x.value(), w.value(), stride, pad);
  const std::int64_t in_h = x.value().dim(2), in_w = x.value().dim(3);
  const std::int64_t k_h = w.value().dim(2), k_w = w.value().dim(3);
  return Var<T>::op(
      std::move(out), {x, w},
      [x, w, stride, pad, in_h, in_w, k_h, k_w](const Var<T>& g, const std::vector<char>& need) {
        std::vector<Var<T>> grads(2);
        if (need[0]) grads[0] = conv_input_grad(g, w, in_h, in_w, stride, pad);
        if (need[1]) grads[1] = conv_weight_grad(x, g, k_h, k_w, stride, pad);
        return grads;
      });
}

template <typename T>
Var<T> conv_input_grad(const Var<T>& dy, const Var<T>& w, std::int64_t in_h, std::int64_t in_w,
                       int stride, int pad) {
  Tensor<T> out = conv2d_dx(dy.value(), w.value(), in_h, in_w, stride, pad);
  const std::int64_t k_h = w.value().dim(2), k_w = w.value().dim(3);
  return Var<T>::op(std::move(out), {dy, w},
                    [dy, w, stride, pad, k_h, k_w](const Var<T>& g, const std::vector<char>& need) {
                      std::vector<Var<T>> grads(2);
                      if (need[0]) grads[0] = conv2d_op(g, w, stride, pad);
                      if (need[1]) grads[1] = conv_weight_grad(g, dy, k_h, k_w, stride, pad);
                      return grads;
                    });
}

template <typename T>
Var<T> conv_weight_grad(const Var<T>& x, const Var<T>& dy, std::int64_t k_h, std::int64_t k_w,
                        int stride, int pad) {
  Tensor<T> out = conv2d_dw(x.value(), dy.value(), k_h, k_w, stride, pad);
  const std::int64_t in_h = x.value().dim(2), in_w = x.value().dim(3);
  return Var<T>::op(std::move(out), {x, dy},
                    [x, dy, stride, pad, in_h, in_w](const Var<T>& g, const std::vector<char>& need) {
                      std::vector<Var<T>> grads(2);
                      if (need[0]) grads[0] = conv_input_grad(dy, g, in_h, in_w, stride, pad);
                      if (need[1]) grads[1] = conv2d_op(x, g, stride, pad);
                      return grads;
                    });
}

// ---------------------------------------------------------------------------
// Pooling

template <typename T>
Var<T> avg_pool_op(const Var<T>& x, int k, int s);

template <typename T>
Var<T> avg_unpool_op(const Var<T>& g, std::int64_t h, std::int64_t w, int k, int s) {
  Tensor<T> out = avg_pool_bwd(g.value(), h, w, k, s);
  return Var<T>::op(std::move(out), {g}, [k, s](const Var<T>& gg, const std::vector<char>&) {
    return std::vector<Var<T>>{avg_pool_op(gg, k, s)};
  });
}

template <typename T>
Var<T> avg_pool_op(const Var<T>& x, int k, int s) {
  Tensor<T> out = avg_pool_fwd(x.value(), k, s);
  const std::int64_t h = x.value().dim(2), w = x.value().dim(3);
  return Var<T>::op(std::move(out), {x}, [h, w, k, s](const Var<T>& g, const std::vector<char>&) {
    return std::vector<Var<T>>{avg_unpool_op(g, h, w, k, s)};
  });
}

template <typename T>
Var<T> global_avg_pool_expand(const Var<T>& g, std::int64_t h, std::int64_t w);

// {N,C,H,W} -> {N,C}
template <typename T>
Var<T> global_avg_pool_op(const Var<T>& x) {
  const auto& s = x.value().shape;
  if (s.size() != 4) throw ShapeError("global_avg_pool expects a 4-d tensor");
  const std::int64_t n = s[0], c = s[1], hw = s[2] * s[3];
  Tensor<T> out({n, c});
  for (std::int64_t i = 0; i < n * c; ++i) {
    const T* p = x.value().data.data() + i * hw;
    T acc = 0;
    for (std::int64_t k = 0; k < hw; ++k) acc += p[k];
    out.data[i] = acc / static_cast<T>(hw);
  }
  const std::int64_t h = s[2], w = s[3];
  return Var<T>::op(std::move(out), {x}, [h, w](const Var<T>& g, const std::vector<char>&) {
    return std::vector<Var<T>>{global_avg_pool_expand(g, h, w)};
  });
}

// {N,C} -> {N,C,H,W}, spreading v/(H*W); adjoint of global_avg_pool.
template <typename T>
Var<T> global_avg_pool_expand(const Var<T>& g, std::int64_t h, std::int64_t w) {
  const auto& s = g.value().shape;
  if (s.size() != 2) throw ShapeError("global_avg_pool_expand expects {N,C}");
  const std::int64_t n = s[0], c = s[1], hw = h * w;
  Tensor<T> out({n, c, h, w});
  for (std::int64_t i = 0; i < n * c; ++i)
    std::fill_n(out.data.data() + i * hw, hw, g.value().data[i] / static_cast<T>(hw));
  return Var<T>::op(std::move(out), {g}, [](const Var<T>& gg, const std::vector<char>&) {
    return std::vector<Var<T>>{global_avg_pool_op(gg)};
  });
}

// ---------------------------------------------------------------------------
// Backward driver

template <typename T>
class Gradients {
public:
  void set(const Node<T>* n, Var<T> g) { map_[n] = std::move(g); }

  const Var<T>* find(const Var<T>& v) const {
    auto it = map_.find(v.node());
    return it == map_.end() ? nullptr : &it->second;
  }

  // Gradient tensor for v, or zeros when v did not influence the root.
  Tensor<T> tensor(const Var<T>& v) const {
    auto it = map_.find(v.node());
    if (it == map_.end()) return Tensor<T>(v.value().shape);
    return it->second.value();
  }

  // Gradient as a Var for further differentiation; throws if absent.
  Var<T> var(const Var<T>& v) const {
    auto it = map_.find(v.node());
    if (it == map_.end()) throw NumericError("no gradient recorded for requested node");
    return it->second;
  }

  bool contains(const Var<T>& v) const { return map_.count(v.node()) > 0; }

private:
  std::unordered_map<const Node<T>*, Var<T>> map_;
};

// Reverse-mode sweep from a scalar root. Gradients are returned for every
// node that both influences the root and can reach one of `targets`; the
// sweep itself records onto the tape, so returned gradients remain
// differentiable (needed for the gradient penalty).
template <typename T>
Gradients<T> backward(const Var<T>& root, const std::vector<Var<T>>& targets) {
  if (root.value().numel() != 1) throw ShapeError("backward expects a scalar root");
  if (!root.requires_grad())
    throw NumericError("backward: root does not depend on any differentiable input");

  std::unordered_set<const Node<T>*> target_set;
  for (const auto& t : targets) target_set.insert(t.node());

  // needed(n): n can reach a target through parent edges.
  std::unordered_map<const Node<T>*, char> needed;
  std::function<bool(const Node<T>*)> can_reach = [&](const Node<T>* n) -> bool {
    auto it = needed.find(n);
    if (it != needed.end()) return it->second != 0;
    needed[n] = 0;  // guards against revisit; graph is acyclic
    bool hit = target_set.count(n) > 0;
    if (!hit)
      for (const auto& p : n->parents)
        if (p.requires_grad() && can_reach(p.node())) {
          hit = true;
          break;
        }
    needed[n] = hit ? 1 : 0;
    return hit;
  };
  if (!can_reach(root.node())) return Gradients<T>{};

  // Collect the reachable, needed subgraph.
  std::vector<Node<T>*> order;
  std::unordered_set<const Node<T>*> seen;
  std::vector<Node<T>*> stack{root.node()};
  seen.insert(root.node());
  while (!stack.empty()) {
    Node<T>* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents) {
      if (!p.requires_grad() || !can_reach(p.node())) continue;
      if (seen.insert(p.node()).second) stack.push_back(p.node());
    }
  }
  // Creation ids increase from parents to children, so descending id order is
  // a valid reverse-topological order.
  std::sort(order.begin(), order.end(),
            [](const Node<T>* a, const Node<T>* b) { return a->id > b->id; });

  std::unordered_map<const Node<T>*, Var<T>> grad;
  grad[root.node()] = Var<T>::constant(Tensor<T>(root.value().shape, T(1)));

  Gradients<T> out;
  for (Node<T>* n : order) {
    auto git = grad.find(n);
    if (git == grad.end()) continue;  // no path contributed (pruned)
    Var<T> g = git->second;
    if (target_set.count(n)) out.set(n, g);
    if (!n->vjp) continue;
    std::vector<char> need(n->parents.size(), 0);
    bool any = false;
    for (std::size_t i = 0; i < n->parents.size(); ++i) {
      const auto& p = n->parents[i];
      need[i] = p.requires_grad() && can_reach(p.node()) ? 1 : 0;
      any = any || need[i];
    }
    if (!any) continue;
    std::vector<Var<T>> pg = n->vjp(g, need);
    for (std::size_t i = 0; i < n->parents.size(); ++i) {
      if (!need[i] || !pg[i].defined()) continue;
      const Node<T>* pn = n->parents[i].node();
      auto it = grad.find(pn);
      if (it == grad.end())
        grad.emplace(pn, pg[i]);
      else
        it->second = add(it->second, pg[i]);
    }
  }
  return out;
}

}  // namespace opgfpad::netcore
