#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>
#include <zlib.h>

#include "opgfpad/autodiff.hpp"
#include "opgfpad/core.hpp"
#include "opgfpad/errors.hpp"
#include "opgfpad/rng.hpp"
#include "opgfpad/tensor.hpp"

// Layer graphs, parameter containers, the Adam optimizer and checkpoint
// persistence shared by the generator, critic and classifier models.

namespace opgfpad::netcore {

enum class LayerKind {
  input,
  conv2d,
  transposed_conv2d,
  dense,
  batch_norm,
  relu,
  leaky_relu,
  tanh,
  sigmoid,
  dropout,
  avg_pool,
  global_avg_pool,
  concat,
  reshape,  // plumbing between dense and spatial stages
};

inline std::string to_string(LayerKind k) {
  switch (k) {
    case LayerKind::input: return "input";
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::transposed_conv2d: return "transposed_conv2d";
    case LayerKind::dense: return "dense";
    case LayerKind::batch_norm: return "batch_norm";
    case LayerKind::relu: return "relu";
    case LayerKind::leaky_relu: return "leaky_relu";
    case LayerKind::tanh: return "tanh";
    case LayerKind::sigmoid: return "sigmoid";
    case LayerKind::dropout: return "dropout";
    case LayerKind::avg_pool: return "avg_pool";
    case LayerKind::global_avg_pool: return "global_avg_pool";
    case LayerKind::concat: return "concat";
    case LayerKind::reshape: return "reshape";
  }
  return "?";
}

enum class InitKind { he, xavier };

struct LayerSpec {
  LayerKind kind = LayerKind::input;
  std::string name;
  std::vector<int> inputs;  // indices of producing layers; empty = network input
  std::int64_t channels = 0;  // out channels (conv) or units (dense)
  int kernel = 0;
  int stride = 1;
  int pad = 0;
  double rate = 0.0;   // dropout
  double slope = 0.2;  // leaky relu
  std::vector<std::int64_t> target_shape;  // reshape, per-sample
  InitKind init = InitKind::he;
};

// A model is a topologically ordered list of layers over one input.
struct Network {
  std::vector<std::int64_t> input_shape;  // per-sample, e.g. {1, 96, 96} or {128}
  std::vector<LayerSpec> layers;

  int add(LayerSpec l) {
    for (int i : l.inputs)
      if (i >= static_cast<int>(layers.size()))
        throw ShapeError("layer '" + l.name + "' references a later layer");
    if (l.name.empty()) l.name = to_string(l.kind) + "_" + std::to_string(layers.size());
    layers.push_back(std::move(l));
    return static_cast<int>(layers.size()) - 1;
  }

  // Convenience: append a layer fed by the previous one.
  int chain(LayerSpec l) {
    if (!layers.empty()) l.inputs = {static_cast<int>(layers.size()) - 1};
    return add(std::move(l));
  }
};

// Per-sample output shape of every layer; throws ShapeError (naming the
// layer) when shapes do not compose.
inline std::vector<std::vector<std::int64_t>> infer_shapes(const Network& net) {
  std::vector<std::vector<std::int64_t>> shapes(net.layers.size());
  auto input_of = [&](const LayerSpec& l, int i) -> const std::vector<std::int64_t>& {
    return l.inputs.empty() || l.inputs[i] < 0 ? net.input_shape
                                               : shapes[static_cast<std::size_t>(l.inputs[i])];
  };
  for (std::size_t li = 0; li < net.layers.size(); ++li) {
    const LayerSpec& l = net.layers[li];
    auto fail = [&](const std::string& why) {
      throw ShapeError("layer '" + l.name + "': " + why);
    };
    const auto& in = input_of(l, 0);
    switch (l.kind) {
      case LayerKind::conv2d: {
        if (in.size() != 3) fail("conv2d expects CHW input");
        ConvGeom g = conv_geom(in[0], in[1], in[2], l.channels, l.kernel, l.kernel, l.stride, l.pad);
        shapes[li] = {g.out_c, g.out_h, g.out_w};
        break;
      }
      case LayerKind::transposed_conv2d: {
        if (in.size() != 3) fail("transposed_conv2d expects CHW input");
        std::int64_t oh = (in[1] - 1) * l.stride - 2 * l.pad + l.kernel;
        std::int64_t ow = (in[2] - 1) * l.stride - 2 * l.pad + l.kernel;
        if (oh <= 0 || ow <= 0) fail("empty output");
        shapes[li] = {l.channels, oh, ow};
        break;
      }
      case LayerKind::dense: {
        std::int64_t f = 1;
        for (auto d : in) f *= d;
        (void)f;
        shapes[li] = {l.channels};
        break;
      }
      case LayerKind::batch_norm:
      case LayerKind::relu:
      case LayerKind::leaky_relu:
      case LayerKind::tanh:
      case LayerKind::sigmoid:
      case LayerKind::dropout:
        shapes[li] = in;
        break;
      case LayerKind::avg_pool: {
        if (in.size() != 3) fail("avg_pool expects CHW input");
        std::int64_t oh = (in[1] - l.kernel) / l.stride + 1;
        std::int64_t ow = (in[2] - l.kernel) / l.stride + 1;
        if (oh <= 0 || ow <= 0) fail("pool window larger than input");
        shapes[li] = {in[0], oh, ow};
        break;
      }
      case LayerKind::global_avg_pool:
        if (in.size() != 3) fail("global_avg_pool expects CHW input");
        shapes[li] = {in[0]};
        break;
      case LayerKind::concat: {
        if (l.inputs.size() < 2) fail("concat needs at least two inputs");
        std::int64_t c = 0;
        for (std::size_t i = 0; i < l.inputs.size(); ++i) {
          const auto& s = input_of(l, static_cast<int>(i));
          if (s.size() != 3 || s[1] != in[1] || s[2] != in[2]) fail("concat inputs disagree");
          c += s[0];
        }
        shapes[li] = {c, in[1], in[2]};
        break;
      }
      case LayerKind::reshape: {
        std::int64_t a = 1, b = 1;
        for (auto d : in) a *= d;
        for (auto d : l.target_shape) b *= d;
        if (a != b) fail("reshape changes element count");
        shapes[li] = l.target_shape;
        break;
      }
      case LayerKind::input:
        shapes[li] = in;
        break;
    }
  }
  return shapes;
}

// ---------------------------------------------------------------------------
// Parameters

template <typename T>
struct ModelParams {
  std::map<std::string, Tensor<T>> values;
  std::set<std::string> buffers;  // batch-norm running statistics

  bool is_buffer(const std::string& n) const { return buffers.count(n) > 0; }

  std::vector<std::string> trainable_names() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : values)
      if (!buffers.count(k)) out.push_back(k);
    return out;
  }

  bool all_finite() const {
    for (const auto& [k, v] : values)
      if (!v.all_finite()) return false;
    return true;
  }

  template <typename U>
  ModelParams<U> cast() const {
    ModelParams<U> out;
    out.buffers = buffers;
    for (const auto& [k, v] : values) {
      Tensor<U> t(v.shape);
      for (std::size_t i = 0; i < v.data.size(); ++i) t.data[i] = static_cast<U>(v.data[i]);
      out.values.emplace(k, std::move(t));
    }
    return out;
  }
};

template <typename T>
Tensor<T> random_normal(const std::vector<std::int64_t>& shape, T stddev, SeededRng& rng) {
  Tensor<T> t(shape);
  for (auto& v : t.data) v = static_cast<T>(rng.normal(0.0, static_cast<double>(stddev)));
  return t;
}

// He-normal for layers feeding rectifiers, Xavier for saturating outputs
// (models are trained from scratch; the builders pick the rule per layer).
template <typename T>
ModelParams<T> init_params(const Network& net, SeededRng& rng) {
  auto shapes = infer_shapes(net);
  ModelParams<T> p;
  auto input_shape = [&](const LayerSpec& l) -> const std::vector<std::int64_t>& {
    return l.inputs.empty() || l.inputs[0] < 0 ? net.input_shape
                                               : shapes[static_cast<std::size_t>(l.inputs[0])];
  };
  for (const LayerSpec& l : net.layers) {
    const auto& in = input_shape(l);
    switch (l.kind) {
      case LayerKind::conv2d: {
        std::int64_t fan_in = in[0] * l.kernel * l.kernel;
        std::int64_t fan_out = l.channels * l.kernel * l.kernel;
        T std = l.init == InitKind::he ? std::sqrt(T(2) / fan_in)
                                       : std::sqrt(T(2) / (fan_in + fan_out));
        p.values.emplace(l.name + ".w",
                         random_normal<T>({l.channels, in[0], l.kernel, l.kernel}, std, rng));
        p.values.emplace(l.name + ".b", Tensor<T>({l.channels}));
        break;
      }
      case LayerKind::transposed_conv2d: {
        // Weight layout {IC, OC, K, K}: the conv it transposes maps OC -> IC.
        std::int64_t fan_in = in[0] * l.kernel * l.kernel;
        std::int64_t fan_out = l.channels * l.kernel * l.kernel;
        T std = l.init == InitKind::he ? std::sqrt(T(2) / fan_in)
                                       : std::sqrt(T(2) / (fan_in + fan_out));
        p.values.emplace(l.name + ".w",
                         random_normal<T>({in[0], l.channels, l.kernel, l.kernel}, std, rng));
        p.values.emplace(l.name + ".b", Tensor<T>({l.channels}));
        break;
      }
      case LayerKind::dense: {
        std::int64_t fan_in = 1;
        for (auto d : in) fan_in *= d;
        T std = l.init == InitKind::he ? std::sqrt(T(2) / fan_in)
                                       : std::sqrt(T(2) / (fan_in + l.channels));
        p.values.emplace(l.name + ".w", random_normal<T>({fan_in, l.channels}, std, rng));
        p.values.emplace(l.name + ".b", Tensor<T>({l.channels}));
        break;
      }
      case LayerKind::batch_norm: {
        std::int64_t c = in[0];  // channels for CHW, features for {F}
        p.values.emplace(l.name + ".gamma", Tensor<T>({c}, T(1)));
        p.values.emplace(l.name + ".beta", Tensor<T>({c}));
        p.values.emplace(l.name + ".running_mean", Tensor<T>({c}));
        p.values.emplace(l.name + ".running_var", Tensor<T>({c}, T(1)));
        p.buffers.insert(l.name + ".running_mean");
        p.buffers.insert(l.name + ".running_var");
        break;
      }
      default:
        break;
    }
  }
  return p;
}

// ---------------------------------------------------------------------------
// Forward interpreter

template <typename T>
struct BoundParams {
  std::map<std::string, Var<T>> vars;

  const Var<T>& at(const std::string& n) const {
    auto it = vars.find(n);
    if (it == vars.end()) throw ShapeError("missing parameter '" + n + "'");
    return it->second;
  }
};

// Leaf Vars for training (gradients tracked) ...
template <typename T>
BoundParams<T> bind_trainable(const ModelParams<T>& p) {
  BoundParams<T> bp;
  for (const auto& [k, v] : p.values)
    if (!p.is_buffer(k)) bp.vars.emplace(k, Var<T>::leaf(v));
  return bp;
}

// ... constants for inference (no tape bookkeeping).
template <typename T>
BoundParams<T> bind_const(const ModelParams<T>& p) {
  BoundParams<T> bp;
  for (const auto& [k, v] : p.values)
    if (!p.is_buffer(k)) bp.vars.emplace(k, Var<T>::constant(v));
  return bp;
}

inline constexpr double kBnEps = 1e-5;
inline constexpr double kBnMomentum = 0.9;

namespace detail {

template <typename T>
Var<T> dense_fwd(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  Var<T> x2 = x;
  if (x.value().rank() != 2) {
    std::int64_t n = x.value().dim(0);
    x2 = reshape(x, {n, x.value().numel() / n});
  }
  Var<T> y = matmul(x2, w);
  const std::int64_t n = y.value().dim(0), u = y.value().dim(1);
  return reshape(add_channel(reshape(y, {n, u, 1, 1}), b), {n, u});
}

// Batch statistics in training mode (and a running-stat update); running
// statistics in inference mode, where the layer is a fixed affine map.
template <typename T>
Var<T> batch_norm_fwd(const Var<T>& x4, const Var<T>& gamma, const Var<T>& beta,
                      Tensor<T>& running_mean, Tensor<T>& running_var, bool training) {
  const auto& s = x4.value().shape;
  const T count = static_cast<T>(s[0] * s[2] * s[3]);
  if (training) {
    Var<T> mean = scale(sum_channel(x4), T(1) / count);
    Var<T> centered = sub(x4, broadcast_channel(mean, s));
    Var<T> var = scale(sum_channel(mul(centered, centered)), T(1) / count);
    Var<T> inv_std = reciprocal(sqrt_v(add_scalar(var, static_cast<T>(kBnEps))));
    Var<T> norm = mul_channel(centered, inv_std);
    for (std::size_t i = 0; i < running_mean.data.size(); ++i) {
      running_mean.data[i] = static_cast<T>(kBnMomentum) * running_mean.data[i] +
                             (T(1) - static_cast<T>(kBnMomentum)) * mean.value().data[i];
      running_var.data[i] = static_cast<T>(kBnMomentum) * running_var.data[i] +
                            (T(1) - static_cast<T>(kBnMomentum)) * var.value().data[i];
    }
    return add_channel(mul_channel(norm, gamma), beta);
  }
  Tensor<T> inv_std(running_var.shape);
  for (std::size_t i = 0; i < inv_std.data.size(); ++i)
    inv_std.data[i] = T(1) / std::sqrt(running_var.data[i] + static_cast<T>(kBnEps));
  Var<T> scale_c = mul(gamma, Var<T>::constant(inv_std));
  Var<T> shift = sub(beta, mul(Var<T>::constant(running_mean), scale_c));
  return add_channel(mul_channel(x4, scale_c), shift);
}

}  // namespace detail

// Runs the graph on a batch. Batch-norm buffers in `state` are updated when
// training; dropout draws from `rng` (required only when a dropout layer has
// a positive rate and training is on).
template <typename T>
Var<T> forward(const Network& net, const BoundParams<T>& bp, ModelParams<T>& state,
               const Var<T>& input, bool training, SeededRng* rng = nullptr) {
  std::vector<Var<T>> outs(net.layers.size());
  auto arg = [&](const LayerSpec& l, std::size_t i) -> const Var<T>& {
    return (l.inputs.empty() || l.inputs[i] < 0) ? input
                                                 : outs[static_cast<std::size_t>(l.inputs[i])];
  };
  for (std::size_t li = 0; li < net.layers.size(); ++li) {
    const LayerSpec& l = net.layers[li];
    const Var<T>& x = arg(l, 0);
    try {
      switch (l.kind) {
        case LayerKind::conv2d:
          outs[li] = add_channel(conv2d_op(x, bp.at(l.name + ".w"), l.stride, l.pad),
                                 bp.at(l.name + ".b"));
          break;
        case LayerKind::transposed_conv2d: {
          const auto& s = x.value().shape;
          std::int64_t oh = (s[2] - 1) * l.stride - 2 * l.pad + l.kernel;
          std::int64_t ow = (s[3] - 1) * l.stride - 2 * l.pad + l.kernel;
          outs[li] = add_channel(conv_input_grad(x, bp.at(l.name + ".w"), oh, ow, l.stride, l.pad),
                                 bp.at(l.name + ".b"));
          break;
        }
        case LayerKind::dense:
          outs[li] = detail::dense_fwd(x, bp.at(l.name + ".w"), bp.at(l.name + ".b"));
          break;
        case LayerKind::batch_norm: {
          Var<T> x4 = x;
          bool flat = x.value().rank() == 2;
          if (flat) {
            std::int64_t n = x.value().dim(0), f = x.value().dim(1);
            x4 = reshape(x, {n, f, 1, 1});
          }
          Var<T> y = detail::batch_norm_fwd(x4, bp.at(l.name + ".gamma"), bp.at(l.name + ".beta"),
                                            state.values.at(l.name + ".running_mean"),
                                            state.values.at(l.name + ".running_var"), training);
          outs[li] = flat ? reshape(y, x.value().shape) : y;
          break;
        }
        case LayerKind::relu:
          outs[li] = relu(x);
          break;
        case LayerKind::leaky_relu:
          outs[li] = leaky_relu(x, static_cast<T>(l.slope));
          break;
        case LayerKind::tanh:
          outs[li] = tanh_v(x);
          break;
        case LayerKind::sigmoid:
          outs[li] = sigmoid_v(x);
          break;
        case LayerKind::dropout: {
          if (!training || l.rate <= 0.0) {
            outs[li] = x;
            break;
          }
          if (!rng) throw ConfigError("dropout in training mode needs an RNG");
          Tensor<T> mask(x.value().shape);
          const T keep = T(1) - static_cast<T>(l.rate);
          for (auto& v : mask.data) v = rng->uniform() < l.rate ? T(0) : T(1) / keep;
          outs[li] = mul_const(x, std::move(mask));
          break;
        }
        case LayerKind::avg_pool:
          outs[li] = avg_pool_op(x, l.kernel, l.stride);
          break;
        case LayerKind::global_avg_pool:
          outs[li] = global_avg_pool_op(x);
          break;
        case LayerKind::concat: {
          std::vector<Var<T>> xs;
          for (std::size_t i = 0; i < l.inputs.size(); ++i) xs.push_back(arg(l, i));
          outs[li] = concat_channels(xs);
          break;
        }
        case LayerKind::reshape: {
          std::vector<std::int64_t> s{x.value().dim(0)};
          s.insert(s.end(), l.target_shape.begin(), l.target_shape.end());
          outs[li] = reshape(x, std::move(s));
          break;
        }
        case LayerKind::input:
          outs[li] = x;
          break;
      }
    } catch (const ShapeError& e) {
      throw ShapeError("layer '" + l.name + "': " + e.what());
    }
  }
  return outs.back();
}

// ---------------------------------------------------------------------------
// Adam with decoupled weight decay

template <typename T>
struct OptimizerState {
  std::map<std::string, Tensor<T>> m, v;
  std::int64_t step = 0;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;

  static OptimizerState for_params(const ModelParams<T>& p, double lr, double weight_decay,
                                   double beta1 = 0.9, double beta2 = 0.999) {
    OptimizerState st;
    st.lr = lr;
    st.weight_decay = weight_decay;
    st.beta1 = beta1;
    st.beta2 = beta2;
    for (const auto& name : p.trainable_names()) {
      st.m.emplace(name, Tensor<T>(p.values.at(name).shape));
      st.v.emplace(name, Tensor<T>(p.values.at(name).shape));
    }
    return st;
  }
};

// One Adam update. Gradients must be finite; parameters are checked after the
// step so a diverging run aborts instead of silently poisoning checkpoints.
template <typename T>
void adam_step(OptimizerState<T>& st, ModelParams<T>& params,
               const std::map<std::string, Tensor<T>>& grads) {
  for (const auto& [name, g] : grads) {
    if (!g.all_finite()) throw NumericError("non-finite gradient for '" + name + "'");
  }
  ++st.step;
  const T bc1 = T(1) - static_cast<T>(std::pow(st.beta1, static_cast<double>(st.step)));
  const T bc2 = T(1) - static_cast<T>(std::pow(st.beta2, static_cast<double>(st.step)));
  for (auto& [name, m] : st.m) {
    auto git = grads.find(name);
    if (git == grads.end()) continue;  // param untouched this step
    const Tensor<T>& g = git->second;
    Tensor<T>& v = st.v.at(name);
    Tensor<T>& p = params.values.at(name);
    const T b1 = static_cast<T>(st.beta1), b2 = static_cast<T>(st.beta2);
    const T lr = static_cast<T>(st.lr), wd = static_cast<T>(st.weight_decay);
    const T eps = static_cast<T>(st.eps);
    for (std::size_t i = 0; i < p.data.size(); ++i) {
      m.data[i] = b1 * m.data[i] + (T(1) - b1) * g.data[i];
      v.data[i] = b2 * v.data[i] + (T(1) - b2) * g.data[i] * g.data[i];
      T mhat = m.data[i] / bc1;
      T vhat = v.data[i] / bc2;
      p.data[i] -= lr * mhat / (std::sqrt(vhat) + eps) + lr * wd * p.data[i];
    }
    if (!p.all_finite()) throw NumericError("non-finite parameter '" + name + "' after step");
  }
}

// ---------------------------------------------------------------------------
// Checkpoints: magic + version + config hash + JSON meta + shape table +
// little-endian float32 payloads + CRC32 trailer.

inline constexpr char kCkptMagic[8] = {'O', 'P', 'G', 'F', 'P', 'A', 'D', 'C'};
inline constexpr std::uint32_t kCkptVersion = 1;

namespace detail {

template <typename V>
void put(std::string& buf, V v) {
  buf.append(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V take(const std::string& buf, std::size_t& off) {
  if (off + sizeof(V) > buf.size()) throw IntegrityError("checkpoint truncated");
  V v;
  std::memcpy(&v, buf.data() + off, sizeof(V));
  off += sizeof(V);
  return v;
}

}  // namespace detail

inline void save_checkpoint(const ModelParams<float>& params, const RunConfig& cfg,
                            const std::map<std::string, std::string>& tags,
                            const std::filesystem::path& path) {
  std::string buf;
  buf.append(kCkptMagic, sizeof(kCkptMagic));
  detail::put(buf, kCkptVersion);
  detail::put(buf, cfg.compat_hash());

  json meta;
  meta["config"] = cfg;
  meta["tags"] = tags;
  std::string meta_str = meta.dump();
  detail::put(buf, static_cast<std::uint32_t>(meta_str.size()));
  buf += meta_str;

  detail::put(buf, static_cast<std::uint32_t>(params.values.size()));
  for (const auto& [name, t] : params.values) {
    detail::put(buf, static_cast<std::uint16_t>(name.size()));
    buf += name;
    detail::put(buf, static_cast<std::uint8_t>(params.is_buffer(name) ? 1 : 0));
    detail::put(buf, static_cast<std::uint8_t>(t.shape.size()));
    for (auto d : t.shape) detail::put(buf, static_cast<std::int64_t>(d));
  }
  for (const auto& [name, t] : params.values)
    buf.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * sizeof(float));

  std::uint32_t crc =
      ::crc32(0, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(buf.size()));
  detail::put(buf, crc);

  std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint '" + path.string() + "'");
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

struct Checkpoint {
  ModelParams<float> params;
  RunConfig config;
  std::map<std::string, std::string> tags;
};

// `expected` enables the compatibility gate; pass force=true to load anyway.
inline Checkpoint load_checkpoint(const std::filesystem::path& path,
                                  const RunConfig* expected = nullptr, bool force = false) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path.string() + "'");
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < sizeof(kCkptMagic) + 4 + 8 + 4 + 4)
    throw IntegrityError("checkpoint too small: '" + path.string() + "'");

  std::uint32_t stored_crc;
  std::memcpy(&stored_crc, buf.data() + buf.size() - 4, 4);
  std::uint32_t crc = ::crc32(0, reinterpret_cast<const Bytef*>(buf.data()),
                              static_cast<uInt>(buf.size() - 4));
  if (crc != stored_crc)
    throw IntegrityError("checkpoint CRC mismatch: '" + path.string() + "'");

  std::size_t off = 0;
  if (std::memcmp(buf.data(), kCkptMagic, sizeof(kCkptMagic)) != 0)
    throw IntegrityError("not a checkpoint file: '" + path.string() + "'");
  off += sizeof(kCkptMagic);
  auto version = detail::take<std::uint32_t>(buf, off);
  if (version != kCkptVersion)
    throw IntegrityError("unsupported checkpoint version " + std::to_string(version));
  auto hash = detail::take<std::uint64_t>(buf, off);

  auto meta_len = detail::take<std::uint32_t>(buf, off);
  if (off + meta_len > buf.size()) throw IntegrityError("checkpoint truncated");
  json meta;
  try {
    meta = json::parse(buf.substr(off, meta_len));
  } catch (const json::exception& e) {
    throw IntegrityError(std::string("checkpoint meta unreadable: ") + e.what());
  }
  off += meta_len;

  Checkpoint ck;
  ck.config = meta.at("config").get<RunConfig>();
  ck.tags = meta.at("tags").get<std::map<std::string, std::string>>();

  if (expected && expected->compat_hash() != hash && !force)
    throw CompatibilityError(
        "checkpoint '" + path.string() + "' was written under a different configuration " +
        "(e.g. patch_size " + std::to_string(ck.config.patch_size) + " vs expected " +
        std::to_string(expected->patch_size) + "); pass force to override");

  auto count = detail::take<std::uint32_t>(buf, off);
  std::vector<std::pair<std::string, std::vector<std::int64_t>>> table;
  for (std::uint32_t i = 0; i < count; ++i) {
    auto name_len = detail::take<std::uint16_t>(buf, off);
    if (off + name_len > buf.size()) throw IntegrityError("checkpoint truncated");
    std::string name = buf.substr(off, name_len);
    off += name_len;
    auto is_buffer = detail::take<std::uint8_t>(buf, off);
    auto ndim = detail::take<std::uint8_t>(buf, off);
    std::vector<std::int64_t> dims;
    for (std::uint8_t d = 0; d < ndim; ++d) dims.push_back(detail::take<std::int64_t>(buf, off));
    if (is_buffer) ck.params.buffers.insert(name);
    table.emplace_back(std::move(name), std::move(dims));
  }
  for (auto& [name, dims] : table) {
    Tensor<float> t(dims);
    std::size_t bytes = t.data.size() * sizeof(float);
    if (off + bytes > buf.size() - 4) throw IntegrityError("checkpoint payload truncated");
    std::memcpy(t.data.data(), buf.data() + off, bytes);
    off += bytes;
    ck.params.values.emplace(name, std::move(t));
  }
  return ck;
}

}  // namespace opgfpad::netcore
