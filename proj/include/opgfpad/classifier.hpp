#pragma once

#include <algorithm>
#include <array>
#include <string>
#include <vector>

#include "opgfpad/core.hpp"
#include "opgfpad/errors.hpp"
#include "opgfpad/netcore.hpp"
#include "opgfpad/rng.hpp"

// Per-section DenseNet-121 binary classifiers: dense blocks of 6/12/24/16
// layers (growth 32, bottleneck 4x growth, compression 0.5), an 8-layer head
// (Pooling, BN, Dropout, Dense, Dense, BN, Dropout, Dense) and a single
// sigmoid output. Live maps to 1, spoof and generated to 0.

namespace opgfpad::classifier {

using netcore::LayerKind;
using netcore::ModelParams;
using netcore::Network;
using netcore::Tensor;
using netcore::Var;

inline constexpr int kGrowthRate = 32;
inline constexpr int kBottleneckWidth = 4 * kGrowthRate;
inline constexpr std::array<int, 4> kBlockLayers{6, 12, 24, 16};

struct SectionClassifier {
  int section = 0;
  Network net;
  ModelParams<float> params;
  int head_start = 0;  // index of the pooling layer that begins the head

  // The eight head layers, in graph order (the trailing sigmoid is the output
  // activation of the final dense).
  std::vector<LayerKind> head_kinds() const {
    std::vector<LayerKind> kinds;
    for (std::size_t i = static_cast<std::size_t>(head_start);
         i < net.layers.size() && kinds.size() < 8; ++i)
      kinds.push_back(net.layers[i].kind);
    return kinds;
  }
};

inline Network build_densenet121(const RunConfig& cfg, int* head_start_out) {
  Network net;
  net.input_shape = {1, cfg.patch_size, cfg.patch_size};

  // Stem: stride-2 3x3 conv to 64 channels, then a stride-2 pool, keeping the
  // final feature map at least 3x3 for 96-pixel patches.
  net.chain({.kind = LayerKind::conv2d, .name = "stem_conv", .channels = 64, .kernel = 3,
             .stride = 2, .pad = 1});
  net.chain({.kind = LayerKind::batch_norm, .name = "stem_bn"});
  net.chain({.kind = LayerKind::relu, .name = "stem_relu"});
  int features = net.chain({.kind = LayerKind::avg_pool, .name = "stem_pool", .kernel = 2,
                            .stride = 2});

  std::int64_t channels = 64;
  for (std::size_t b = 0; b < kBlockLayers.size(); ++b) {
    for (int l = 0; l < kBlockLayers[b]; ++l) {
      std::string tag = "b" + std::to_string(b + 1) + "_l" + std::to_string(l + 1);
      // BN -> ReLU -> Conv(1x1 bottleneck) -> BN -> ReLU -> Conv(3x3), then
      // concatenate onto the running feature map.
      int bn1 = net.add({.kind = LayerKind::batch_norm, .name = tag + "_bn1",
                         .inputs = {features}});
      int re1 = net.add({.kind = LayerKind::relu, .name = tag + "_relu1", .inputs = {bn1}});
      int c1 = net.add({.kind = LayerKind::conv2d, .name = tag + "_conv1", .inputs = {re1},
                        .channels = kBottleneckWidth, .kernel = 1, .stride = 1, .pad = 0});
      int bn2 = net.add({.kind = LayerKind::batch_norm, .name = tag + "_bn2", .inputs = {c1}});
      int re2 = net.add({.kind = LayerKind::relu, .name = tag + "_relu2", .inputs = {bn2}});
      int c2 = net.add({.kind = LayerKind::conv2d, .name = tag + "_conv2", .inputs = {re2},
                        .channels = kGrowthRate, .kernel = 3, .stride = 1, .pad = 1});
      features = net.add({.kind = LayerKind::concat, .name = tag + "_concat",
                          .inputs = {features, c2}});
      channels += kGrowthRate;
    }
    if (b + 1 < kBlockLayers.size()) {
      std::string tag = "t" + std::to_string(b + 1);
      int bn = net.add({.kind = LayerKind::batch_norm, .name = tag + "_bn",
                        .inputs = {features}});
      int re = net.add({.kind = LayerKind::relu, .name = tag + "_relu", .inputs = {bn}});
      channels /= 2;  // compression 0.5
      int cv = net.add({.kind = LayerKind::conv2d, .name = tag + "_conv", .inputs = {re},
                        .channels = channels, .kernel = 1, .stride = 1, .pad = 0});
      features = net.add({.kind = LayerKind::avg_pool, .name = tag + "_pool", .inputs = {cv},
                          .kernel = 2, .stride = 2});
    }
  }
  net.chain({.kind = LayerKind::batch_norm, .name = "final_bn"});
  net.chain({.kind = LayerKind::relu, .name = "final_relu"});

  if (head_start_out) *head_start_out = static_cast<int>(net.layers.size());
  net.chain({.kind = LayerKind::global_avg_pool, .name = "head_pool"});
  net.chain({.kind = LayerKind::batch_norm, .name = "head_bn1"});
  net.chain({.kind = LayerKind::dropout, .name = "head_drop1", .rate = cfg.head_dropout});
  net.chain({.kind = LayerKind::dense, .name = "head_dense1", .channels = cfg.head_units1});
  net.chain({.kind = LayerKind::dense, .name = "head_dense2", .channels = cfg.head_units2});
  net.chain({.kind = LayerKind::batch_norm, .name = "head_bn2"});
  net.chain({.kind = LayerKind::dropout, .name = "head_drop2", .rate = cfg.head_dropout});
  net.chain({.kind = LayerKind::dense, .name = "head_dense3", .channels = 1,
             .init = netcore::InitKind::xavier});
  net.chain({.kind = LayerKind::sigmoid, .name = "head_sigmoid"});
  return net;
}

inline SectionClassifier build_section_classifier(int section, const RunConfig& cfg) {
  if (section < 0 || section > 8)
    throw ConfigError("build_section_classifier: section outside [0, 8]");
  SectionClassifier clf;
  clf.section = section;
  clf.net = build_densenet121(cfg, &clf.head_start);
  SeededRng rng(derive_seed(cfg.seed, "classifier/init", static_cast<std::uint64_t>(section)));
  clf.params = netcore::init_params<float>(clf.net, rng);
  return clf;
}

// ---------------------------------------------------------------------------
// Training

struct EpochStats {
  int epoch = 0;
  double loss = 0;
  double accuracy = 0;
};

struct TrainHistory {
  std::vector<EpochStats> epochs;
  bool augmentation_warning = false;  // |generated| != |spoof| was overridden
};

inline void write_history_csv(const TrainHistory& h, const std::filesystem::path& path) {
  std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write history '" + path.string() + "'");
  out << "epoch,loss,accuracy\n";
  for (const auto& e : h.epochs) out << e.epoch << ',' << e.loss << ',' << e.accuracy << '\n';
}

namespace detail {

// Keras-style clipped binary cross-entropy on post-sigmoid scores.
template <typename T>
Var<T> bce_loss(const Var<T>& scores, const Tensor<T>& labels) {
  const T eps = static_cast<T>(1e-7);
  Var<T> y = Var<T>::constant(labels);
  Var<T> one_s = Var<T>::constant(Tensor<T>(scores.value().shape, T(1)));
  Var<T> s = clamp(scores, eps, T(1) - eps);
  Var<T> pos = mul(y, log_v(s));
  Var<T> negt = mul(sub(one_s, y), log_v(sub(one_s, s)));
  return neg(mean_all(add(pos, negt)));
}

}  // namespace detail

// Binary cross-entropy with live -> 1 and spoof/generated -> 0, Adam per the
// run config. Requires |generated| == |spoof| (the augmentation rule) unless
// allow_unbalanced is set. Pass `resume` to continue from an existing
// optimizer state instead of a fresh one (epoch-sliced training).
inline TrainHistory train_section_classifier(SectionClassifier& clf,
                                             const std::vector<Patch>& live,
                                             const std::vector<Patch>& spoof,
                                             const std::vector<Patch>& generated,
                                             const RunConfig& cfg,
                                             bool allow_unbalanced = false,
                                             netcore::OptimizerState<float>* resume = nullptr) {
  if (live.empty()) throw ConfigError("train_section_classifier: live class empty");
  if (spoof.empty()) throw ConfigError("train_section_classifier: spoof class empty");
  TrainHistory history;
  if (!generated.empty() && generated.size() != spoof.size()) {
    if (!allow_unbalanced)
      throw ConfigError("train_section_classifier: generated count " +
                        std::to_string(generated.size()) + " != spoof count " +
                        std::to_string(spoof.size()) +
                        " (augmentation rule); pass allow_unbalanced to proceed");
    history.augmentation_warning = true;
  }

  std::vector<const Patch*> all;
  std::vector<float> labels;
  for (const auto* set : {&live, &spoof, &generated})
    for (const Patch& p : *set) {
      if (p.section != clf.section)
        throw ConfigError("train_section_classifier: patch from section " +
                          std::to_string(p.section) + " routed to classifier " +
                          std::to_string(clf.section));
      all.push_back(&p);
      labels.push_back(p.label == PatchLabel::live ? 1.0f : 0.0f);
    }

  auto fresh = netcore::OptimizerState<float>::for_params(clf.params, cfg.learning_rate,
                                                          cfg.weight_decay);
  netcore::OptimizerState<float>& opt = resume ? *resume : fresh;
  SeededRng rng(derive_seed(cfg.seed, "classifier/train",
                            static_cast<std::uint64_t>(clf.section) * 1000 +
                                static_cast<std::uint64_t>(opt.step)));
  std::vector<std::size_t> order(all.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 1; epoch <= cfg.clf_epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    double loss_sum = 0;
    std::size_t correct = 0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      std::size_t end = std::min(start + static_cast<std::size_t>(cfg.batch_size), order.size());
      const auto b = static_cast<std::int64_t>(end - start);
      const int sz = cfg.patch_size;
      Tensor<float> batch({b, 1, sz, sz});
      Tensor<float> y({b, 1});
      for (std::int64_t i = 0; i < b; ++i) {
        const Patch& p = *all[order[start + static_cast<std::size_t>(i)]];
        std::copy(p.values.begin(), p.values.end(), batch.data.begin() + i * sz * sz);
        y.data[static_cast<std::size_t>(i)] = labels[order[start + static_cast<std::size_t>(i)]];
      }
      auto bp = netcore::bind_trainable(clf.params);
      Var<float> scores = netcore::forward(clf.net, bp, clf.params,
                                           Var<float>::constant(batch), true, &rng);
      Var<float> loss = detail::bce_loss(scores, y);
      auto grads = netcore::backward(loss, [&] {
        std::vector<Var<float>> t;
        for (const auto& [k, v] : bp.vars) t.push_back(v);
        return t;
      }());
      std::map<std::string, Tensor<float>> gmap;
      for (const auto& [k, v] : bp.vars)
        if (grads.contains(v)) gmap.emplace(k, grads.tensor(v));
      netcore::adam_step(opt, clf.params, gmap);

      loss_sum += loss.value().data[0];
      for (std::int64_t i = 0; i < b; ++i) {
        bool pred_live = scores.value().data[static_cast<std::size_t>(i)] > 0.5f;
        if (pred_live == (y.data[static_cast<std::size_t>(i)] > 0.5f)) ++correct;
      }
      ++batches;
    }
    history.epochs.push_back({epoch, loss_sum / std::max(1, batches),
                              static_cast<double>(correct) / static_cast<double>(all.size())});
  }
  return history;
}

// ---------------------------------------------------------------------------
// Inference

// Scores for a batch of same-section patches, chunked to bound memory.
inline std::vector<double> predict_scores(const SectionClassifier& clf,
                                          const std::vector<Patch>& patches) {
  std::vector<double> out;
  if (patches.empty()) return out;
  auto bp = netcore::bind_const(clf.params);
  ModelParams<float> state = clf.params;  // running stats are read-only here
  const int sz = clf.net.input_shape[1] == 1 ? static_cast<int>(clf.net.input_shape[2])
                                             : static_cast<int>(clf.net.input_shape[1]);
  for (std::size_t start = 0; start < patches.size(); start += 64) {
    std::size_t end = std::min(start + 64, patches.size());
    const auto b = static_cast<std::int64_t>(end - start);
    Tensor<float> batch({b, 1, sz, sz});
    for (std::int64_t i = 0; i < b; ++i) {
      const Patch& p = patches[start + static_cast<std::size_t>(i)];
      if (p.section != clf.section)
        throw ConfigError("predict: patch from section " + std::to_string(p.section) +
                          " routed to classifier " + std::to_string(clf.section));
      if (p.size != sz)
        throw ConfigError("predict: patch size does not match classifier input");
      std::copy(p.values.begin(), p.values.end(), batch.data.begin() + i * sz * sz);
    }
    Tensor<float> scores =
        netcore::forward(clf.net, bp, state, Var<float>::constant(batch), false).value();
    for (std::int64_t i = 0; i < b; ++i)
      out.push_back(static_cast<double>(scores.data[static_cast<std::size_t>(i)]));
  }
  return out;
}

// Liveness score in [0, 1] for one patch (inference mode, deterministic).
inline double predict_patch(const SectionClassifier& clf, const Patch& p) {
  return predict_scores(clf, {p}).front();
}

}  // namespace opgfpad::classifier
