#pragma once

#include <algorithm>
#include <array>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "opgfpad/core.hpp"
#include "opgfpad/errors.hpp"
#include "opgfpad/netcore.hpp"
#include "opgfpad/patching.hpp"
#include "opgfpad/rng.hpp"

// The Open Patch Generator: one WGAN-GP per fingerprint section, trained on
// spoof patches pooled from every sensor except the held-out one, then used
// to synthesize spoof patches for classifier augmentation.

namespace opgfpad::opg {

using netcore::ModelParams;
using netcore::Network;
using netcore::Tensor;
using netcore::Var;

struct NoiseVector {
  std::vector<float> values;  // standard-normal draws, length = noise_dim
};

inline NoiseVector make_noise(SeededRng& rng, int dim) {
  NoiseVector n;
  n.values.resize(static_cast<std::size_t>(dim));
  for (auto& v : n.values) v = static_cast<float>(rng.normal());
  return n;
}

// ---------------------------------------------------------------------------
// Architectures. The generator projects the noise to (size/16)^2 x 256 and
// upsamples through four stride-2 transposed convolutions to a tanh output;
// the critic mirrors it with strided convolutions and leaky ReLUs and no
// batch norm (the gradient penalty assumes a per-sample critic).

inline void check_gan_patch_size(int size) {
  if (size < 32 || size % 16 != 0)
    throw ConfigError("GAN topology needs patch_size divisible by 16 and >= 32, got " +
                      std::to_string(size));
}

inline Network build_generator(const RunConfig& cfg) {
  check_gan_patch_size(cfg.patch_size);
  const std::int64_t base = cfg.patch_size / 16;
  Network net;
  net.input_shape = {cfg.noise_dim};
  net.chain({.kind = netcore::LayerKind::dense, .channels = base * base * 256});
  net.chain({.kind = netcore::LayerKind::reshape, .target_shape = {256, base, base}});
  net.chain({.kind = netcore::LayerKind::batch_norm});
  net.chain({.kind = netcore::LayerKind::relu});
  std::int64_t ch = 256;
  for (int stage = 0; stage < 3; ++stage) {
    net.chain({.kind = netcore::LayerKind::transposed_conv2d,
               .channels = ch / 2,
               .kernel = 4,
               .stride = 2,
               .pad = 1});
    net.chain({.kind = netcore::LayerKind::batch_norm});
    net.chain({.kind = netcore::LayerKind::relu});
    ch /= 2;
  }
  net.chain({.kind = netcore::LayerKind::transposed_conv2d,
             .channels = 1,
             .kernel = 4,
             .stride = 2,
             .pad = 1,
             .init = netcore::InitKind::xavier});
  net.chain({.kind = netcore::LayerKind::tanh});
  return net;
}

inline Network build_critic(const RunConfig& cfg) {
  check_gan_patch_size(cfg.patch_size);
  Network net;
  net.input_shape = {1, cfg.patch_size, cfg.patch_size};
  std::int64_t ch = 32;
  for (int stage = 0; stage < 4; ++stage) {
    net.chain({.kind = netcore::LayerKind::conv2d,
               .channels = ch,
               .kernel = 4,
               .stride = 2,
               .pad = 1});
    net.chain({.kind = netcore::LayerKind::leaky_relu, .slope = 0.2});
    ch *= 2;
  }
  net.chain({.kind = netcore::LayerKind::dense, .channels = 1, .init = netcore::InitKind::xavier});
  return net;
}

// ---------------------------------------------------------------------------
// Tensor plumbing

inline Tensor<float> patch_batch(const std::vector<Patch>& patches,
                                 const std::vector<std::size_t>& idx) {
  if (idx.empty()) throw ConfigError("patch_batch: empty batch");
  const int size = patches[idx[0]].size;
  Tensor<float> t({static_cast<std::int64_t>(idx.size()), 1, size, size});
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy(patches[idx[i]].values.begin(), patches[idx[i]].values.end(),
              t.data.begin() + static_cast<std::int64_t>(i) * size * size);
  return t;
}

inline Tensor<float> noise_batch(SeededRng& rng, std::int64_t n, int dim) {
  Tensor<float> t({n, dim});
  for (auto& v : t.data) v = static_cast<float>(rng.normal());
  return t;
}

// ---------------------------------------------------------------------------
// Losses

struct CriticLossParts {
  double total = 0;        // wasserstein + gp_lambda * penalty
  double wasserstein = 0;  // mean C(fake) - mean C(real)
  double penalty = 0;      // mean over samples of (||grad C(interp)|| - 1)^2
};

namespace detail {

// Builds the full critic-loss graph. The interpolates are re-wrapped as a
// leaf so the input gradient can be requested; the penalty is then an
// ordinary node and stays differentiable w.r.t. the critic parameters.
template <typename T>
Var<T> critic_loss_graph(const Network& critic, const netcore::BoundParams<T>& bp,
                         ModelParams<T>& state, const Tensor<T>& real, const Tensor<T>& fake,
                         T gp_lambda, const Tensor<T>& eps, CriticLossParts* parts) {
  if (!(real.shape == fake.shape))
    throw ShapeError("critic_loss: real and fake batches must share a shape");
  const std::int64_t n = real.dim(0);
  if (eps.numel() != n) throw ShapeError("critic_loss: need one epsilon per sample");

  Var<T> real_v = Var<T>::constant(real);
  Var<T> fake_v = Var<T>::constant(fake);
  Var<T> c_real = netcore::forward(critic, bp, state, real_v, true);
  Var<T> c_fake = netcore::forward(critic, bp, state, fake_v, true);
  Var<T> wasserstein = sub(mean_all(c_fake), mean_all(c_real));

  // interp = eps*real + (1-eps)*fake, eps uniform per sample
  Tensor<T> interp = real;
  const std::int64_t inner = interp.numel() / n;
  for (std::int64_t i = 0; i < n; ++i) {
    const T e = eps.data[static_cast<std::size_t>(i)];
    for (std::int64_t k = 0; k < inner; ++k) {
      auto j = static_cast<std::size_t>(i * inner + k);
      interp.data[j] = e * real.data[j] + (T(1) - e) * fake.data[j];
    }
  }
  Var<T> interp_v = Var<T>::leaf(std::move(interp));
  Var<T> c_interp = netcore::forward(critic, bp, state, interp_v, true);
  auto grads = netcore::backward(sum_all(c_interp), {interp_v});
  Var<T> input_grad = grads.var(interp_v);
  Var<T> norm = sqrt_v(sum_sample(mul(input_grad, input_grad)));
  Var<T> excess = add_scalar(norm, T(-1));
  Var<T> penalty = mean_all(mul(excess, excess));

  Var<T> total = add(wasserstein, scale(penalty, gp_lambda));
  if (parts) {
    parts->total = static_cast<double>(total.value().data[0]);
    parts->wasserstein = static_cast<double>(wasserstein.value().data[0]);
    parts->penalty = static_cast<double>(penalty.value().data[0]);
  }
  return total;
}

}  // namespace detail

// Loss evaluation for a fixed critic (no parameter update).
inline CriticLossParts critic_loss(const Network& critic, const ModelParams<float>& params,
                                   const Tensor<float>& real, const Tensor<float>& fake,
                                   double gp_lambda, SeededRng& rng) {
  CriticLossParts parts;
  Tensor<float> eps({real.dim(0)});
  for (auto& v : eps.data) v = static_cast<float>(rng.uniform());
  auto bp = netcore::bind_trainable(params);  // tape needed for the input gradient
  ModelParams<float> state = params;
  detail::critic_loss_graph<float>(critic, bp, state, real, fake,
                                   static_cast<float>(gp_lambda), eps, &parts);
  return parts;
}

// loss = -mean C(fake)
inline double generator_loss(const Network& critic, const ModelParams<float>& params,
                             const Tensor<float>& fake) {
  auto bp = netcore::bind_const(params);
  ModelParams<float> state = params;
  Var<float> out = netcore::forward(critic, bp, state, Var<float>::constant(fake), true);
  double mean = 0;
  for (float v : out.value().data) mean += v;
  return -mean / static_cast<double>(out.value().numel());
}

// ---------------------------------------------------------------------------
// Training

struct GanTelemetryRow {
  int epoch = 0;
  double critic_loss = 0;
  double generator_loss = 0;
  double wasserstein = 0;
  double penalty = 0;
};

struct TrainedWgan {
  ModelParams<float> generator;
  ModelParams<float> critic;
  std::vector<GanTelemetryRow> telemetry;
  bool aborted = false;  // non-finite loss; params are the last good epoch
};

inline void write_gan_telemetry(const std::vector<GanTelemetryRow>& rows,
                                const std::filesystem::path& path) {
  std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write telemetry '" + path.string() + "'");
  out << "epoch,critic_loss,generator_loss,wasserstein,penalty\n";
  for (const auto& r : rows)
    out << r.epoch << ',' << r.critic_loss << ',' << r.generator_loss << ',' << r.wasserstein
        << ',' << r.penalty << '\n';
}

// Alternating optimization: cfg.critic_steps critic updates per generator
// update, cfg.gan_epochs passes over the spoof patches. Deterministic for a
// fixed seed in single-worker mode.
inline TrainedWgan train_wgan(const std::vector<Patch>& section_patches, const RunConfig& cfg,
                              std::uint64_t seed) {
  if (section_patches.empty()) throw ConfigError("train_wgan: no patches");
  for (const Patch& p : section_patches) {
    if (p.size != cfg.patch_size)
      throw ConfigError("train_wgan: patch size " + std::to_string(p.size) +
                        " does not match config " + std::to_string(cfg.patch_size));
    if (p.label != PatchLabel::spoof)
      throw ConfigError("train_wgan: training patches must be spoof-labeled");
  }

  Network gen_net = build_generator(cfg);
  Network critic_net = build_critic(cfg);
  SeededRng init_rng(derive_seed(seed, "wgan/init"));
  TrainedWgan result;
  result.generator = netcore::init_params<float>(gen_net, init_rng);
  result.critic = netcore::init_params<float>(critic_net, init_rng);

  auto gen_opt = netcore::OptimizerState<float>::for_params(
      result.generator, cfg.learning_rate, cfg.weight_decay, cfg.gan_beta1, cfg.gan_beta2);
  auto critic_opt = netcore::OptimizerState<float>::for_params(
      result.critic, cfg.learning_rate, cfg.weight_decay, cfg.gan_beta1, cfg.gan_beta2);

  SeededRng rng(derive_seed(seed, "wgan/train"));
  std::vector<std::size_t> order(section_patches.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  ModelParams<float> gen_snap = result.generator, critic_snap = result.critic;
  long critic_updates = 0;

  for (int epoch = 1; epoch <= cfg.gan_epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    GanTelemetryRow row;
    row.epoch = epoch;
    int critic_batches = 0, gen_batches = 0;
    try {
      for (std::size_t start = 0; start < order.size();
           start += static_cast<std::size_t>(cfg.batch_size)) {
        std::vector<std::size_t> idx(
            order.begin() + static_cast<std::ptrdiff_t>(start),
            order.begin() +
                static_cast<std::ptrdiff_t>(std::min(start + cfg.batch_size, order.size())));
        const auto b = static_cast<std::int64_t>(idx.size());

        // critic update
        Tensor<float> real = patch_batch(section_patches, idx);
        Tensor<float> noise = noise_batch(rng, b, cfg.noise_dim);
        auto gen_bp = netcore::bind_const(result.generator);
        Tensor<float> fake = netcore::forward(gen_net, gen_bp, result.generator,
                                              Var<float>::constant(noise), true)
                                 .value();
        Tensor<float> eps({b});
        for (auto& v : eps.data) v = static_cast<float>(rng.uniform());
        CriticLossParts parts;
        auto critic_bp = netcore::bind_trainable(result.critic);
        Var<float> loss =
            detail::critic_loss_graph<float>(critic_net, critic_bp, result.critic, real, fake,
                                             static_cast<float>(cfg.gp_lambda), eps, &parts);
        if (!std::isfinite(parts.total)) throw NumericError("non-finite critic loss");
        auto grads = netcore::backward(loss, [&] {
          std::vector<Var<float>> t;
          for (const auto& [k, v] : critic_bp.vars) t.push_back(v);
          return t;
        }());
        std::map<std::string, Tensor<float>> gmap;
        for (const auto& [k, v] : critic_bp.vars)
          if (grads.contains(v)) gmap.emplace(k, grads.tensor(v));
        netcore::adam_step(critic_opt, result.critic, gmap);
        row.critic_loss += parts.total;
        row.wasserstein += parts.wasserstein;
        row.penalty += parts.penalty;
        ++critic_batches;
        ++critic_updates;

        // generator update every critic_steps critic updates
        if (critic_updates % cfg.critic_steps == 0) {
          Tensor<float> gnoise = noise_batch(rng, b, cfg.noise_dim);
          auto gbp = netcore::bind_trainable(result.generator);
          Var<float> g_out = netcore::forward(gen_net, gbp, result.generator,
                                              Var<float>::constant(gnoise), true);
          auto cbp = netcore::bind_const(result.critic);
          Var<float> scores = netcore::forward(critic_net, cbp, result.critic, g_out, true);
          Var<float> gloss = neg(mean_all(scores));
          if (!std::isfinite(gloss.value().data[0]))
            throw NumericError("non-finite generator loss");
          auto ggrads = netcore::backward(gloss, [&] {
            std::vector<Var<float>> t;
            for (const auto& [k, v] : gbp.vars) t.push_back(v);
            return t;
          }());
          std::map<std::string, Tensor<float>> ggmap;
          for (const auto& [k, v] : gbp.vars)
            if (ggrads.contains(v)) ggmap.emplace(k, ggrads.tensor(v));
          netcore::adam_step(gen_opt, result.generator, ggmap);
          row.generator_loss += gloss.value().data[0];
          ++gen_batches;
        }
      }
    } catch (const NumericError&) {
      // Roll back to the last epoch that completed cleanly.
      result.generator = gen_snap;
      result.critic = critic_snap;
      result.aborted = true;
      result.telemetry.push_back(row);
      return result;
    }
    if (critic_batches) {
      row.critic_loss /= critic_batches;
      row.wasserstein /= critic_batches;
      row.penalty /= critic_batches;
    }
    if (gen_batches) row.generator_loss /= gen_batches;
    result.telemetry.push_back(row);
    gen_snap = result.generator;
    critic_snap = result.critic;
  }
  return result;
}

// ---------------------------------------------------------------------------
// Bundle: nine generators for one held-out sensor plus provenance.

struct OpgBundle {
  std::string held_out_sensor;
  std::array<ModelParams<float>, 9> generators;
  std::uint64_t manifest_fingerprint = 0;  // over the sorted training paths
  std::vector<std::string> training_paths;
  std::array<std::size_t, 9> section_counts{};
  RunConfig config;
};

inline std::uint64_t fingerprint_paths(std::vector<std::string> paths) {
  std::sort(paths.begin(), paths.end());
  std::uint64_t h = 14695981039346656037ull;
  for (const auto& p : paths) {
    h = fnv1a64(p, h);
    h = fnv1a64("\n", h);
  }
  return h;
}

// Zero-correlation guard: no path used to train the bundle may belong to the
// held-out sensor.
inline void assert_no_overlap(const OpgBundle& bundle, const DatasetManifest& manifest) {
  std::set<std::string> held;
  for (const auto& r : manifest.records)
    if (r.sensor_id == bundle.held_out_sensor) held.insert(r.path);
  for (const auto& p : bundle.training_paths)
    if (held.count(p))
      throw ProtocolError("OPG provenance violation: training path '" + p +
                          "' belongs to held-out sensor " + bundle.held_out_sensor);
}

// Trains the nine section WGANs on spoof train patches pooled from every
// sensor except held_out_sensor. `store` caches per-image patches.
inline OpgBundle build_opg(const DatasetManifest& manifest, const std::string& held_out_sensor,
                           patching::PatchStore* store, const RunConfig& cfg,
                           const std::function<GrayImage(const SampleRecord&)>& loader,
                           const std::filesystem::path& telemetry_dir = {}) {
  manifest.validate();
  cfg.validate();
  if (manifest.sensors.size() < 2)
    throw ProtocolError("leave-one-out impossible: manifest has fewer than two sensors");
  if (std::find(manifest.sensors.begin(), manifest.sensors.end(), held_out_sensor) ==
      manifest.sensors.end())
    throw ProtocolError("held-out sensor '" + held_out_sensor + "' not in manifest");

  OpgBundle bundle;
  bundle.held_out_sensor = held_out_sensor;
  bundle.config = cfg;

  std::array<std::vector<Patch>, 9> sections;
  for (const auto& r : manifest.records) {
    if (r.sensor_id == held_out_sensor) continue;
    if (r.split != Split::train || r.label != SampleLabel::spoof) continue;
    std::vector<Patch> patches;
    if (store && store->contains(r.path)) {
      patches = store->read(r.path);
    } else {
      patches = patching::patches_for_image(loader(r), cfg, PatchLabel::spoof);
      if (store) store->write(r.path, patches);
    }
    bundle.training_paths.push_back(r.path);
    for (auto& p : patches) sections[static_cast<std::size_t>(p.section)].push_back(std::move(p));
  }
  bundle.manifest_fingerprint = fingerprint_paths(bundle.training_paths);
  assert_no_overlap(bundle, manifest);

  for (int j = 0; j < 9; ++j) {
    const auto& patches = sections[static_cast<std::size_t>(j)];
    bundle.section_counts[static_cast<std::size_t>(j)] = patches.size();
    TrainedWgan trained =
        train_wgan(patches, cfg, derive_seed(cfg.seed, "opg/" + held_out_sensor, j));
    if (!telemetry_dir.empty())
      write_gan_telemetry(trained.telemetry,
                          telemetry_dir / ("telemetry_section_" + std::to_string(j) + ".csv"));
    bundle.generators[static_cast<std::size_t>(j)] = std::move(trained.generator);
  }
  return bundle;
}

// `count` patches for a section via noise draws through its generator.
inline std::vector<Patch> generate_patches(const OpgBundle& bundle, int section, int count,
                                           std::uint64_t seed) {
  if (section < 0 || section > 8) throw ConfigError("generate_patches: section outside [0, 8]");
  if (count < 0) throw ConfigError("generate_patches: negative count");
  std::vector<Patch> out;
  if (count == 0) return out;

  const RunConfig& cfg = bundle.config;
  Network gen_net = build_generator(cfg);
  ModelParams<float> params = bundle.generators[static_cast<std::size_t>(section)];
  auto bp = netcore::bind_const(params);
  SeededRng rng(derive_seed(seed, "opg/generate", static_cast<std::uint64_t>(section)));

  for (int done = 0; done < count;) {
    const int b = std::min(count - done, 64);
    Tensor<float> noise({b, cfg.noise_dim});
    for (std::int64_t i = 0; i < b; ++i) {
      NoiseVector nv = make_noise(rng, cfg.noise_dim);
      std::copy(nv.values.begin(), nv.values.end(), noise.data.begin() + i * cfg.noise_dim);
    }
    Tensor<float> imgs =
        netcore::forward(gen_net, bp, params, Var<float>::constant(noise), false).value();
    for (int i = 0; i < b; ++i) {
      Patch p;
      p.size = cfg.patch_size;
      p.section = section;
      p.label = PatchLabel::generated;
      p.origin = {true, 0, 0};
      p.values.assign(imgs.data.begin() + static_cast<std::int64_t>(i) * cfg.patch_size *
                                               cfg.patch_size,
                      imgs.data.begin() + static_cast<std::int64_t>(i + 1) * cfg.patch_size *
                                              cfg.patch_size);
      out.push_back(std::move(p));
    }
    done += b;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Bundle persistence: section_<j>.ckpt x9 + provenance.json.

inline void save_bundle(const OpgBundle& bundle, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (int j = 0; j < 9; ++j) {
    std::map<std::string, std::string> tags{{"role", "opg_generator"},
                                            {"held_out_sensor", bundle.held_out_sensor},
                                            {"section", std::to_string(j)}};
    netcore::save_checkpoint(bundle.generators[static_cast<std::size_t>(j)], bundle.config, tags,
                             dir / ("section_" + std::to_string(j) + ".ckpt"));
  }
  json prov;
  prov["held_out_sensor"] = bundle.held_out_sensor;
  char fp[17];
  std::snprintf(fp, sizeof(fp), "%016llx",
                static_cast<unsigned long long>(bundle.manifest_fingerprint));
  prov["manifest_fingerprint"] = fp;
  prov["training_paths"] = bundle.training_paths;
  prov["section_counts"] = bundle.section_counts;
  prov["config"] = bundle.config;
  save_json_file(dir / "provenance.json", prov);
}

inline OpgBundle load_bundle(const std::filesystem::path& dir, const RunConfig* expected = nullptr,
                             bool force = false) {
  json prov = load_json_file(dir / "provenance.json");
  OpgBundle bundle;
  bundle.held_out_sensor = prov.at("held_out_sensor").get<std::string>();
  bundle.manifest_fingerprint =
      std::stoull(prov.at("manifest_fingerprint").get<std::string>(), nullptr, 16);
  bundle.training_paths = prov.at("training_paths").get<std::vector<std::string>>();
  auto counts = prov.at("section_counts").get<std::vector<std::size_t>>();
  std::copy_n(counts.begin(), std::min<std::size_t>(counts.size(), 9),
              bundle.section_counts.begin());
  bundle.config = prov.at("config").get<RunConfig>();
  for (int j = 0; j < 9; ++j) {
    auto ck = netcore::load_checkpoint(dir / ("section_" + std::to_string(j) + ".ckpt"), expected,
                                       force);
    bundle.generators[static_cast<std::size_t>(j)] = std::move(ck.params);
  }
  return bundle;
}

}  // namespace opgfpad::opg
