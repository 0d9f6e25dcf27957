#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <exception>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "opgfpad/classifier.hpp"
#include "opgfpad/core.hpp"
#include "opgfpad/errors.hpp"
#include "opgfpad/evaluation.hpp"
#include "opgfpad/image_io.hpp"
#include "opgfpad/opg.hpp"
#include "opgfpad/patching.hpp"

// Evaluation protocols: intra-sensor (known and unknown material, split by
// manifest flags) and cross-sensor. Both guard against any leakage between
// training data, OPG training data and the evaluation sensor.

namespace opgfpad::protocols {

enum class ProtocolKind { intra_sensor, cross_sensor };

inline std::string to_string(ProtocolKind k) {
  return k == ProtocolKind::intra_sensor ? "intra_sensor" : "cross_sensor";
}

struct ProtocolSpec {
  ProtocolKind kind = ProtocolKind::intra_sensor;
  std::string train_sensor;
  std::string test_sensor;
  bool use_opg = false;
  std::string opg_holdout;  // must equal test_sensor when use_opg

  void validate() const {
    if (kind == ProtocolKind::intra_sensor && train_sensor != test_sensor)
      throw ProtocolError("intra-sensor protocol requires train_sensor == test_sensor");
    if (kind == ProtocolKind::cross_sensor && train_sensor == test_sensor)
      throw ProtocolError("cross-sensor protocol requires distinct sensors");
    if (use_opg && opg_holdout != test_sensor)
      throw ProtocolError("OPG hold-out must equal the test sensor (no testing-domain leakage)");
  }
};

struct SectionCounts {
  std::size_t live = 0, spoof = 0, generated = 0;
};

struct PipelineLog {
  std::array<SectionCounts, 9> sections{};
  std::size_t train_samples = 0;
  std::size_t test_samples = 0;
  std::size_t zero_minutiae_test_samples = 0;
  bool leakage_checked = false;
  bool opg_provenance_checked = false;
  std::vector<std::string> notes;
};

struct ProtocolResult {
  evaluation::EvalReport report;
  PipelineLog log;
};

using ImageLoader = std::function<GrayImage(const SampleRecord&)>;

inline GrayImage default_loader(const SampleRecord& r) {
  return ingest::load_image(r.path, r.sensor_id);
}

inline int resolve_workers(int workers) {
  if (workers > 0) return std::min(workers, 9);
  unsigned hc = std::thread::hardware_concurrency();
  return std::min(9, hc ? static_cast<int>(hc) : 1);
}

namespace detail {

// Run fn(0..n-1) on a small worker pool; exceptions propagate to the caller.
inline void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn) {
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr err;
  std::mutex err_mu;
  auto body = [&] {
    for (;;) {
      std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mu);
        if (!err) err = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  const std::size_t count = std::min(static_cast<std::size_t>(workers), n);
  for (std::size_t t = 0; t < count; ++t) pool.emplace_back(body);
  for (auto& t : pool) t.join();
  if (err) std::rethrow_exception(err);
}

// Patches for a list of records, cached through `store` when provided.
inline std::vector<std::vector<Patch>> patches_for_records(
    const std::vector<SampleRecord>& records, const RunConfig& cfg, const ImageLoader& loader,
    patching::PatchStore* store, int workers) {
  std::vector<std::vector<Patch>> out(records.size());
  parallel_for(records.size(), workers, [&](std::size_t i) {
    const SampleRecord& r = records[i];
    PatchLabel label = r.label == SampleLabel::live ? PatchLabel::live : PatchLabel::spoof;
    if (store && store->contains(r.path)) {
      out[i] = store->read(r.path);
      for (auto& p : out[i]) p.label = label;
    } else {
      out[i] = patching::patches_for_image(loader(r), cfg, label);
      if (store) store->write(r.path, out[i]);
    }
  });
  return out;
}

}  // namespace detail

// Trains the nine section classifiers for one sensor's training split,
// applying the OPG augmentation rule (one generated patch per spoof patch)
// when a bundle is supplied.
struct TrainedSections {
  std::array<classifier::SectionClassifier, 9> classifiers;
  std::array<classifier::TrainHistory, 9> histories;
  PipelineLog log;
};

inline TrainedSections train_all_sections(const DatasetManifest& manifest,
                                          const std::string& train_sensor, const RunConfig& cfg,
                                          const opg::OpgBundle* bundle, int workers,
                                          const ImageLoader& loader = default_loader,
                                          patching::PatchStore* store = nullptr) {
  cfg.validate();
  std::vector<SampleRecord> train_records = manifest.select(train_sensor, Split::train);
  if (train_records.empty())
    throw ProtocolError("sensor '" + train_sensor + "' has no training samples");

  TrainedSections out;
  out.log.train_samples = train_records.size();
  workers = resolve_workers(workers);

  auto per_record = detail::patches_for_records(train_records, cfg, loader, store, workers);
  std::array<std::vector<Patch>, 9> live_by_section, spoof_by_section;
  for (const auto& patches : per_record)
    for (const Patch& p : patches)
      (p.label == PatchLabel::live ? live_by_section : spoof_by_section)[static_cast<std::size_t>(
          p.section)]
          .push_back(p);

  std::array<std::vector<Patch>, 9> generated_by_section;
  if (bundle) {
    for (int j = 0; j < 9; ++j) {
      auto spoof_count =
          static_cast<int>(spoof_by_section[static_cast<std::size_t>(j)].size());
      generated_by_section[static_cast<std::size_t>(j)] = opg::generate_patches(
          *bundle, j, spoof_count, derive_seed(cfg.seed, "augment/" + train_sensor, j));
    }
  }
  for (int j = 0; j < 9; ++j) {
    out.log.sections[static_cast<std::size_t>(j)] = {
        live_by_section[static_cast<std::size_t>(j)].size(),
        spoof_by_section[static_cast<std::size_t>(j)].size(),
        generated_by_section[static_cast<std::size_t>(j)].size()};
  }

  // One worker per section; heavy kernels stay single-threaded inside.
  int old_threads = netcore::compute_threads();
  netcore::set_compute_threads(workers > 1 ? 1 : old_threads);
  try {
    detail::parallel_for(9, workers, [&](std::size_t j) {
      auto clf = classifier::build_section_classifier(static_cast<int>(j), cfg);
      out.histories[j] = classifier::train_section_classifier(
          clf, live_by_section[j], spoof_by_section[j], generated_by_section[j], cfg);
      out.classifiers[j] = std::move(clf);
    });
  } catch (...) {
    netcore::set_compute_threads(old_threads);
    throw;
  }
  netcore::set_compute_threads(old_threads);
  return out;
}

// Scores one sensor's test split with trained section classifiers. Samples
// without usable minutiae are classified spoof with no recorded score.
inline evaluation::EvalReport score_test_set(
    const DatasetManifest& manifest, const std::string& test_sensor,
    const std::array<classifier::SectionClassifier, 9>& classifiers, const RunConfig& cfg,
    int workers, const ImageLoader& loader = default_loader, PipelineLog* log = nullptr) {
  std::vector<SampleRecord> test_records = manifest.select(test_sensor, Split::test);
  if (test_records.empty())
    throw ProtocolError("sensor '" + test_sensor + "' has no test samples");
  workers = resolve_workers(workers);

  auto per_record = detail::patches_for_records(test_records, cfg, loader, nullptr, workers);

  // Batch all patches section-wise, then scatter scores back per sample.
  std::array<std::vector<Patch>, 9> by_section;
  std::array<std::vector<std::size_t>, 9> owner;
  for (std::size_t i = 0; i < per_record.size(); ++i)
    for (const Patch& p : per_record[i]) {
      by_section[static_cast<std::size_t>(p.section)].push_back(p);
      owner[static_cast<std::size_t>(p.section)].push_back(i);
    }

  std::vector<std::vector<double>> sample_scores(test_records.size());
  int old_threads = netcore::compute_threads();
  netcore::set_compute_threads(workers > 1 ? 1 : old_threads);
  std::array<std::vector<double>, 9> section_scores;
  try {
    detail::parallel_for(9, workers, [&](std::size_t j) {
      section_scores[j] = classifier::predict_scores(classifiers[j], by_section[j]);
    });
  } catch (...) {
    netcore::set_compute_threads(old_threads);
    throw;
  }
  netcore::set_compute_threads(old_threads);
  for (std::size_t j = 0; j < 9; ++j)
    for (std::size_t k = 0; k < section_scores[j].size(); ++k)
      sample_scores[owner[j][k]].push_back(section_scores[j][k]);

  evaluation::EvalReport report;
  std::vector<evaluation::Prediction> predictions;
  for (std::size_t i = 0; i < test_records.size(); ++i) {
    const SampleRecord& r = test_records[i];
    evaluation::SampleScore s;
    s.id = r.path;
    s.label = r.label;
    s.material = r.material;
    s.known_material = r.known_material;
    if (sample_scores[i].empty()) {
      s.predicted_live = false;  // fail closed
      if (log) ++log->zero_minutiae_test_samples;
    } else {
      s.score = evaluation::fuse_scores(sample_scores[i]);
      s.predicted_live = evaluation::classify_live(*s.score, cfg.score_threshold);
    }
    predictions.push_back({s.predicted_live, s.label, s.material, s.known_material});
    report.per_sample_scores.push_back(std::move(s));
  }

  evaluation::EvalReport metrics = compute_metrics(predictions);
  metrics.per_sample_scores = std::move(report.per_sample_scores);
  metrics.det_points = evaluation::det_curve(metrics.per_sample_scores);
  if (log) log->test_samples = test_records.size();
  return metrics;
}

namespace detail {

inline void assert_disjoint_paths(const std::vector<SampleRecord>& a,
                                  const std::vector<SampleRecord>& b, const char* what) {
  std::set<std::string> paths;
  for (const auto& r : a) paths.insert(r.path);
  for (const auto& r : b)
    if (paths.count(r.path))
      throw ProtocolError(std::string("leakage guard: ") + what + " shares path '" + r.path + "'");
}

inline ProtocolResult run_protocol(const DatasetManifest& manifest, const ProtocolSpec& spec,
                                   const RunConfig& cfg, const opg::OpgBundle* bundle, int workers,
                                   const ImageLoader& loader,
                                   patching::PatchStore* store) {
  spec.validate();
  manifest.validate();
  if (spec.use_opg) {
    if (!bundle)
      throw ProtocolError("protocol requires an OPG bundle with hold-out '" + spec.test_sensor +
                          "' but none was supplied");
    if (bundle->held_out_sensor != spec.test_sensor)
      throw ProtocolError("OPG bundle hold-out '" + bundle->held_out_sensor +
                          "' does not match test sensor '" + spec.test_sensor + "'");
    opg::assert_no_overlap(*bundle, manifest);
  }

  ProtocolResult result;
  // The evaluation split must be untouched by training.
  auto train_records = manifest.select(spec.train_sensor, Split::train);
  auto test_records = manifest.select(spec.test_sensor, Split::test);
  assert_disjoint_paths(train_records, test_records, "train/test");
  result.log.leakage_checked = true;
  if (spec.use_opg) result.log.opg_provenance_checked = true;

  TrainedSections trained = train_all_sections(manifest, spec.train_sensor, cfg,
                                               spec.use_opg ? bundle : nullptr, workers, loader,
                                               store);
  result.log.sections = trained.log.sections;
  result.log.train_samples = trained.log.train_samples;
  for (int j = 0; j < 9; ++j) {
    const auto& sc = result.log.sections[static_cast<std::size_t>(j)];
    result.log.notes.push_back("section " + std::to_string(j) + ": live=" +
                               std::to_string(sc.live) + " spoof=" + std::to_string(sc.spoof) +
                               " generated=" + std::to_string(sc.generated));
  }

  result.report = score_test_set(manifest, spec.test_sensor, trained.classifiers, cfg, workers,
                                 loader, &result.log);
  return result;
}

}  // namespace detail

// Same-sensor protocol; the known/unknown APCER split comes from the manifest
// material flags. With use_opg the bundle's hold-out must be this sensor.
inline ProtocolResult run_intra_sensor(const DatasetManifest& manifest, const std::string& sensor,
                                       const RunConfig& cfg, bool use_opg,
                                       const opg::OpgBundle* bundle = nullptr, int workers = 0,
                                       const ImageLoader& loader = default_loader,
                                       patching::PatchStore* store = nullptr) {
  ProtocolSpec spec;
  spec.kind = ProtocolKind::intra_sensor;
  spec.train_sensor = spec.test_sensor = sensor;
  spec.use_opg = use_opg;
  spec.opg_holdout = use_opg ? sensor : "";
  return detail::run_protocol(manifest, spec, cfg, bundle, workers, loader, store);
}

// Train on one sensor, evaluate on another sensor's test split. The OPG
// hold-out is the test sensor.
inline ProtocolResult run_cross_sensor(const DatasetManifest& manifest,
                                       const std::string& train_sensor,
                                       const std::string& test_sensor, const RunConfig& cfg,
                                       bool use_opg, const opg::OpgBundle* bundle = nullptr,
                                       int workers = 0, const ImageLoader& loader = default_loader,
                                       patching::PatchStore* store = nullptr) {
  ProtocolSpec spec;
  spec.kind = ProtocolKind::cross_sensor;
  spec.train_sensor = train_sensor;
  spec.test_sensor = test_sensor;
  spec.use_opg = use_opg;
  spec.opg_holdout = use_opg ? test_sensor : "";
  return detail::run_protocol(manifest, spec, cfg, bundle, workers, loader, store);
}

// ---------------------------------------------------------------------------
// Experiment spec files: {dataset, protocol, train_sensor, test_sensor,
// use_opg, config {...}}.

struct ExperimentSpec {
  std::string manifest_path;
  ProtocolSpec protocol;
  RunConfig config;
};

inline ExperimentSpec load_experiment_spec(const std::filesystem::path& path) {
  json j = load_json_file(path);
  ExperimentSpec spec;
  spec.manifest_path = j.at("dataset").get<std::string>();
  std::string kind = j.at("protocol").get<std::string>();
  if (kind == "intra_sensor")
    spec.protocol.kind = ProtocolKind::intra_sensor;
  else if (kind == "cross_sensor")
    spec.protocol.kind = ProtocolKind::cross_sensor;
  else
    throw ParseError("unknown protocol '" + kind + "' in '" + path.string() + "'");
  spec.protocol.train_sensor = j.at("train_sensor").get<std::string>();
  spec.protocol.test_sensor = j.value("test_sensor", spec.protocol.train_sensor);
  spec.protocol.use_opg = j.value("use_opg", false);
  spec.protocol.opg_holdout = spec.protocol.use_opg ? spec.protocol.test_sensor : "";
  spec.config = j.contains("config") ? j.at("config").get<RunConfig>() : RunConfig{};
  spec.protocol.validate();
  spec.config.validate();
  return spec;
}

// Results directory for one run: <out>/<protocol>/<sensors>/.
inline std::filesystem::path result_dir(const std::filesystem::path& out,
                                        const ProtocolSpec& spec) {
  std::string sensors = spec.kind == ProtocolKind::intra_sensor
                            ? spec.train_sensor
                            : spec.train_sensor + "_" + spec.test_sensor;
  return out / to_string(spec.kind) / sensors;
}

}  // namespace opgfpad::protocols
