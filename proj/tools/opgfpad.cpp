// opgfpad: fingerprint presentation-attack-detection toolkit CLI.
//
// Subcommands: scan, make-fixture, train-opg, gen-patches, train-clf,
// evaluate, run-protocol. Every command is non-interactive and exits 0 on
// success, 2 on usage/protocol errors and 1 on runtime failures.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>

#include <CLI11.hpp>

#include "opgfpad/opgfpad.hpp"

namespace fs = std::filesystem;
using namespace opgfpad;

namespace {

struct CommonOpts {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  int workers = 0;
};

RunConfig resolve_config(const CommonOpts& c) {
  RunConfig cfg;
  if (!c.config_path.empty()) cfg = load_config(c.config_path);
  if (c.seed) cfg.seed = *c.seed;
  cfg.validate();
  return cfg;
}

void add_common(CLI::App* cmd, CommonOpts& c) {
  cmd->add_option("--config", c.config_path, "run-config JSON file");
  cmd->add_option("--seed", c.seed, "override the config seed");
  cmd->add_option("--workers", c.workers, "section-level parallelism (default: min(9, cores))");
}

fs::path bundle_cache_dir(const std::string& explicit_out) {
  if (!explicit_out.empty()) return explicit_out;
  if (const char* env = std::getenv("OPG_FPAD_CACHE")) return env;
  return "opg_cache";
}

fs::path bundle_key_dir(const fs::path& cache, const DatasetManifest& manifest,
                        const std::string& holdout, const RunConfig& cfg) {
  char hash[17];
  std::snprintf(hash, sizeof(hash), "%016llx",
                static_cast<unsigned long long>(cfg.compat_hash()));
  return cache / (manifest.name + "_" + holdout + "_" + hash);
}

// Expected fingerprint of the bundle that would be trained from this
// manifest: the sorted spoof train paths of all non-held-out sensors.
std::uint64_t expected_bundle_fingerprint(const DatasetManifest& manifest,
                                          const std::string& holdout) {
  std::vector<std::string> paths;
  for (const auto& r : manifest.records)
    if (r.sensor_id != holdout && r.split == Split::train && r.label == SampleLabel::spoof)
      paths.push_back(r.path);
  return opg::fingerprint_paths(std::move(paths));
}

// Returns a cached bundle when its provenance matches, otherwise trains and
// caches a fresh one.
opg::OpgBundle obtain_bundle(const DatasetManifest& manifest, const std::string& holdout,
                             const RunConfig& cfg, const fs::path& dir, bool retrain) {
  if (!retrain && fs::exists(dir / "provenance.json")) {
    try {
      opg::OpgBundle bundle = opg::load_bundle(dir, &cfg);
      if (bundle.held_out_sensor == holdout &&
          bundle.manifest_fingerprint == expected_bundle_fingerprint(manifest, holdout)) {
        std::cout << "reusing cached OPG bundle at " << dir.string() << "\n";
        return bundle;
      }
      std::cout << "cache mismatch at " << dir.string() << ", retraining\n";
    } catch (const Error& e) {
      std::cout << "cached bundle unusable (" << e.what() << "), retraining\n";
    }
  }
  opg::OpgBundle bundle = opg::build_opg(
      manifest, holdout, nullptr, cfg,
      [](const SampleRecord& r) { return ingest::load_image(r.path, r.sensor_id); }, dir);
  opg::save_bundle(bundle, dir);
  std::cout << "OPG bundle written to " << dir.string() << "\n";
  return bundle;
}

void print_metrics_text(const evaluation::EvalReport& r) {
  auto pct = [](const std::optional<double>& v) {
    if (!v) return std::string("n/a");
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f%%", *v);
    return std::string(buf);
  };
  std::cout << "APCER: " << pct(r.apcer);
  if (r.apcer_known || r.apcer_unknown)
    std::cout << "  (known " << pct(r.apcer_known) << ", unknown " << pct(r.apcer_unknown) << ")";
  std::cout << "\nBPCER: " << pct(r.bpcer) << "\nACE: " << pct(r.ace)
            << "\naccuracy: " << pct(r.accuracy) << "\n";
}

void print_scan_table(const DatasetManifest& m, std::size_t skipped, bool as_json) {
  if (as_json) {
    json j;
    j["name"] = m.name;
    j["skipped"] = skipped;
    j["sensors"] = json::array();
    for (const auto& sensor : m.sensors) {
      json s;
      s["sensor"] = sensor;
      for (Split split : {Split::train, Split::test}) {
        json sp;
        sp["live"] = m.count(sensor, split, SampleLabel::live);
        sp["spoof"] = m.count(sensor, split, SampleLabel::spoof);
        std::map<std::string, int> mats;
        for (const auto& r : m.records)
          if (r.sensor_id == sensor && r.split == split && r.label == SampleLabel::spoof)
            ++mats[r.material];
        sp["materials"] = mats;
        s[to_string(split)] = sp;
      }
      j["sensors"].push_back(s);
    }
    std::cout << j.dump(2) << "\n";
    return;
  }
  std::printf("%-18s %-6s %6s %6s  %s\n", "Sensor", "Split", "Live", "Spoof", "Materials");
  for (const auto& sensor : m.sensors) {
    for (Split split : {Split::train, Split::test}) {
      std::set<std::string> mats;
      for (const auto& r : m.records)
        if (r.sensor_id == sensor && r.split == split && r.label == SampleLabel::spoof)
          mats.insert(r.material);
      std::string mat_list;
      for (const auto& mat : mats) mat_list += (mat_list.empty() ? "" : ", ") + mat;
      std::printf("%-18s %-6s %6zu %6zu  %s\n", sensor.c_str(), to_string(split).c_str(),
                  m.count(sensor, split, SampleLabel::live),
                  m.count(sensor, split, SampleLabel::spoof), mat_list.c_str());
    }
  }
  if (skipped) std::printf("skipped %zu unsupported file(s)\n", skipped);
}

std::array<classifier::SectionClassifier, 9> load_classifiers(const fs::path& dir,
                                                              const RunConfig& cfg,
                                                              std::string* train_sensor) {
  std::array<classifier::SectionClassifier, 9> out;
  for (int j = 0; j < 9; ++j) {
    auto ck = netcore::load_checkpoint(dir / ("section_" + std::to_string(j) + ".ckpt"), &cfg);
    classifier::SectionClassifier clf;
    clf.section = j;
    clf.net = classifier::build_densenet121(ck.config, &clf.head_start);
    clf.params = std::move(ck.params);
    out[static_cast<std::size_t>(j)] = std::move(clf);
    if (train_sensor && ck.tags.count("sensor")) *train_sensor = ck.tags.at("sensor");
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Open Patch Generator fingerprint PAD toolkit"};
  app.require_subcommand(1);

  // --- scan ---------------------------------------------------------------
  auto* scan = app.add_subcommand("scan", "discover a dataset and write its manifest");
  std::string scan_root, scan_out, scan_format = "text";
  ingest::LayoutSpec layout;
  scan->add_option("root", scan_root, "dataset root directory")->required();
  scan->add_option("--out", scan_out, "manifest output path (default <root>/manifest.json)");
  scan->add_option("--live-dir", layout.live_dir, "live directory name");
  scan->add_option("--spoof-dir", layout.spoof_dir, "spoof directory name");
  scan->add_option("--train-dir", layout.train_dir, "train split directory name");
  scan->add_option("--test-dir", layout.test_dir, "test split directory name");
  scan->add_option("--format", scan_format, "text|json")
      ->check(CLI::IsMember({"text", "json"}));

  // --- make-fixture -------------------------------------------------------
  auto* fixture = app.add_subcommand("make-fixture", "write a synthetic test dataset");
  std::uint64_t fx_seed = 7;
  int fx_sensors = 3, fx_per_class = 10;
  std::string fx_out;
  fixture->add_option("--seed", fx_seed, "generation seed");
  fixture->add_option("--sensors", fx_sensors, "number of sensors");
  fixture->add_option("--per-class", fx_per_class, "images per class per split per sensor");
  fixture->add_option("--out", fx_out, "output directory")->required();

  // --- train-opg ----------------------------------------------------------
  auto* topg = app.add_subcommand("train-opg", "train the 9 section WGANs for one hold-out");
  CommonOpts topg_common;
  std::string topg_manifest, topg_holdout, topg_out;
  bool topg_retrain = false;
  topg->add_option("--manifest", topg_manifest, "dataset manifest")->required();
  topg->add_option("--holdout", topg_holdout, "held-out sensor id")->required();
  topg->add_option("--out", topg_out, "bundle directory (default: cache dir)");
  topg->add_flag("--retrain", topg_retrain, "ignore a cached bundle");
  add_common(topg, topg_common);

  // --- gen-patches --------------------------------------------------------
  auto* gen = app.add_subcommand("gen-patches", "sample patches from a trained bundle");
  std::string gen_bundle, gen_out;
  int gen_section = 0, gen_count = 16;
  std::uint64_t gen_seed = 0;
  gen->add_option("--bundle", gen_bundle, "OPG bundle directory")->required();
  gen->add_option("--section", gen_section, "section index in [0,8]")->required();
  gen->add_option("--count", gen_count, "number of patches");
  gen->add_option("--seed", gen_seed, "sampling seed");
  gen->add_option("--out", gen_out, "output directory")->required();

  // --- train-clf ----------------------------------------------------------
  auto* tclf = app.add_subcommand("train-clf", "train the 9 section classifiers for one sensor");
  CommonOpts tclf_common;
  std::string tclf_manifest, tclf_sensor, tclf_bundle, tclf_out;
  bool tclf_use_opg = false;
  tclf->add_option("--manifest", tclf_manifest, "dataset manifest")->required();
  tclf->add_option("--sensor", tclf_sensor, "training sensor id")->required();
  tclf->add_flag("--use-opg", tclf_use_opg, "augment spoof patches with OPG samples");
  tclf->add_option("--bundle", tclf_bundle, "OPG bundle directory (with --use-opg)");
  tclf->add_option("--out", tclf_out, "checkpoint directory")->required();
  add_common(tclf, tclf_common);

  // --- evaluate -----------------------------------------------------------
  auto* eval = app.add_subcommand("evaluate", "score a sensor's test split");
  CommonOpts eval_common;
  std::string eval_manifest, eval_sensor, eval_ckpts, eval_out, eval_format = "text";
  bool eval_det = false;
  eval->add_option("--manifest", eval_manifest, "dataset manifest")->required();
  eval->add_option("--sensor", eval_sensor, "test sensor id")->required();
  eval->add_option("--checkpoints", eval_ckpts, "classifier checkpoint directory")->required();
  eval->add_option("--out", eval_out, "report directory")->required();
  eval->add_flag("--det", eval_det, "emit det.csv and det.svg");
  eval->add_option("--format", eval_format, "text|json")
      ->check(CLI::IsMember({"text", "json"}));
  add_common(eval, eval_common);

  // --- run-protocol -------------------------------------------------------
  auto* runp = app.add_subcommand("run-protocol", "run an experiment spec end-to-end");
  CommonOpts runp_common;
  std::string runp_spec, runp_out;
  runp->add_option("--spec", runp_spec, "experiment spec JSON")->required();
  runp->add_option("--out", runp_out, "results directory")->required();
  add_common(runp, runp_common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*scan) {
      if (!fs::is_directory(scan_root))
        throw ConfigError("dataset root '" + scan_root + "' is not a directory");
      auto result = ingest::scan_dataset(scan_root, layout);
      fs::path out = scan_out.empty() ? fs::path(scan_root) / "manifest.json" : fs::path(scan_out);
      save_manifest(out, result.manifest);
      print_scan_table(result.manifest, result.skipped, scan_format == "json");
      std::cout << "manifest written to " << out.string() << "\n";
    } else if (*fixture) {
      DatasetManifest m = ingest::make_synthetic_fixture(fx_seed, fx_sensors, fx_per_class, fx_out);
      std::cout << "fixture with " << m.records.size() << " samples at " << fx_out << "\n";
    } else if (*topg) {
      RunConfig cfg = resolve_config(topg_common);
      DatasetManifest manifest = load_manifest(topg_manifest);
      fs::path dir = topg_out.empty()
                         ? bundle_key_dir(bundle_cache_dir(""), manifest, topg_holdout, cfg)
                         : fs::path(topg_out);
      opg::OpgBundle bundle = obtain_bundle(manifest, topg_holdout, cfg, dir, topg_retrain);
      for (int j = 0; j < 9; ++j)
        std::cout << "section " << j << ": trained on "
                  << bundle.section_counts[static_cast<std::size_t>(j)] << " spoof patches\n";
    } else if (*gen) {
      opg::OpgBundle bundle = opg::load_bundle(gen_bundle);
      auto patches = opg::generate_patches(bundle, gen_section, gen_count, gen_seed);
      fs::create_directories(gen_out);
      std::vector<std::vector<std::uint8_t>> tiles;
      for (std::size_t i = 0; i < patches.size(); ++i) {
        const Patch& p = patches[i];
        GrayImage img;
        img.width = img.height = p.size;
        img.pixels.resize(p.values.size());
        for (std::size_t k = 0; k < p.values.size(); ++k)
          img.pixels[k] = denormalize_intensity(p.values[k]);
        char name[32];
        std::snprintf(name, sizeof(name), "patch_%03zu.png", i);
        ingest::save_gray_png(img, fs::path(gen_out) / name);
        tiles.push_back(img.pixels);
      }
      if (!tiles.empty()) {
        ingest::save_contact_sheet(tiles, patches[0].size, fs::path(gen_out) / "sheet.png");
        std::cout << "wrote " << patches.size() << " patches + contact sheet to " << gen_out
                  << "\n";
      } else {
        std::cout << "nothing to generate (count=0)\n";
      }
    } else if (*tclf) {
      RunConfig cfg = resolve_config(tclf_common);
      DatasetManifest manifest = load_manifest(tclf_manifest);
      std::optional<opg::OpgBundle> bundle;
      if (tclf_use_opg) {
        fs::path dir = tclf_bundle.empty()
                           ? bundle_key_dir(bundle_cache_dir(""), manifest, tclf_sensor, cfg)
                           : fs::path(tclf_bundle);
        if (!fs::exists(dir / "provenance.json"))
          throw ProtocolError("--use-opg needs a trained bundle (none at '" + dir.string() +
                              "'); run train-opg first");
        bundle = opg::load_bundle(dir, &cfg);
        opg::assert_no_overlap(*bundle, manifest);
      }
      auto trained = protocols::train_all_sections(manifest, tclf_sensor, cfg,
                                                   bundle ? &*bundle : nullptr,
                                                   tclf_common.workers);
      fs::path dir = fs::path(tclf_out) / tclf_sensor;
      for (int j = 0; j < 9; ++j) {
        auto ju = static_cast<std::size_t>(j);
        std::map<std::string, std::string> tags{{"role", "classifier"},
                                                {"sensor", tclf_sensor},
                                                {"section", std::to_string(j)}};
        netcore::save_checkpoint(trained.classifiers[ju].params, cfg, tags,
                                 dir / ("section_" + std::to_string(j) + ".ckpt"));
        classifier::write_history_csv(trained.histories[ju],
                                      dir / ("history_" + std::to_string(j) + ".csv"));
        const auto& sc = trained.log.sections[ju];
        std::cout << "section " << j << ": live=" << sc.live << " spoof=" << sc.spoof
                  << " generated=" << sc.generated << "\n";
      }
      std::cout << "checkpoints written to " << dir.string() << "\n";
    } else if (*eval) {
      RunConfig cfg = resolve_config(eval_common);
      DatasetManifest manifest = load_manifest(eval_manifest);
      std::string train_sensor = eval_sensor;
      auto classifiers = load_classifiers(eval_ckpts, cfg, &train_sensor);
      auto report = protocols::score_test_set(manifest, eval_sensor, classifiers, cfg,
                                              eval_common.workers);
      evaluation::emit_report(report, eval_out, eval_det);
      if (eval_format == "json") {
        std::cout << evaluation::metrics_json(report).dump(2) << "\n";
      } else {
        if (train_sensor != eval_sensor && report.accuracy)
          std::printf("%s (%s): %.2f\n", train_sensor.c_str(), eval_sensor.c_str(),
                      *report.accuracy);
        print_metrics_text(report);
      }
      std::cout << "report written to " << eval_out << "\n";
    } else if (*runp) {
      protocols::ExperimentSpec spec = protocols::load_experiment_spec(runp_spec);
      if (runp_common.seed) spec.config.seed = *runp_common.seed;
      DatasetManifest manifest = load_manifest(spec.manifest_path);
      std::optional<opg::OpgBundle> bundle;
      if (spec.protocol.use_opg) {
        fs::path dir = bundle_key_dir(bundle_cache_dir(""), manifest, spec.protocol.opg_holdout,
                                      spec.config);
        bundle = obtain_bundle(manifest, spec.protocol.opg_holdout, spec.config, dir, false);
      }
      protocols::ProtocolResult result =
          spec.protocol.kind == protocols::ProtocolKind::intra_sensor
              ? protocols::run_intra_sensor(manifest, spec.protocol.train_sensor, spec.config,
                                            spec.protocol.use_opg, bundle ? &*bundle : nullptr,
                                            runp_common.workers)
              : protocols::run_cross_sensor(manifest, spec.protocol.train_sensor,
                                            spec.protocol.test_sensor, spec.config,
                                            spec.protocol.use_opg, bundle ? &*bundle : nullptr,
                                            runp_common.workers);
      fs::path dir = protocols::result_dir(runp_out, spec.protocol);
      evaluation::emit_report(result.report, dir);
      for (const auto& note : result.log.notes) std::cout << note << "\n";
      print_metrics_text(result.report);
      std::cout << "report written to " << dir.string() << "\n";
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const ProtocolError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const CompatibilityError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
