#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "opgfpad/errors.hpp"
#include "opgfpad/rng.hpp"

// Shared domain types and the run configuration. All types here are immutable
// value types once constructed and safe to share across workers.

namespace opgfpad {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Images and minutiae

struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // row-major, length = width*height
  std::string sensor_id;
  std::string source_path;

  std::uint8_t at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t& at(int x, int y) { return pixels[static_cast<std::size_t>(y) * width + x]; }

  void validate() const {
    if (width <= 0 || height <= 0)
      throw ConfigError("image dimensions must be positive");
    if (pixels.size() != static_cast<std::size_t>(width) * height)
      throw ConfigError("pixel buffer length does not match width*height");
  }
};

enum class MinutiaKind { ending, bifurcation };

inline std::string to_string(MinutiaKind k) {
  return k == MinutiaKind::ending ? "ending" : "bifurcation";
}

struct Minutia {
  int x = 0;
  int y = 0;
  double theta = 0.0;  // ridge orientation, degrees in [0, 360)
  int quality = 0;     // [0, 100]
  MinutiaKind kind = MinutiaKind::ending;
  bool near_border = false;  // within patch_size/2 of the skeleton bbox edge

  void validate(int width, int height) const {
    if (x < 0 || x >= width || y < 0 || y >= height)
      throw ConfigError("minutia coordinates outside image bounds");
    if (quality < 0 || quality > 100)
      throw ConfigError("minutia quality outside [0, 100]");
    if (theta < 0.0 || theta >= 360.0)
      throw ConfigError("minutia orientation outside [0, 360)");
  }
};

// ---------------------------------------------------------------------------
// Patches

enum class PatchLabel { live, spoof, generated };

inline std::string to_string(PatchLabel l) {
  switch (l) {
    case PatchLabel::live: return "live";
    case PatchLabel::spoof: return "spoof";
    default: return "generated";
  }
}

struct PatchOrigin {
  bool synthetic = false;  // true for generator output; x/y meaningless then
  int x = 0;
  int y = 0;
};

struct Patch {
  int size = 96;
  std::vector<float> values;  // size*size floats in [-1, 1], row-major
  int section = 0;            // [0, 8]
  PatchLabel label = PatchLabel::live;
  PatchOrigin origin;

  void validate() const {
    if (size <= 0) throw ConfigError("patch size must be positive");
    if (values.size() != static_cast<std::size_t>(size) * size)
      throw ConfigError("patch value count does not match size^2");
    if (section < 0 || section > 8) throw ConfigError("patch section outside [0, 8]");
    for (float v : values)
      if (!(v >= -1.0f && v <= 1.0f)) throw ConfigError("patch value outside [-1, 1]");
  }
};

// Pixel intensities map onto [-1, 1] via v/127.5 - 1; the generator ends in a
// tanh so both real and synthetic patches live on the same scale.
inline float normalize_intensity(std::uint8_t v) {
  return static_cast<float>(v) / 127.5f - 1.0f;
}

inline std::uint8_t denormalize_intensity(float v) {
  float p = (std::clamp(v, -1.0f, 1.0f) + 1.0f) * 127.5f;
  return static_cast<std::uint8_t>(std::lround(p));
}

// ---------------------------------------------------------------------------
// Dataset manifest

enum class Split { train, test };

inline std::string to_string(Split s) { return s == Split::train ? "train" : "test"; }

enum class SampleLabel { live, spoof };

inline std::string to_string(SampleLabel l) { return l == SampleLabel::live ? "live" : "spoof"; }

struct SampleRecord {
  std::string path;
  std::string sensor_id;
  Split split = Split::train;
  SampleLabel label = SampleLabel::live;
  std::string material = "live";  // "live" for live samples
  bool known_material = true;     // material appears in this sensor's training spoofs

  void validate() const {
    bool live = label == SampleLabel::live;
    if (live != (material == "live"))
      throw ConfigError("record '" + path + "': label/material mismatch (live <=> material == \"live\")");
  }
};

struct DatasetManifest {
  std::string name;
  std::vector<std::string> sensors;
  std::vector<SampleRecord> records;

  void validate() const {
    std::set<std::string> sensor_set(sensors.begin(), sensors.end());
    std::set<std::string> paths;
    for (const auto& r : records) {
      r.validate();
      if (!sensor_set.count(r.sensor_id))
        throw ConfigError("record sensor '" + r.sensor_id + "' missing from sensor list");
      if (!paths.insert(r.path).second)
        throw ConfigError("duplicate record path '" + r.path + "'");
    }
  }

  // Count of records matching the given filters; used for Table-style audits.
  std::size_t count(const std::string& sensor, std::optional<Split> split = {},
                    std::optional<SampleLabel> label = {}) const {
    std::size_t n = 0;
    for (const auto& r : records) {
      if (r.sensor_id != sensor) continue;
      if (split && r.split != *split) continue;
      if (label && r.label != *label) continue;
      ++n;
    }
    return n;
  }

  std::vector<SampleRecord> select(const std::string& sensor, Split split) const {
    std::vector<SampleRecord> out;
    for (const auto& r : records)
      if (r.sensor_id == sensor && r.split == split) out.push_back(r);
    return out;
  }

  // Spoof materials present in one sensor's training split.
  std::set<std::string> train_materials(const std::string& sensor) const {
    std::set<std::string> mats;
    for (const auto& r : records)
      if (r.sensor_id == sensor && r.split == Split::train && r.label == SampleLabel::spoof)
        mats.insert(r.material);
    return mats;
  }
};

// ---------------------------------------------------------------------------
// Run configuration

// Values marked "paper" are fixed by the method description; the rest are
// conventions this implementation exposes rather than hard-codes.
struct RunConfig {
  std::uint64_t seed = 0;
  int patch_size = 96;          // paper: best ACE among 64/96/128
  int quality_threshold = 15;   // paper: minutiae quality cut
  double score_threshold = 0.5; // paper: global liveness decision
  int noise_dim = 128;          // paper: generator noise input
  int gan_epochs = 125;         // paper
  int clf_epochs = 100;         // paper
  double learning_rate = 1e-4;  // paper: Adam
  double weight_decay = 4e-4;   // paper: Adam
  double gp_lambda = 10.0;      // gradient-penalty weight (Gulrajani et al. convention)
  int critic_steps = 5;         // critic updates per generator update
  int batch_size = 64;          // convention, desk-scale
  double gan_beta1 = 0.0;       // Adam betas for GAN training
  double gan_beta2 = 0.9;
  int head_units1 = 256;        // classifier head widths / dropout (conventions)
  int head_units2 = 128;
  double head_dropout = 0.3;

  void validate() const {
    auto positive = [](double v, const char* name) {
      if (!(v > 0)) throw ConfigError(std::string("config: ") + name + " must be positive");
    };
    positive(patch_size, "patch_size");
    positive(noise_dim, "noise_dim");
    positive(gan_epochs, "gan_epochs");
    positive(clf_epochs, "clf_epochs");
    positive(learning_rate, "learning_rate");
    positive(gp_lambda, "gp_lambda");
    positive(critic_steps, "critic_steps");
    positive(batch_size, "batch_size");
    if (quality_threshold < 0 || quality_threshold > 100)
      throw ConfigError("config: quality_threshold must lie in [0, 100]");
    if (!(score_threshold > 0.0 && score_threshold < 1.0))
      throw ConfigError("config: score_threshold must lie in (0, 1)");
    if (weight_decay < 0) throw ConfigError("config: weight_decay must be non-negative");
    if (head_dropout < 0 || head_dropout >= 1)
      throw ConfigError("config: head_dropout must lie in [0, 1)");
  }

  // Stable fingerprint of everything that affects model architecture or
  // training semantics. The seed is excluded: checkpoints from different
  // seeds are shape-compatible.
  std::uint64_t compat_hash() const {
    std::ostringstream os;
    os << patch_size << '|' << quality_threshold << '|' << score_threshold << '|' << noise_dim
       << '|' << gan_epochs << '|' << clf_epochs << '|' << learning_rate << '|' << weight_decay
       << '|' << gp_lambda << '|' << critic_steps << '|' << batch_size << '|' << gan_beta1 << '|'
       << gan_beta2 << '|' << head_units1 << '|' << head_units2 << '|' << head_dropout;
    return fnv1a64(os.str());
  }
};

// ---------------------------------------------------------------------------
// JSON serialization

inline void to_json(json& j, const SampleRecord& r) {
  j = json{{"path", r.path},
           {"sensor_id", r.sensor_id},
           {"split", to_string(r.split)},
           {"label", to_string(r.label)},
           {"material", r.material},
           {"known_material", r.known_material}};
}

inline void from_json(const json& j, SampleRecord& r) {
  r.path = j.at("path").get<std::string>();
  r.sensor_id = j.at("sensor_id").get<std::string>();
  std::string split = j.at("split").get<std::string>();
  if (split != "train" && split != "test") throw ParseError("unknown split '" + split + "'");
  r.split = split == "train" ? Split::train : Split::test;
  std::string label = j.at("label").get<std::string>();
  if (label != "live" && label != "spoof") throw ParseError("unknown label '" + label + "'");
  r.label = label == "live" ? SampleLabel::live : SampleLabel::spoof;
  r.material = j.at("material").get<std::string>();
  r.known_material = j.at("known_material").get<bool>();
}

inline void to_json(json& j, const DatasetManifest& m) {
  j = json{{"name", m.name}, {"sensors", m.sensors}, {"records", m.records}};
}

inline void from_json(const json& j, DatasetManifest& m) {
  m.name = j.at("name").get<std::string>();
  m.sensors = j.at("sensors").get<std::vector<std::string>>();
  m.records = j.at("records").get<std::vector<SampleRecord>>();
}

inline void to_json(json& j, const RunConfig& c) {
  j = json{{"seed", c.seed},
           {"patch_size", c.patch_size},
           {"quality_threshold", c.quality_threshold},
           {"score_threshold", c.score_threshold},
           {"noise_dim", c.noise_dim},
           {"gan_epochs", c.gan_epochs},
           {"clf_epochs", c.clf_epochs},
           {"learning_rate", c.learning_rate},
           {"weight_decay", c.weight_decay},
           {"gp_lambda", c.gp_lambda},
           {"critic_steps", c.critic_steps},
           {"batch_size", c.batch_size},
           {"gan_beta1", c.gan_beta1},
           {"gan_beta2", c.gan_beta2},
           {"head_units1", c.head_units1},
           {"head_units2", c.head_units2},
           {"head_dropout", c.head_dropout}};
}

inline void from_json(const json& j, RunConfig& c) {
  // Missing fields keep their defaults so config files may be partial.
  c = RunConfig{};
  auto get = [&j](const char* key, auto& out) {
    if (j.contains(key)) out = j.at(key).get<std::decay_t<decltype(out)>>();
  };
  get("seed", c.seed);
  get("patch_size", c.patch_size);
  get("quality_threshold", c.quality_threshold);
  get("score_threshold", c.score_threshold);
  get("noise_dim", c.noise_dim);
  get("gan_epochs", c.gan_epochs);
  get("clf_epochs", c.clf_epochs);
  get("learning_rate", c.learning_rate);
  get("weight_decay", c.weight_decay);
  get("gp_lambda", c.gp_lambda);
  get("critic_steps", c.critic_steps);
  get("batch_size", c.batch_size);
  get("gan_beta1", c.gan_beta1);
  get("gan_beta2", c.gan_beta2);
  get("head_units1", c.head_units1);
  get("head_units2", c.head_units2);
  get("head_dropout", c.head_dropout);
}

inline json load_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ParseError("invalid JSON in '" + path.string() + "': " + e.what());
  }
  return j;
}

inline void save_json_file(const std::filesystem::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << j.dump(2) << '\n';
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
  DatasetManifest m = load_json_file(path).get<DatasetManifest>();
  m.validate();
  return m;
}

inline void save_manifest(const std::filesystem::path& path, const DatasetManifest& m) {
  m.validate();
  save_json_file(path, json(m));
}

inline RunConfig load_config(const std::filesystem::path& path) {
  RunConfig c = load_json_file(path).get<RunConfig>();
  c.validate();
  return c;
}

}  // namespace opgfpad
