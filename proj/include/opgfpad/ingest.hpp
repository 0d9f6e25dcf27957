#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "opgfpad/core.hpp"
#include "opgfpad/errors.hpp"
#include "opgfpad/image_io.hpp"
#include "opgfpad/rng.hpp"

// Dataset discovery and synthetic fixtures. The on-disk layout mirrors the
// LivDet convention: root/<sensor>/<split>/Live/* and
// root/<sensor>/<split>/Fake/<material>/*.

namespace opgfpad::ingest {

namespace fs = std::filesystem;

struct LayoutSpec {
  std::string live_dir = "Live";
  std::string spoof_dir = "Fake";  // material subdirectories inside
  std::string train_dir = "train";
  std::string test_dir = "test";

  void validate() const {
    if (live_dir == spoof_dir || train_dir == test_dir)
      throw ConfigError("layout: live/spoof and train/test directories must be disjoint");
  }
};

struct ScanResult {
  DatasetManifest manifest;
  std::size_t skipped = 0;  // unreadable or unsupported files
};

// Walks the dataset tree and builds a manifest. known_material is derived
// from the manifest itself: a test spoof is "known" exactly when its material
// occurs among the same sensor's training spoofs.
inline ScanResult scan_dataset(const fs::path& root, const LayoutSpec& layout = {}) {
  layout.validate();
  if (!fs::exists(root) || !fs::is_directory(root))
    throw IoError("dataset root '" + root.string() + "' does not exist");

  ScanResult result;
  result.manifest.name = root.filename().string();
  if (result.manifest.name.empty()) result.manifest.name = root.parent_path().filename().string();

  std::vector<std::string> sensors;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) sensors.push_back(e.path().filename().string());
  std::sort(sensors.begin(), sensors.end());

  auto collect_dir = [&](const fs::path& dir, const std::string& sensor, Split split,
                         SampleLabel label, const std::string& material) {
    if (!fs::exists(dir)) return;
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir))
      if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      if (!supported_image_ext(f)) {
        ++result.skipped;
        continue;
      }
      SampleRecord r;
      r.path = f.lexically_normal().string();
      r.sensor_id = sensor;
      r.split = split;
      r.label = label;
      r.material = material;
      result.manifest.records.push_back(std::move(r));
    }
  };

  for (const auto& sensor : sensors) {
    for (Split split : {Split::train, Split::test}) {
      fs::path split_dir =
          root / sensor / (split == Split::train ? layout.train_dir : layout.test_dir);
      collect_dir(split_dir / layout.live_dir, sensor, split, SampleLabel::live, "live");
      fs::path spoof_root = split_dir / layout.spoof_dir;
      if (fs::exists(spoof_root)) {
        std::vector<fs::path> material_dirs;
        for (const auto& e : fs::directory_iterator(spoof_root)) {
          if (e.is_directory())
            material_dirs.push_back(e.path());
          else
            ++result.skipped;  // spoofs must sit in a material subdirectory
        }
        std::sort(material_dirs.begin(), material_dirs.end());
        for (const auto& md : material_dirs)
          collect_dir(md, sensor, split, SampleLabel::spoof, md.filename().string());
      }
    }
  }

  // Sensors with at least one sample; then the known-material flags.
  std::set<std::string> seen;
  for (const auto& r : result.manifest.records) seen.insert(r.sensor_id);
  result.manifest.sensors.assign(seen.begin(), seen.end());

  std::map<std::string, std::set<std::string>> train_mats;
  for (const auto& r : result.manifest.records)
    if (r.split == Split::train && r.label == SampleLabel::spoof)
      train_mats[r.sensor_id].insert(r.material);
  for (auto& r : result.manifest.records)
    r.known_material =
        r.label == SampleLabel::live || train_mats[r.sensor_id].count(r.material) > 0;

  result.manifest.validate();
  return result;
}

// ---------------------------------------------------------------------------
// Synthetic fixture
//
// Oriented sinusoidal ridge gratings with per-class frequency/contrast
// offsets, an amplitude taper toward the background, and small circular ridge
// breaks so the minutiae detector finds interior endings in every section.
// Live and spoof classes are separable by construction.

namespace detail {

struct FixtureClassParams {
  double amplitude;
  double frequency;  // cycles per pixel
};

inline FixtureClassParams fixture_params(SampleLabel label, const std::string& material) {
  if (label == SampleLabel::live) return {85.0, 0.095};
  FixtureClassParams p{40.0, 0.150};
  if (material == "latex") p.amplitude -= 5.0;
  if (material == "playdoh") p.frequency += 0.012;
  return p;
}

inline GrayImage fixture_image(SampleLabel label, const std::string& material, int sensor_index,
                               SeededRng& rng) {
  const int size = 200, margin = 16, taper = 12;
  FixtureClassParams cp = fixture_params(label, material);
  const double theta =
      (25.0 * sensor_index + rng.uniform(-8.0, 8.0)) * 3.14159265358979323846 / 180.0;
  const double phase = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
  const double cos_t = std::cos(theta), sin_t = std::sin(theta);

  GrayImage img;
  img.width = img.height = size;
  img.pixels.resize(static_cast<std::size_t>(size) * size);

  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      double d = std::min({x - margin, size - 1 - margin - x, y - margin, size - 1 - margin - y});
      double env = std::clamp(d / taper, 0.0, 1.0);
      double ridge = cp.amplitude * env *
                     std::sin(2.0 * 3.14159265358979323846 * cp.frequency * (x * cos_t + y * sin_t) +
                              phase);
      double v = 128.0 + ridge + rng.normal(0.0, env > 0 ? 3.0 : 2.0);
      img.pixels[static_cast<std::size_t>(y) * size + x] =
          static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
    }
  }

  // One ridge break per third of the interior, jittered. Each break is a
  // stripe along the grating direction long enough to span a full ridge
  // period, so it always severs at least one ridge line into two endings.
  // Stamped at crest brightness so it reads as valley, not ridge.
  const auto valley = static_cast<std::uint8_t>(std::clamp(128.0 + cp.amplitude, 0.0, 255.0));
  const int lo = margin + taper + 8, hi = size - margin - taper - 8;
  const int cell = (hi - lo) / 3;
  for (int cy = 0; cy < 3; ++cy) {
    for (int cx = 0; cx < 3; ++cx) {
      int gx = lo + cx * cell + cell / 2 + static_cast<int>(rng.uniform_int(-cell / 4, cell / 4));
      int gy = lo + cy * cell + cell / 2 + static_cast<int>(rng.uniform_int(-cell / 4, cell / 4));
      for (double t = -6.0; t <= 6.0; t += 0.5) {
        int px = gx + static_cast<int>(std::lround(t * cos_t));
        int py = gy + static_cast<int>(std::lround(t * sin_t));
        for (int dy = -2; dy <= 2; ++dy)
          for (int dx = -2; dx <= 2; ++dx)
            if (dx * dx + dy * dy <= 4)
              img.pixels[static_cast<std::size_t>(py + dy) * size + px + dx] = valley;
      }
    }
  }
  return img;
}

}  // namespace detail

// Writes a deterministic synthetic dataset in the default layout and returns
// its manifest (also saved as <out>/manifest.json). Train spoofs use
// gelatine/latex; test spoofs use gelatine/playdoh, so with per_class_count
// >= 2 every sensor's test split carries both known and unknown materials.
inline DatasetManifest make_synthetic_fixture(std::uint64_t seed, int sensors, int per_class_count,
                                              const fs::path& out) {
  if (sensors < 0 || per_class_count < 0)
    throw ConfigError("fixture: sensor and per-class counts must be non-negative");
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec || !fs::is_directory(out))
    throw IoError("cannot create fixture directory '" + out.string() + "'");

  DatasetManifest manifest;
  manifest.name = "synthetic-fixture";

  const std::vector<std::string> train_mats{"gelatine", "latex"};
  const std::vector<std::string> test_mats{"gelatine", "playdoh"};

  for (int s = 0; s < sensors; ++s) {
    std::string sensor = "sensor_" + std::string(1, static_cast<char>('a' + s));
    if (per_class_count > 0) manifest.sensors.push_back(sensor);
    for (Split split : {Split::train, Split::test}) {
      const auto& mats = split == Split::train ? train_mats : test_mats;
      for (int i = 0; i < per_class_count; ++i) {
        for (SampleLabel label : {SampleLabel::live, SampleLabel::spoof}) {
          std::string material = label == SampleLabel::live ? "live" : mats[i % mats.size()];
          std::string stem = (label == SampleLabel::live ? "live_" : material + "_") +
                             std::to_string(1000 + i) + ".png";
          fs::path rel = label == SampleLabel::live
                             ? fs::path(sensor) / to_string(split) / "Live" / stem
                             : fs::path(sensor) / to_string(split) / "Fake" / material / stem;
          SeededRng rng(derive_seed(seed, "fixture/" + sensor + "/" + to_string(split) + "/" +
                                              to_string(label),
                                    static_cast<std::uint64_t>(i)));
          GrayImage img = detail::fixture_image(label, material, s, rng);
          img.sensor_id = sensor;
          fs::path full = out / rel;
          save_gray_png(img, full);

          SampleRecord r;
          r.path = full.lexically_normal().string();
          r.sensor_id = sensor;
          r.split = split;
          r.label = label;
          r.material = material;
          manifest.records.push_back(std::move(r));
        }
      }
    }
  }

  for (auto& r : manifest.records)
    r.known_material = r.label == SampleLabel::live || r.split == Split::train ||
                       std::find(train_mats.begin(), train_mats.end(), r.material) !=
                           train_mats.end();

  manifest.validate();
  save_manifest(out / "manifest.json", manifest);
  return manifest;
}

}  // namespace opgfpad::ingest
