#pragma once

// Shared test utilities: temp dirs, synthetic rasters, separable patch sets
// and finite-difference gradient checks.

#include <atomic>
#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <unistd.h>
#include <vector>

#include "opgfpad/core.hpp"
#include "opgfpad/rng.hpp"

namespace testutil {

namespace fs = std::filesystem;

// Unique scratch directory, removed on destruction.
class TempDir {
public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = fs::temp_directory_path() /
            ("opgfpad_" + tag + "_" + std::to_string(::getpid()) + "_" +
             std::to_string(counter.fetch_add(1)));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  const fs::path& path() const { return path_; }

private:
  fs::path path_;
};

// Oriented sinusoidal grating; ridges are the dark troughs.
inline opgfpad::GrayImage make_grating(int width, int height, double amplitude, double frequency,
                                       double theta_deg = 0.0, double phase = 0.0,
                                       double noise = 0.0, std::uint64_t seed = 1) {
  opgfpad::GrayImage img;
  img.width = width;
  img.height = height;
  img.pixels.resize(static_cast<std::size_t>(width) * height);
  opgfpad::SeededRng rng(seed);
  const double t = theta_deg * 3.14159265358979323846 / 180.0;
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      double v = 128.0 +
                 amplitude * std::sin(2.0 * 3.14159265358979323846 * frequency *
                                          (x * std::cos(t) + y * std::sin(t)) +
                                      phase);
      if (noise > 0) v += rng.normal(0.0, noise);
      img.pixels[static_cast<std::size_t>(y) * width + x] =
          static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
    }
  return img;
}

// Separable patch classes for classifier sanity tests: live patches are
// high-contrast gratings, spoof patches low-contrast noise.
inline std::vector<opgfpad::Patch> make_separable_patches(int count, int size, bool live,
                                                          int section, std::uint64_t seed) {
  std::vector<opgfpad::Patch> out;
  opgfpad::SeededRng rng(seed);
  for (int i = 0; i < count; ++i) {
    opgfpad::Patch p;
    p.size = size;
    p.section = section;
    p.label = live ? opgfpad::PatchLabel::live : opgfpad::PatchLabel::spoof;
    p.origin = {false, size / 2, size / 2};
    p.values.resize(static_cast<std::size_t>(size) * size);
    double theta = rng.uniform(0, 3.14159);
    double phase = rng.uniform(0, 6.28318);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        double v;
        if (live)
          v = 0.7 * std::sin(2 * 3.14159 * 0.1 * (x * std::cos(theta) + y * std::sin(theta)) +
                             phase) +
              rng.normal(0, 0.03);
        else
          v = rng.normal(0, 0.15);
        p.values[static_cast<std::size_t>(y) * size + x] =
            static_cast<float>(std::clamp(v, -1.0, 1.0));
      }
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace testutil
