#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "opgfpad/core.hpp"
#include "opgfpad/errors.hpp"
#include "opgfpad/minutiae.hpp"
#include "opgfpad/rng.hpp"

// Minutiae-centered patch extraction and the 3x3 section grid over the
// segmented fingerprint area.

namespace opgfpad::patching {

namespace detail {

// Mirror an index into [0, n); the reflection duplicates the edge sample
// (-1 -> 0, n -> n-1) and iterates for far out-of-range indices.
inline int reflect_index(int i, int n) {
  while (i < 0 || i >= n) {
    if (i < 0) i = -i - 1;
    if (i >= n) i = 2 * n - 1 - i;
  }
  return i;
}

}  // namespace detail

// Section index in [0, 8], row-major over the 3x3 grid spanned by the
// segmentation bounding box. Points on the outer edge clamp into the last
// cell so the grid covers the box with exactly nine bins.
inline int assign_section(const Minutia& m, int x_min, int y_min, int x_max, int y_max) {
  const int x_span = x_max - x_min, y_span = y_max - y_min;
  if (x_span <= 0 || y_span <= 0)
    throw ConfigError("assign_section: degenerate bounding box");
  if (m.x < x_min || m.x > x_max || m.y < y_min || m.y > y_max)
    throw ConfigError("assign_section: minutia outside bounding box");
  int col = static_cast<int>(3LL * (m.x - x_min) / x_span);
  int row = static_cast<int>(3LL * (m.y - y_min) / y_span);
  col = std::min(col, 2);
  row = std::min(row, 2);
  return 3 * row + col;
}

inline int assign_section(const Minutia& m, const minutiae::SegmentationMask& mask) {
  return assign_section(m, mask.x_min, mask.y_min, mask.x_max, mask.y_max);
}

// size x size window centered on the minutia, reflect-padded where it leaves
// the image, normalized to [-1, 1]. The section must be assigned by the
// caller (it depends on the segmentation bbox, not the raw frame).
inline Patch extract_patch(const GrayImage& img, const Minutia& m, int size, int section,
                           PatchLabel label) {
  if (size <= 0 || size > 2 * std::min(img.width, img.height))
    throw ConfigError("extract_patch: size must lie in (0, 2*min(width,height)]");
  if (m.x < 0 || m.x >= img.width || m.y < 0 || m.y >= img.height)
    throw ConfigError("extract_patch: minutia outside image");

  Patch p;
  p.size = size;
  p.section = section;
  p.label = label;
  p.origin = {false, m.x, m.y};
  p.values.resize(static_cast<std::size_t>(size) * size);
  const int half = size / 2;
  for (int r = 0; r < size; ++r) {
    int sy = detail::reflect_index(m.y - half + r, img.height);
    for (int c = 0; c < size; ++c) {
      int sx = detail::reflect_index(m.x - half + c, img.width);
      p.values[static_cast<std::size_t>(r) * size + c] = normalize_intensity(img.at(sx, sy));
    }
  }
  return p;
}

// Partition into the nine per-section lists, preserving within-section order.
inline std::array<std::vector<Patch>, 9> group_by_section(const std::vector<Patch>& patches) {
  std::array<std::vector<Patch>, 9> groups;
  for (const Patch& p : patches) {
    if (p.section < 0 || p.section > 8)
      throw ConfigError("group_by_section: patch without a valid section");
    groups[static_cast<std::size_t>(p.section)].push_back(p);
  }
  return groups;
}

// All patches for one image: extract minutiae, map each to its section over
// the segmentation bbox, cut the window.
inline std::vector<Patch> patches_for_image(const GrayImage& img, const RunConfig& cfg,
                                            PatchLabel label) {
  minutiae::SegmentationMask mask = minutiae::segment(img);
  minutiae::Skeleton sk = minutiae::binarize_and_thin(img, mask);
  std::vector<Minutia> found = minutiae::detect_minutiae(sk, cfg.patch_size);
  for (Minutia& m : found) m.quality = minutiae::score_quality(m, img);
  found = minutiae::suppress_close(found);
  found = minutiae::filter_by_quality(found, cfg.quality_threshold);

  std::vector<Patch> out;
  out.reserve(found.size());
  for (const Minutia& m : found) {
    int section = assign_section(m, mask);
    out.push_back(extract_patch(img, m, cfg.patch_size, section, label));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Patch cache: per image one flat float32 blob plus a JSON sidecar describing
// layout and per-patch metadata.

class PatchStore {
public:
  explicit PatchStore(std::filesystem::path dir) : dir_(std::move(dir)) {
    std::filesystem::create_directories(dir_);
  }

  const std::filesystem::path& dir() const { return dir_; }

  static std::string key_for(const std::string& sample_path) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(fnv1a64(sample_path)));
    return buf;
  }

  bool contains(const std::string& sample_path) const {
    return std::filesystem::exists(sidecar_path(sample_path));
  }

  void write(const std::string& sample_path, const std::vector<Patch>& patches) const {
    std::string key = key_for(sample_path);
    json meta;
    meta["source_path"] = sample_path;
    meta["dtype"] = "float32";
    meta["count"] = patches.size();
    meta["patches"] = json::array();

    std::ofstream bin(blob_path(sample_path), std::ios::binary);
    if (!bin) throw IoError("cannot write patch blob for '" + sample_path + "'");
    for (const Patch& p : patches) {
      p.validate();
      json pm;
      pm["size"] = p.size;
      pm["section"] = p.section;
      pm["label"] = to_string(p.label);
      pm["origin"] = {{"synthetic", p.origin.synthetic}, {"x", p.origin.x}, {"y", p.origin.y}};
      meta["patches"].push_back(std::move(pm));
      bin.write(reinterpret_cast<const char*>(p.values.data()),
                static_cast<std::streamsize>(p.values.size() * sizeof(float)));
    }
    save_json_file(sidecar_path(sample_path), meta);
  }

  std::vector<Patch> read(const std::string& sample_path) const {
    json meta = load_json_file(sidecar_path(sample_path));
    std::ifstream bin(blob_path(sample_path), std::ios::binary);
    if (!bin) throw IoError("missing patch blob for '" + sample_path + "'");
    std::vector<Patch> out;
    for (const auto& pm : meta.at("patches")) {
      Patch p;
      p.size = pm.at("size").get<int>();
      p.section = pm.at("section").get<int>();
      std::string label = pm.at("label").get<std::string>();
      p.label = label == "live"    ? PatchLabel::live
                : label == "spoof" ? PatchLabel::spoof
                                   : PatchLabel::generated;
      p.origin.synthetic = pm.at("origin").at("synthetic").get<bool>();
      p.origin.x = pm.at("origin").at("x").get<int>();
      p.origin.y = pm.at("origin").at("y").get<int>();
      p.values.resize(static_cast<std::size_t>(p.size) * p.size);
      bin.read(reinterpret_cast<char*>(p.values.data()),
               static_cast<std::streamsize>(p.values.size() * sizeof(float)));
      if (!bin) throw IntegrityError("patch blob truncated for '" + sample_path + "'");
      out.push_back(std::move(p));
    }
    return out;
  }

private:
  std::filesystem::path blob_path(const std::string& sample_path) const {
    return dir_ / (key_for(sample_path) + ".bin");
  }
  std::filesystem::path sidecar_path(const std::string& sample_path) const {
    return dir_ / (key_for(sample_path) + ".json");
  }

  std::filesystem::path dir_;
};

}  // namespace opgfpad::patching
