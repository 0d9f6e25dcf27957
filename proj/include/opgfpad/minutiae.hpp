#pragma once

#include <algorithm>
#include <cmath>
#include <deque>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "opgfpad/core.hpp"
#include "opgfpad/errors.hpp"

// Minutiae extraction: block-variance segmentation, adaptive binarization,
// two-subiteration thinning, crossing-number classification and a
// contrast/coherence quality score. An importer accepts externally produced
// (mindtct-style) minutiae files.

namespace opgfpad::minutiae {

struct SegmentationMask {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> foreground;  // 0/1 per pixel
  int x_min = 0, y_min = 0, x_max = 0, y_max = 0;  // inclusive bbox

  bool fg(int x, int y) const {
    return foreground[static_cast<std::size_t>(y) * width + x] != 0;
  }
};

struct Skeleton {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> on;  // 0/1 per pixel, 1-pixel-wide ridges

  bool at(int x, int y) const {
    if (x < 0 || y < 0 || x >= width || y >= height) return false;
    return on[static_cast<std::size_t>(y) * width + x] != 0;
  }
  void set(int x, int y, bool v) {
    on[static_cast<std::size_t>(y) * width + x] = v ? 1 : 0;
  }
};

// ---------------------------------------------------------------------------
// Segmentation: a block is foreground when its intensity variance clears the
// threshold; only the largest connected block component is kept.

inline SegmentationMask segment(const GrayImage& img, int block = 16,
                                double var_threshold = 100.0) {
  img.validate();
  if (block <= 0) throw ConfigError("segment: block size must be positive");

  const int bw = (img.width + block - 1) / block;
  const int bh = (img.height + block - 1) / block;
  std::vector<std::uint8_t> fg_block(static_cast<std::size_t>(bw) * bh, 0);

  for (int by = 0; by < bh; ++by) {
    for (int bx = 0; bx < bw; ++bx) {
      double sum = 0, sum2 = 0;
      int n = 0;
      for (int y = by * block; y < std::min((by + 1) * block, img.height); ++y)
        for (int x = bx * block; x < std::min((bx + 1) * block, img.width); ++x) {
          double v = img.at(x, y);
          sum += v;
          sum2 += v * v;
          ++n;
        }
      double mean = sum / n;
      double var = sum2 / n - mean * mean;
      if (var >= var_threshold) fg_block[static_cast<std::size_t>(by) * bw + bx] = 1;
    }
  }

  // Largest 4-connected component of foreground blocks.
  std::vector<int> comp(static_cast<std::size_t>(bw) * bh, -1);
  int best_comp = -1, best_size = 0, next = 0;
  for (int by = 0; by < bh; ++by) {
    for (int bx = 0; bx < bw; ++bx) {
      std::size_t idx = static_cast<std::size_t>(by) * bw + bx;
      if (!fg_block[idx] || comp[idx] >= 0) continue;
      int size = 0;
      std::deque<std::pair<int, int>> q{{bx, by}};
      comp[idx] = next;
      while (!q.empty()) {
        auto [cx, cy] = q.front();
        q.pop_front();
        ++size;
        const int dx[] = {1, -1, 0, 0}, dy[] = {0, 0, 1, -1};
        for (int d = 0; d < 4; ++d) {
          int nx = cx + dx[d], ny = cy + dy[d];
          if (nx < 0 || ny < 0 || nx >= bw || ny >= bh) continue;
          std::size_t ni = static_cast<std::size_t>(ny) * bw + nx;
          if (fg_block[ni] && comp[ni] < 0) {
            comp[ni] = next;
            q.emplace_back(nx, ny);
          }
        }
      }
      if (size > best_size) {
        best_size = size;
        best_comp = next;
      }
      ++next;
    }
  }
  if (best_comp < 0)
    throw DecodeError("blank image: no block clears the variance threshold ('" +
                      img.source_path + "')");

  SegmentationMask mask;
  mask.width = img.width;
  mask.height = img.height;
  mask.foreground.assign(static_cast<std::size_t>(img.width) * img.height, 0);
  mask.x_min = img.width;
  mask.y_min = img.height;
  mask.x_max = -1;
  mask.y_max = -1;
  for (int by = 0; by < bh; ++by)
    for (int bx = 0; bx < bw; ++bx) {
      if (comp[static_cast<std::size_t>(by) * bw + bx] != best_comp) continue;
      int x0 = bx * block, x1 = std::min((bx + 1) * block, img.width) - 1;
      int y0 = by * block, y1 = std::min((by + 1) * block, img.height) - 1;
      for (int y = y0; y <= y1; ++y)
        std::fill_n(mask.foreground.data() + static_cast<std::size_t>(y) * img.width + x0,
                    x1 - x0 + 1, std::uint8_t{1});
      mask.x_min = std::min(mask.x_min, x0);
      mask.y_min = std::min(mask.y_min, y0);
      mask.x_max = std::max(mask.x_max, x1);
      mask.y_max = std::max(mask.y_max, y1);
    }
  return mask;
}

// ---------------------------------------------------------------------------
// Binarization + thinning

namespace detail {

// Local mean over a (2r+1)^2 window via an integral image.
inline std::vector<double> local_mean(const GrayImage& img, int r) {
  const int w = img.width, h = img.height;
  std::vector<double> integral(static_cast<std::size_t>(w + 1) * (h + 1), 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      integral[static_cast<std::size_t>(y + 1) * (w + 1) + x + 1] =
          img.at(x, y) + integral[static_cast<std::size_t>(y) * (w + 1) + x + 1] +
          integral[static_cast<std::size_t>(y + 1) * (w + 1) + x] -
          integral[static_cast<std::size_t>(y) * (w + 1) + x];
  std::vector<double> mean(static_cast<std::size_t>(w) * h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      int x0 = std::max(0, x - r), x1 = std::min(w - 1, x + r);
      int y0 = std::max(0, y - r), y1 = std::min(h - 1, y + r);
      double s = integral[static_cast<std::size_t>(y1 + 1) * (w + 1) + x1 + 1] -
                 integral[static_cast<std::size_t>(y0) * (w + 1) + x1 + 1] -
                 integral[static_cast<std::size_t>(y1 + 1) * (w + 1) + x0] +
                 integral[static_cast<std::size_t>(y0) * (w + 1) + x0];
      mean[static_cast<std::size_t>(y) * w + x] = s / ((x1 - x0 + 1) * (y1 - y0 + 1));
    }
  return mean;
}

// One thinning pass (two-subiteration scheme); returns true when any pixel
// was removed. Neighbors follow the N, NE, E, SE, S, SW, W, NW cycle.
inline bool thinning_pass(Skeleton& sk, int sub) {
  static const int nx[] = {0, 1, 1, 1, 0, -1, -1, -1};
  static const int ny[] = {-1, -1, 0, 1, 1, 1, 0, -1};
  std::vector<std::pair<int, int>> kill;
  for (int y = 0; y < sk.height; ++y) {
    for (int x = 0; x < sk.width; ++x) {
      if (!sk.at(x, y)) continue;
      int n[8];
      int count = 0;
      for (int k = 0; k < 8; ++k) {
        n[k] = sk.at(x + nx[k], y + ny[k]) ? 1 : 0;
        count += n[k];
      }
      if (count < 2 || count > 6) continue;
      int transitions = 0;
      for (int k = 0; k < 8; ++k)
        if (n[k] == 0 && n[(k + 1) % 8] == 1) ++transitions;
      if (transitions != 1) continue;
      // n[0]=N, n[2]=E, n[4]=S, n[6]=W
      bool cond = sub == 0 ? (n[0] * n[2] * n[4] == 0 && n[2] * n[4] * n[6] == 0)
                           : (n[0] * n[2] * n[6] == 0 && n[0] * n[4] * n[6] == 0);
      if (cond) kill.emplace_back(x, y);
    }
  }
  for (auto [x, y] : kill) sk.set(x, y, false);
  return !kill.empty();
}

}  // namespace detail

// Adaptive local-mean binarization inside the mask (ridges are dark), then
// iterative thinning to 1-pixel-wide ridges.
inline Skeleton binarize_and_thin(const GrayImage& img, const SegmentationMask& mask) {
  if (mask.width != img.width || mask.height != img.height)
    throw ConfigError("binarize_and_thin: mask dimensions do not match image");
  Skeleton sk;
  sk.width = img.width;
  sk.height = img.height;
  sk.on.assign(static_cast<std::size_t>(img.width) * img.height, 0);

  auto mean = detail::local_mean(img, 7);
  const double offset = 2.0;  // suppresses flat-noise speckle
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      if (mask.fg(x, y) &&
          img.at(x, y) < mean[static_cast<std::size_t>(y) * img.width + x] - offset)
        sk.set(x, y, true);

  bool changed = true;
  while (changed) {
    changed = detail::thinning_pass(sk, 0);
    changed = detail::thinning_pass(sk, 1) || changed;
  }
  return sk;
}

// ---------------------------------------------------------------------------
// Crossing-number detection

namespace detail {

// Principal ridge direction (degrees in [0,360)) from skeleton pixels in a
// 9x9 window, oriented toward the local mass of the ridge.
inline double ridge_direction(const Skeleton& sk, int x, int y) {
  double sxx = 0, syy = 0, sxy = 0, mx = 0, my = 0;
  int n = 0;
  for (int dy = -4; dy <= 4; ++dy)
    for (int dx = -4; dx <= 4; ++dx) {
      if (dx == 0 && dy == 0) continue;
      if (!sk.at(x + dx, y + dy)) continue;
      sxx += dx * dx;
      syy += dy * dy;
      sxy += dx * dy;
      mx += dx;
      my += dy;
      ++n;
    }
  if (n == 0) return 0.0;
  double angle = 0.5 * std::atan2(2.0 * sxy, sxx - syy);  // principal axis, mod pi
  double cx = std::cos(angle), cy = std::sin(angle);
  if (cx * mx + cy * my < 0) angle += 3.14159265358979323846;
  double deg = angle * 180.0 / 3.14159265358979323846;
  deg = std::fmod(deg + 360.0, 360.0);
  return deg;
}

}  // namespace detail

// Crossing number of the 8-neighborhood cycle at (x, y): half the sum of
// absolute differences between consecutive neighbors.
inline int crossing_number(const Skeleton& sk, int x, int y) {
  static const int nx[] = {0, 1, 1, 1, 0, -1, -1, -1};
  static const int ny[] = {-1, -1, 0, 1, 1, 1, 0, -1};
  int cn = 0;
  for (int k = 0; k < 8; ++k) {
    int a = sk.at(x + nx[k], y + ny[k]) ? 1 : 0;
    int b = sk.at(x + nx[(k + 1) % 8], y + ny[(k + 1) % 8]) ? 1 : 0;
    cn += std::abs(a - b);
  }
  return cn / 2;
}

// CN=1 pixels are ridge endings, CN=3 are bifurcations. Minutiae closer than
// patch_size/2 to the skeleton bounding box are retained but flagged, since
// their patches will need reflect padding.
inline std::vector<Minutia> detect_minutiae(const Skeleton& sk, int patch_size = 96) {
  int x_min = sk.width, y_min = sk.height, x_max = -1, y_max = -1;
  for (int y = 0; y < sk.height; ++y)
    for (int x = 0; x < sk.width; ++x)
      if (sk.at(x, y)) {
        x_min = std::min(x_min, x);
        y_min = std::min(y_min, y);
        x_max = std::max(x_max, x);
        y_max = std::max(y_max, y);
      }

  std::vector<Minutia> out;
  if (x_max < 0) return out;
  const int half = patch_size / 2;
  for (int y = 0; y < sk.height; ++y) {
    for (int x = 0; x < sk.width; ++x) {
      if (!sk.at(x, y)) continue;
      int cn = crossing_number(sk, x, y);
      if (cn != 1 && cn != 3) continue;
      Minutia m;
      m.x = x;
      m.y = y;
      m.kind = cn == 1 ? MinutiaKind::ending : MinutiaKind::bifurcation;
      m.theta = detail::ridge_direction(sk, x, y);
      m.near_border =
          x - x_min < half || x_max - x < half || y - y_min < half || y_max - y < half;
      out.push_back(m);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Quality

// quality = round(100 * contrast * coherence) over a 16x16 window: contrast
// is the normalized intensity spread, coherence the orientation-tensor
// anisotropy. Monotone in both factors.
inline int score_quality(const Minutia& m, const GrayImage& img) {
  const int r = 8;
  int x0 = std::max(0, m.x - r), x1 = std::min(img.width - 1, m.x + r - 1);
  int y0 = std::max(0, m.y - r), y1 = std::min(img.height - 1, m.y + r - 1);

  int lo = 255, hi = 0;
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      int v = img.at(x, y);
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  double contrast = (hi - lo) / 255.0;

  double gxx = 0, gyy = 0, gxy = 0;
  for (int y = std::max(1, y0); y <= std::min(img.height - 2, y1); ++y)
    for (int x = std::max(1, x0); x <= std::min(img.width - 2, x1); ++x) {
      double gx = (img.at(x + 1, y) - img.at(x - 1, y)) / 2.0;
      double gy = (img.at(x, y + 1) - img.at(x, y - 1)) / 2.0;
      gxx += gx * gx;
      gyy += gy * gy;
      gxy += gx * gy;
    }
  double coherence =
      std::sqrt((gxx - gyy) * (gxx - gyy) + 4.0 * gxy * gxy) / (gxx + gyy + 1e-9);

  int q = static_cast<int>(std::lround(100.0 * contrast * coherence));
  return std::clamp(q, 0, 100);
}

// Keeps minutiae with quality >= threshold (inclusive), preserving order.
inline std::vector<Minutia> filter_by_quality(const std::vector<Minutia>& minutiae,
                                              int threshold = 15) {
  std::vector<Minutia> out;
  for (const Minutia& m : minutiae)
    if (m.quality >= threshold) out.push_back(m);
  return out;
}

// Thinning artifacts produce minutiae pairs a few pixels apart; of any pair
// closer than min_dist the higher-quality one survives. Input order is kept.
inline std::vector<Minutia> suppress_close(const std::vector<Minutia>& minutiae,
                                           double min_dist = 8.0) {
  std::vector<std::size_t> order(minutiae.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return minutiae[a].quality > minutiae[b].quality;
  });
  std::vector<char> keep(minutiae.size(), 0);
  std::vector<std::size_t> kept;
  const double d2 = min_dist * min_dist;
  for (std::size_t i : order) {
    bool blocked = false;
    for (std::size_t j : kept) {
      double dx = minutiae[i].x - minutiae[j].x, dy = minutiae[i].y - minutiae[j].y;
      if (dx * dx + dy * dy < d2) {
        blocked = true;
        break;
      }
    }
    if (!blocked) {
      keep[i] = 1;
      kept.push_back(i);
    }
  }
  std::vector<Minutia> out;
  for (std::size_t i = 0; i < minutiae.size(); ++i)
    if (keep[i]) out.push_back(minutiae[i]);
  return out;
}

// Full extraction pipeline as used by the protocols.
inline std::vector<Minutia> extract_minutiae(const GrayImage& img, const RunConfig& cfg) {
  SegmentationMask mask = segment(img);
  Skeleton sk = binarize_and_thin(img, mask);
  std::vector<Minutia> found = detect_minutiae(sk, cfg.patch_size);
  for (Minutia& m : found) m.quality = score_quality(m, img);
  found = suppress_close(found);
  return filter_by_quality(found, cfg.quality_threshold);
}

// ---------------------------------------------------------------------------
// mindtct-style import: whitespace-separated "x y theta quality" per line,
// with an optional trailing kind. Qualities in [0, 1] are scaled to [0, 100].

inline std::vector<Minutia> import_mindtct(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open minutiae file '" + path.string() + "'");
  std::vector<Minutia> out;
  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ss(line);
    std::string fx, fy, ftheta, fq, fkind;
    if (!(ss >> fx)) continue;  // blank line
    if (!(ss >> fy >> ftheta >> fq))
      throw ParseError("expected at least 4 fields (x y theta quality)", line_no);
    ss >> fkind;

    Minutia m;
    try {
      std::size_t used = 0;
      m.x = std::stoi(fx, &used);
      if (used != fx.size()) throw std::invalid_argument(fx);
      m.y = std::stoi(fy, &used);
      if (used != fy.size()) throw std::invalid_argument(fy);
      m.theta = std::stod(ftheta);
      double q = std::stod(fq);
      if (q < 0) throw std::invalid_argument(fq);
      m.quality = static_cast<int>(std::lround(q <= 1.0 ? q * 100.0 : q));
      if (m.quality > 100) throw std::invalid_argument(fq);
    } catch (const std::exception&) {
      throw ParseError("malformed minutia record '" + line + "'", line_no);
    }
    m.theta = std::fmod(std::fmod(m.theta, 360.0) + 360.0, 360.0);
    if (!fkind.empty()) {
      if (fkind == "ending" || fkind == "end")
        m.kind = MinutiaKind::ending;
      else if (fkind == "bifurcation" || fkind == "bif")
        m.kind = MinutiaKind::bifurcation;
      else
        throw ParseError("unknown minutia kind '" + fkind + "'", line_no);
    }
    out.push_back(m);
  }
  return out;
}

}  // namespace opgfpad::minutiae
