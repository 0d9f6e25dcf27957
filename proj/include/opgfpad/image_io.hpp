#pragma once

#include <filesystem>
#include <string>
#include <vector>

#pragma GCC diagnostic push
#pragma GCC diagnostic ignored "-Wdeprecated-enum-enum-conversion"
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#pragma GCC diagnostic pop

#include "opgfpad/core.hpp"
#include "opgfpad/errors.hpp"

// Raster decode/encode. Decoding is lossless for every supported container
// (PNG, BMP, JPEG, TIFF); color inputs are reduced to gray by averaging the
// color channels.

namespace opgfpad::ingest {

inline bool supported_image_ext(const std::filesystem::path& p) {
  std::string e = p.extension().string();
  for (auto& c : e) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return e == ".png" || e == ".bmp" || e == ".jpg" || e == ".jpeg" || e == ".tif" || e == ".tiff";
}

inline GrayImage load_image(const std::filesystem::path& path, const std::string& sensor_id = "") {
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (m.empty()) throw DecodeError("cannot decode image '" + path.string() + "'");
  if (m.depth() == CV_16U) {
    cv::Mat tmp;
    m.convertTo(tmp, CV_8U, 1.0 / 257.0);
    m = tmp;
  } else if (m.depth() != CV_8U) {
    throw DecodeError("unsupported pixel depth in '" + path.string() + "'");
  }

  GrayImage img;
  img.width = m.cols;
  img.height = m.rows;
  img.sensor_id = sensor_id;
  img.source_path = path.string();
  img.pixels.resize(static_cast<std::size_t>(m.cols) * m.rows);

  const int color_channels = m.channels() >= 3 ? 3 : m.channels();  // ignore alpha
  for (int y = 0; y < m.rows; ++y) {
    const std::uint8_t* row = m.ptr<std::uint8_t>(y);
    for (int x = 0; x < m.cols; ++x) {
      int sum = 0;
      for (int c = 0; c < color_channels; ++c) sum += row[x * m.channels() + c];
      img.pixels[static_cast<std::size_t>(y) * m.cols + x] =
          static_cast<std::uint8_t>((sum + color_channels / 2) / color_channels);
    }
  }
  img.validate();
  return img;
}

inline void save_gray_png(const GrayImage& img, const std::filesystem::path& path) {
  cv::Mat m(img.height, img.width, CV_8UC1);
  for (int y = 0; y < img.height; ++y)
    std::copy_n(img.pixels.data() + static_cast<std::size_t>(y) * img.width, img.width,
                m.ptr<std::uint8_t>(y));
  std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
  if (!cv::imwrite(path.string(), m))
    throw IoError("cannot write image '" + path.string() + "'");
}

// Tile a set of equally sized gray rasters into one sheet (generated-patch
// previews). Grid is ceil(sqrt(n)) wide.
inline void save_contact_sheet(const std::vector<std::vector<std::uint8_t>>& tiles, int tile_size,
                               const std::filesystem::path& path) {
  if (tiles.empty()) return;
  int cols = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(tiles.size()))));
  int rows = static_cast<int>((tiles.size() + cols - 1) / cols);
  const int gap = 2;
  cv::Mat sheet(rows * (tile_size + gap) + gap, cols * (tile_size + gap) + gap, CV_8UC1,
                cv::Scalar(32));
  for (std::size_t i = 0; i < tiles.size(); ++i) {
    int r = static_cast<int>(i) / cols, c = static_cast<int>(i) % cols;
    cv::Mat roi = sheet(cv::Rect(gap + c * (tile_size + gap), gap + r * (tile_size + gap),
                                 tile_size, tile_size));
    for (int y = 0; y < tile_size; ++y)
      std::copy_n(tiles[i].data() + static_cast<std::size_t>(y) * tile_size, tile_size,
                  roi.ptr<std::uint8_t>(y));
  }
  std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
  if (!cv::imwrite(path.string(), sheet))
    throw IoError("cannot write image '" + path.string() + "'");
}

// Debug overlay: endings drawn as circles, bifurcations as squares.
inline void save_minutiae_overlay(const GrayImage& img, const std::vector<Minutia>& minutiae,
                                  const std::filesystem::path& path) {
  cv::Mat gray(img.height, img.width, CV_8UC1);
  for (int y = 0; y < img.height; ++y)
    std::copy_n(img.pixels.data() + static_cast<std::size_t>(y) * img.width, img.width,
                gray.ptr<std::uint8_t>(y));
  cv::Mat color;
  cv::cvtColor(gray, color, cv::COLOR_GRAY2BGR);
  for (const Minutia& m : minutiae) {
    cv::Scalar c = m.kind == MinutiaKind::ending ? cv::Scalar(0, 0, 255) : cv::Scalar(0, 255, 0);
    if (m.kind == MinutiaKind::ending)
      cv::circle(color, {m.x, m.y}, 4, c, 1);
    else
      cv::rectangle(color, {m.x - 3, m.y - 3}, {m.x + 3, m.y + 3}, c, 1);
    double rad = m.theta * CV_PI / 180.0;
    cv::line(color, {m.x, m.y},
             {m.x + static_cast<int>(std::lround(7 * std::cos(rad))),
              m.y + static_cast<int>(std::lround(7 * std::sin(rad)))},
             c, 1);
  }
  std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
  if (!cv::imwrite(path.string(), color))
    throw IoError("cannot write image '" + path.string() + "'");
}

}  // namespace opgfpad::ingest
