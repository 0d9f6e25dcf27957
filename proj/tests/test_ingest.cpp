#include <catch2/catch_amalgamated.hpp>

#include <fstream>

#include "opgfpad/ingest.hpp"

#include "helpers.hpp"

using namespace opgfpad;
namespace fs = std::filesystem;

namespace {

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("fixture produces the requested counts and rescans identically") {
  testutil::TempDir tmp("fixture");
  DatasetManifest m = ingest::make_synthetic_fixture(7, 2, 4, tmp.path());

  // 2 sensors x (4 live + 4 spoof) per split
  std::size_t train = 0, test = 0;
  for (const auto& r : m.records) (r.split == Split::train ? train : test)++;
  CHECK(train == 16);
  CHECK(test == 16);
  CHECK(m.sensors.size() == 2);
  REQUIRE_NOTHROW(m.validate());

  auto scanned = ingest::scan_dataset(tmp.path());
  CHECK(scanned.skipped == 0);
  CHECK(scanned.manifest.records.size() == m.records.size());
  for (const auto& sensor : m.sensors)
    for (Split split : {Split::train, Split::test})
      for (SampleLabel label : {SampleLabel::live, SampleLabel::spoof})
        CHECK(scanned.manifest.count(sensor, split, label) == m.count(sensor, split, label));
}

TEST_CASE("fixture generation is deterministic per seed") {
  testutil::TempDir a("fix_a"), b("fix_b");
  DatasetManifest ma = ingest::make_synthetic_fixture(11, 1, 2, a.path());
  DatasetManifest mb = ingest::make_synthetic_fixture(11, 1, 2, b.path());
  REQUIRE(ma.records.size() == mb.records.size());
  for (std::size_t i = 0; i < ma.records.size(); ++i) {
    fs::path pa = ma.records[i].path;
    fs::path pb = mb.records[i].path;
    CHECK(pa.filename() == pb.filename());
    CHECK(file_bytes(pa) == file_bytes(pb));
  }
  DatasetManifest mc = ingest::make_synthetic_fixture(12, 1, 2, a.path());
  bool any_differs = false;
  for (std::size_t i = 0; i < mc.records.size() && !any_differs; ++i)
    any_differs = file_bytes(mc.records[i].path) != file_bytes(mb.records[i].path);
  CHECK(any_differs);
}

TEST_CASE("fixture with zero per-class count yields an empty manifest") {
  testutil::TempDir tmp("fixture0");
  DatasetManifest m = ingest::make_synthetic_fixture(1, 2, 0, tmp.path());
  CHECK(m.records.empty());
  CHECK(m.sensors.empty());
}

TEST_CASE("scanning an empty directory yields no records and no sensors") {
  testutil::TempDir tmp("empty");
  auto r = ingest::scan_dataset(tmp.path());
  CHECK(r.manifest.records.empty());
  CHECK(r.manifest.sensors.empty());
}

TEST_CASE("missing root is fatal") {
  REQUIRE_THROWS_AS(ingest::scan_dataset("/nonexistent/path/xyz"), IoError);
}

TEST_CASE("unknown test materials are flagged") {
  testutil::TempDir tmp("materials");
  ingest::make_synthetic_fixture(3, 1, 4, tmp.path());
  auto m = ingest::scan_dataset(tmp.path()).manifest;
  bool saw_unknown = false, saw_known = false;
  for (const auto& r : m.records) {
    if (r.label != SampleLabel::spoof || r.split != Split::test) continue;
    if (r.material == "playdoh") {
      CHECK_FALSE(r.known_material);  // never in the train split
      saw_unknown = true;
    }
    if (r.material == "gelatine") {
      CHECK(r.known_material);
      saw_known = true;
    }
  }
  CHECK(saw_unknown);
  CHECK(saw_known);
}

TEST_CASE("unsupported files are skipped with a warning count") {
  testutil::TempDir tmp("skip");
  ingest::make_synthetic_fixture(5, 1, 1, tmp.path());
  std::ofstream(tmp.path() / "sensor_a" / "train" / "Live" / "notes.txt") << "not an image";
  auto r = ingest::scan_dataset(tmp.path());
  CHECK(r.skipped == 1);
}

TEST_CASE("layout must keep live/spoof and train/test disjoint") {
  ingest::LayoutSpec layout;
  layout.live_dir = layout.spoof_dir = "Same";
  REQUIRE_THROWS_AS(layout.validate(), ConfigError);
}

TEST_CASE("load_image decodes white PNG exactly") {
  testutil::TempDir tmp("white");
  GrayImage white;
  white.width = white.height = 4;
  white.pixels.assign(16, 255);
  ingest::save_gray_png(white, tmp.path() / "white.png");

  GrayImage img = ingest::load_image(tmp.path() / "white.png");
  REQUIRE(img.pixels.size() == 16);
  for (auto p : img.pixels) CHECK(p == 255);
}

TEST_CASE("color images reduce to the channel mean") {
  testutil::TempDir tmp("rgb");
  cv::Mat m(2, 2, CV_8UC3, cv::Scalar(90, 60, 30));  // BGR = RGB(30, 60, 90)
  cv::imwrite((tmp.path() / "rgb.png").string(), m);
  GrayImage img = ingest::load_image(tmp.path() / "rgb.png");
  for (auto p : img.pixels) CHECK(static_cast<int>(p) == 60);
}

TEST_CASE("truncated files raise a decode error, never a partial image") {
  testutil::TempDir tmp("trunc");
  std::ofstream(tmp.path() / "broken.png", std::ios::binary) << "\x89PNG\r\n\x1a\nnope";
  REQUIRE_THROWS_AS(ingest::load_image(tmp.path() / "broken.png"), DecodeError);
}

TEST_CASE("load_image is idempotent") {
  testutil::TempDir tmp("idem");
  GrayImage g = testutil::make_grating(32, 32, 60, 0.1, 30.0, 0.3, 2.0, 5);
  ingest::save_gray_png(g, tmp.path() / "g.png");
  GrayImage a = ingest::load_image(tmp.path() / "g.png");
  GrayImage b = ingest::load_image(tmp.path() / "g.png");
  CHECK(a.pixels == b.pixels);
  CHECK(a.pixels == g.pixels);  // PNG round trip is lossless
}
