#include <catch2/catch_amalgamated.hpp>

#include <fstream>

#include "opgfpad/minutiae.hpp"

#include "helpers.hpp"

using namespace opgfpad;
using minutiae::Skeleton;

namespace {

// Independent crossing-number oracle: counts 0->1 transitions around the
// neighbor cycle directly (detect_minutiae sums |n_k - n_{k+1}| instead).
struct OracleHit {
  int x, y;
  MinutiaKind kind;
};

std::vector<OracleHit> cn_oracle(const Skeleton& sk) {
  const int cx[] = {0, 1, 1, 1, 0, -1, -1, -1};
  const int cy[] = {-1, -1, 0, 1, 1, 1, 0, -1};
  std::vector<OracleHit> out;
  for (int y = 0; y < sk.height; ++y)
    for (int x = 0; x < sk.width; ++x) {
      if (!sk.at(x, y)) continue;
      int rises = 0;
      for (int k = 0; k < 8; ++k) {
        bool cur = sk.at(x + cx[k], y + cy[k]);
        bool nxt = sk.at(x + cx[(k + 1) % 8], y + cy[(k + 1) % 8]);
        if (!cur && nxt) ++rises;
      }
      if (rises == 1) out.push_back({x, y, MinutiaKind::ending});
      if (rises == 3) out.push_back({x, y, MinutiaKind::bifurcation});
    }
  return out;
}

Skeleton make_skeleton(int w, int h) {
  Skeleton sk;
  sk.width = w;
  sk.height = h;
  sk.on.assign(static_cast<std::size_t>(w) * h, 0);
  return sk;
}

}  // namespace

TEST_CASE("segment rejects a uniform image as blank") {
  GrayImage img;
  img.width = img.height = 64;
  img.pixels.assign(64 * 64, 128);
  REQUIRE_THROWS_AS(minutiae::segment(img), DecodeError);
}

TEST_CASE("segment confines the bbox to the textured half") {
  // Ridges only in the left half; right half is flat.
  GrayImage img = testutil::make_grating(128, 64, 70, 0.12, 0.0);
  for (int y = 0; y < img.height; ++y)
    for (int x = 64; x < img.width; ++x) img.at(x, y) = 128;

  // Brute-force per-block variance to find the expected foreground columns.
  auto mask = minutiae::segment(img, 16, 100.0);
  int max_fg_x = -1;
  for (int by = 0; by < 64 / 16; ++by)
    for (int bx = 0; bx < 128 / 16; ++bx) {
      double sum = 0, sum2 = 0;
      for (int y = by * 16; y < (by + 1) * 16; ++y)
        for (int x = bx * 16; x < (bx + 1) * 16; ++x) {
          sum += img.at(x, y);
          sum2 += static_cast<double>(img.at(x, y)) * img.at(x, y);
        }
      double var = sum2 / 256 - (sum / 256) * (sum / 256);
      if (var >= 100.0) max_fg_x = std::max(max_fg_x, (bx + 1) * 16 - 1);
    }
  CHECK(mask.x_max == max_fg_x);
  CHECK(mask.x_max <= 64 + 16);  // left half plus at most one block
  CHECK(mask.x_min == 0);
}

TEST_CASE("segment covers the full frame for a full-frame grating") {
  GrayImage img = testutil::make_grating(96, 80, 70, 0.12, 20.0);
  auto mask = minutiae::segment(img);
  CHECK(mask.x_min == 0);
  CHECK(mask.y_min == 0);
  CHECK(mask.x_max == 95);
  CHECK(mask.y_max == 79);
}

TEST_CASE("thinning reduces a 5-pixel bar to a single-pixel line") {
  GrayImage img;
  img.width = 40;
  img.height = 20;
  img.pixels.assign(40 * 20, 255);
  for (int y = 8; y < 13; ++y)  // 5 rows thick
    for (int x = 4; x < 36; ++x) img.at(x, y) = 10;

  minutiae::SegmentationMask mask;
  mask.width = 40;
  mask.height = 20;
  mask.foreground.assign(40 * 20, 1);
  mask.x_min = mask.y_min = 0;
  mask.x_max = 39;
  mask.y_max = 19;

  Skeleton sk = minutiae::binarize_and_thin(img, mask);
  // Interior columns must carry exactly one skeleton pixel, inside the bar.
  for (int x = 8; x < 32; ++x) {
    int count = 0, where = -1;
    for (int y = 0; y < 20; ++y)
      if (sk.at(x, y)) {
        ++count;
        where = y;
      }
    CHECK(count == 1);
    CHECK(where >= 8);
    CHECK(where <= 12);
  }
}

TEST_CASE("a 1-pixel line is a thinning fixed point") {
  auto sk = make_skeleton(30, 10);
  for (int x = 2; x < 28; ++x) sk.set(x, 5, true);
  Skeleton before = sk;
  bool changed = true;
  // run the full thinning loop by round-tripping through the public call
  GrayImage img;
  img.width = 30;
  img.height = 10;
  img.pixels.assign(300, 255);
  for (int x = 2; x < 28; ++x) img.at(x, 5) = 0;
  minutiae::SegmentationMask mask;
  mask.width = 30;
  mask.height = 10;
  mask.foreground.assign(300, 1);
  mask.x_max = 29;
  mask.y_max = 9;
  Skeleton thinned = minutiae::binarize_and_thin(img, mask);
  (void)changed;
  CHECK(thinned.on == before.on);
}

TEST_CASE("empty mask region yields an empty skeleton region") {
  GrayImage img = testutil::make_grating(64, 64, 70, 0.12);
  minutiae::SegmentationMask mask;
  mask.width = mask.height = 64;
  mask.foreground.assign(64 * 64, 0);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 64; ++x) mask.foreground[static_cast<std::size_t>(y) * 64 + x] = 1;
  mask.x_max = 63;
  mask.y_max = 31;
  Skeleton sk = minutiae::binarize_and_thin(img, mask);
  for (int y = 32; y < 64; ++y)
    for (int x = 0; x < 64; ++x) CHECK_FALSE(sk.at(x, y));
}

TEST_CASE("crossing number classifies endings, bifurcations and continuations") {
  auto sk = make_skeleton(9, 9);
  // horizontal line: (1,4)..(7,4)
  for (int x = 1; x <= 7; ++x) sk.set(x, 4, true);
  CHECK(minutiae::crossing_number(sk, 1, 4) == 1);  // line end
  CHECK(minutiae::crossing_number(sk, 4, 4) == 2);  // continuation
  auto found = minutiae::detect_minutiae(sk, 2);
  REQUIRE(found.size() == 2);  // only the two ends
  for (const auto& m : found) CHECK(m.kind == MinutiaKind::ending);

  // Y junction: arms N, SW, SE from center (4,4)
  sk = make_skeleton(9, 9);
  sk.set(4, 4, true);
  sk.set(4, 3, true);
  sk.set(4, 2, true);
  sk.set(3, 5, true);
  sk.set(2, 6, true);
  sk.set(5, 5, true);
  sk.set(6, 6, true);
  CHECK(minutiae::crossing_number(sk, 4, 4) == 3);
  auto ys = minutiae::detect_minutiae(sk, 2);
  bool center_is_bifurcation = false;
  for (const auto& m : ys)
    if (m.x == 4 && m.y == 4) center_is_bifurcation = m.kind == MinutiaKind::bifurcation;
  CHECK(center_is_bifurcation);
}

TEST_CASE("detector equals the brute-force crossing-number oracle on random rasters") {
  SeededRng rng(2024);
  for (int trial = 0; trial < 1000; ++trial) {
    auto sk = make_skeleton(8, 8);
    for (auto& v : sk.on) v = rng.uniform() < 0.35 ? 1 : 0;
    auto expected = cn_oracle(sk);
    auto got = minutiae::detect_minutiae(sk, 2);
    REQUIRE(got.size() == expected.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
      CHECK(got[i].x == expected[i].x);
      CHECK(got[i].y == expected[i].y);
      CHECK(got[i].kind == expected[i].kind);
      CHECK(sk.at(got[i].x, got[i].y));  // every minutia sits on the skeleton
    }
  }
}

TEST_CASE("quality is zero in flat regions and high on clean gratings") {
  GrayImage flat;
  flat.width = flat.height = 64;
  flat.pixels.assign(64 * 64, 77);
  Minutia m{32, 32, 0, 0, MinutiaKind::ending, false};
  CHECK(minutiae::score_quality(m, flat) == 0);

  GrayImage clean = testutil::make_grating(64, 64, 120, 0.1, 0.0);
  CHECK(minutiae::score_quality(m, clean) >= 80);

  GrayImage degraded = testutil::make_grating(64, 64, 120, 0.1, 0.0, 0.0, 35.0, 9);
  CHECK(minutiae::score_quality(m, clean) > minutiae::score_quality(m, degraded));
}

TEST_CASE("quality filter is inclusive at the threshold and monotone") {
  std::vector<Minutia> ms;
  for (int q : {0, 10, 15, 20}) ms.push_back({1, 1, 0.0, q, MinutiaKind::ending, false});
  auto kept = minutiae::filter_by_quality(ms, 15);
  REQUIRE(kept.size() == 2);
  CHECK(kept[0].quality == 15);
  CHECK(kept[1].quality == 20);

  CHECK(minutiae::filter_by_quality(ms, 0).size() == ms.size());  // threshold 0 keeps all
  CHECK(minutiae::filter_by_quality({}, 15).empty());

  // monotone: higher threshold gives a subset
  SeededRng rng(5);
  std::vector<Minutia> random_ms;
  for (int i = 0; i < 50; ++i)
    random_ms.push_back({i, i, 0.0, static_cast<int>(rng.uniform_int(0, 100)),
                         MinutiaKind::ending, false});
  auto low = minutiae::filter_by_quality(random_ms, 20);
  auto high = minutiae::filter_by_quality(random_ms, 60);
  for (const auto& h : high) {
    bool found = false;
    for (const auto& l : low) found = found || (l.x == h.x && l.quality == h.quality);
    CHECK(found);
  }
}

TEST_CASE("close minutiae pairs collapse onto the higher-quality point") {
  std::vector<Minutia> ms{{10, 10, 0.0, 40, MinutiaKind::ending, false},
                          {13, 10, 0.0, 70, MinutiaKind::ending, false},
                          {40, 40, 0.0, 20, MinutiaKind::bifurcation, false}};
  auto kept = minutiae::suppress_close(ms, 8.0);
  REQUIRE(kept.size() == 2);
  CHECK(kept[0].quality == 70);
  CHECK(kept[1].quality == 20);
}

TEST_CASE("mindtct import parses and scales quality") {
  testutil::TempDir tmp("mindtct");
  {
    std::ofstream f(tmp.path() / "m.xyt");
    f << "120 85 90 0.47\n";
    f << "3 4 181.5 62 bifurcation\n";
    f << "\n";
    f << "7 8 365 1.0\n";
  }
  auto ms = minutiae::import_mindtct(tmp.path() / "m.xyt");
  REQUIRE(ms.size() == 3);
  CHECK(ms[0].x == 120);
  CHECK(ms[0].y == 85);
  CHECK(ms[0].theta == Catch::Approx(90.0));
  CHECK(ms[0].quality == 47);
  CHECK(ms[0].kind == MinutiaKind::ending);
  CHECK(ms[1].quality == 62);
  CHECK(ms[1].kind == MinutiaKind::bifurcation);
  CHECK(ms[2].theta == Catch::Approx(5.0));  // wrapped into [0, 360)
  CHECK(ms[2].quality == 100);
}

TEST_CASE("mindtct import error paths") {
  testutil::TempDir tmp("mindtct_err");
  {
    std::ofstream f(tmp.path() / "empty.xyt");
  }
  CHECK(minutiae::import_mindtct(tmp.path() / "empty.xyt").empty());

  {
    std::ofstream f(tmp.path() / "short.xyt");
    f << "120 85 90 0.5\n";
    f << "1 2 3\n";
  }
  try {
    minutiae::import_mindtct(tmp.path() / "short.xyt");
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.line() == 2);
  }

  {
    std::ofstream f(tmp.path() / "bad.xyt");
    f << "1 2 3 четыре\n";
  }
  REQUIRE_THROWS_AS(minutiae::import_mindtct(tmp.path() / "bad.xyt"), ParseError);
}

TEST_CASE("full extraction finds interior minutiae on a broken grating") {
  // Grating with gaps stamped in, as the fixture generator does.
  SeededRng rng(3);
  GrayImage img = testutil::make_grating(160, 160, 70, 0.11, 15.0, 0.0, 2.0, 3);
  for (int g = 0; g < 6; ++g) {
    int gx = 30 + 18 * g, gy = 40 + 13 * g;
    for (int dy = -4; dy <= 4; ++dy)
      for (int dx = -4; dx <= 4; ++dx)
        if (dx * dx + dy * dy <= 16) img.at(gx + dx, gy + dy) = 128;
  }
  RunConfig cfg;
  cfg.patch_size = 32;
  auto found = minutiae::extract_minutiae(img, cfg);
  CHECK(found.size() >= 6);
  for (const auto& m : found) {
    CHECK(m.quality >= cfg.quality_threshold);
    REQUIRE_NOTHROW(m.validate(img.width, img.height));
  }
}
