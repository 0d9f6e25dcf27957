#include <catch2/catch_amalgamated.hpp>

#include <fstream>

#include "opgfpad/evaluation.hpp"

#include "helpers.hpp"

using namespace opgfpad;
using namespace opgfpad::evaluation;

namespace {

// Brute-force confusion-matrix oracle, written independently of
// compute_metrics.
struct OracleMetrics {
  std::optional<double> apcer, bpcer;
};

OracleMetrics metrics_oracle(const std::vector<Prediction>& ps) {
  long tp = 0, fn = 0, fp = 0, tn = 0;  // live = positive
  for (const auto& p : ps) {
    bool is_live = p.label == SampleLabel::live;
    if (is_live && p.predicted_live) ++tp;
    if (is_live && !p.predicted_live) ++fn;
    if (!is_live && p.predicted_live) ++fp;
    if (!is_live && !p.predicted_live) ++tn;
  }
  OracleMetrics o;
  if (fp + tn > 0) o.apcer = 100.0 * fp / static_cast<double>(fp + tn);
  if (tp + fn > 0) o.bpcer = 100.0 * fn / static_cast<double>(tp + fn);
  return o;
}

std::vector<Prediction> random_predictions(SeededRng& rng, bool force_both = false) {
  std::vector<Prediction> ps;
  auto n = static_cast<std::size_t>(rng.uniform_int(1, 200));
  for (std::size_t i = 0; i < n; ++i) {
    Prediction p;
    p.label = rng.uniform() < 0.5 ? SampleLabel::live : SampleLabel::spoof;
    p.predicted_live = rng.uniform() < rng.uniform();
    p.material = p.label == SampleLabel::live ? "live" : (rng.uniform() < 0.5 ? "m1" : "m2");
    p.known_material = p.label == SampleLabel::live || rng.uniform() < 0.6;
    ps.push_back(p);
  }
  if (force_both) {
    ps.push_back({false, SampleLabel::live, "live", true});
    ps.push_back({true, SampleLabel::spoof, "m1", true});
  }
  return ps;
}

}  // namespace

TEST_CASE("fusion is the flat mean of patch scores") {
  CHECK(fuse_scores({0.2, 0.8, 0.8}) == Catch::Approx(0.6).margin(1e-12));
  CHECK(fuse_scores({0.37}) == 0.37);
  CHECK(fuse_scores({0.5, 0.5, 0.5, 0.5}) == 0.5);
  REQUIRE_THROWS_AS(fuse_scores({}), Error);
  REQUIRE_THROWS_AS(fuse_scores({0.5, 1.2}), ConfigError);
}

TEST_CASE("classification threshold is strict") {
  CHECK(classify_live(0.51));
  CHECK_FALSE(classify_live(0.5));  // strictly greater than
  CHECK_FALSE(classify_live(0.49));
  CHECK(classify_live(0.3, 0.2));
}

TEST_CASE("metrics match the paper's arithmetic anchors") {
  // 200 fakes, 10 misclassified -> APCER 5.0
  std::vector<Prediction> ps;
  for (int i = 0; i < 200; ++i) ps.push_back({i < 10, SampleLabel::spoof, "m", true});
  ps.push_back({true, SampleLabel::live, "live", true});
  auto r = compute_metrics(ps);
  CHECK(*r.apcer == Catch::Approx(5.0).margin(1e-12));

  // BPCER 3.71 and APCER 3.89 -> ACE 3.80, accuracy 96.20
  ps.clear();
  for (int i = 0; i < 10000; ++i) ps.push_back({i < 371, SampleLabel::live, "live", true});
  for (int i = 0; i < 10000; ++i) ps.push_back({i < 389, SampleLabel::spoof, "m", true});
  for (auto& p : ps)
    if (p.label == SampleLabel::live) p.predicted_live = !p.predicted_live;
  r = compute_metrics(ps);
  CHECK(*r.bpcer == Catch::Approx(3.71).margin(1e-9));
  CHECK(*r.apcer == Catch::Approx(3.89).margin(1e-9));
  CHECK(*r.ace == Catch::Approx(3.80).margin(1e-9));
  CHECK(*r.accuracy == Catch::Approx(96.20).margin(1e-9));

  // ACE 2.49 -> accuracy 97.51 via the accuracy identity
  ps.clear();
  for (int i = 0; i < 10000; ++i) ps.push_back({i >= 249, SampleLabel::live, "live", true});
  for (int i = 0; i < 10000; ++i) ps.push_back({i < 249, SampleLabel::spoof, "m", true});
  r = compute_metrics(ps);
  CHECK(*r.ace == Catch::Approx(2.49).margin(1e-9));
  CHECK(*r.accuracy == Catch::Approx(97.51).margin(1e-9));
}

TEST_CASE("metrics equal the confusion-matrix oracle on random sets") {
  SeededRng rng(314);
  for (int trial = 0; trial < 1000; ++trial) {
    auto ps = random_predictions(rng);
    auto r = compute_metrics(ps);
    auto o = metrics_oracle(ps);
    REQUIRE(r.apcer.has_value() == o.apcer.has_value());
    REQUIRE(r.bpcer.has_value() == o.bpcer.has_value());
    if (r.apcer) REQUIRE(*r.apcer == *o.apcer);  // exact
    if (r.bpcer) REQUIRE(*r.bpcer == *o.bpcer);
    if (r.apcer && r.bpcer) {
      REQUIRE(std::abs(*r.ace - (*r.apcer + *r.bpcer) / 2.0) <= 1e-9);
      REQUIRE(std::abs(*r.accuracy - (100.0 - *r.ace)) <= 1e-9);
    }
  }
}

TEST_CASE("overall APCER is the sample-weighted mix of known and unknown") {
  SeededRng rng(2718);
  for (int trial = 0; trial < 200; ++trial) {
    auto ps = random_predictions(rng, true);
    auto r = compute_metrics(ps);
    if (!r.apcer_known || !r.apcer_unknown) continue;
    double nk = 0, nu = 0;
    for (const auto& p : ps) {
      if (p.label != SampleLabel::spoof) continue;
      (p.known_material ? nk : nu) += 1.0;
    }
    double mixed = (*r.apcer_known * nk + *r.apcer_unknown * nu) / (nk + nu);
    REQUIRE(*r.apcer == Catch::Approx(mixed).margin(1e-9));
  }
}

TEST_CASE("single-class inputs leave rates absent, not zero") {
  std::vector<Prediction> only_live{{true, SampleLabel::live, "live", true}};
  auto r = compute_metrics(only_live);
  CHECK_FALSE(r.apcer.has_value());
  CHECK(r.bpcer.has_value());
  CHECK_FALSE(r.ace.has_value());

  std::vector<Prediction> only_fake{{false, SampleLabel::spoof, "m", true}};
  r = compute_metrics(only_fake);
  CHECK(r.apcer.has_value());
  CHECK_FALSE(r.bpcer.has_value());
}

TEST_CASE("known/unknown split requires both partitions") {
  std::vector<Prediction> ps{{false, SampleLabel::spoof, "m", true},
                             {false, SampleLabel::live, "live", true}};
  auto r = compute_metrics(ps);
  CHECK_FALSE(r.apcer_known.has_value());
  ps.push_back({true, SampleLabel::spoof, "x", false});
  r = compute_metrics(ps);
  REQUIRE(r.apcer_known.has_value());
  REQUIRE(r.apcer_unknown.has_value());
  CHECK(*r.apcer_known == 0.0);
  CHECK(*r.apcer_unknown == 100.0);
}

TEST_CASE("det curve endpoints and monotonicity") {
  std::vector<SampleScore> samples;
  SeededRng rng(55);
  for (int i = 0; i < 40; ++i) {
    SampleScore s;
    s.label = i % 2 ? SampleLabel::live : SampleLabel::spoof;
    s.material = i % 2 ? "live" : "m";
    s.score = 0.02 + 0.96 * rng.uniform();  // keep scores strictly inside (0,1)
    samples.push_back(s);
  }
  auto det = det_curve(samples, 101);
  REQUIRE(det.size() == 101);
  CHECK(det.front().threshold == 0.0);
  CHECK(det.front().apcer == 100.0);  // everything above 0 is live
  CHECK(det.front().bpcer == 0.0);
  CHECK(det.back().threshold == 1.0);
  CHECK(det.back().apcer == 0.0);
  CHECK(det.back().bpcer == 100.0);
  for (std::size_t i = 1; i < det.size(); ++i) {
    CHECK(det[i].apcer <= det[i - 1].apcer);  // non-increasing
    CHECK(det[i].bpcer >= det[i - 1].bpcer);  // non-decreasing
  }
}

TEST_CASE("det curve on the hand-worked four-sample example") {
  std::vector<SampleScore> samples;
  auto push = [&](double score, SampleLabel l) {
    SampleScore s;
    s.label = l;
    s.material = l == SampleLabel::live ? "live" : "m";
    s.score = score;
    samples.push_back(s);
  };
  push(0.9, SampleLabel::live);
  push(0.4, SampleLabel::live);
  push(0.6, SampleLabel::spoof);
  push(0.1, SampleLabel::spoof);
  auto det = det_curve(samples, 101);
  const auto& mid = det[50];
  REQUIRE(mid.threshold == Catch::Approx(0.5));
  CHECK(mid.apcer == 50.0);  // 0.6 predicted live
  CHECK(mid.bpcer == 50.0);  // 0.4 predicted spoof
}

TEST_CASE("report validation enforces the ACE and accuracy identities") {
  EvalReport r;
  r.apcer = 4.0;
  r.bpcer = 2.0;
  r.ace = 3.0;
  r.accuracy = 97.0;
  REQUIRE_NOTHROW(r.validate());
  r.ace = 3.5;
  REQUIRE_THROWS_AS(r.validate(), ConfigError);
}

TEST_CASE("emitted reports round-trip and cover every sample") {
  testutil::TempDir tmp("report");
  std::vector<Prediction> ps;
  std::vector<SampleScore> scores;
  SeededRng rng(77);
  for (int i = 0; i < 30; ++i) {
    SampleScore s;
    s.id = "sample_" + std::to_string(i);
    s.label = i % 3 ? SampleLabel::spoof : SampleLabel::live;
    s.material = s.label == SampleLabel::live ? "live" : (i % 2 ? "gelatine" : "playdoh");
    s.known_material = s.label == SampleLabel::live || i % 2 == 1;
    s.score = 0.05 + 0.9 * rng.uniform();
    s.predicted_live = classify_live(*s.score);
    scores.push_back(s);
    ps.push_back({s.predicted_live, s.label, s.material, s.known_material});
  }
  EvalReport r = compute_metrics(ps);
  r.per_sample_scores = scores;
  r.det_points = det_curve(scores);

  emit_report(r, tmp.path() / "out");
  REQUIRE(std::filesystem::exists(tmp.path() / "out" / "metrics.json"));
  REQUIRE(std::filesystem::exists(tmp.path() / "out" / "scores.csv"));
  REQUIRE(std::filesystem::exists(tmp.path() / "out" / "det.csv"));
  REQUIRE(std::filesystem::exists(tmp.path() / "out" / "det.svg"));
  CHECK(std::filesystem::file_size(tmp.path() / "out" / "det.svg") > 500);

  json back = load_json_file(tmp.path() / "out" / "metrics.json");
  CHECK(back.at("apcer").get<double>() == *r.apcer);
  CHECK(back.at("bpcer").get<double>() == *r.bpcer);
  CHECK(back.at("ace").get<double>() == *r.ace);
  CHECK(back.at("accuracy").get<double>() == *r.accuracy);

  std::ifstream csv(tmp.path() / "out" / "scores.csv");
  std::string line;
  int rows = -1;  // header
  while (std::getline(csv, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 30);
}
