#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "opgfpad/core.hpp"
#include "opgfpad/errors.hpp"

// Score fusion and ISO-style metrics: APCER (misclassified fakes), BPCER
// (misclassified lives), ACE = (APCER+BPCER)/2, accuracy = 100 - ACE, plus
// the DET sweep and file emission.

namespace opgfpad::evaluation {

// Global liveness score: flat mean over all patch scores of one fingerprint.
inline double fuse_scores(const std::vector<double>& patch_scores) {
  if (patch_scores.empty())
    throw Error("fuse_scores: no patch scores (fingerprint without usable minutiae)");
  double sum = 0;
  for (double s : patch_scores) {
    if (!(s >= 0.0 && s <= 1.0)) throw ConfigError("fuse_scores: score outside [0, 1]");
    sum += s;
  }
  return sum / static_cast<double>(patch_scores.size());
}

// Live exactly when the global score exceeds the threshold (strict).
inline bool classify_live(double score, double threshold = 0.5) { return score > threshold; }

struct Prediction {
  bool predicted_live = false;
  SampleLabel label = SampleLabel::live;
  std::string material = "live";
  bool known_material = true;
};

struct SampleScore {
  std::string id;
  std::optional<double> score;  // absent for zero-minutiae samples (spoof-classified)
  SampleLabel label = SampleLabel::live;
  std::string material = "live";
  bool known_material = true;
  bool predicted_live = false;
};

struct DetPoint {
  double threshold = 0;
  double apcer = 0;
  double bpcer = 0;
};

struct EvalReport {
  std::optional<double> apcer, bpcer, ace, accuracy;
  std::optional<double> apcer_known, apcer_unknown;
  std::vector<SampleScore> per_sample_scores;
  std::vector<DetPoint> det_points;

  void validate() const {
    auto pct = [](const std::optional<double>& v, const char* name) {
      if (v && !(*v >= 0.0 && *v <= 100.0))
        throw ConfigError(std::string("report: ") + name + " outside [0, 100]");
    };
    pct(apcer, "APCER");
    pct(bpcer, "BPCER");
    pct(ace, "ACE");
    pct(accuracy, "accuracy");
    pct(apcer_known, "APCER(known)");
    pct(apcer_unknown, "APCER(unknown)");
    if (apcer && bpcer) {
      if (!ace || std::abs(*ace - (*apcer + *bpcer) / 2.0) > 1e-9)
        throw ConfigError("report: ACE != (APCER+BPCER)/2");
      if (!accuracy || std::abs(*accuracy - (100.0 - *ace)) > 1e-9)
        throw ConfigError("report: accuracy != 100 - ACE");
    }
  }
};

// Error rates from hard decisions. APCER is absent (not zero) without fake
// samples, BPCER likewise without live ones; the known/unknown split is
// reported only when both partitions are populated.
inline EvalReport compute_metrics(const std::vector<Prediction>& predictions) {
  std::size_t fakes = 0, mis_fakes = 0, lives = 0, mis_lives = 0;
  std::size_t known = 0, mis_known = 0, unknown = 0, mis_unknown = 0;
  for (const auto& p : predictions) {
    if (p.label == SampleLabel::spoof) {
      ++fakes;
      if (p.predicted_live) ++mis_fakes;
      if (p.known_material) {
        ++known;
        if (p.predicted_live) ++mis_known;
      } else {
        ++unknown;
        if (p.predicted_live) ++mis_unknown;
      }
    } else {
      ++lives;
      if (!p.predicted_live) ++mis_lives;
    }
  }
  EvalReport r;
  if (fakes) r.apcer = 100.0 * static_cast<double>(mis_fakes) / static_cast<double>(fakes);
  if (lives) r.bpcer = 100.0 * static_cast<double>(mis_lives) / static_cast<double>(lives);
  if (r.apcer && r.bpcer) {
    r.ace = (*r.apcer + *r.bpcer) / 2.0;
    r.accuracy = 100.0 - *r.ace;
  }
  if (known && unknown) {
    r.apcer_known = 100.0 * static_cast<double>(mis_known) / static_cast<double>(known);
    r.apcer_unknown = 100.0 * static_cast<double>(mis_unknown) / static_cast<double>(unknown);
  }
  return r;
}

// APCER/BPCER sweep over thresholds in [0, 1]. Samples without a score are
// spoof-classified at every threshold (fail-closed fusion rule).
inline std::vector<DetPoint> det_curve(const std::vector<SampleScore>& samples,
                                       int points = 101) {
  if (points < 2) throw ConfigError("det_curve: need at least two thresholds");
  std::size_t fakes = 0, lives = 0;
  for (const auto& s : samples) (s.label == SampleLabel::spoof ? fakes : lives)++;
  if (!fakes || !lives) throw ConfigError("det_curve: both classes must be present");

  std::vector<DetPoint> out;
  out.reserve(static_cast<std::size_t>(points));
  for (int i = 0; i < points; ++i) {
    double t = static_cast<double>(i) / static_cast<double>(points - 1);
    std::size_t mis_fakes = 0, mis_lives = 0;
    for (const auto& s : samples) {
      bool live = s.score && classify_live(*s.score, t);
      if (s.label == SampleLabel::spoof && live) ++mis_fakes;
      if (s.label == SampleLabel::live && !live) ++mis_lives;
    }
    out.push_back({t, 100.0 * static_cast<double>(mis_fakes) / static_cast<double>(fakes),
                   100.0 * static_cast<double>(mis_lives) / static_cast<double>(lives)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Emission: metrics.json, scores.csv, det.csv, det.svg

namespace detail {

inline std::string svg_det_plot(const std::vector<DetPoint>& det) {
  const double w = 640, h = 480, ml = 70, mr = 20, mt = 40, mb = 60;
  const double pw = w - ml - mr, ph = h - mt - mb;
  auto px = [&](double apcer) { return ml + apcer / 100.0 * pw; };
  auto py = [&](double bpcer) { return mt + ph - bpcer / 100.0 * ph; };

  std::ostringstream s;
  s << std::fixed << std::setprecision(1);
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
    << "\" viewBox=\"0 0 " << w << " " << h << "\">\n";
  s << "<rect width=\"" << w << "\" height=\"" << h << "\" fill=\"white\"/>\n";
  s << "<text x=\"" << w / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\" "
       "font-family=\"sans-serif\">Detection Error Trade-off</text>\n";
  for (int v = 0; v <= 100; v += 20) {
    s << "<line x1=\"" << px(v) << "\" y1=\"" << py(0) << "\" x2=\"" << px(v) << "\" y2=\""
      << py(100) << "\" stroke=\"#dddddd\"/>\n";
    s << "<line x1=\"" << px(0) << "\" y1=\"" << py(v) << "\" x2=\"" << px(100) << "\" y2=\""
      << py(v) << "\" stroke=\"#dddddd\"/>\n";
    s << "<text x=\"" << px(v) << "\" y=\"" << py(0) + 18
      << "\" text-anchor=\"middle\" font-size=\"11\" font-family=\"sans-serif\">" << v
      << "</text>\n";
    s << "<text x=\"" << px(0) - 8 << "\" y=\"" << py(v) + 4
      << "\" text-anchor=\"end\" font-size=\"11\" font-family=\"sans-serif\">" << v
      << "</text>\n";
  }
  s << "<rect x=\"" << ml << "\" y=\"" << mt << "\" width=\"" << pw << "\" height=\"" << ph
    << "\" fill=\"none\" stroke=\"black\"/>\n";
  s << "<text x=\"" << ml + pw / 2 << "\" y=\"" << h - 14
    << "\" text-anchor=\"middle\" font-size=\"13\" font-family=\"sans-serif\">APCER "
       "(%)</text>\n";
  s << "<text x=\"18\" y=\"" << mt + ph / 2
    << "\" text-anchor=\"middle\" font-size=\"13\" font-family=\"sans-serif\" transform=\"rotate(-90 "
       "18 "
    << mt + ph / 2 << ")\">BPCER (%)</text>\n";
  s << "<polyline fill=\"none\" stroke=\"#c0392b\" stroke-width=\"2\" points=\"";
  for (const auto& p : det) s << px(p.apcer) << "," << py(p.bpcer) << " ";
  s << "\"/>\n</svg>\n";
  return s.str();
}

}  // namespace detail

inline json metrics_json(const EvalReport& r) {
  json j;
  auto put = [&j](const char* key, const std::optional<double>& v) {
    if (v)
      j[key] = *v;
    else
      j[key] = nullptr;
  };
  put("apcer", r.apcer);
  put("bpcer", r.bpcer);
  put("ace", r.ace);
  put("accuracy", r.accuracy);
  put("apcer_known", r.apcer_known);
  put("apcer_unknown", r.apcer_unknown);
  j["samples"] = r.per_sample_scores.size();
  return j;
}

inline void emit_report(const EvalReport& report, const std::filesystem::path& out,
                        bool with_det = true) {
  report.validate();
  std::error_code ec;
  std::filesystem::create_directories(out, ec);
  if (!std::filesystem::is_directory(out))
    throw IoError("cannot create report directory '" + out.string() + "'");

  save_json_file(out / "metrics.json", metrics_json(report));

  std::ofstream csv(out / "scores.csv");
  if (!csv) throw IoError("cannot write scores.csv");
  csv << "id,score,label,material,known_material,prediction\n";
  csv << std::setprecision(10);
  for (const auto& s : report.per_sample_scores) {
    csv << '"' << s.id << "\",";
    if (s.score) csv << *s.score;
    csv << ',' << to_string(s.label) << ',' << s.material << ','
        << (s.known_material ? "true" : "false") << ','
        << (s.predicted_live ? "live" : "spoof") << '\n';
  }

  if (with_det && !report.det_points.empty()) {
    std::ofstream det(out / "det.csv");
    if (!det) throw IoError("cannot write det.csv");
    det << "threshold,apcer,bpcer\n" << std::setprecision(10);
    for (const auto& p : report.det_points)
      det << p.threshold << ',' << p.apcer << ',' << p.bpcer << '\n';
    std::ofstream svg(out / "det.svg");
    if (!svg) throw IoError("cannot write det.svg");
    svg << detail::svg_det_plot(report.det_points);
  }
}

}  // namespace opgfpad::evaluation
