#pragma once

// Candidate-to-lesion matching, FROC curves, operating-point sensitivities
// and the competition performance measure (CPM).

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "macnn/postprocess.hpp"

namespace macnn {

inline constexpr std::size_t kDefaultMatchRadius = 5;

/// FP/image rates at which the CPM is taken.
inline constexpr std::array<double, 7> kCpmRates = {0.125, 0.25, 0.5, 1, 2, 4, 8};

struct MatchStats {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  std::size_t tn = 0;  // scored pixels that are neither candidates nor missed lesions

  MatchStats& operator+=(const MatchStats& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
    return *this;
  }
  friend bool operator==(const MatchStats&, const MatchStats&) = default;
};

struct MatchResult {
  MatchStats stats;
  std::vector<bool> is_tp;  // per candidate, in input order
};

/// Same order extract_candidates produces: score descending, then y, then x.
inline void sort_candidates(std::vector<Candidate>& c) {
  std::stable_sort(c.begin(), c.end(), [](const Candidate& a, const Candidate& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.position.y != b.position.y) return a.position.y < b.position.y;
    return a.position.x < b.position.x;
  });
}

/// Greedy one-to-one matching in the given (score-descending) order. Each
/// candidate takes the nearest unmatched centroid within `radius`; ties go to
/// the earlier centroid. `scored_pixels` only feeds the TN count.
inline MatchResult match(const std::vector<Candidate>& candidates, const std::vector<Point>& centroids,
                         std::size_t radius = kDefaultMatchRadius, std::size_t scored_pixels = 0) {
  const long r2 = long(radius) * long(radius);
  std::vector<bool> taken(centroids.size(), false);
  MatchResult out;
  out.is_tp.reserve(candidates.size());
  for (const auto& c : candidates) {
    std::size_t best = centroids.size();
    long best_d = 0;
    for (std::size_t k = 0; k < centroids.size(); ++k) {
      if (taken[k]) continue;
      const long d = squared_distance(c.position, centroids[k]);
      if (d <= r2 && (best == centroids.size() || d < best_d)) {
        best = k;
        best_d = d;
      }
    }
    const bool hit = best != centroids.size();
    if (hit) taken[best] = true;
    out.is_tp.push_back(hit);
    ++(hit ? out.stats.tp : out.stats.fp);
  }
  out.stats.fn = centroids.size() - out.stats.tp;
  const std::size_t used = candidates.size() + out.stats.fn;
  out.stats.tn = scored_pixels > used ? scored_pixels - used : 0;
  return out;
}

inline double sensitivity(const MatchStats& s) {
  if (s.tp + s.fn == 0) fail(ErrorKind::undefined_metric, "sensitivity is undefined without ground-truth lesions");
  return double(s.tp) / double(s.tp + s.fn);
}

struct FrocPoint {
  double threshold = 0;
  double avg_fp = 0;
  double sensitivity = 0;
  friend bool operator==(const FrocPoint&, const FrocPoint&) = default;
};

struct FrocCurve {
  std::vector<FrocPoint> points;  // avg_fp ascending (threshold descending)
};

/// One evaluated image: its candidates and ground-truth centroids.
struct ImageResult {
  std::vector<Candidate> candidates;
  std::vector<Point> centroids;
};

namespace detail {

inline void check_froc_input(const std::vector<ImageResult>& images, std::size_t& total) {
  if (images.empty()) fail(ErrorKind::validation, "froc needs at least one image");
  total = 0;
  for (const auto& im : images) total += im.centroids.size();
  if (total == 0) fail(ErrorKind::undefined_metric, "froc is undefined without ground-truth lesions");
}

}  // namespace detail

/// Sweeps every distinct candidate score as a threshold (keep score >= t).
/// Greedy matching in score order means each threshold sees a prefix of the
/// full matching, so one pass yields the whole curve.
inline FrocCurve froc(const std::vector<ImageResult>& images, std::size_t radius = kDefaultMatchRadius) {
  std::size_t total = 0;
  detail::check_froc_input(images, total);
  struct Event {
    real_t score;
    bool tp;
  };
  std::vector<Event> events;
  for (const auto& im : images) {
    std::vector<Candidate> sorted = im.candidates;
    sort_candidates(sorted);
    const MatchResult m = match(sorted, im.centroids, radius);
    for (std::size_t k = 0; k < sorted.size(); ++k) events.push_back({sorted[k].score, m.is_tp[k]});
  }
  std::stable_sort(events.begin(), events.end(), [](const Event& a, const Event& b) { return a.score > b.score; });

  FrocCurve curve;
  const double n = double(images.size());
  if (events.empty()) {
    curve.points.push_back({1.0, 0.0, 0.0});
    return curve;
  }
  std::size_t tp = 0, fp = 0;
  for (std::size_t k = 0; k < events.size(); ++k) {
    ++(events[k].tp ? tp : fp);
    if (k + 1 < events.size() && events[k + 1].score == events[k].score) continue;
    curve.points.push_back({double(events[k].score), double(fp) / n, double(tp) / double(total)});
  }
  return curve;
}

/// Linear interpolation between bracketing points; 0 below the first point,
/// the last sensitivity beyond the last one. Among points sharing an avg_fp
/// the highest sensitivity is used.
inline double sensitivity_at(const FrocCurve& curve, double fp_per_img) {
  const auto& p = curve.points;
  if (p.empty()) fail(ErrorKind::validation, "sensitivity_at: empty curve");
  if (fp_per_img < p.front().avg_fp) return 0.0;
  std::size_t lo = 0;
  while (lo + 1 < p.size() && p[lo + 1].avg_fp <= fp_per_img) ++lo;
  if (lo + 1 == p.size()) return p[lo].sensitivity;
  const FrocPoint& a = p[lo];
  const FrocPoint& b = p[lo + 1];
  const double t = (fp_per_img - a.avg_fp) / (b.avg_fp - a.avg_fp);
  return a.sensitivity + t * (b.sensitivity - a.sensitivity);
}

/// Best sensitivity reached by any curve point with avg_fp <= fp_per_img.
inline double max_sensitivity_within(const FrocCurve& curve, double fp_per_img) {
  double best = 0;
  for (const auto& p : curve.points)
    if (p.avg_fp <= fp_per_img) best = std::max(best, p.sensitivity);
  return best;
}

inline std::array<double, 7> operating_points(const FrocCurve& curve) {
  std::array<double, 7> out{};
  for (std::size_t i = 0; i < kCpmRates.size(); ++i) out[i] = sensitivity_at(curve, kCpmRates[i]);
  return out;
}

inline double cpm(const std::array<double, 7>& sens) {
  return std::accumulate(sens.begin(), sens.end(), 0.0) / double(sens.size());
}

inline double cpm(const FrocCurve& curve) { return cpm(operating_points(curve)); }

/// Curve whose points sit exactly on the CPM rates.
inline FrocCurve curve_from_operating_points(const std::array<double, 7>& sens) {
  FrocCurve c;
  for (std::size_t i = 0; i < kCpmRates.size(); ++i) c.points.push_back({0.0, kCpmRates[i], sens[i]});
  return c;
}

// ---------------------------------------------------------------------------
// Published reference results

struct ReferenceTable {
  std::string dataset;  // "ROC" or "E-Ophtha-MA"
  std::string method;
  std::optional<std::array<double, 7>> sensitivities;
  std::optional<double> cpm;
};

inline const std::vector<ReferenceTable>& reference_tables() {
  using S = std::array<double, 7>;
  static const std::vector<ReferenceTable> tables = {
      {"ROC", "Proposed", S{0.04, 0.17, 0.35, 0.55, 0.61, 0.72, 0.76}, 0.45},
      {"ROC", "Valladolid", S{0.19, 0.22, 0.25, 0.30, 0.36, 0.41, 0.52}, 0.32},
      {"ROC", "Waikato", S{0.06, 0.11, 0.18, 0.21, 0.25, 0.30, 0.33}, 0.21},
      {"ROC", "Latim", S{0.17, 0.23, 0.32, 0.38, 0.43, 0.53, 0.60}, 0.38},
      {"ROC", "OkMedical", S{0.20, 0.27, 0.31, 0.36, 0.39, 0.47, 0.50}, 0.36},
      {"ROC", "Fujita Lab", S{0.18, 0.22, 0.26, 0.29, 0.35, 0.40, 0.47}, 0.31},
      {"ROC", "Antal", std::nullopt, 0.43},
      {"ROC", "Lazar", std::nullopt, 0.42},
      {"E-Ophtha-MA", "Proposed", S{0.09, 0.26, 0.40, 0.53, 0.58, 0.67, 0.77}, 0.42},
      {"E-Ophtha-MA", "B Wu", S{0.06, 0.12, 0.17, 0.24, 0.32, 0.42, 0.57}, 0.35},
  };
  return tables;
}

inline const ReferenceTable& reference_table(const std::string& dataset, const std::string& method) {
  for (const auto& t : reference_tables())
    if (t.dataset == dataset && t.method == method) return t;
  fail(ErrorKind::validation, "no reference row for " + dataset + " / " + method);
}

/// CSV with columns dataset,method,s_0.125,...,s_8,cpm; missing cells are empty.
inline void write_reference_tables(std::ostream& out, const std::vector<ReferenceTable>& tables) {
  out << "dataset,method,s_0.125,s_0.25,s_0.5,s_1,s_2,s_4,s_8,cpm\n";
  for (const auto& t : tables) {
    out << t.dataset << ',' << t.method;
    for (std::size_t i = 0; i < 7; ++i) {
      out << ',';
      if (t.sensitivities) out << detail::format_real(real_t((*t.sensitivities)[i]));
    }
    out << ',';
    if (t.cpm) out << detail::format_real(real_t(*t.cpm));
    out << '\n';
  }
}

inline std::vector<ReferenceTable> parse_reference_tables(std::istream& in, const std::string& source = "<stream>") {
  std::string line;
  if (!std::getline(in, line) || line != "dataset,method,s_0.125,s_0.25,s_0.5,s_1,s_2,s_4,s_8,cpm") {
    fail(ErrorKind::format, source + ": unexpected reference table header");
  }
  std::vector<ReferenceTable> out;
  for (std::size_t lineno = 2; std::getline(in, line); ++lineno) {
    if (line.empty()) continue;
    const std::string where = source + ":" + std::to_string(lineno);
    std::vector<std::string> f;
    std::size_t start = 0;
    for (std::size_t pos; (pos = line.find(',', start)) != std::string::npos; start = pos + 1)
      f.push_back(line.substr(start, pos - start));
    f.push_back(line.substr(start));
    if (f.size() != 10) fail(ErrorKind::format, where + ": expected 10 fields");
    auto num = [&](const std::string& t) {
      double v = 0;
      const auto res = std::from_chars(t.data(), t.data() + t.size(), v);
      if (res.ec != std::errc{} || res.ptr != t.data() + t.size()) fail(ErrorKind::parse, where + ": bad number '" + t + "'");
      if (!(v >= 0 && v <= 1)) fail(ErrorKind::validation, where + ": value out of [0,1]");
      return v;
    };
    ReferenceTable t{f[0], f[1], std::nullopt, std::nullopt};
    const bool any = std::any_of(f.begin() + 2, f.begin() + 9, [](const std::string& s) { return !s.empty(); });
    if (any) {
      std::array<double, 7> s{};
      for (std::size_t i = 0; i < 7; ++i) s[i] = num(f[2 + i]);
      t.sensitivities = s;
    }
    if (!f[9].empty()) t.cpm = num(f[9]);
    out.push_back(std::move(t));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reports

inline void write_froc_csv(std::ostream& out, const FrocCurve& curve) {
  out << "threshold,avg_fp_per_image,sensitivity\n";
  for (const auto& p : curve.points) {
    out << detail::format_score(real_t(p.threshold)) << ',' << detail::format_score(real_t(p.avg_fp)) << ','
        << detail::format_score(real_t(p.sensitivity)) << '\n';
  }
}

inline void write_operating_points_csv(std::ostream& out, const FrocCurve& curve) {
  const auto sens = operating_points(curve);
  out << "fp_per_img,sensitivity\n";
  for (std::size_t i = 0; i < kCpmRates.size(); ++i) {
    out << detail::format_real(real_t(kCpmRates[i])) << ',' << detail::format_score(real_t(sens[i])) << '\n';
  }
  out << "cpm," << detail::format_score(real_t(cpm(sens))) << '\n';
}

// ---------------------------------------------------------------------------
// Folds

/// Seeded shuffle of image indices; position i of the shuffle goes to fold i % folds.
inline std::vector<std::size_t> assign_folds(std::size_t n_images, std::size_t folds, std::uint64_t seed) {
  if (folds < 2) fail(ErrorKind::config, "folds must be at least 2");
  if (n_images < folds) {
    fail(ErrorKind::config, "cannot split " + std::to_string(n_images) + " images into " + std::to_string(folds) + " folds");
  }
  std::vector<std::size_t> order(n_images);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::size_t> fold(n_images);
  for (std::size_t i = 0; i < n_images; ++i) fold[order[i]] = i % folds;
  return fold;
}

}  // namespace macnn
