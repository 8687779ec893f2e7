#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "msenc/io.hpp"
#include "msenc/tensor.hpp"

namespace msenc {

inline constexpr double kUndefined = std::numeric_limits<double>::quiet_NaN();

// Median of the finite entries; NaN when there are none.
inline double median(std::vector<double> values) {
  std::erase_if(values, [](double x) { return !std::isfinite(x); });
  if (values.empty()) return kUndefined;
  const std::size_t mid = values.size() / 2;
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid), values.end());
  const double upper = values[mid];
  if (values.size() % 2 == 1) return upper;
  const double lower = *std::max_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lower + upper);
}

struct VertexR2 {
  std::vector<double> values;  // NaN where the target has no variance
  Index undefined = 0;
};

// 1 - SS_res / SS_tot per column, SS_tot about the column's target mean.
template <typename T>
VertexR2 r2_per_vertex(const Matrix<T>& pred, const Matrix<T>& target) {
  require(pred.rows() == target.rows() && pred.cols() == target.cols(), ErrorKind::ShapeMismatch,
          "prediction and target shapes differ");
  require(target.rows() >= 2, ErrorKind::InvalidArgument, "R^2 needs at least 2 samples");
  VertexR2 out;
  out.values.resize(static_cast<std::size_t>(target.cols()));
  const double n = double(target.rows());
  for (Index j = 0; j < target.cols(); ++j) {
    double sum = 0.0;
    double sum_sq = 0.0;
    for (Index i = 0; i < target.rows(); ++i) {
      sum += double(target(i, j));
      sum_sq += double(target(i, j)) * double(target(i, j));
    }
    const double mean = sum / n;
    double ss_tot = 0.0;
    double ss_res = 0.0;
    for (Index i = 0; i < target.rows(); ++i) {
      const double t = double(target(i, j));
      const double r = double(pred(i, j)) - t;
      ss_tot += (t - mean) * (t - mean);
      ss_res += r * r;
    }
    if (ss_tot <= 1e-300 + 1e-12 * sum_sq) {
      out.values[static_cast<std::size_t>(j)] = kUndefined;
      ++out.undefined;
    } else {
      out.values[static_cast<std::size_t>(j)] = 1.0 - ss_res / ss_tot;
    }
  }
  return out;
}

struct ChallengeOptions {
  bool clip_at_one = true;  // clip each normalized value at 1 before averaging
};

struct ChallengeScore {
  double score = 0.0;
  Index included = 0;
  Index excluded = 0;  // zero ceiling or undefined R^2
};

// Mean of r2 / ceiling over vertices with a positive ceiling and defined R^2.
inline ChallengeScore challenge_score(std::span<const double> r2, std::span<const double> noise_ceiling,
                                      const ChallengeOptions& opt = {}) {
  require(r2.size() == noise_ceiling.size(), ErrorKind::LengthMismatch, "r2 and noise ceiling lengths differ");
  ChallengeScore out;
  double total = 0.0;
  for (std::size_t i = 0; i < r2.size(); ++i) {
    require(!(noise_ceiling[i] < 0.0), ErrorKind::InvalidArgument, "noise ceiling must be >= 0");
    if (!(noise_ceiling[i] > 0.0) || !std::isfinite(r2[i])) {
      ++out.excluded;
      continue;
    }
    double normalized = r2[i] / noise_ceiling[i];
    if (opt.clip_at_one) normalized = std::min(normalized, 1.0);
    total += normalized;
    ++out.included;
  }
  require(out.included > 0, ErrorKind::AllVerticesExcluded, "every vertex has a zero ceiling or undefined R^2");
  out.score = total / double(out.included);
  return out;
}

struct RoiScores {
  std::map<std::string, double> median;
  std::vector<std::string> empty;  // masks with no defined (subject, vertex) pair
};

// Median over the (subject, vertex) pairs inside each mask.
inline RoiScores roi_scores(const std::vector<std::vector<double>>& subject_r2,
                            const std::map<std::string, std::vector<std::uint8_t>>& masks) {
  RoiScores out;
  for (const auto& [name, mask] : masks) {
    std::vector<double> pool;
    for (const auto& r2 : subject_r2) {
      require(r2.size() == mask.size(), ErrorKind::LengthMismatch, "roi mask " + name + " length != V");
      for (std::size_t v = 0; v < mask.size(); ++v)
        if (mask[v] && std::isfinite(r2[v])) pool.push_back(r2[v]);
    }
    if (pool.empty()) {
      out.empty.push_back(name);
      continue;
    }
    out.median[name] = median(std::move(pool));
  }
  return out;
}

struct R2Report {
  std::vector<std::vector<double>> subject_r2;  // S x V, NaN = undefined
  std::vector<double> per_vertex;               // median over subjects, per vertex
  std::vector<double> per_subject_median;
  double group_median = kUndefined;
  std::optional<double> challenge_score;
  Index challenge_excluded = 0;
  std::map<std::string, double> per_roi_median;
  std::vector<std::string> empty_rois;
  Index undefined_vertices = 0;
  std::vector<Index> samples_per_subject;
};

struct EvaluateOptions {
  const std::vector<float>* noise_ceiling = nullptr;  // S x V
  const std::map<std::string, std::vector<std::uint8_t>>* roi_masks = nullptr;
  ChallengeOptions challenge;
};

// Per-subject vertex-wise R^2 and its aggregates. Row i of pred/target
// belongs to subject_of_row[i]; subjects with fewer than two rows are left
// undefined.
template <typename T>
R2Report evaluate(const Matrix<T>& pred, const Matrix<T>& target, std::span<const int> subject_of_row, Index subjects,
                  const EvaluateOptions& opt = {}) {
  require(static_cast<Index>(subject_of_row.size()) == target.rows(), ErrorKind::ShapeMismatch,
          "one subject per row is required");
  const Index v = target.cols();
  R2Report report;
  report.subject_r2.assign(static_cast<std::size_t>(subjects), std::vector<double>(static_cast<std::size_t>(v), kUndefined));
  report.per_subject_median.assign(static_cast<std::size_t>(subjects), kUndefined);
  report.samples_per_subject.assign(static_cast<std::size_t>(subjects), 0);
  std::vector<double> pooled;
  for (Index s = 0; s < subjects; ++s) {
    std::vector<Index> rows;
    for (std::size_t i = 0; i < subject_of_row.size(); ++i)
      if (subject_of_row[i] == s) rows.push_back(static_cast<Index>(i));
    report.samples_per_subject[static_cast<std::size_t>(s)] = static_cast<Index>(rows.size());
    if (rows.size() < 2) continue;
    Matrix<T> p(static_cast<Index>(rows.size()), v);
    Matrix<T> t(static_cast<Index>(rows.size()), v);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      p.row(static_cast<Index>(i)) = pred.row(rows[i]);
      t.row(static_cast<Index>(i)) = target.row(rows[i]);
    }
    VertexR2 r2 = r2_per_vertex(p, t);
    report.undefined_vertices += r2.undefined;
    report.per_subject_median[static_cast<std::size_t>(s)] = median(r2.values);
    pooled.insert(pooled.end(), r2.values.begin(), r2.values.end());
    report.subject_r2[static_cast<std::size_t>(s)] = std::move(r2.values);
  }
  report.group_median = median(pooled);
  report.per_vertex.resize(static_cast<std::size_t>(v));
  for (Index j = 0; j < v; ++j) {
    std::vector<double> column;
    for (const auto& r : report.subject_r2) column.push_back(r[static_cast<std::size_t>(j)]);
    report.per_vertex[static_cast<std::size_t>(j)] = median(std::move(column));
  }
  if (opt.noise_ceiling) {
    require(static_cast<Index>(opt.noise_ceiling->size()) == subjects * v, ErrorKind::ShapeMismatch,
            "noise ceiling must be S x V");
    std::vector<double> r2_all;
    std::vector<double> nc_all;
    for (Index s = 0; s < subjects; ++s)
      for (Index j = 0; j < v; ++j) {
        r2_all.push_back(report.subject_r2[static_cast<std::size_t>(s)][static_cast<std::size_t>(j)]);
        nc_all.push_back(double((*opt.noise_ceiling)[static_cast<std::size_t>(s * v + j)]));
      }
    const ChallengeScore cs = challenge_score(r2_all, nc_all, opt.challenge);
    report.challenge_score = cs.score;
    report.challenge_excluded = cs.excluded;
  }
  if (opt.roi_masks) {
    RoiScores roi = roi_scores(report.subject_r2, *opt.roi_masks);
    report.per_roi_median = std::move(roi.median);
    report.empty_rois = std::move(roi.empty);
  }
  return report;
}

inline json finite_or_null(double x) { return std::isfinite(x) ? json(x) : json(nullptr); }

inline json to_json(const R2Report& r) {
  json j;
  j["group_median"] = finite_or_null(r.group_median);
  j["per_subject_median"] = json::array();
  for (double x : r.per_subject_median) j["per_subject_median"].push_back(finite_or_null(x));
  j["samples_per_subject"] = r.samples_per_subject;
  j["challenge_score"] = r.challenge_score ? json(*r.challenge_score) : json(nullptr);
  j["challenge_excluded"] = r.challenge_excluded;
  j["per_roi_median"] = json::object();
  for (const auto& [name, value] : r.per_roi_median) j["per_roi_median"][name] = value;
  j["empty_rois"] = r.empty_rois;
  j["undefined_vertices"] = r.undefined_vertices;
  return j;
}

// Writes report.json plus r2_subject.f32 (S x V) and r2_group_median.f32 (V).
inline void write_report(const R2Report& r, const fs::path& dir, json extra = json::object()) {
  fs::create_directories(dir);
  std::vector<float> subject;
  for (const auto& row : r.subject_r2)
    for (double x : row) subject.push_back(static_cast<float>(x));
  std::vector<float> group(r.per_vertex.begin(), r.per_vertex.end());
  io::write_f32(dir / "r2_subject.f32", subject);
  io::write_f32(dir / "r2_group_median.f32", group);
  json j = to_json(r);
  j["arrays"] = {{"r2_subject", {{"file", "r2_subject.f32"}, {"shape", {r.subject_r2.size(), r.per_vertex.size()}}}},
                 {"r2_group_median", {{"file", "r2_group_median.f32"}, {"shape", {r.per_vertex.size()}}}}};
  for (auto& [k, v] : extra.items()) j[k] = v;
  io::write_json(dir / "report.json", j);
}

}  // namespace msenc
