#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "td/comm.hpp"
#include "td/dataset.hpp"
#include "td/errors.hpp"
#include "td/nets.hpp"

namespace td::analysis {

/// N x D activation matrix for one named representation.
struct RepresentationSet {
  std::string label;  // s_g, e_g, m_g, s_h or e_h
  std::size_t rows = 0, cols = 0;
  std::vector<double> values;  // row-major

  static RepresentationSet from(std::string label, const Tensor& t) {
    RepresentationSet r{std::move(label), t.rows(), t.cols(), {}};
    r.values.assign(t.data().begin(), t.data().end());
    return r;
  }
};

namespace detail {

inline std::vector<double> centered(std::span<const double> m, std::size_t n, std::size_t d) {
  std::vector<double> out(m.begin(), m.end());
  for (std::size_t j = 0; j < d; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += out[i * d + j];
    mean /= double(n);
    for (std::size_t i = 0; i < n; ++i) out[i * d + j] -= mean;
  }
  return out;
}

// ||A^T B||_F^2 for A: n x da, B: n x db.
inline double cross_frobenius_sq(const std::vector<double>& a, std::size_t da, const std::vector<double>& b,
                                 std::size_t db, std::size_t n) {
  double total = 0.0;
  for (std::size_t p = 0; p < da; ++p) {
    for (std::size_t q = 0; q < db; ++q) {
      double dot = 0.0;
      for (std::size_t i = 0; i < n; ++i) dot += a[i * da + p] * b[i * db + q];
      total += dot * dot;
    }
  }
  return total;
}

}  // namespace detail

/// Linear CKA, feature-space form:
/// ||Yc^T Xc||_F^2 / (||Xc^T Xc||_F ||Yc^T Yc||_F), 0 when a normalizer vanishes.
inline double linear_cka(std::span<const double> x, std::size_t n, std::size_t dx, std::span<const double> y,
                         std::size_t ny, std::size_t dy) {
  if (n != ny) throw ShapeError("linear_cka: example counts differ (" + std::to_string(n) + " vs " + std::to_string(ny) + ")");
  if (n < 2) throw ShapeError("linear_cka needs at least 2 examples");
  if (x.size() != n * dx || y.size() != n * dy) throw ShapeError("linear_cka: buffer size does not match dims");
  const auto xc = detail::centered(x, n, dx);
  const auto yc = detail::centered(y, n, dy);
  const double xy = detail::cross_frobenius_sq(yc, dy, xc, dx, n);
  const double xx = std::sqrt(detail::cross_frobenius_sq(xc, dx, xc, dx, n));
  const double yy = std::sqrt(detail::cross_frobenius_sq(yc, dy, yc, dy, n));
  if (xx == 0.0 || yy == 0.0) return 0.0;
  return xy / (xx * yy);
}

inline double linear_cka(const RepresentationSet& a, const RepresentationSet& b) {
  return linear_cka(a.values, a.rows, a.cols, b.values, b.rows, b.cols);
}

/// Pairwise CKA between representation sets of one probe bucket.
struct SimilarityGrid {
  std::int64_t bucket = 0;
  std::size_t examples = 0;
  std::vector<std::string> labels;
  std::vector<double> cells;  // labels.size()^2, row-major

  double at(std::size_t r, std::size_t c) const { return cells.at(r * labels.size() + c); }
  double at(const std::string& row, const std::string& col) const {
    auto find = [&](const std::string& l) {
      auto it = std::find(labels.begin(), labels.end(), l);
      if (it == labels.end()) throw ShapeError("no representation labelled '" + l + "'");
      return std::size_t(it - labels.begin());
    };
    return at(find(row), find(col));
  }
};

inline SimilarityGrid grid_of(std::int64_t bucket, const std::vector<RepresentationSet>& sets) {
  SimilarityGrid g;
  g.bucket = bucket;
  g.examples = sets.empty() ? 0 : sets.front().rows;
  for (const auto& s : sets) g.labels.push_back(s.label);
  for (const auto& a : sets)
    for (const auto& b : sets) g.cells.push_back(linear_cka(a, b));
  return g;
}

/// Student s_g, e_g, message m_g and teacher s_h, e_h, all in eval mode on
/// the same examples.
inline std::vector<RepresentationSet> collect_representations(const PartitionedNet& teacher,
                                                              const PartitionedNet& student, const Channels& ch,
                                                              const Batch<float>& probe) {
  Rng unused(0);
  auto tape = Tape::inference();
  auto sg = student.forward_with_taps(tape, probe.x, false, unused);
  auto th = teacher.forward_with_taps(tape, probe.x, false, unused);
  auto mg = ch.E_g()(tape, HiddenStates<float>{sg.s, sg.e}, false, unused);
  return {RepresentationSet::from("s_g", sg.s), RepresentationSet::from("e_g", sg.e),
          RepresentationSet::from("m_g", mg), RepresentationSet::from("s_h", th.s),
          RepresentationSet::from("e_h", th.e)};
}

/// One grid per example group (rating bucket or subpopulation), each built
/// from up to `per_class_n` examples sampled with `seed`.
inline std::vector<SimilarityGrid> probe_and_grid(const PartitionedNet& teacher, const PartitionedNet& student,
                                                  const Channels& ch, const Dataset& data,
                                                  std::size_t per_class_n = 20, std::uint64_t seed = 0,
                                                  std::ostream& warn = std::cerr) {
  if (data.group.size() != data.size()) throw DataError("probe data carries no group labels");
  std::map<std::int64_t, std::vector<std::size_t>> by_group;
  for (std::size_t i = 0; i < data.size(); ++i) by_group[data.group[i]].push_back(i);
  Rng rng(seed);
  std::vector<SimilarityGrid> grids;
  for (auto& [group, idx] : by_group) {
    std::shuffle(idx.begin(), idx.end(), rng);
    if (idx.size() < per_class_n) {
      warn << "warning: bucket " << group << " has " << idx.size() << " examples (< " << per_class_n
           << "); using all of them\n";
    } else {
      idx.resize(per_class_n);
    }
    if (idx.size() < 2) {
      warn << "warning: bucket " << group << " skipped (fewer than 2 examples)\n";
      continue;
    }
    std::sort(idx.begin(), idx.end());
    auto sets = collect_representations(teacher, student, ch, data.batch<float>(idx));
    grids.push_back(grid_of(group, sets));
  }
  return grids;
}

inline void write_grid(std::ostream& os, const SimilarityGrid& g) {
  os << "bucket=" << g.bucket << " examples=" << g.examples << '\n';
  for (const auto& l : g.labels) os << '\t' << l;
  os << '\n';
  os << std::fixed << std::setprecision(6);
  for (std::size_t r = 0; r < g.labels.size(); ++r) {
    os << g.labels[r];
    for (std::size_t c = 0; c < g.labels.size(); ++c) os << '\t' << g.at(r, c);
    os << '\n';
  }
}

/// Level-matched student/teacher pairs reported in the summary CSV.
inline const std::vector<std::pair<std::string, std::string>>& summary_pairs() {
  static const std::vector<std::pair<std::string, std::string>> pairs = {
      {"s_g", "s_h"}, {"e_g", "e_h"}, {"m_g", "s_h"}, {"m_g", "e_h"}};
  return pairs;
}

inline void write_summary(std::ostream& os, const std::vector<SimilarityGrid>& grids) {
  os << "bucket,examples";
  for (const auto& [a, b] : summary_pairs()) os << ',' << a << ':' << b;
  os << '\n';
  os << std::fixed << std::setprecision(6);
  for (const auto& g : grids) {
    os << g.bucket << ',' << g.examples;
    for (const auto& [a, b] : summary_pairs()) os << ',' << g.at(a, b);
    os << '\n';
  }
}

}  // namespace td::analysis
