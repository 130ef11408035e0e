#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "td/errors.hpp"

namespace td {

inline double rmse(std::span<const float> preds, std::span<const float> targets) {
  if (preds.size() != targets.size()) throw ShapeError("rmse: length mismatch");
  if (preds.empty()) throw DataError("rmse of empty input");
  double acc = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const double d = double(preds[i]) - double(targets[i]);
    acc += d * d;
  }
  return std::sqrt(acc / double(preds.size()));
}

/// Fraction of rows of logits[N x classes] whose argmax equals the label.
inline double accuracy(std::span<const float> logits, std::size_t classes, std::span<const std::size_t> labels) {
  if (classes == 0 || logits.size() != classes * labels.size()) throw ShapeError("accuracy: length mismatch");
  if (labels.empty()) throw DataError("accuracy of empty input");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto row = logits.subspan(i * classes, classes);
    const auto best = std::size_t(std::max_element(row.begin(), row.end()) - row.begin());
    if (best == labels[i]) ++hits;
  }
  return double(hits) / double(labels.size());
}

}  // namespace td
