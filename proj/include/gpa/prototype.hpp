/* Copyright 2026 The GPA Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License. */

#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include "gpa/error.hpp"
#include "gpa/relation_graph.hpp"

namespace gpa {

enum class Domain { source, target };

inline const char* to_string(Domain d) { return d == Domain::source ? "source" : "target"; }

// One prototype per class (row k, background = row 0). Classes that received
// no confidence mass are absent: zero vector, zero weight.
struct PrototypeSet {
  Eigen::MatrixXd vectors;  // C x d
  std::vector<bool> present;
  Eigen::VectorXd weights;  // alpha_k; zero until class_weights() is applied
  Eigen::VectorXd mass;     // sum_i P~_ik, the merge denominators
  Domain domain = Domain::source;

  Eigen::Index num_classes() const { return vectors.rows(); }
  Eigen::Index dim() const { return vectors.cols(); }
};

// Confidence-weighted mean of aggregated features per class.
inline PrototypeSet merge_prototypes(const AggregatedBatch& agg, Domain domain = Domain::source) {
  const Eigen::MatrixXd& f = agg.features;
  const Eigen::MatrixXd& p = agg.confidences;
  if (f.rows() != p.rows()) throw invalid_input("merge_prototypes: feature/confidence row mismatch");
  const Eigen::Index c = p.cols();
  PrototypeSet out;
  out.domain = domain;
  out.mass = p.colwise().sum().transpose();
  out.vectors = Eigen::MatrixXd::Zero(c, f.cols());
  out.present.assign(static_cast<std::size_t>(c), false);
  out.weights = Eigen::VectorXd::Zero(c);
  const Eigen::MatrixXd weighted = p.transpose() * f;  // C x d numerators
  for (Eigen::Index k = 0; k < c; ++k) {
    if (out.mass(k) > 0.0) {
      out.vectors.row(k) = weighted.row(k) / out.mass(k);
      out.present[static_cast<std::size_t>(k)] = true;
    }
  }
  return out;
}

inline PrototypeSet merge_prototypes(std::span<const AggregatedBatch> scenes, Domain domain = Domain::source) {
  return merge_prototypes(concatenate(scenes), domain);
}

// Column-wise maximum confidence p_k; clamped to 1 because symmetric
// normalization can push propagated confidences slightly above one.
inline Eigen::VectorXd max_confidence(const Eigen::MatrixXd& p) {
  if (p.rows() == 0) return Eigen::VectorXd::Zero(p.cols());
  return p.colwise().maxCoeff().transpose().cwiseMin(1.0);
}

// alpha_k = (1 - p_k)^gamma when p_k exceeds the presence threshold, else 0.
// The threshold defaults to 1/C with C counting background.
inline Eigen::VectorXd class_weights_from_max(const Eigen::VectorXd& p_max, double gamma,
                                              std::optional<double> threshold = std::nullopt) {
  if (!(gamma >= 0.0) || !std::isfinite(gamma)) throw invalid_parameter("class_weights: gamma must be >= 0");
  const double thr = threshold.value_or(1.0 / static_cast<double>(p_max.size()));
  Eigen::VectorXd alpha(p_max.size());
  for (Eigen::Index k = 0; k < p_max.size(); ++k)
    alpha(k) = p_max(k) > thr ? std::pow(1.0 - p_max(k), gamma) : 0.0;
  return alpha;
}

inline Eigen::VectorXd class_weights(const AggregatedBatch& agg, double gamma,
                                     std::optional<double> threshold = std::nullopt) {
  return class_weights_from_max(max_confidence(agg.confidences), gamma, threshold);
}

inline Eigen::VectorXd class_weights(std::span<const AggregatedBatch> scenes, double gamma,
                                     std::optional<double> threshold = std::nullopt) {
  return class_weights(concatenate(scenes), gamma, threshold);
}

// Prototypes and weights in one pass; absent classes keep weight 0.
inline PrototypeSet build_prototypes(const AggregatedBatch& agg, double gamma, Domain domain,
                                     std::optional<double> threshold = std::nullopt) {
  PrototypeSet protos = merge_prototypes(agg, domain);
  protos.weights = class_weights(agg, gamma, threshold);
  for (Eigen::Index k = 0; k < protos.num_classes(); ++k)
    if (!protos.present[static_cast<std::size_t>(k)]) protos.weights(k) = 0.0;
  return protos;
}

}  // namespace gpa
