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
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "gpa/error.hpp"
#include "gpa/geometry.hpp"

namespace gpa {

enum class Stage { rpn, rcnn };

inline const char* to_string(Stage s) { return s == Stage::rpn ? "rpn" : "rcnn"; }

// Region proposals of one scene together with their embeddings and class
// confidences. Column 0 of the confidence matrix is background.
struct ProposalBatch {
  std::vector<BBox> boxes;
  Eigen::MatrixXd features;     // N_p x d
  Eigen::MatrixXd confidences;  // N_p x C
  Stage stage = Stage::rcnn;

  std::size_t size() const { return boxes.size(); }
  Eigen::Index dim() const { return features.cols(); }
  Eigen::Index num_classes() const { return confidences.cols(); }

  void validate() const {
    const auto n = static_cast<Eigen::Index>(boxes.size());
    if (n < 1) throw invalid_input("proposal batch is empty");
    if (features.rows() != n || confidences.rows() != n)
      throw invalid_input("proposal batch: row count of features/confidences differs from box count");
    if (features.cols() < 1) throw invalid_input("proposal batch: feature dimension must be >= 1");
    if (confidences.cols() < 2) throw invalid_input("proposal batch: need at least 2 classes");
    if (stage == Stage::rpn && confidences.cols() != 2)
      throw invalid_input("proposal batch: rpn stage requires exactly 2 confidence columns");
    for (Eigen::Index i = 0; i < n; ++i) {
      if (!boxes[static_cast<std::size_t>(i)].valid()) throw invalid_input("proposal batch: malformed box");
      double sum = 0.0;
      for (Eigen::Index k = 0; k < confidences.cols(); ++k) {
        const double p = confidences(i, k);
        if (!(p >= 0.0 && p <= 1.0)) throw invalid_input("proposal batch: confidence outside [0,1]");
        sum += p;
      }
      if (std::abs(sum - 1.0) > 1e-9) throw invalid_input("proposal batch: confidence row does not sum to 1");
    }
  }
};

enum class GraphKind { identity, iou, gaussian };

inline const char* to_string(GraphKind k) {
  switch (k) {
    case GraphKind::identity: return "none";
    case GraphKind::iou: return "iou";
    case GraphKind::gaussian: return "gaussian";
  }
  return "?";
}

struct RelationGraph {
  Eigen::MatrixXd adjacency;
  GraphKind kind = GraphKind::iou;
  double sigma = 0.0;  // only meaningful for GraphKind::gaussian

  Eigen::Index size() const { return adjacency.rows(); }
  Eigen::VectorXd degree() const { return adjacency.rowwise().sum(); }
};

// A_ij = exp(-|o_i - o_j|^2 / (2 sigma^2)) over box centers.
inline RelationGraph gaussian_adjacency(std::span<const BBox> boxes, double sigma) {
  if (!(sigma > 0.0) || !std::isfinite(sigma)) throw invalid_parameter("gaussian_adjacency: sigma must be > 0");
  const auto n = static_cast<Eigen::Index>(boxes.size());
  if (n < 1) throw invalid_input("gaussian_adjacency: no boxes");
  Eigen::MatrixXd a = Eigen::MatrixXd::Identity(n, n);
  const double inv = 1.0 / (2.0 * sigma * sigma);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double v = std::exp(-squared_center_distance(boxes[i], boxes[j]) * inv);
      a(i, j) = v;
      a(j, i) = v;
    }
  }
  return {std::move(a), GraphKind::gaussian, sigma};
}

inline RelationGraph iou_adjacency(std::span<const BBox> boxes) {
  const auto n = static_cast<Eigen::Index>(boxes.size());
  if (n < 1) throw invalid_input("iou_adjacency: no boxes");
  for (const auto& b : boxes) {
    if (!b.valid() || !(b.area() > 0.0)) throw invalid_input("iou_adjacency: zero-area box in batch");
  }
  Eigen::MatrixXd a = Eigen::MatrixXd::Identity(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double v = iou(boxes[i], boxes[j]);
      a(i, j) = v;
      a(j, i) = v;
    }
  }
  return {std::move(a), GraphKind::iou, 0.0};
}

// No relations: every proposal only sees itself.
inline RelationGraph identity_graph(std::size_t n) {
  if (n < 1) throw invalid_input("identity_graph: no boxes");
  const auto m = static_cast<Eigen::Index>(n);
  return {Eigen::MatrixXd::Identity(m, m), GraphKind::identity, 0.0};
}

struct GraphSpec {
  GraphKind kind = GraphKind::iou;
  double sigma = 15.0;
};

inline RelationGraph build_graph(std::span<const BBox> boxes, const GraphSpec& spec) {
  switch (spec.kind) {
    case GraphKind::identity: return identity_graph(boxes.size());
    case GraphKind::iou: return iou_adjacency(boxes);
    case GraphKind::gaussian: return gaussian_adjacency(boxes, spec.sigma);
  }
  throw invalid_parameter("build_graph: unknown graph kind");
}

// D^{-1/2} A D^{-1/2}.
inline Eigen::MatrixXd normalize(const RelationGraph& graph) {
  const Eigen::MatrixXd& a = graph.adjacency;
  if (a.rows() != a.cols() || a.rows() < 1) throw invalid_input("normalize: adjacency must be square and non-empty");
  const Eigen::VectorXd deg = a.rowwise().sum();
  Eigen::VectorXd inv_sqrt(deg.size());
  for (Eigen::Index i = 0; i < deg.size(); ++i) {
    if (!(deg(i) > 0.0)) throw degenerate_graph("normalize: zero degree at node " + std::to_string(i));
    inv_sqrt(i) = 1.0 / std::sqrt(deg(i));
  }
  return inv_sqrt.asDiagonal() * a * inv_sqrt.asDiagonal();
}

// Graph-propagated features and confidences. Rows of `confidences` are
// nonnegative but need not sum to one.
struct AggregatedBatch {
  Eigen::MatrixXd features;
  Eigen::MatrixXd confidences;
};

inline AggregatedBatch aggregate(const Eigen::MatrixXd& propagator, const Eigen::MatrixXd& features,
                                 const Eigen::MatrixXd& confidences, const Eigen::MatrixXd* transform = nullptr) {
  if (propagator.rows() != propagator.cols() || propagator.cols() != features.rows() ||
      features.rows() != confidences.rows())
    throw invalid_input("aggregate: graph and batch sizes differ");
  AggregatedBatch out;
  if (transform != nullptr) {
    if (transform->rows() != features.cols() || transform->cols() != features.cols())
      throw invalid_input("aggregate: transform must be d x d");
    out.features = (propagator * features) * (*transform);
  } else {
    out.features = propagator * features;
  }
  out.confidences = propagator * confidences;
  return out;
}

inline AggregatedBatch aggregate(const ProposalBatch& batch, const RelationGraph& graph,
                                 const Eigen::MatrixXd* transform = nullptr) {
  if (graph.size() != static_cast<Eigen::Index>(batch.size()))
    throw invalid_input("aggregate: graph has " + std::to_string(graph.size()) + " nodes, batch has " +
                        std::to_string(batch.size()) + " proposals");
  return aggregate(normalize(graph), batch.features, batch.confidences, transform);
}

// Stack per-scene aggregates so prototypes can pool across the scenes of a batch.
inline AggregatedBatch concatenate(std::span<const AggregatedBatch> parts) {
  if (parts.empty()) throw invalid_input("concatenate: nothing to concatenate");
  Eigen::Index rows = 0;
  const Eigen::Index d = parts.front().features.cols();
  const Eigen::Index c = parts.front().confidences.cols();
  for (const auto& p : parts) {
    if (p.features.cols() != d || p.confidences.cols() != c)
      throw invalid_input("concatenate: inconsistent feature or class dimension");
    rows += p.features.rows();
  }
  AggregatedBatch out{Eigen::MatrixXd(rows, d), Eigen::MatrixXd(rows, c)};
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    out.features.middleRows(r, p.features.rows()) = p.features;
    out.confidences.middleRows(r, p.confidences.rows()) = p.confidences;
    r += p.features.rows();
  }
  return out;
}

// Fraction of adjacency entries below `threshold`.
inline double sparsity(const RelationGraph& graph, double threshold = 1e-3) {
  const auto& a = graph.adjacency;
  if (a.size() == 0) return 0.0;
  return static_cast<double>((a.array() < threshold).count()) / static_cast<double>(a.size());
}

struct SigmaCalibration {
  double sigma = 0.0;
  double iou_sparsity = 0.0;
  double gaussian_sparsity = 0.0;
  double gap() const { return std::abs(gaussian_sparsity - iou_sparsity); }
};

// Bisect for the Gaussian bandwidth whose graphs are as sparse as the IoU
// graphs over the same box sets (entries pooled across all scenes).
inline SigmaCalibration calibrate_sigma(std::span<const std::vector<BBox>> scenes, double threshold = 1e-3,
                                        int iterations = 100) {
  if (scenes.empty()) throw invalid_input("calibrate_sigma: no scenes");
  double total = 0.0;
  double iou_zero = 0.0;
  double max_dist = 0.0;
  for (const auto& boxes : scenes) {
    const auto g = iou_adjacency(boxes);
    iou_zero += static_cast<double>((g.adjacency.array() < threshold).count());
    total += static_cast<double>(g.adjacency.size());
    for (std::size_t i = 0; i < boxes.size(); ++i)
      for (std::size_t j = i + 1; j < boxes.size(); ++j) max_dist = std::max(max_dist, center_distance(boxes[i], boxes[j]));
  }
  const double target = iou_zero / total;
  auto gaussian_sparsity = [&](double sigma) {
    double zero = 0.0;
    for (const auto& boxes : scenes)
      zero += static_cast<double>((gaussian_adjacency(boxes, sigma).adjacency.array() < threshold).count());
    return zero / total;
  };
  // Sparsity is non-increasing in sigma: lo is too sparse, hi too dense.
  double lo = 1e-9;
  double hi = std::max(1.0, 2.0 * max_dist);
  double s_lo = gaussian_sparsity(lo);
  double s_hi = gaussian_sparsity(hi);
  for (int it = 0; it < iterations && hi - lo > 1e-12 * hi; ++it) {
    const double mid = 0.5 * (lo + hi);
    const double s = gaussian_sparsity(mid);
    if (s > target) {
      lo = mid;
      s_lo = s;
    } else {
      hi = mid;
      s_hi = s;
    }
  }
  SigmaCalibration out;
  out.iou_sparsity = target;
  if (std::abs(s_lo - target) < std::abs(s_hi - target)) {
    out.sigma = lo;
    out.gaussian_sparsity = s_lo;
  } else {
    out.sigma = hi;
    out.gaussian_sparsity = s_hi;
  }
  return out;
}

}  // namespace gpa
