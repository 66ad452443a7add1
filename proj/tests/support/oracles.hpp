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

// Reference implementations for tests: plain loops and rasterization, written
// without calling the library code they check.

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "gpa/geometry.hpp"
#include "gpa/relation_graph.hpp"

namespace gpa::oracle {

// Unit-cell count of the overlap of two integer-coordinate boxes.
inline double rasterized_iou(const BBox& a, const BBox& b) {
  const int x0 = static_cast<int>(std::floor(std::min(a.x_min, b.x_min)));
  const int x1 = static_cast<int>(std::ceil(std::max(a.x_max, b.x_max)));
  const int y0 = static_cast<int>(std::floor(std::min(a.y_min, b.y_min)));
  const int y1 = static_cast<int>(std::ceil(std::max(a.y_max, b.y_max)));
  long inter = 0;
  long uni = 0;
  for (int x = x0; x < x1; ++x)
    for (int y = y0; y < y1; ++y) {
      const double cx = x + 0.5;
      const double cy = y + 0.5;
      const bool in_a = cx > a.x_min && cx < a.x_max && cy > a.y_min && cy < a.y_max;
      const bool in_b = cx > b.x_min && cx < b.x_max && cy > b.y_min && cy < b.y_max;
      inter += in_a && in_b;
      uni += in_a || in_b;
    }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

inline double overlap_1d(double a0, double a1, double b0, double b1) {
  double lo = a0 > b0 ? a0 : b0;
  double hi = a1 < b1 ? a1 : b1;
  return hi > lo ? hi - lo : 0.0;
}

inline double loop_iou(const BBox& a, const BBox& b) {
  const double inter = overlap_1d(a.x_min, a.x_max, b.x_min, b.x_max) * overlap_1d(a.y_min, a.y_max, b.y_min, b.y_max);
  const double area_a = (a.x_max - a.x_min) * (a.y_max - a.y_min);
  const double area_b = (b.x_max - b.x_min) * (b.y_max - b.y_min);
  const double uni = area_a + area_b - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

inline Eigen::MatrixXd loop_iou_adjacency(const std::vector<BBox>& boxes) {
  const auto n = static_cast<Eigen::Index>(boxes.size());
  Eigen::MatrixXd a(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      a(i, j) = i == j ? 1.0 : loop_iou(boxes[static_cast<std::size_t>(i)], boxes[static_cast<std::size_t>(j)]);
  return a;
}

inline Eigen::MatrixXd loop_gaussian_adjacency(const std::vector<BBox>& boxes, double sigma) {
  const auto n = static_cast<Eigen::Index>(boxes.size());
  Eigen::MatrixXd a(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) {
      const auto& p = boxes[static_cast<std::size_t>(i)];
      const auto& q = boxes[static_cast<std::size_t>(j)];
      const double dx = 0.5 * (p.x_min + p.x_max) - 0.5 * (q.x_min + q.x_max);
      const double dy = 0.5 * (p.y_min + p.y_max) - 0.5 * (q.y_min + q.y_max);
      a(i, j) = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
    }
  return a;
}

inline Eigen::MatrixXd loop_normalize(const Eigen::MatrixXd& a) {
  const Eigen::Index n = a.rows();
  std::vector<double> deg(static_cast<std::size_t>(n), 0.0);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) deg[static_cast<std::size_t>(i)] += a(i, j);
  Eigen::MatrixXd out(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      out(i, j) = a(i, j) / std::sqrt(deg[static_cast<std::size_t>(i)] * deg[static_cast<std::size_t>(j)]);
  return out;
}

inline Eigen::MatrixXd loop_product(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  Eigen::MatrixXd out(a.rows(), b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (Eigen::Index k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      out(i, j) = s;
    }
  return out;
}

// c_k = sum_i P~_ik F~_i / sum_i P~_ik; absent rows are zero.
inline Eigen::MatrixXd loop_merge(const Eigen::MatrixXd& f, const Eigen::MatrixXd& p) {
  Eigen::MatrixXd c = Eigen::MatrixXd::Zero(p.cols(), f.cols());
  for (Eigen::Index k = 0; k < p.cols(); ++k) {
    double mass = 0.0;
    for (Eigen::Index i = 0; i < f.rows(); ++i) mass += p(i, k);
    if (mass == 0.0) continue;
    for (Eigen::Index j = 0; j < f.cols(); ++j) {
      double s = 0.0;
      for (Eigen::Index i = 0; i < f.rows(); ++i) s += p(i, k) * f(i, j);
      c(k, j) = s / mass;
    }
  }
  return c;
}

inline std::vector<double> loop_class_weights(const Eigen::MatrixXd& p_tilde, double gamma) {
  const Eigen::Index c = p_tilde.cols();
  std::vector<double> w(static_cast<std::size_t>(c), 0.0);
  for (Eigen::Index k = 0; k < c; ++k) {
    double m = 0.0;
    for (Eigen::Index i = 0; i < p_tilde.rows(); ++i) m = std::max(m, p_tilde(i, k));
    m = std::min(m, 1.0);
    w[static_cast<std::size_t>(k)] = m > 1.0 / static_cast<double>(c) ? std::pow(1.0 - m, gamma) : 0.0;
  }
  return w;
}

inline double loop_distance(const Eigen::MatrixXd& a, Eigen::Index i, const Eigen::MatrixXd& b, Eigen::Index j) {
  double s = 0.0;
  for (Eigen::Index t = 0; t < a.cols(); ++t) s += (a(i, t) - b(j, t)) * (a(i, t) - b(j, t));
  return std::sqrt(s);
}

inline double loop_intra(const Eigen::MatrixXd& cs, const std::vector<double>& ws, const Eigen::MatrixXd& ct,
                         const std::vector<double>& wt) {
  double num = 0.0;
  double den = 0.0;
  for (Eigen::Index k = 0; k < cs.rows(); ++k) {
    const double w = ws[static_cast<std::size_t>(k)] * wt[static_cast<std::size_t>(k)];
    num += w * loop_distance(cs, k, ct, k);
    den += w;
  }
  return den > 0.0 ? num / den : 0.0;
}

inline double loop_inter(const Eigen::MatrixXd& ca, const std::vector<double>& wa, const Eigen::MatrixXd& cb,
                         const std::vector<double>& wb, double m) {
  double num = 0.0;
  double den = 0.0;
  for (Eigen::Index i = 0; i < ca.rows(); ++i)
    for (Eigen::Index j = 0; j < cb.rows(); ++j) {
      if (i == j) continue;
      const double w = wa[static_cast<std::size_t>(i)] * wb[static_cast<std::size_t>(j)];
      num += w * std::max(0.0, m - loop_distance(ca, i, cb, j));
      den += w;
    }
  return den > 0.0 ? num / den : 0.0;
}

// ---- random inputs --------------------------------------------------------

inline std::vector<BBox> random_boxes(std::size_t n, std::mt19937_64& rng, double extent = 60.0) {
  std::uniform_real_distribution<double> pos(0.0, extent);
  std::uniform_real_distribution<double> size(2.0, extent / 3.0);
  std::vector<BBox> out;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = pos(rng);
    const double y = pos(rng);
    out.push_back({x, y, x + size(rng), y + size(rng)});
  }
  return out;
}

inline std::vector<BBox> random_integer_boxes(std::size_t n, std::mt19937_64& rng, int extent = 20) {
  std::uniform_int_distribution<int> pos(0, extent - 1);
  std::vector<BBox> out;
  while (out.size() < n) {
    int x0 = pos(rng), x1 = pos(rng), y0 = pos(rng), y1 = pos(rng);
    if (x0 == x1 || y0 == y1) continue;
    if (x0 > x1) std::swap(x0, x1);
    if (y0 > y1) std::swap(y0, y1);
    out.push_back({double(x0), double(y0), double(x1), double(y1)});
  }
  return out;
}

inline Eigen::MatrixXd random_matrix(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index j = 0; j < c; ++j)
    for (Eigen::Index i = 0; i < r; ++i) m(i, j) = normal(rng);
  return m;
}

inline Eigen::MatrixXd random_confidences(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double sharpness = 2.0) {
  Eigen::MatrixXd logits = random_matrix(r, c, rng, sharpness);
  Eigen::MatrixXd p(r, c);
  for (Eigen::Index i = 0; i < r; ++i) {
    const double mx = logits.row(i).maxCoeff();
    double s = 0.0;
    for (Eigen::Index k = 0; k < c; ++k) s += (p(i, k) = std::exp(logits(i, k) - mx));
    p.row(i) /= s;
  }
  return p;
}

inline double max_abs_diff(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return INFINITY;
  return a.size() == 0 ? 0.0 : (a - b).cwiseAbs().maxCoeff();
}

}  // namespace gpa::oracle
