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

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "gpa/alignment_loss.hpp"
#include "gpa/error.hpp"
#include "gpa/model.hpp"
#include "gpa/relation_graph.hpp"
#include "gpa/simulator.hpp"
#include "gpa/trainer.hpp"

namespace gpa {

struct GradcheckOptions {
  int trials = 100;
  std::uint64_t seed = 0;
  double step = 1e-6;
  double tolerance = 1e-5;
  // Draws with any active distance this close to 0 or to the margin are
  // redrawn, so central differences never straddle a kink.
  double kink_gap = 1e-4;
  int objective_trials = 8;
  int max_redraws = 10000;

  void validate() const {
    if (trials < 0 || objective_trials < 0) throw invalid_parameter("gradcheck: trial counts must be >= 0");
    if (!(step > 0.0)) throw invalid_parameter("gradcheck: step must be > 0");
    if (!(tolerance > 0.0)) throw invalid_parameter("gradcheck: tolerance must be > 0");
  }
};

struct GradcheckTrial {
  int index = 0;
  GraphKind kind = GraphKind::iou;
  bool confidence_grad = false;
  bool transform = false;
  bool normalized = false;
  Eigen::Index classes = 0;
  Eigen::Index dim = 0;
  std::vector<Eigen::Index> source_sizes;
  std::vector<Eigen::Index> target_sizes;
  Eigen::Index coordinates = 0;
  int redraws = 0;
  double loss = 0.0;
  double relative_error = 0.0;
};

struct GradcheckReport {
  double tolerance = 0.0;
  std::vector<GradcheckTrial> loss_trials;
  std::vector<GradcheckTrial> objective_trials;

  static double max_error(const std::vector<GradcheckTrial>& v) {
    double m = 0.0;
    for (const auto& t : v) m = std::max(m, t.relative_error);
    return m;
  }
  double max_loss_error() const { return max_error(loss_trials); }
  double max_objective_error() const { return max_error(objective_trials); }
  bool passed() const { return max_loss_error() <= tolerance && max_objective_error() <= tolerance; }
};

// ||a - n|| / max(||a||, ||n||), and 0 when both vanish.
inline double relative_error(const Eigen::VectorXd& analytic, const Eigen::VectorXd& numeric) {
  const double scale = std::max(analytic.norm(), numeric.norm());
  if (scale == 0.0) return 0.0;
  return (analytic - numeric).norm() / scale;
}

// Central differences of f over the entries of x, restoring x afterwards.
inline Eigen::VectorXd central_differences(const std::function<double()>& f, std::vector<double*> coords,
                                           double step) {
  Eigen::VectorXd g(static_cast<Eigen::Index>(coords.size()));
  for (std::size_t i = 0; i < coords.size(); ++i) {
    double& x = *coords[i];
    const double x0 = x;
    x = x0 + step;
    const double fp = f();
    x = x0 - step;
    const double fm = f();
    x = x0;
    g(static_cast<Eigen::Index>(i)) = (fp - fm) / (2.0 * step);
  }
  return g;
}

namespace detail {

inline bool near_kink(const AlignmentLoss& loss, double margin, bool normalized, double gap) {
  const auto compared = [&](const PrototypeSet& p) {
    Eigen::MatrixXd c = p.vectors;
    if (normalized)
      for (Eigen::Index k = 0; k < c.rows(); ++k) {
        const double n = c.row(k).norm();
        if (n > 0.0) c.row(k) /= n;
      }
    return c;
  };
  const PrototypeSet& s = loss.source;
  const PrototypeSet& t = loss.target;
  if (normalized)
    for (const PrototypeSet* p : {&s, &t})
      for (Eigen::Index k = 0; k < p->num_classes(); ++k)
        if (p->weights(k) > 0.0 && p->vectors.row(k).norm() < gap) return true;
  const Eigen::MatrixXd cs = compared(s);
  const Eigen::MatrixXd ct = compared(t);
  const Eigen::Index c = cs.rows();
  for (Eigen::Index k = 0; k < c; ++k)
    if (s.weights(k) * t.weights(k) > 0.0 && (cs.row(k) - ct.row(k)).norm() < gap) return true;
  const auto check_pairs = [&](const Eigen::MatrixXd& a, const Eigen::VectorXd& wa, const Eigen::MatrixXd& b,
                               const Eigen::VectorXd& wb) {
    for (Eigen::Index i = 0; i < c; ++i)
      for (Eigen::Index j = 0; j < c; ++j) {
        if (i == j || wa(i) * wb(j) == 0.0) continue;
        const double phi = (a.row(i) - b.row(j)).norm();
        if (phi < gap || std::abs(phi - margin) < gap) return true;
      }
    return false;
  };
  return check_pairs(cs, s.weights, cs, s.weights) || check_pairs(cs, s.weights, ct, t.weights) ||
         check_pairs(ct, t.weights, ct, t.weights);
}

// Boxes scattered around a few cluster centers so that graphs have both
// overlapping and isolated proposals.
inline std::vector<BBox> random_boxes(Eigen::Index n, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> clusters(1, 4);
  std::uniform_real_distribution<double> pos(0.0, 60.0);
  std::uniform_real_distribution<double> size(6.0, 20.0);
  std::normal_distribution<double> jitter(0.0, 4.0);
  std::vector<std::pair<double, double>> centers(static_cast<std::size_t>(clusters(rng)));
  for (auto& c : centers) c = {pos(rng), pos(rng)};
  std::uniform_int_distribution<std::size_t> pick(0, centers.size() - 1);
  std::vector<BBox> boxes;
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto [cx, cy] = centers[pick(rng)];
    const double x = cx + jitter(rng);
    const double y = cy + jitter(rng);
    const double w = size(rng);
    const double h = size(rng);
    boxes.push_back({x - w / 2, y - h / 2, x + w / 2, y + h / 2});
  }
  return boxes;
}

inline Eigen::MatrixXd random_gaussian(Eigen::Index rows, Eigen::Index cols, double scale, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, scale);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = normal(rng);
  return m;
}

struct LossProblem {
  std::vector<Eigen::MatrixXd> props_s, props_t, feats_s, feats_t, confs_s, confs_t;
  Eigen::MatrixXd transform;
  AlignmentOptions opts;
  GradcheckTrial info;

  std::vector<SceneView> views(bool source) const {
    const auto& props = source ? props_s : props_t;
    const auto& feats = source ? feats_s : feats_t;
    const auto& confs = source ? confs_s : confs_t;
    std::vector<SceneView> v;
    for (std::size_t i = 0; i < props.size(); ++i) v.push_back({props[i], feats[i], confs[i]});
    return v;
  }
  const Eigen::MatrixXd* transform_ptr() const { return info.transform ? &transform : nullptr; }
};

inline LossProblem draw_loss_problem(int index, std::mt19937_64& rng) {
  std::uniform_int_distribution<Eigen::Index> n_dist(2, 16);
  std::uniform_int_distribution<Eigen::Index> d_dist(2, 8);
  std::uniform_int_distribution<Eigen::Index> c_dist(2, 9);
  std::uniform_int_distribution<int> scenes_dist(1, 2);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  LossProblem p;
  p.info.index = index;
  p.info.kind = index % 2 == 0 ? GraphKind::iou : GraphKind::gaussian;
  p.info.confidence_grad = (index / 2) % 2 == 1;
  p.info.transform = (index / 4) % 3 == 2;
  p.info.normalized = (index / 12) % 4 == 3;
  p.info.classes = c_dist(rng);
  p.info.dim = d_dist(rng);
  p.opts.gamma = 3.0 * unit(rng);
  p.opts.margin = 0.5 + 1.5 * unit(rng);
  p.opts.confidence_grad = p.info.confidence_grad;
  p.opts.normalize_prototypes = p.info.normalized;
  const double sigma = 3.0 + 17.0 * unit(rng);
  for (int side = 0; side < 2; ++side) {
    const int scenes = scenes_dist(rng);
    for (int s = 0; s < scenes; ++s) {
      const Eigen::Index n = n_dist(rng);
      const auto boxes = random_boxes(n, rng);
      const auto graph = build_graph(boxes, {p.info.kind, sigma});
      Eigen::MatrixXd logits = random_gaussian(n, p.info.classes, 2.0, rng);
      (side == 0 ? p.props_s : p.props_t).push_back(normalize(graph));
      (side == 0 ? p.feats_s : p.feats_t).push_back(random_gaussian(n, p.info.dim, 1.5, rng));
      (side == 0 ? p.confs_s : p.confs_t).push_back(softmax_rows(logits));
      (side == 0 ? p.info.source_sizes : p.info.target_sizes).push_back(n);
    }
  }
  p.transform = Eigen::MatrixXd::Identity(p.info.dim, p.info.dim) + random_gaussian(p.info.dim, p.info.dim, 0.3, rng);
  return p;
}

inline void append(Eigen::VectorXd& v, const Eigen::MatrixXd& m) {
  const Eigen::Index n = v.size();
  v.conservativeResize(n + m.size());
  v.segment(n, m.size()) = Eigen::Map<const Eigen::VectorXd>(m.data(), m.size());
}

// Appends a scene-stacked matrix one scene block at a time, matching the
// coordinate order of per-scene matrices.
inline void append_blocks(Eigen::VectorXd& v, const Eigen::MatrixXd& stacked, const std::vector<Eigen::Index>& rows) {
  Eigen::Index r = 0;
  for (Eigen::Index n : rows) {
    append(v, stacked.middleRows(r, n));
    r += n;
  }
}

inline void push_coords(std::vector<double*>& c, Eigen::MatrixXd& m) {
  for (Eigen::Index i = 0; i < m.size(); ++i) c.push_back(m.data() + i);
}

}  // namespace detail

// Finite-difference check of the alignment loss gradient on one random draw.
inline GradcheckTrial check_loss_gradient(int index, std::mt19937_64& rng, const GradcheckOptions& o) {
  for (int redraw = 0; redraw <= o.max_redraws; ++redraw) {
    detail::LossProblem p = detail::draw_loss_problem(index, rng);
    const auto vs = p.views(true);
    const auto vt = p.views(false);
    const AlignmentLoss base = alignment_loss(vs, vt, p.opts, p.transform_ptr());
    if (detail::near_kink(base, p.opts.margin, p.opts.normalize_prototypes, o.kink_gap)) continue;
    Eigen::VectorXd analytic(0);
    detail::append_blocks(analytic, base.grad_f_source, p.info.source_sizes);
    detail::append_blocks(analytic, base.grad_f_target, p.info.target_sizes);
    if (p.info.confidence_grad) {
      detail::append_blocks(analytic, base.grad_p_source, p.info.source_sizes);
      detail::append_blocks(analytic, base.grad_p_target, p.info.target_sizes);
    }
    if (p.info.transform) detail::append(analytic, base.grad_transform);
    if (analytic.norm() < 1e-8) continue;  // no active term: redraw for a meaningful check

    std::vector<double*> coords;
    for (auto& m : p.feats_s) detail::push_coords(coords, m);
    for (auto& m : p.feats_t) detail::push_coords(coords, m);
    if (p.info.confidence_grad) {
      for (auto& m : p.confs_s) detail::push_coords(coords, m);
      for (auto& m : p.confs_t) detail::push_coords(coords, m);
    }
    if (p.info.transform) detail::push_coords(coords, p.transform);
    const FrozenWeights frozen{base.source.weights, base.target.weights};
    const auto f = [&]() {
      return alignment_loss(p.views(true), p.views(false), p.opts, p.transform_ptr(), false, &frozen).total;
    };
    const Eigen::VectorXd numeric = central_differences(f, coords, o.step);
    GradcheckTrial t = p.info;
    t.coordinates = static_cast<Eigen::Index>(coords.size());
    t.redraws = redraw;
    t.loss = base.total;
    t.relative_error = relative_error(analytic, numeric);
    return t;
  }
  throw invalid_input("gradcheck: could not draw a configuration away from loss kinks");
}

// Finite-difference check of the full two-stage objective on a tiny model
// (embedding dim 4, six proposals per domain).
inline GradcheckTrial check_objective_gradient(int index, std::mt19937_64& rng, const GradcheckOptions& o) {
  constexpr Eigen::Index raw = 3;
  constexpr Eigen::Index hidden = 5;
  constexpr Eigen::Index d = 4;
  constexpr Eigen::Index classes = 3;
  constexpr Eigen::Index n = 6;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> label(0, static_cast<int>(classes) - 1);
  for (int redraw = 0; redraw <= o.max_redraws; ++redraw) {
    TrainConfig cfg;
    cfg.graph.kind = index % 2 == 0 ? GraphKind::iou : GraphKind::gaussian;
    cfg.graph.sigma = 3.0 + 17.0 * unit(rng);
    cfg.confidence_grad = (index / 2) % 2 == 1;
    cfg.learnable_transform = (index / 4) % 2 == 1;
    cfg.lambda1 = 0.25 + 1.75 * unit(rng);
    cfg.lambda2 = 0.25 + 1.75 * unit(rng);
    cfg.gamma = 3.0 * unit(rng);
    cfg.margin_rpn = 0.5 + 1.5 * unit(rng);
    cfg.margin_rcnn = 0.5 + 1.5 * unit(rng);
    ToyModel model = ToyModel::random(raw, hidden, d, classes, rng, 1.5);
    model.b1 = detail::random_gaussian(hidden, 1, 0.3, rng);
    model.b2 = detail::random_gaussian(d, 1, 0.3, rng);
    model.c1 = detail::random_gaussian(2, 1, 0.3, rng);
    model.c2 = detail::random_gaussian(classes, 1, 0.3, rng);
    model.t1 += detail::random_gaussian(d, d, 0.2, rng);
    model.t2 += detail::random_gaussian(d, d, 0.2, rng);
    PreparedScene src;
    PreparedScene tgt;
    for (PreparedScene* s : {&src, &tgt}) {
      s->raw = detail::random_gaussian(n, raw, 1.5, rng);
      s->labels.clear();
      for (Eigen::Index i = 0; i < n; ++i) s->labels.push_back(label(rng));
      s->propagator = normalize(build_graph(detail::random_boxes(n, rng), cfg.graph));
    }
    const PreparedScene* sp[] = {&src};
    const PreparedScene* tp[] = {&tgt};
    const auto base = objective(model, sp, tp, cfg, true);
    if (detail::near_kink(base.report.rpn, cfg.margin_rpn, false, o.kink_gap) ||
        detail::near_kink(base.report.rcnn, cfg.margin_rcnn, false, o.kink_gap))
      continue;
    Eigen::VectorXd analytic(0);
    base.grad.for_each_block([&](const char*, const double* p, Eigen::Index size) {
      detail::append(analytic, Eigen::Map<const Eigen::MatrixXd>(p, size, 1));
    });
    const DetachedConfidences detached = detach_confidences(model, sp, tp, cfg);
    std::vector<double*> coords;
    model.for_each_block([&](const char*, double* p, Eigen::Index size) {
      for (Eigen::Index i = 0; i < size; ++i) coords.push_back(p + i);
    });
    const auto f = [&]() { return objective(model, sp, tp, cfg, false, &detached).report.total; };
    const Eigen::VectorXd numeric = central_differences(f, coords, o.step);
    GradcheckTrial t;
    t.index = index;
    t.kind = cfg.graph.kind;
    t.confidence_grad = cfg.confidence_grad;
    t.transform = cfg.learnable_transform;
    t.classes = classes;
    t.dim = d;
    t.source_sizes = {n};
    t.target_sizes = {n};
    t.coordinates = static_cast<Eigen::Index>(coords.size());
    t.redraws = redraw;
    t.loss = base.report.total;
    t.relative_error = relative_error(analytic, numeric);
    return t;
  }
  throw invalid_input("gradcheck: could not draw an objective configuration away from loss kinks");
}

inline GradcheckReport run_gradcheck(const GradcheckOptions& o) {
  o.validate();
  GradcheckReport r;
  r.tolerance = o.tolerance;
  auto rng = experiment_stream(o.seed, 7);
  for (int i = 0; i < o.trials; ++i) r.loss_trials.push_back(check_loss_gradient(i, rng, o));
  for (int i = 0; i < o.objective_trials; ++i) r.objective_trials.push_back(check_objective_gradient(i, rng, o));
  return r;
}

}  // namespace gpa
