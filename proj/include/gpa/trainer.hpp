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
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include "gpa/alignment_loss.hpp"
#include "gpa/error.hpp"
#include "gpa/model.hpp"
#include "gpa/relation_graph.hpp"
#include "gpa/simulator.hpp"

namespace gpa {

struct TrainConfig {
  double gamma = 2.0;
  double margin_rpn = 1.0;
  double margin_rcnn = 1.0;
  double lambda1 = 1.0;
  double lambda2 = 1.0;
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  int epochs = 30;
  int batch_scenes = 4;  // per domain
  std::uint64_t seed = 0;
  GraphSpec graph;
  bool confidence_grad = false;
  bool learnable_transform = false;
  bool normalize_prototypes = false;

  void validate() const {
    if (!(lambda1 >= 0.0) || !(lambda2 >= 0.0)) throw invalid_parameter("lambda1 and lambda2 must be >= 0");
    if (epochs < 1) throw invalid_parameter("epochs must be >= 1");
    if (!(learning_rate > 0.0)) throw invalid_parameter("learning rate must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw invalid_parameter("momentum must be in [0, 1)");
    if (!(weight_decay >= 0.0)) throw invalid_parameter("weight decay must be >= 0");
    if (batch_scenes < 1) throw invalid_parameter("batch_scenes must be >= 1");
    if (!(gamma >= 0.0)) throw invalid_parameter("gamma must be >= 0");
    if (!(margin_rpn > 0.0) || !(margin_rcnn > 0.0)) throw invalid_parameter("margins must be > 0");
    if (graph.kind == GraphKind::gaussian && !(graph.sigma > 0.0)) throw invalid_parameter("sigma must be > 0");
  }

  AlignmentOptions stage_options(Stage stage) const {
    AlignmentOptions o;
    o.gamma = gamma;
    o.margin = stage == Stage::rpn ? margin_rpn : margin_rcnn;
    o.confidence_grad = confidence_grad;
    o.normalize_prototypes = normalize_prototypes;
    return o;
  }
};

// A scene ready for training: raw proposal features, labels (hidden for the
// target domain during training) and the normalized relation graph.
struct PreparedScene {
  Eigen::MatrixXd raw;
  std::vector<int> labels;
  Eigen::MatrixXd propagator;
};

inline PreparedScene prepare_scene(const Scene& scene, const GraphSpec& graph) {
  PreparedScene p;
  p.raw = scene.features();
  p.labels = scene.labels();
  p.propagator = normalize(build_graph(scene.boxes(), graph));
  return p;
}

inline std::vector<PreparedScene> prepare_scenes(std::span<const Scene> scenes, const GraphSpec& graph) {
  std::vector<PreparedScene> out;
  out.reserve(scenes.size());
  for (const auto& s : scenes) out.push_back(prepare_scene(s, graph));
  return out;
}

struct LossReport {
  double l_det = 0.0;
  double l_det_stage1 = 0.0;
  double l_det_stage2 = 0.0;
  double l_da_rpn = 0.0;
  double l_da_rcnn = 0.0;
  double total = 0.0;
  AlignmentLoss rpn;
  AlignmentLoss rcnn;
};

// Confidences (and class weights) frozen at a reference parameter point, so
// that the objective seen by a finite-difference probe matches the one the
// analytic gradient differentiates.
struct DetachedConfidences {
  Eigen::MatrixXd src_p1, tgt_p1, src_p2, tgt_p2;
  FrozenWeights weights1, weights2;
};

namespace detail {

inline Eigen::MatrixXd stack_raw(std::span<const PreparedScene* const> scenes) {
  Eigen::Index rows = 0;
  for (const auto* s : scenes) rows += s->raw.rows();
  Eigen::MatrixXd out(rows, scenes.front()->raw.cols());
  Eigen::Index r = 0;
  for (const auto* s : scenes) {
    out.middleRows(r, s->raw.rows()) = s->raw;
    r += s->raw.rows();
  }
  return out;
}

inline std::vector<int> stack_labels(std::span<const PreparedScene* const> scenes) {
  std::vector<int> out;
  for (const auto* s : scenes) out.insert(out.end(), s->labels.begin(), s->labels.end());
  return out;
}

struct StageBlocks {
  std::vector<Eigen::MatrixXd> features;
  std::vector<Eigen::MatrixXd> confidences;
  std::vector<SceneView> views;
};

inline StageBlocks split_blocks(std::span<const PreparedScene* const> scenes, const Eigen::MatrixXd& features,
                                const Eigen::MatrixXd& confidences) {
  StageBlocks b;
  b.features.reserve(scenes.size());
  b.confidences.reserve(scenes.size());
  Eigen::Index r = 0;
  for (const auto* s : scenes) {
    const Eigen::Index n = s->raw.rows();
    b.features.push_back(features.middleRows(r, n));
    b.confidences.push_back(confidences.middleRows(r, n));
    r += n;
  }
  for (std::size_t i = 0; i < scenes.size(); ++i)
    b.views.push_back({scenes[i]->propagator, b.features[i], b.confidences[i]});
  return b;
}

}  // namespace detail

struct ObjectiveResult {
  LossReport report;
  ToyModel grad;
};

// L_det + lambda1 L_da^rpn + lambda2 L_da^rcnn and, if requested, its gradient.
// `detached`, when given, replaces the live confidences (stop-gradient mode) or
// the live class weights (confidence-gradient mode).
inline ObjectiveResult objective(const ToyModel& model, std::span<const PreparedScene* const> src,
                                 std::span<const PreparedScene* const> tgt, const TrainConfig& cfg,
                                 bool with_gradient = true, const DetachedConfidences* detached = nullptr) {
  if (src.empty()) throw invalid_input("objective: empty source batch");
  ObjectiveResult out;
  if (with_gradient) out.grad = model.zeros_like();
  const Eigen::MatrixXd src_raw = detail::stack_raw(src);
  const std::vector<int> src_labels = detail::stack_labels(src);
  const ForwardCache sc = forward(model, src_raw);
  Eigen::MatrixXd d_src_l1;
  Eigen::MatrixXd d_src_l2;
  const DetectionLoss det =
      detection_loss_terms(sc, src_labels, with_gradient ? &d_src_l1 : nullptr, with_gradient ? &d_src_l2 : nullptr);
  out.report.l_det = det.value;
  out.report.l_det_stage1 = det.stage1;
  out.report.l_det_stage2 = det.stage2;

  const bool align = cfg.lambda1 > 0.0 || cfg.lambda2 > 0.0;
  if (!align) {
    out.report.total = det.value;
    if (with_gradient)
      backward(model, src_raw, sc, Eigen::MatrixXd::Zero(src_raw.rows(), model.dim()), d_src_l1, d_src_l2,
               out.grad);
    return out;
  }
  if (tgt.empty()) throw invalid_input("objective: empty target batch");

  const Eigen::MatrixXd tgt_raw = detail::stack_raw(tgt);
  const ForwardCache tc = forward(model, tgt_raw);
  Eigen::MatrixXd d_src_f = Eigen::MatrixXd::Zero(src_raw.rows(), model.dim());
  Eigen::MatrixXd d_tgt_f = Eigen::MatrixXd::Zero(tgt_raw.rows(), model.dim());
  Eigen::MatrixXd d_tgt_l1 = Eigen::MatrixXd::Zero(tgt_raw.rows(), 2);
  Eigen::MatrixXd d_tgt_l2 = Eigen::MatrixXd::Zero(tgt_raw.rows(), model.num_classes());

  const auto run_stage = [&](Stage stage, double lambda) -> AlignmentLoss {
    const bool rpn = stage == Stage::rpn;
    const Eigen::MatrixXd* sp = rpn ? &sc.probs1 : &sc.probs2;
    const Eigen::MatrixXd* tp = rpn ? &tc.probs1 : &tc.probs2;
    const FrozenWeights* frozen = nullptr;
    if (detached != nullptr) {
      if (cfg.confidence_grad) {
        frozen = rpn ? &detached->weights1 : &detached->weights2;
      } else {
        sp = rpn ? &detached->src_p1 : &detached->src_p2;
        tp = rpn ? &detached->tgt_p1 : &detached->tgt_p2;
      }
    }
    const Eigen::Index expected = rpn ? 2 : model.num_classes();
    if (sp->cols() != expected || tp->cols() != expected)
      throw invalid_input(std::string("objective: ") + to_string(stage) + " alignment expects " +
                          std::to_string(expected) + " classes");
    auto sb = detail::split_blocks(src, sc.features, *sp);
    auto tb = detail::split_blocks(tgt, tc.features, *tp);
    const Eigen::MatrixXd* transform = cfg.learnable_transform ? (rpn ? &model.t1 : &model.t2) : nullptr;
    AlignmentLoss loss = alignment_loss(sb.views, tb.views, cfg.stage_options(stage), transform, with_gradient, frozen);
    if (with_gradient) {
      d_src_f += lambda * loss.grad_f_source;
      d_tgt_f += lambda * loss.grad_f_target;
      if (transform != nullptr) (rpn ? out.grad.t1 : out.grad.t2) += lambda * loss.grad_transform;
      if (cfg.confidence_grad) {
        Eigen::MatrixXd& ds = rpn ? d_src_l1 : d_src_l2;
        Eigen::MatrixXd& dt = rpn ? d_tgt_l1 : d_tgt_l2;
        ds += lambda * softmax_rows_backward(*sp, loss.grad_p_source);
        dt += lambda * softmax_rows_backward(*tp, loss.grad_p_target);
      }
    }
    return loss;
  };

  if (cfg.lambda1 > 0.0) {
    out.report.rpn = run_stage(Stage::rpn, cfg.lambda1);
    out.report.l_da_rpn = out.report.rpn.total;
  }
  if (cfg.lambda2 > 0.0) {
    out.report.rcnn = run_stage(Stage::rcnn, cfg.lambda2);
    out.report.l_da_rcnn = out.report.rcnn.total;
  }
  out.report.total = det.value + cfg.lambda1 * out.report.l_da_rpn + cfg.lambda2 * out.report.l_da_rcnn;
  if (with_gradient) {
    backward(model, src_raw, sc, d_src_f, d_src_l1, d_src_l2, out.grad);
    backward(model, tgt_raw, tc, d_tgt_f, d_tgt_l1, d_tgt_l2, out.grad);
  }
  return out;
}

// Snapshot of the confidences and class weights at the current parameters.
inline DetachedConfidences detach_confidences(const ToyModel& model, std::span<const PreparedScene* const> src,
                                              std::span<const PreparedScene* const> tgt, const TrainConfig& cfg) {
  DetachedConfidences d;
  const auto sc = forward(model, detail::stack_raw(src));
  const auto tc = forward(model, detail::stack_raw(tgt));
  d.src_p1 = sc.probs1;
  d.src_p2 = sc.probs2;
  d.tgt_p1 = tc.probs1;
  d.tgt_p2 = tc.probs2;
  TrainConfig probe = cfg;
  probe.confidence_grad = false;
  const auto r = objective(model, src, tgt, probe, false);
  if (cfg.lambda1 > 0.0) d.weights1 = {r.report.rpn.source.weights, r.report.rpn.target.weights};
  if (cfg.lambda2 > 0.0) d.weights2 = {r.report.rcnn.source.weights, r.report.rcnn.target.weights};
  return d;
}

struct TrainState {
  ToyModel model;
  ToyModel velocity;

  explicit TrainState(ToyModel m) : model(std::move(m)), velocity(model.zeros_like()) {}
};

// One SGD-with-momentum update on the two-stage objective.
inline LossReport two_stage_step(TrainState& state, std::span<const PreparedScene* const> src,
                                 std::span<const PreparedScene* const> tgt, const TrainConfig& cfg) {
  auto result = objective(state.model, src, tgt, cfg, true);
  const double lr = cfg.learning_rate;
  const double mu = cfg.momentum;
  const double wd = cfg.weight_decay;
  std::vector<double*> params;
  std::vector<double*> grads;
  std::vector<double*> vels;
  std::vector<Eigen::Index> sizes;
  std::vector<bool> trainable;
  state.model.for_each_block([&](const char* name, double* p, Eigen::Index n) {
    params.push_back(p);
    sizes.push_back(n);
    trainable.push_back(cfg.learnable_transform || (name[0] != 't'));
  });
  result.grad.for_each_block([&](const char*, double* g, Eigen::Index) { grads.push_back(g); });
  state.velocity.for_each_block([&](const char*, double* v, Eigen::Index) { vels.push_back(v); });
  for (std::size_t b = 0; b < params.size(); ++b) {
    if (!trainable[b]) continue;
    for (Eigen::Index i = 0; i < sizes[b]; ++i) {
      const double g = grads[b][i] + wd * params[b][i];
      vels[b][i] = mu * vels[b][i] + g;
      params[b][i] -= lr * vels[b][i];
    }
  }
  return result.report;
}

struct DomainMetrics {
  double accuracy = 0.0;
  std::vector<double> class_accuracy;  // NaN for classes without samples
  std::vector<std::size_t> class_count;
  PrototypeSet prototypes;         // stage-2 features merged with ground-truth confidences
  PrototypeSet stage1_prototypes;  // background vs foreground
  double fg_bg_margin = 0.0;       // distance between the two stage-1 prototypes
  Eigen::MatrixXd features;        // stacked embeddings, for visualization
  std::vector<int> labels;
};

inline Eigen::MatrixXd one_hot(std::span<const int> labels, Eigen::Index classes) {
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(labels.size()), classes);
  for (std::size_t i = 0; i < labels.size(); ++i) out(static_cast<Eigen::Index>(i), labels[i]) = 1.0;
  return out;
}

inline DomainMetrics evaluate_domain(const ToyModel& model, std::span<const PreparedScene> scenes,
                                     Domain domain = Domain::target) {
  const auto classes = static_cast<std::size_t>(model.num_classes());
  DomainMetrics m;
  m.class_accuracy.assign(classes, 0.0);
  m.class_count.assign(classes, 0);
  std::vector<std::size_t> correct(classes, 0);
  std::size_t total = 0;
  std::size_t hits = 0;
  std::vector<AggregatedBatch> agg2;
  std::vector<AggregatedBatch> agg1;
  std::vector<Eigen::MatrixXd> feats;
  for (const auto& s : scenes) {
    const auto c = forward(model, s.raw);
    for (Eigen::Index i = 0; i < c.probs2.rows(); ++i) {
      Eigen::Index pred = 0;
      c.logits2.row(i).maxCoeff(&pred);
      const int y = s.labels[static_cast<std::size_t>(i)];
      if (y < 0 || static_cast<std::size_t>(y) >= classes) throw invalid_input("evaluate: label out of range");
      ++m.class_count[static_cast<std::size_t>(y)];
      ++total;
      if (pred == y) {
        ++correct[static_cast<std::size_t>(y)];
        ++hits;
      }
    }
    std::vector<int> fg(s.labels.size());
    for (std::size_t i = 0; i < fg.size(); ++i) fg[i] = foreground_label(s.labels[i]);
    agg2.push_back(aggregate(s.propagator, c.features, one_hot(s.labels, model.num_classes())));
    agg1.push_back(aggregate(s.propagator, c.features, one_hot(fg, 2)));
    feats.push_back(c.features);
    m.labels.insert(m.labels.end(), s.labels.begin(), s.labels.end());
  }
  m.accuracy = total > 0 ? static_cast<double>(hits) / static_cast<double>(total) : 0.0;
  for (std::size_t k = 0; k < classes; ++k)
    m.class_accuracy[k] = m.class_count[k] > 0
                              ? static_cast<double>(correct[k]) / static_cast<double>(m.class_count[k])
                              : std::numeric_limits<double>::quiet_NaN();
  if (!scenes.empty()) {
    m.prototypes = merge_prototypes(agg2, domain);
    m.stage1_prototypes = merge_prototypes(agg1, domain);
    if (m.stage1_prototypes.present[0] && m.stage1_prototypes.present[1])
      m.fg_bg_margin = prototype_distance(m.stage1_prototypes.vectors.row(0), m.stage1_prototypes.vectors.row(1));
    Eigen::Index rows = 0;
    for (const auto& f : feats) rows += f.rows();
    m.features.resize(rows, model.dim());
    Eigen::Index r = 0;
    for (const auto& f : feats) {
      m.features.middleRows(r, f.rows()) = f;
      r += f.rows();
    }
  }
  return m;
}

struct MetricsReport {
  DomainMetrics source;
  DomainMetrics target;
  std::vector<double> prototype_distance;  // per class, NaN when absent in either domain
};

inline std::vector<double> prototype_distances(const PrototypeSet& a, const PrototypeSet& b) {
  std::vector<double> out(static_cast<std::size_t>(a.num_classes()), std::numeric_limits<double>::quiet_NaN());
  for (Eigen::Index k = 0; k < a.num_classes() && k < b.num_classes(); ++k)
    if (a.present[static_cast<std::size_t>(k)] && b.present[static_cast<std::size_t>(k)])
      out[static_cast<std::size_t>(k)] = prototype_distance(a.vectors.row(k), b.vectors.row(k));
  return out;
}

inline MetricsReport evaluate(const ToyModel& model, std::span<const PreparedScene> src,
                              std::span<const PreparedScene> tgt) {
  MetricsReport r;
  r.source = evaluate_domain(model, src, Domain::source);
  r.target = evaluate_domain(model, tgt, Domain::target);
  r.prototype_distance = prototype_distances(r.source.prototypes, r.target.prototypes);
  return r;
}

struct EpochRecord {
  int epoch = 0;
  double l_det = 0.0;
  double l_da_rpn = 0.0;
  double l_da_rcnn = 0.0;
  double total = 0.0;
  MetricsReport metrics;
};

struct TrainData {
  std::vector<PreparedScene> source_train;
  std::vector<PreparedScene> target_train;
  std::vector<PreparedScene> source_test;
  std::vector<PreparedScene> target_test;
};

struct TrainResult {
  ToyModel model;
  std::vector<EpochRecord> history;
};

// Epoch loop: shuffle both training splits, step over aligned mini-batches of
// `batch_scenes` scenes per domain, evaluate on the held-out splits.
inline TrainResult train(const TrainData& data, ToyModel init, const TrainConfig& cfg,
                         const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  cfg.validate();
  if (data.source_train.empty()) throw invalid_input("train: empty source split");
  const bool align = cfg.lambda1 > 0.0 || cfg.lambda2 > 0.0;
  if (align && data.target_train.empty()) throw invalid_input("train: empty target split");
  TrainState state(std::move(init));
  auto rng = experiment_stream(cfg.seed, 3);
  std::vector<std::size_t> src_order(data.source_train.size());
  std::vector<std::size_t> tgt_order(data.target_train.size());
  std::iota(src_order.begin(), src_order.end(), 0);
  std::iota(tgt_order.begin(), tgt_order.end(), 0);
  const auto b = static_cast<std::size_t>(cfg.batch_scenes);
  TrainResult result;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(src_order.begin(), src_order.end(), rng);
    std::shuffle(tgt_order.begin(), tgt_order.end(), rng);
    std::size_t steps = src_order.size() / b;
    if (!tgt_order.empty()) steps = std::min(steps, tgt_order.size() / b);
    steps = std::max<std::size_t>(steps, 1);
    EpochRecord rec;
    rec.epoch = epoch;
    std::vector<const PreparedScene*> sb(b);
    std::vector<const PreparedScene*> tb(b);
    for (std::size_t step = 0; step < steps; ++step) {
      std::size_t ns = 0;
      std::size_t nt = 0;
      for (std::size_t i = 0; i < b && step * b + i < src_order.size(); ++i)
        sb[ns++] = &data.source_train[src_order[step * b + i]];
      for (std::size_t i = 0; i < b && step * b + i < tgt_order.size(); ++i)
        tb[nt++] = &data.target_train[tgt_order[step * b + i]];
      const auto rep = two_stage_step(state, std::span(sb.data(), ns), std::span(tb.data(), nt), cfg);
      rec.l_det += rep.l_det;
      rec.l_da_rpn += rep.l_da_rpn;
      rec.l_da_rcnn += rep.l_da_rcnn;
      rec.total += rep.total;
    }
    const double inv = 1.0 / static_cast<double>(steps);
    rec.l_det *= inv;
    rec.l_da_rpn *= inv;
    rec.l_da_rcnn *= inv;
    rec.total *= inv;
    rec.metrics = evaluate(state.model, data.source_test, data.target_test);
    if (on_epoch) on_epoch(rec);
    result.history.push_back(std::move(rec));
  }
  result.model = std::move(state.model);
  return result;
}

}  // namespace gpa
