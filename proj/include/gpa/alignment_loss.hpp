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
#include <string>
#include <vector>

#include "gpa/error.hpp"
#include "gpa/prototype.hpp"
#include "gpa/relation_graph.hpp"

namespace gpa {

struct AlignmentOptions {
  double gamma = 2.0;
  double margin = 1.0;
  // Let the gradient flow through the merge weights P~ (never through the
  // max/threshold that produce alpha).
  bool confidence_grad = false;
  // Compare unit-normalized prototypes instead of raw ones.
  bool normalize_prototypes = false;
  std::optional<double> presence_threshold;  // default 1/C

  void validate() const {
    if (!(gamma >= 0.0) || !std::isfinite(gamma)) throw invalid_parameter("alignment: gamma must be >= 0");
    if (!(margin > 0.0) || !std::isfinite(margin)) throw invalid_parameter("alignment: margin must be > 0");
  }
};

struct AlignmentLoss {
  double intra = 0.0;
  double inter_ss = 0.0;
  double inter_st = 0.0;
  double inter_tt = 0.0;
  double total = 0.0;
  // Gradients with respect to the stacked (scene-ordered) proposal features
  // and confidences of each domain, and to the optional feature transform.
  Eigen::MatrixXd grad_f_source;
  Eigen::MatrixXd grad_f_target;
  Eigen::MatrixXd grad_p_source;
  Eigen::MatrixXd grad_p_target;
  Eigen::MatrixXd grad_transform;
  PrototypeSet source;
  PrototypeSet target;
};

inline double prototype_distance(const Eigen::Ref<const Eigen::RowVectorXd>& a,
                                 const Eigen::Ref<const Eigen::RowVectorXd>& b) {
  return (a - b).norm();
}

namespace detail {

inline void check_compatible(const PrototypeSet& a, const PrototypeSet& b) {
  if (a.num_classes() != b.num_classes() || a.dim() != b.dim() || a.weights.size() != a.num_classes() ||
      b.weights.size() != b.num_classes())
    throw invalid_input("alignment: prototype sets differ in class count or dimension");
}

// Weighted mean of ||c_k^S - c_k^T||; optionally accumulates d/dc scaled by `scale`.
inline double intra_term(const Eigen::MatrixXd& cs, const Eigen::VectorXd& ws, const Eigen::MatrixXd& ct,
                         const Eigen::VectorXd& wt, double scale, Eigen::MatrixXd* gs, Eigen::MatrixXd* gt) {
  double num = 0.0;
  double den = 0.0;
  for (Eigen::Index k = 0; k < cs.rows(); ++k) {
    const double w = ws(k) * wt(k);
    if (w == 0.0) continue;
    num += w * prototype_distance(cs.row(k), ct.row(k));
    den += w;
  }
  if (den == 0.0) return 0.0;
  if (gs != nullptr) {
    for (Eigen::Index k = 0; k < cs.rows(); ++k) {
      const double w = ws(k) * wt(k);
      if (w == 0.0) continue;
      const Eigen::RowVectorXd diff = cs.row(k) - ct.row(k);
      const double phi = diff.norm();
      if (phi == 0.0) continue;  // subgradient 0 at coincidence
      const Eigen::RowVectorXd g = (scale * w / (den * phi)) * diff;
      gs->row(k) += g;
      gt->row(k) -= g;
    }
  }
  return num / den;
}

// Weighted mean over ordered pairs i != j of max(0, m - ||c_i^D - c_j^D'||).
// ga and gb may alias when D and D' are the same domain.
inline double inter_term(const Eigen::MatrixXd& ca, const Eigen::VectorXd& wa, const Eigen::MatrixXd& cb,
                         const Eigen::VectorXd& wb, double margin, double scale, Eigen::MatrixXd* ga,
                         Eigen::MatrixXd* gb) {
  double num = 0.0;
  double den = 0.0;
  const Eigen::Index c = ca.rows();
  for (Eigen::Index i = 0; i < c; ++i) {
    for (Eigen::Index j = 0; j < c; ++j) {
      if (i == j) continue;
      const double w = wa(i) * wb(j);
      if (w == 0.0) continue;
      num += w * std::max(0.0, margin - prototype_distance(ca.row(i), cb.row(j)));
      den += w;
    }
  }
  if (den == 0.0) return 0.0;
  if (ga != nullptr) {
    for (Eigen::Index i = 0; i < c; ++i) {
      for (Eigen::Index j = 0; j < c; ++j) {
        if (i == j) continue;
        const double w = wa(i) * wb(j);
        if (w == 0.0) continue;
        const Eigen::RowVectorXd diff = ca.row(i) - cb.row(j);
        const double phi = diff.norm();
        if (!(margin - phi > 0.0) || phi == 0.0) continue;
        const Eigen::RowVectorXd g = (scale * w / (den * phi)) * diff;
        ga->row(i) -= g;
        gb->row(j) += g;
      }
    }
  }
  return num / den;
}

struct LossTerms {
  double intra = 0.0;
  double inter_ss = 0.0;
  double inter_st = 0.0;
  double inter_tt = 0.0;
  double total = 0.0;
};

inline LossTerms loss_terms(const Eigen::MatrixXd& cs, const Eigen::VectorXd& ws, const Eigen::MatrixXd& ct,
                            const Eigen::VectorXd& wt, double margin, Eigen::MatrixXd* gs, Eigen::MatrixXd* gt) {
  LossTerms t;
  t.intra = intra_term(cs, ws, ct, wt, 1.0, gs, gt);
  t.inter_ss = inter_term(cs, ws, cs, ws, margin, 1.0 / 3.0, gs, gs);
  t.inter_st = inter_term(cs, ws, ct, wt, margin, 1.0 / 3.0, gs, gt);
  t.inter_tt = inter_term(ct, wt, ct, wt, margin, 1.0 / 3.0, gt, gt);
  t.total = t.intra + (t.inter_ss + t.inter_st + t.inter_tt) / 3.0;
  return t;
}

}  // namespace detail

inline double intra_loss(const PrototypeSet& src, const PrototypeSet& tgt) {
  detail::check_compatible(src, tgt);
  return detail::intra_term(src.vectors, src.weights, tgt.vectors, tgt.weights, 1.0, nullptr, nullptr);
}

inline double inter_loss(const PrototypeSet& a, const PrototypeSet& b, double margin) {
  if (!(margin > 0.0)) throw invalid_parameter("inter_loss: margin must be > 0");
  detail::check_compatible(a, b);
  return detail::inter_term(a.vectors, a.weights, b.vectors, b.weights, margin, 1.0, nullptr, nullptr);
}

inline AlignmentLoss total_da_loss(const PrototypeSet& src, const PrototypeSet& tgt, double margin) {
  if (!(margin > 0.0)) throw invalid_parameter("total_da_loss: margin must be > 0");
  detail::check_compatible(src, tgt);
  const auto t = detail::loss_terms(src.vectors, src.weights, tgt.vectors, tgt.weights, margin, nullptr, nullptr);
  AlignmentLoss out;
  out.intra = t.intra;
  out.inter_ss = t.inter_ss;
  out.inter_st = t.inter_st;
  out.inter_tt = t.inter_tt;
  out.total = t.total;
  out.source = src;
  out.target = tgt;
  return out;
}

// One scene as seen by the loss: normalized adjacency plus the features and
// confidences of its proposals.
struct SceneView {
  const Eigen::MatrixXd& propagator;
  const Eigen::MatrixXd& features;
  const Eigen::MatrixXd& confidences;
};

// Class weights to use instead of recomputing them from the confidences.
struct FrozenWeights {
  Eigen::VectorXd source;
  Eigen::VectorXd target;
};

namespace detail {

struct DomainPass {
  std::vector<Eigen::MatrixXd> propagated;  // A^ F per scene, before any transform
  AggregatedBatch stacked;
  PrototypeSet protos;
  Eigen::MatrixXd compared;  // prototypes entering the distance terms
  Eigen::VectorXd norms;
};

inline DomainPass forward_domain(std::span<const SceneView> scenes, const AlignmentOptions& opts,
                                 const Eigen::MatrixXd* transform, Domain domain,
                                 const Eigen::VectorXd* frozen) {
  if (scenes.empty()) throw invalid_input("alignment: domain has no scenes");
  DomainPass pass;
  std::vector<AggregatedBatch> parts;
  parts.reserve(scenes.size());
  for (const auto& s : scenes) {
    if (s.propagator.rows() != s.features.rows() || s.propagator.cols() != s.features.rows() ||
        s.confidences.rows() != s.features.rows())
      throw invalid_input("alignment: graph and batch sizes differ");
    Eigen::MatrixXd g = s.propagator * s.features;
    AggregatedBatch a;
    a.features = transform != nullptr ? Eigen::MatrixXd(g * (*transform)) : g;
    a.confidences = s.propagator * s.confidences;
    pass.propagated.push_back(std::move(g));
    parts.push_back(std::move(a));
  }
  pass.stacked = concatenate(parts);
  if (frozen != nullptr) {
    pass.protos = merge_prototypes(pass.stacked, domain);
    if (frozen->size() != pass.protos.num_classes()) throw invalid_input("alignment: frozen weight size mismatch");
    pass.protos.weights = *frozen;
  } else {
    pass.protos = build_prototypes(pass.stacked, opts.gamma, domain, opts.presence_threshold);
  }
  for (Eigen::Index k = 0; k < pass.protos.num_classes(); ++k)
    if (!pass.protos.present[static_cast<std::size_t>(k)]) pass.protos.weights(k) = 0.0;
  pass.compared = pass.protos.vectors;
  pass.norms = Eigen::VectorXd::Ones(pass.compared.rows());
  if (opts.normalize_prototypes) {
    for (Eigen::Index k = 0; k < pass.compared.rows(); ++k) {
      const double n = pass.compared.row(k).norm();
      pass.norms(k) = n;
      if (n > 0.0) pass.compared.row(k) /= n;
    }
  }
  return pass;
}

struct DomainGrads {
  Eigen::MatrixXd features;
  Eigen::MatrixXd confidences;
};

inline DomainGrads backward_domain(std::span<const SceneView> scenes, const DomainPass& pass,
                                   Eigen::MatrixXd d_compared, const AlignmentOptions& opts,
                                   const Eigen::MatrixXd* transform, Eigen::MatrixXd* d_transform) {
  const Eigen::Index c = pass.protos.num_classes();
  Eigen::MatrixXd d_proto = std::move(d_compared);
  if (opts.normalize_prototypes) {
    for (Eigen::Index k = 0; k < c; ++k) {
      const double n = pass.norms(k);
      if (!(n > 0.0)) {
        d_proto.row(k).setZero();
        continue;
      }
      const Eigen::RowVectorXd u = pass.compared.row(k);
      d_proto.row(k) = (d_proto.row(k) - u.dot(d_proto.row(k)) * u) / n;
    }
  }
  // c_k = sum_i P~_ik F~_i / Z_k
  Eigen::VectorXd inv_mass = Eigen::VectorXd::Zero(c);
  for (Eigen::Index k = 0; k < c; ++k)
    if (pass.protos.present[static_cast<std::size_t>(k)]) inv_mass(k) = 1.0 / pass.protos.mass(k);
  const Eigen::MatrixXd scaled = inv_mass.asDiagonal() * d_proto;  // C x d
  const Eigen::MatrixXd d_agg_f = pass.stacked.confidences * scaled;
  Eigen::MatrixXd d_agg_p;
  if (opts.confidence_grad) {
    // dL/dP~_ik = (F~_i - c_k) . dc_k / Z_k
    const Eigen::VectorXd offset = (pass.protos.vectors.array() * scaled.array()).rowwise().sum();
    d_agg_p = pass.stacked.features * scaled.transpose();
    d_agg_p.rowwise() -= offset.transpose();
  }

  DomainGrads out;
  Eigen::Index rows = 0;
  for (const auto& s : scenes) rows += s.features.rows();
  out.features.resize(rows, pass.stacked.features.cols());
  out.confidences = Eigen::MatrixXd::Zero(rows, c);
  Eigen::Index r = 0;
  for (std::size_t si = 0; si < scenes.size(); ++si) {
    const auto& s = scenes[si];
    const Eigen::Index n = s.features.rows();
    Eigen::MatrixXd d_g = d_agg_f.middleRows(r, n);
    if (transform != nullptr) {
      if (d_transform != nullptr) *d_transform += pass.propagated[si].transpose() * d_g;
      d_g = d_g * transform->transpose();
    }
    out.features.middleRows(r, n) = s.propagator.transpose() * d_g;
    if (opts.confidence_grad) out.confidences.middleRows(r, n) = s.propagator.transpose() * d_agg_p.middleRows(r, n);
    r += n;
  }
  return out;
}

}  // namespace detail

// Class-reweighted contrastive alignment loss over graph-aggregated
// prototypes of two domains, with gradients when requested.
inline AlignmentLoss alignment_loss(std::span<const SceneView> src, std::span<const SceneView> tgt,
                                    const AlignmentOptions& opts, const Eigen::MatrixXd* transform = nullptr,
                                    bool with_gradients = true, const FrozenWeights* frozen = nullptr) {
  opts.validate();
  auto ps = detail::forward_domain(src, opts, transform, Domain::source, frozen ? &frozen->source : nullptr);
  auto pt = detail::forward_domain(tgt, opts, transform, Domain::target, frozen ? &frozen->target : nullptr);
  detail::check_compatible(ps.protos, pt.protos);

  Eigen::MatrixXd gs = Eigen::MatrixXd::Zero(ps.compared.rows(), ps.compared.cols());
  Eigen::MatrixXd gt = Eigen::MatrixXd::Zero(pt.compared.rows(), pt.compared.cols());
  const auto terms = detail::loss_terms(ps.compared, ps.protos.weights, pt.compared, pt.protos.weights,
                                        opts.margin, with_gradients ? &gs : nullptr,
                                        with_gradients ? &gt : nullptr);
  AlignmentLoss out;
  out.intra = terms.intra;
  out.inter_ss = terms.inter_ss;
  out.inter_st = terms.inter_st;
  out.inter_tt = terms.inter_tt;
  out.total = terms.total;
  if (with_gradients) {
    Eigen::MatrixXd d_transform;
    if (transform != nullptr) d_transform = Eigen::MatrixXd::Zero(transform->rows(), transform->cols());
    auto grad_s = detail::backward_domain(src, ps, std::move(gs), opts, transform,
                                          transform ? &d_transform : nullptr);
    auto grad_t = detail::backward_domain(tgt, pt, std::move(gt), opts, transform,
                                          transform ? &d_transform : nullptr);
    out.grad_f_source = std::move(grad_s.features);
    out.grad_f_target = std::move(grad_t.features);
    out.grad_p_source = std::move(grad_s.confidences);
    out.grad_p_target = std::move(grad_t.confidences);
    out.grad_transform = std::move(d_transform);
  }
  out.source = std::move(ps.protos);
  out.target = std::move(pt.protos);
  return out;
}

// Loss and feature gradients for proposal batches of both domains, one
// relation graph per batch (scene).
inline AlignmentLoss da_loss_backward(std::span<const ProposalBatch> src, std::span<const RelationGraph> src_graphs,
                                      std::span<const ProposalBatch> tgt, std::span<const RelationGraph> tgt_graphs,
                                      const AlignmentOptions& opts, const Eigen::MatrixXd* transform = nullptr) {
  if (src.size() != src_graphs.size() || tgt.size() != tgt_graphs.size())
    throw invalid_input("da_loss_backward: one graph per batch required");
  std::vector<Eigen::MatrixXd> props;
  props.reserve(src.size() + tgt.size());
  std::vector<SceneView> vs;
  std::vector<SceneView> vt;
  const auto normalize_all = [&](std::span<const ProposalBatch> batches, std::span<const RelationGraph> graphs) {
    for (std::size_t i = 0; i < batches.size(); ++i) {
      batches[i].validate();
      if (graphs[i].size() != static_cast<Eigen::Index>(batches[i].size()))
        throw invalid_input("da_loss_backward: graph size does not match batch " + std::to_string(i));
      props.push_back(normalize(graphs[i]));
    }
  };
  normalize_all(src, src_graphs);
  normalize_all(tgt, tgt_graphs);
  for (std::size_t i = 0; i < src.size(); ++i) vs.push_back({props[i], src[i].features, src[i].confidences});
  for (std::size_t i = 0; i < tgt.size(); ++i)
    vt.push_back({props[src.size() + i], tgt[i].features, tgt[i].confidences});
  return alignment_loss(vs, vt, opts, transform, true);
}

inline AlignmentLoss da_loss_backward(const ProposalBatch& src, const RelationGraph& src_graph,
                                      const ProposalBatch& tgt, const RelationGraph& tgt_graph,
                                      const AlignmentOptions& opts, const Eigen::MatrixXd* transform = nullptr) {
  return da_loss_backward(std::span<const ProposalBatch>(&src, 1), std::span<const RelationGraph>(&src_graph, 1),
                          std::span<const ProposalBatch>(&tgt, 1), std::span<const RelationGraph>(&tgt_graph, 1),
                          opts, transform);
}

}  // namespace gpa
