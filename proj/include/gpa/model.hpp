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
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "gpa/error.hpp"

namespace gpa {

// Toy two-stage detector head stack:
//   h = tanh(W1 x + b1), f = W2 h + b2            (feature extractor)
//   stage-1 logits = V1 f + c1 (2 classes), stage-2 logits = V2 f + c2 (C classes)
// plus one optional d x d transform per alignment stage.
struct ToyModel {
  Eigen::MatrixXd w1;  // hidden x raw
  Eigen::VectorXd b1;
  Eigen::MatrixXd w2;  // d x hidden
  Eigen::VectorXd b2;
  Eigen::MatrixXd v1;  // 2 x d
  Eigen::VectorXd c1;
  Eigen::MatrixXd v2;  // C x d
  Eigen::VectorXd c2;
  Eigen::MatrixXd t1;  // d x d, stage-1 alignment transform
  Eigen::MatrixXd t2;  // d x d, stage-2 alignment transform

  Eigen::Index raw_dim() const { return w1.cols(); }
  Eigen::Index hidden_dim() const { return w1.rows(); }
  Eigen::Index dim() const { return w2.rows(); }
  Eigen::Index num_classes() const { return v2.rows(); }

  static ToyModel zeros(Eigen::Index raw, Eigen::Index hidden, Eigen::Index d, Eigen::Index classes) {
    ToyModel m;
    m.w1 = Eigen::MatrixXd::Zero(hidden, raw);
    m.b1 = Eigen::VectorXd::Zero(hidden);
    m.w2 = Eigen::MatrixXd::Zero(d, hidden);
    m.b2 = Eigen::VectorXd::Zero(d);
    m.v1 = Eigen::MatrixXd::Zero(2, d);
    m.c1 = Eigen::VectorXd::Zero(2);
    m.v2 = Eigen::MatrixXd::Zero(classes, d);
    m.c2 = Eigen::VectorXd::Zero(classes);
    m.t1 = Eigen::MatrixXd::Zero(d, d);
    m.t2 = Eigen::MatrixXd::Zero(d, d);
    return m;
  }

  ToyModel zeros_like() const { return zeros(raw_dim(), hidden_dim(), dim(), num_classes()); }

  // Gaussian weights scaled by 1/sqrt(fan_in), zero biases, identity transforms.
  static ToyModel random(Eigen::Index raw, Eigen::Index hidden, Eigen::Index d, Eigen::Index classes,
                         std::mt19937_64& rng, double init_scale = 1.0) {
    if (raw < 1 || hidden < 1 || d < 1 || classes < 2) throw invalid_parameter("ToyModel: bad dimensions");
    ToyModel m = zeros(raw, hidden, d, classes);
    std::normal_distribution<double> normal(0.0, 1.0);
    const auto fill = [&](Eigen::MatrixXd& w) {
      const double s = init_scale / std::sqrt(static_cast<double>(w.cols()));
      for (Eigen::Index j = 0; j < w.cols(); ++j)
        for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = s * normal(rng);
    };
    fill(m.w1);
    fill(m.w2);
    fill(m.v1);
    fill(m.v2);
    m.t1 = Eigen::MatrixXd::Identity(d, d);
    m.t2 = Eigen::MatrixXd::Identity(d, d);
    return m;
  }

  // Visit every parameter block as a flat array, in a fixed order.
  template <typename Fn>
  void for_each_block(Fn&& fn) {
    fn("w1", w1.data(), w1.size());
    fn("b1", b1.data(), b1.size());
    fn("w2", w2.data(), w2.size());
    fn("b2", b2.data(), b2.size());
    fn("v1", v1.data(), v1.size());
    fn("c1", c1.data(), c1.size());
    fn("v2", v2.data(), v2.size());
    fn("c2", c2.data(), c2.size());
    fn("t1", t1.data(), t1.size());
    fn("t2", t2.data(), t2.size());
  }

  template <typename Fn>
  void for_each_block(Fn&& fn) const {
    const_cast<ToyModel*>(this)->for_each_block([&](const char* name, double* p, Eigen::Index n) {
      fn(name, static_cast<const double*>(p), n);
    });
  }

  Eigen::Index parameter_count() const {
    Eigen::Index n = 0;
    for_each_block([&](const char*, const double*, Eigen::Index size) { n += size; });
    return n;
  }
};

inline Eigen::MatrixXd softmax_rows(const Eigen::MatrixXd& logits) {
  Eigen::MatrixXd out(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    out.row(i) = (logits.row(i).array() - mx).exp().matrix();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

// Backward of row-wise softmax: given dL/dP, returns dL/dlogits.
inline Eigen::MatrixXd softmax_rows_backward(const Eigen::MatrixXd& probs, const Eigen::MatrixXd& d_probs) {
  const Eigen::VectorXd inner = (probs.array() * d_probs.array()).rowwise().sum();
  Eigen::MatrixXd d = d_probs;
  d.colwise() -= inner;
  return probs.array() * d.array();
}

struct ForwardCache {
  Eigen::MatrixXd hidden;    // N x hidden, post-tanh
  Eigen::MatrixXd features;  // N x d
  Eigen::MatrixXd logits1;   // N x 2
  Eigen::MatrixXd logits2;   // N x C
  Eigen::MatrixXd probs1;
  Eigen::MatrixXd probs2;
};

// Rows of `raw` are proposals.
inline ForwardCache forward(const ToyModel& m, const Eigen::MatrixXd& raw) {
  if (raw.cols() != m.raw_dim()) throw invalid_input("forward: raw feature dimension mismatch");
  ForwardCache c;
  c.hidden = ((raw * m.w1.transpose()).rowwise() + m.b1.transpose()).array().tanh().matrix();
  c.features = (c.hidden * m.w2.transpose()).rowwise() + m.b2.transpose();
  c.logits1 = (c.features * m.v1.transpose()).rowwise() + m.c1.transpose();
  c.logits2 = (c.features * m.v2.transpose()).rowwise() + m.c2.transpose();
  c.probs1 = softmax_rows(c.logits1);
  c.probs2 = softmax_rows(c.logits2);
  return c;
}

// Accumulates parameter gradients into `grad` given upstream gradients on the
// features and both logit blocks. Transform gradients are handled by the caller.
inline void backward(const ToyModel& m, const Eigen::MatrixXd& raw, const ForwardCache& c,
                     const Eigen::MatrixXd& d_features, const Eigen::MatrixXd& d_logits1,
                     const Eigen::MatrixXd& d_logits2, ToyModel& grad) {
  grad.v1 += d_logits1.transpose() * c.features;
  grad.c1 += d_logits1.colwise().sum().transpose();
  grad.v2 += d_logits2.transpose() * c.features;
  grad.c2 += d_logits2.colwise().sum().transpose();
  const Eigen::MatrixXd d_f = d_features + d_logits1 * m.v1 + d_logits2 * m.v2;
  grad.w2 += d_f.transpose() * c.hidden;
  grad.b2 += d_f.colwise().sum().transpose();
  const Eigen::MatrixXd d_z = (d_f * m.w2).array() * (1.0 - c.hidden.array().square());
  grad.w1 += d_z.transpose() * raw;
  grad.b1 += d_z.colwise().sum().transpose();
}

inline int foreground_label(int label) { return label == 0 ? 0 : 1; }

struct DetectionLoss {
  double value = 0.0;
  double stage1 = 0.0;  // mean fg/bg cross-entropy
  double stage2 = 0.0;  // mean C-way cross-entropy
};

// Cross-entropy of both heads; also returns dL/dlogits for each head.
inline DetectionLoss detection_loss_terms(const ForwardCache& c, std::span<const int> labels,
                                          Eigen::MatrixXd* d_logits1, Eigen::MatrixXd* d_logits2) {
  const Eigen::Index n = c.probs2.rows();
  const Eigen::Index classes = c.probs2.cols();
  if (static_cast<Eigen::Index>(labels.size()) != n) throw invalid_input("detection loss: one label per proposal");
  if (n == 0) throw invalid_input("detection loss: empty batch");
  DetectionLoss out;
  const double inv_n = 1.0 / static_cast<double>(n);
  if (d_logits1 != nullptr) {
    *d_logits1 = c.probs1 * inv_n;
    *d_logits2 = c.probs2 * inv_n;
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= classes) throw invalid_input("detection loss: label " + std::to_string(y) + " out of range");
    const int y1 = foreground_label(y);
    // stable log-sum-exp
    const double lse1 = std::log((c.logits1.row(i).array() - c.logits1.row(i).maxCoeff()).exp().sum()) +
                        c.logits1.row(i).maxCoeff();
    const double lse2 = std::log((c.logits2.row(i).array() - c.logits2.row(i).maxCoeff()).exp().sum()) +
                        c.logits2.row(i).maxCoeff();
    out.stage1 += (lse1 - c.logits1(i, y1)) * inv_n;
    out.stage2 += (lse2 - c.logits2(i, y)) * inv_n;
    if (d_logits1 != nullptr) {
      (*d_logits1)(i, y1) -= inv_n;
      (*d_logits2)(i, y) -= inv_n;
    }
  }
  out.value = out.stage1 + out.stage2;
  return out;
}

struct DetectionResult {
  DetectionLoss loss;
  ToyModel grad;
};

// Classification-only stand-in for the detector loss on labeled source proposals.
inline DetectionResult detection_surrogate_loss(const ToyModel& m, const Eigen::MatrixXd& raw,
                                                std::span<const int> labels) {
  const auto cache = forward(m, raw);
  Eigen::MatrixXd d1;
  Eigen::MatrixXd d2;
  DetectionResult r{detection_loss_terms(cache, labels, &d1, &d2), m.zeros_like()};
  backward(m, raw, cache, Eigen::MatrixXd::Zero(raw.rows(), m.dim()), d1, d2, r.grad);
  return r;
}

}  // namespace gpa
