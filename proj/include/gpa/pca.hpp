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

#include "gpa/error.hpp"

namespace gpa {

struct PcaProjection {
  Eigen::MatrixXd scores;      // N x 2
  Eigen::MatrixXd components;  // d x 2, unit columns
  Eigen::VectorXd variances;   // all d principal variances (N - 1 denominator), descending
  Eigen::RowVectorXd mean;
};

// Projection onto the top two principal axes. Each axis is signed so that its
// largest-magnitude loading is positive.
inline PcaProjection pca_project(const Eigen::MatrixXd& x) {
  if (x.rows() < 2) throw invalid_input("pca_project: need at least 2 samples");
  if (x.cols() < 2) throw invalid_input("pca_project: need at least 2 dimensions");
  PcaProjection out;
  out.mean = x.colwise().mean();
  const Eigen::MatrixXd centered = x.rowwise() - out.mean;
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(centered, Eigen::ComputeThinV);
  const Eigen::VectorXd& sv = svd.singularValues();
  out.variances = Eigen::VectorXd::Zero(x.cols());
  for (Eigen::Index i = 0; i < sv.size(); ++i) out.variances(i) = sv(i) * sv(i) / static_cast<double>(x.rows() - 1);
  out.components = svd.matrixV().leftCols(2);
  for (Eigen::Index j = 0; j < 2; ++j) {
    Eigen::Index arg = 0;
    out.components.col(j).cwiseAbs().maxCoeff(&arg);
    if (out.components(arg, j) < 0.0) out.components.col(j) *= -1.0;
  }
  out.scores = centered * out.components;
  // Numerically null directions carry no signal; report them as exact zeros.
  const double tol = sv.size() > 0 ? sv(0) * 1e-12 * static_cast<double>(x.rows()) : 0.0;
  for (Eigen::Index j = 0; j < 2; ++j)
    if (j >= sv.size() || sv(j) <= tol) out.scores.col(j).setZero();
  return out;
}

}  // namespace gpa
