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
#include <random>
#include <string>
#include <vector>

#include "gpa/error.hpp"
#include "gpa/geometry.hpp"

namespace gpa {

// x -> R x + b, applied to every appearance vector of the target domain.
struct DomainShift {
  Eigen::MatrixXd rotation;
  Eigen::VectorXd offset;

  static DomainShift identity(Eigen::Index dim) {
    return {Eigen::MatrixXd::Identity(dim, dim), Eigen::VectorXd::Zero(dim)};
  }
  Eigen::VectorXd apply(const Eigen::VectorXd& v) const { return rotation * v + offset; }
};

struct DomainSpec {
  Eigen::Index raw_dim = 8;
  // class_modes[k - 1] holds the appearance modes of foreground class k.
  std::vector<std::vector<Eigen::VectorXd>> class_modes;
  double mode_scale = 0.3;  // per-instance spread around its mode
  Eigen::VectorXd background_mean;
  double background_scale = 0.5;
  DomainShift shift;
  std::vector<double> class_frequencies;  // over foreground classes

  double extent = 100.0;
  int instances_min = 2;
  int instances_max = 5;
  int proposals_min = 3;
  int proposals_max = 6;
  int background_min = 2;
  int background_max = 5;
  double size_min = 12.0;
  double size_max = 40.0;
  double jitter = 0.15;  // relative center/size noise of proposals
  double noise = 0.3;    // isotropic feature noise
  double background_max_iou = 0.3;

  int num_classes() const { return static_cast<int>(class_modes.size()) + 1; }

  void validate() const {
    if (raw_dim < 1) throw invalid_spec("raw_dim must be >= 1");
    if (class_modes.empty()) throw invalid_spec("need at least one foreground class");
    for (const auto& modes : class_modes) {
      if (modes.empty()) throw invalid_spec("every class needs at least one appearance mode");
      for (const auto& m : modes)
        if (m.size() != raw_dim) throw invalid_spec("appearance mode dimension differs from raw_dim");
    }
    if (background_mean.size() != raw_dim) throw invalid_spec("background mean dimension differs from raw_dim");
    if (shift.rotation.rows() != raw_dim || shift.rotation.cols() != raw_dim || shift.offset.size() != raw_dim)
      throw invalid_spec("domain shift dimension differs from raw_dim");
    if (class_frequencies.size() != class_modes.size())
      throw invalid_spec("class frequency vector length differs from class count");
    double sum = 0.0;
    for (double f : class_frequencies) {
      if (!(f >= 0.0)) throw invalid_spec("class frequencies must be nonnegative");
      sum += f;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw invalid_spec("class frequencies must sum to 1");
    if (instances_min < 1 || instances_max < instances_min)
      throw invalid_spec("instances per scene range must be within [1, max] and non-empty");
    if (proposals_min < 1 || proposals_max < proposals_min) throw invalid_spec("proposals per instance range invalid");
    if (background_min < 0 || background_max < background_min)
      throw invalid_spec("background proposals range invalid");
    if (!(size_min > 0.0) || size_max < size_min || size_max > extent) throw invalid_spec("box size range invalid");
    if (!(jitter >= 0.0) || !(noise >= 0.0) || !(mode_scale >= 0.0) || !(background_scale >= 0.0))
      throw invalid_spec("scales must be nonnegative");
  }
};

struct Instance {
  BBox box;
  int label = 1;
  int mode = 0;
  Eigen::VectorXd appearance;
};

struct Proposal {
  BBox box;
  Eigen::VectorXd feature;
  int label = 0;      // hidden ground truth; 0 = background
  int instance = -1;  // generating instance, -1 for background proposals
};

struct Scene {
  std::vector<Instance> instances;
  std::vector<Proposal> proposals;
  Eigen::VectorXd background;

  std::vector<BBox> boxes() const {
    std::vector<BBox> out;
    out.reserve(proposals.size());
    for (const auto& p : proposals) out.push_back(p.box);
    return out;
  }
  Eigen::MatrixXd features() const {
    if (proposals.empty()) return {};
    Eigen::MatrixXd out(static_cast<Eigen::Index>(proposals.size()), proposals.front().feature.size());
    for (std::size_t i = 0; i < proposals.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = proposals[i].feature;
    return out;
  }
  std::vector<int> labels() const {
    std::vector<int> out;
    out.reserve(proposals.size());
    for (const auto& p : proposals) out.push_back(p.label);
    return out;
  }
};

namespace detail {

inline Eigen::VectorXd gaussian_vector(Eigen::Index dim, double scale, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::VectorXd v(dim);
  for (Eigen::Index i = 0; i < dim; ++i) v(i) = scale * normal(rng);
  return v;
}

inline BBox random_box(const DomainSpec& spec, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> size(spec.size_min, spec.size_max);
  const double w = size(rng);
  const double h = size(rng);
  std::uniform_real_distribution<double> ux(0.0, spec.extent - w);
  std::uniform_real_distribution<double> uy(0.0, spec.extent - h);
  const double x = ux(rng);
  const double y = uy(rng);
  return {x, y, x + w, y + h};
}

inline BBox jittered(const BBox& gt, double jitter, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  const double cx = gt.center_x() + jitter * gt.width() * normal(rng);
  const double cy = gt.center_y() + jitter * gt.height() * normal(rng);
  const double w = gt.width() * std::exp(jitter * normal(rng));
  const double h = gt.height() * std::exp(jitter * normal(rng));
  return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

// Overlap-weighted blend of instance appearances, background for the
// uncovered fraction, plus isotropic noise.
inline Eigen::VectorXd blend_feature(const BBox& box, const std::vector<Instance>& instances,
                                     const Eigen::VectorXd& background, double noise, std::mt19937_64& rng) {
  const double area = box.area();
  std::vector<double> cover(instances.size(), 0.0);
  double covered = 0.0;
  for (std::size_t j = 0; j < instances.size(); ++j) {
    cover[j] = intersection_area(box, instances[j].box) / area;
    covered += cover[j];
  }
  Eigen::VectorXd f = Eigen::VectorXd::Zero(background.size());
  const double norm = covered > 1.0 ? covered : 1.0;
  for (std::size_t j = 0; j < instances.size(); ++j)
    if (cover[j] > 0.0) f += (cover[j] / norm) * instances[j].appearance;
  if (covered < 1.0) f += (1.0 - covered) * background;
  if (noise > 0.0) f += gaussian_vector(background.size(), noise, rng);
  return f;
}

}  // namespace detail

inline Scene generate_scene(const DomainSpec& spec, std::mt19937_64& rng) {
  spec.validate();
  Scene scene;
  std::uniform_int_distribution<int> n_inst(spec.instances_min, spec.instances_max);
  std::discrete_distribution<int> klass(spec.class_frequencies.begin(), spec.class_frequencies.end());
  const int count = n_inst(rng);
  for (int i = 0; i < count; ++i) {
    Instance inst;
    inst.label = klass(rng) + 1;
    const auto& modes = spec.class_modes[static_cast<std::size_t>(inst.label - 1)];
    inst.mode = std::uniform_int_distribution<int>(0, static_cast<int>(modes.size()) - 1)(rng);
    inst.appearance = spec.shift.apply(modes[static_cast<std::size_t>(inst.mode)] +
                                       detail::gaussian_vector(spec.raw_dim, spec.mode_scale, rng));
    inst.box = detail::random_box(spec, rng);
    scene.instances.push_back(std::move(inst));
  }
  scene.background = spec.shift.apply(spec.background_mean +
                                      detail::gaussian_vector(spec.raw_dim, spec.background_scale, rng));

  std::uniform_int_distribution<int> n_prop(spec.proposals_min, spec.proposals_max);
  for (std::size_t j = 0; j < scene.instances.size(); ++j) {
    const BBox& gt = scene.instances[j].box;
    const int k = n_prop(rng);
    for (int p = 0; p < k; ++p) {
      BBox box = gt;
      if (spec.jitter > 0.0) {
        box = gt;
        for (int attempt = 0; attempt < 100; ++attempt) {
          const BBox cand = detail::jittered(gt, spec.jitter, rng);
          if (iou(cand, gt) > 0.0) {
            box = cand;
            break;
          }
        }
      }
      scene.proposals.push_back({box, {}, scene.instances[j].label, static_cast<int>(j)});
    }
  }
  std::uniform_int_distribution<int> n_bg(spec.background_min, spec.background_max);
  const int bg = n_bg(rng);
  for (int p = 0; p < bg; ++p) {
    BBox box = detail::random_box(spec, rng);
    for (int attempt = 0; attempt < 100; ++attempt) {
      double worst = 0.0;
      for (const auto& inst : scene.instances) worst = std::max(worst, iou(box, inst.box));
      if (worst <= spec.background_max_iou) break;
      box = detail::random_box(spec, rng);
    }
    scene.proposals.push_back({box, {}, 0, -1});
  }
  for (auto& p : scene.proposals)
    p.feature = detail::blend_feature(p.box, scene.instances, scene.background, spec.noise, rng);
  return scene;
}

// Scene i is drawn from its own stream seeded by (seed, i), so splits are
// reproducible and scenes can be generated independently.
inline std::mt19937_64 scene_stream(std::uint64_t seed, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32), 0x5cu};
  return std::mt19937_64(seq);
}

inline std::vector<Scene> generate_split(const DomainSpec& spec, int n_scenes, std::uint64_t seed) {
  spec.validate();
  if (n_scenes < 0) throw invalid_spec("scene count must be >= 0");
  std::vector<Scene> out;
  out.reserve(static_cast<std::size_t>(n_scenes));
  for (int i = 0; i < n_scenes; ++i) {
    auto rng = scene_stream(seed, static_cast<std::uint64_t>(i));
    out.push_back(generate_scene(spec, rng));
  }
  return out;
}

// Parameters from which a source/target DomainSpec pair is sampled.
struct SimConfig {
  int raw_dim = 8;
  int foreground_classes = 4;
  int modes_per_class = 2;
  double class_separation = 1.5;
  double mode_scale = 0.3;
  double background_overlap = 0.3;
  double background_scale = 0.5;
  std::vector<double> class_frequencies;  // empty = uniform
  double extent = 100.0;
  int instances_min = 2;
  int instances_max = 5;
  int proposals_min = 3;
  int proposals_max = 6;
  int background_min = 2;
  int background_max = 5;
  double size_min = 12.0;
  double size_max = 40.0;
  double jitter = 0.15;
  double noise = 0.3;
  double shift_angle = 0.6;  // largest rotation angle of the domain shift, radians
  int shift_dims = 8;        // leading raw dimensions the rotation acts on
  double shift_offset = 3.0;
  int train_scenes = 120;
  int test_scenes = 80;
};

// Orthogonal matrix acting on the leading `dims` coordinates, with principal
// rotation angles at most `angle` (Cayley transform of a scaled skew matrix).
inline Eigen::MatrixXd random_rotation(Eigen::Index dim, Eigen::Index dims, double angle, std::mt19937_64& rng) {
  Eigen::MatrixXd r = Eigen::MatrixXd::Identity(dim, dim);
  dims = std::clamp<Eigen::Index>(dims, 0, dim);
  if (dims < 2 || angle == 0.0) return r;
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd g(dims, dims);
  for (Eigen::Index j = 0; j < dims; ++j)
    for (Eigen::Index i = 0; i < dims; ++i) g(i, j) = normal(rng);
  Eigen::MatrixXd k = 0.5 * (g - g.transpose());
  const double spec_norm = Eigen::JacobiSVD<Eigen::MatrixXd>(k).singularValues()(0);
  if (spec_norm > 0.0) k *= std::tan(0.5 * std::min(angle, 3.0)) / spec_norm;
  const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(dims, dims);
  r.topLeftCorner(dims, dims) = (eye - k).lu().solve(eye + k);
  return r;
}

struct DomainPair {
  DomainSpec source;
  DomainSpec target;
};

inline std::mt19937_64 experiment_stream(std::uint64_t seed, std::uint64_t purpose) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(purpose), 0xa11u};
  return std::mt19937_64(seq);
}

// Source and target share class structure; the target applies a random
// orthogonal map plus offset to every appearance.
inline DomainPair make_domain_pair(const SimConfig& cfg, std::uint64_t seed) {
  if (cfg.raw_dim < 1 || cfg.foreground_classes < 1 || cfg.modes_per_class < 1)
    throw invalid_spec("simulator dimensions must be positive");
  auto rng = experiment_stream(seed, 1);
  DomainSpec s;
  s.raw_dim = cfg.raw_dim;
  const double per_dim = cfg.class_separation;
  Eigen::VectorXd fg_mean = Eigen::VectorXd::Zero(cfg.raw_dim);
  for (int k = 0; k < cfg.foreground_classes; ++k) {
    std::vector<Eigen::VectorXd> modes;
    for (int m = 0; m < cfg.modes_per_class; ++m) {
      modes.push_back(detail::gaussian_vector(cfg.raw_dim, per_dim, rng));
      fg_mean += modes.back();
    }
    s.class_modes.push_back(std::move(modes));
  }
  fg_mean /= static_cast<double>(cfg.foreground_classes * cfg.modes_per_class);
  s.background_mean = (1.0 - cfg.background_overlap) * detail::gaussian_vector(cfg.raw_dim, per_dim, rng) +
                      cfg.background_overlap * fg_mean;
  s.mode_scale = cfg.mode_scale;
  s.background_scale = cfg.background_scale;
  if (cfg.class_frequencies.empty()) {
    s.class_frequencies.assign(static_cast<std::size_t>(cfg.foreground_classes),
                               1.0 / static_cast<double>(cfg.foreground_classes));
  } else {
    s.class_frequencies = cfg.class_frequencies;
  }
  s.extent = cfg.extent;
  s.instances_min = cfg.instances_min;
  s.instances_max = cfg.instances_max;
  s.proposals_min = cfg.proposals_min;
  s.proposals_max = cfg.proposals_max;
  s.background_min = cfg.background_min;
  s.background_max = cfg.background_max;
  s.size_min = cfg.size_min;
  s.size_max = cfg.size_max;
  s.jitter = cfg.jitter;
  s.noise = cfg.noise;
  s.shift = DomainShift::identity(cfg.raw_dim);

  DomainSpec t = s;
  t.shift.rotation = random_rotation(cfg.raw_dim, cfg.shift_dims, cfg.shift_angle, rng);
  Eigen::VectorXd dir = detail::gaussian_vector(cfg.raw_dim, 1.0, rng);
  if (dir.norm() > 0.0) dir.normalize();
  t.shift.offset = cfg.shift_offset * dir;
  s.validate();
  t.validate();
  return {std::move(s), std::move(t)};
}

}  // namespace gpa
