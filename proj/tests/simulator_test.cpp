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

#include "gpa/simulator.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "gpa/error.hpp"
#include "gpa/experiment.hpp"

namespace gpa {
namespace {

DomainSpec single_instance_spec() {
  SimConfig cfg;
  cfg.instances_min = cfg.instances_max = 1;
  cfg.proposals_min = cfg.proposals_max = 1;
  cfg.background_min = cfg.background_max = 0;
  cfg.jitter = 0.0;
  cfg.noise = 0.0;
  return make_domain_pair(cfg, 1).source;
}

TEST(GenerateScene, CleanProposalEqualsAppearance) {
  const DomainSpec spec = single_instance_spec();
  auto rng = scene_stream(1, 0);
  for (int t = 0; t < 50; ++t) {
    const Scene s = generate_scene(spec, rng);
    ASSERT_EQ(s.proposals.size(), 1u);
    EXPECT_EQ(s.proposals[0].feature, s.instances[0].appearance);
    EXPECT_EQ(s.proposals[0].box.x_min, s.instances[0].box.x_min);
    EXPECT_EQ(s.proposals[0].label, s.instances[0].label);
  }
}

TEST(GenerateScene, DegenerateFrequenciesGiveOneClass) {
  DomainSpec spec = make_domain_pair(SimConfig{}, 2).source;
  spec.class_frequencies = {1.0, 0.0, 0.0, 0.0};
  const auto scenes = generate_split(spec, 40, 3);
  for (const auto& s : scenes)
    for (const auto& inst : s.instances) EXPECT_EQ(inst.label, 1);
}

TEST(GenerateScene, FrequenciesWithinBinomialBounds) {
  DomainSpec spec = make_domain_pair(SimConfig{}, 4).source;
  spec.class_modes.resize(3);
  spec.class_frequencies = {0.5, 0.3, 0.2};
  std::vector<double> counts(3, 0.0);
  double total = 0.0;
  for (int i = 0; total < 1e4; ++i) {
    auto rng = scene_stream(5, static_cast<std::uint64_t>(i));
    for (const auto& inst : generate_scene(spec, rng).instances) {
      if (total >= 1e4) break;
      counts[static_cast<std::size_t>(inst.label - 1)] += 1.0;
      total += 1.0;
    }
  }
  for (std::size_t k = 0; k < 3; ++k) {
    const double f = spec.class_frequencies[k];
    const double sd = std::sqrt(f * (1.0 - f) / total);
    EXPECT_LE(std::abs(counts[k] / total - f), 3.0 * sd) << "class " << k + 1;
  }
}

TEST(GenerateScene, LabelsFollowInstances) {
  const auto pair = make_domain_pair(SimConfig{}, 6);
  for (const auto& s : generate_split(pair.target, 30, 7)) {
    for (const auto& p : s.proposals) {
      if (p.instance < 0) {
        EXPECT_EQ(p.label, 0);
      } else {
        EXPECT_EQ(p.label, s.instances[static_cast<std::size_t>(p.instance)].label);
        EXPECT_GT(iou(p.box, s.instances[static_cast<std::size_t>(p.instance)].box), 0.0);
      }
      EXPECT_GT(p.box.area(), 0.0);
    }
  }
}

TEST(GenerateScene, JitterIncreasesFeatureDistance) {
  SimConfig cfg;
  cfg.instances_min = cfg.instances_max = 1;
  cfg.background_min = cfg.background_max = 0;
  cfg.noise = 0.0;
  DomainSpec spec = make_domain_pair(cfg, 8).source;
  double prev = -1.0;
  for (double jitter : {0.05, 0.15, 0.3, 0.5}) {
    spec.jitter = jitter;
    double sum = 0.0;
    int n = 0;
    for (int i = 0; n < 10000; ++i) {
      auto rng = scene_stream(9, static_cast<std::uint64_t>(i));
      const Scene s = generate_scene(spec, rng);
      for (const auto& p : s.proposals) {
        if (n == 10000) break;
        sum += (p.feature - s.instances[0].appearance).norm();
        ++n;
      }
    }
    const double mean = sum / n;
    EXPECT_GT(mean, prev) << "jitter " << jitter;
    prev = mean;
  }
}

TEST(GenerateSplit, SameSeedIsBitIdentical) {
  const auto pair = make_domain_pair(SimConfig{}, 10);
  const auto a = generate_split(pair.target, 20, 11);
  const auto b = generate_split(pair.target, 20, 11);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].features(), b[i].features());
    EXPECT_EQ(a[i].labels(), b[i].labels());
    const auto ba = a[i].boxes();
    const auto bb = b[i].boxes();
    for (std::size_t j = 0; j < ba.size(); ++j) EXPECT_EQ(ba[j].x_max, bb[j].x_max);
  }
  const auto d1 = make_dataset(SimConfig{}, 3);
  const auto d2 = make_dataset(SimConfig{}, 3);
  EXPECT_EQ(d1.domains.target.shift.rotation, d2.domains.target.shift.rotation);
  EXPECT_EQ(d1.target_test.back().features(), d2.target_test.back().features());
}

// Per-class mean of instance appearances over many scenes.
std::vector<Eigen::VectorXd> class_means(const DomainSpec& spec, std::uint64_t seed, int scenes,
                                         std::vector<int>* counts = nullptr) {
  const auto c = spec.class_modes.size();
  std::vector<Eigen::VectorXd> sum(c, Eigen::VectorXd::Zero(spec.raw_dim));
  std::vector<int> n(c, 0);
  for (const auto& s : generate_split(spec, scenes, seed))
    for (const auto& inst : s.instances) {
      sum[static_cast<std::size_t>(inst.label - 1)] += inst.appearance;
      ++n[static_cast<std::size_t>(inst.label - 1)];
    }
  for (std::size_t k = 0; k < c; ++k) sum[k] /= n[k];
  if (counts) *counts = n;
  return sum;
}

TEST(DomainPair, IdentityShiftLeavesMeansEqual) {
  SimConfig cfg;
  cfg.shift_angle = 0.0;
  cfg.shift_offset = 0.0;
  const auto pair = make_domain_pair(cfg, 12);
  EXPECT_EQ(pair.target.shift.rotation, Eigen::MatrixXd::Identity(cfg.raw_dim, cfg.raw_dim));
  std::vector<int> n;
  const auto ms = class_means(pair.source, 13, 3000, &n);
  const auto mt = class_means(pair.target, 14, 3000);
  for (std::size_t k = 0; k < ms.size(); ++k) {
    // each coordinate: between-mode spread (separation) plus instance spread
    const double sd = std::sqrt(2.0 * (cfg.class_separation * cfg.class_separation + cfg.mode_scale * cfg.mode_scale) / n[k]);
    EXPECT_LE((ms[k] - mt[k]).cwiseAbs().maxCoeff(), 5.0 * sd) << "class " << k + 1;
  }
}

TEST(DomainPair, ShiftMovesClassMeansByClosedForm) {
  const SimConfig cfg;
  const auto pair = make_domain_pair(cfg, 15);
  const Eigen::MatrixXd& r = pair.target.shift.rotation;
  const Eigen::VectorXd& b = pair.target.shift.offset;
  const auto ms = class_means(pair.source, 16, 4000);
  const auto mt = class_means(pair.target, 17, 4000);
  for (std::size_t k = 0; k < ms.size(); ++k) {
    Eigen::VectorXd mu = Eigen::VectorXd::Zero(cfg.raw_dim);
    for (const auto& m : pair.source.class_modes[k]) mu += m;
    mu /= static_cast<double>(pair.source.class_modes[k].size());
    const double expected = ((r - Eigen::MatrixXd::Identity(cfg.raw_dim, cfg.raw_dim)) * mu + b).norm();
    EXPECT_NEAR((mt[k] - ms[k]).norm(), expected, 0.1 * expected + 0.15) << "class " << k + 1;
  }
}

TEST(RandomRotation, OrthogonalWithBoundedAngles) {
  std::mt19937_64 rng(18);
  for (int t = 0; t < 200; ++t) {
    const double angle = 0.05 + 2.5 * (t % 10) / 10.0;
    const Eigen::MatrixXd r = random_rotation(8, 2 + t % 7, angle, rng);
    EXPECT_LE((r.transpose() * r - Eigen::MatrixXd::Identity(8, 8)).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_NEAR(r.determinant(), 1.0, 1e-10);
    const Eigen::VectorXcd ev = Eigen::EigenSolver<Eigen::MatrixXd>(r).eigenvalues();
    for (Eigen::Index i = 0; i < ev.size(); ++i) EXPECT_LE(std::abs(std::arg(ev(i))), angle + 1e-9);
  }
}

TEST(DomainSpec, DegenerateRangesAreRejected) {
  DomainSpec spec = make_domain_pair(SimConfig{}, 19).source;
  spec.instances_min = 0;
  EXPECT_THROW(spec.validate(), invalid_spec);
  spec = make_domain_pair(SimConfig{}, 19).source;
  spec.instances_max = 1;
  spec.instances_min = 2;
  EXPECT_THROW(spec.validate(), invalid_spec);
  spec = make_domain_pair(SimConfig{}, 19).source;
  spec.class_frequencies = {0.5, 0.5, 0.5, -0.5};
  EXPECT_THROW(spec.validate(), invalid_spec);
  spec = make_domain_pair(SimConfig{}, 19).source;
  spec.size_max = 2.0 * spec.extent;
  EXPECT_THROW(generate_split(spec, 1, 0), invalid_spec);
}

TEST(Dataset, EveryClassAppearsInTrainingSplits) {
  // P(class k absent from n instances) = (1 - f_k)^n; with f = 0.05 and
  // n >= 240 instances this is below 5e-6 per split.
  SimConfig cfg;
  cfg.class_frequencies = {0.70, 0.15, 0.10, 0.05};
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto d = make_dataset(cfg, seed);
    for (const auto* split : {&d.source_train, &d.target_train}) {
      std::vector<int> seen(5, 0);
      for (const auto& s : *split)
        for (int y : s.labels()) seen[static_cast<std::size_t>(y)] = 1;
      for (int k = 0; k < 5; ++k) EXPECT_EQ(seen[static_cast<std::size_t>(k)], 1) << "seed " << seed << " class " << k;
    }
  }
}

}  // namespace
}  // namespace gpa
