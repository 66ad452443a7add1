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

// Toy detector, trainer, evaluation, PCA and the experiment layer.

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "gpa/error.hpp"
#include "gpa/experiment.hpp"
#include "gpa/gradcheck.hpp"
#include "gpa/model.hpp"
#include "gpa/pca.hpp"
#include "gpa/report.hpp"
#include "gpa/trainer.hpp"
#include "support/oracles.hpp"

namespace gpa {
namespace {

ExperimentConfig small_config() {
  ExperimentConfig cfg;
  cfg.sim.train_scenes = 8;
  cfg.sim.test_scenes = 4;
  cfg.train.epochs = 3;
  cfg.train.batch_scenes = 2;
  cfg.seeds = {0, 1};
  return cfg;
}

TrainData small_data(const ExperimentConfig& cfg, std::uint64_t seed) {
  const Dataset d = make_dataset(cfg.sim, seed);
  const GraphSpec g = resolve_graph(cfg, d);
  return {prepare_scenes(d.source_train, g), prepare_scenes(d.target_train, g), prepare_scenes(d.source_test, g),
          prepare_scenes(d.target_test, g)};
}

bool same_parameters(const ToyModel& a, const ToyModel& b) {
  std::vector<std::vector<double>> pa, pb;
  a.for_each_block([&](const char*, const double* p, Eigen::Index n) { pa.emplace_back(p, p + n); });
  b.for_each_block([&](const char*, const double* p, Eigen::Index n) { pb.emplace_back(p, p + n); });
  return pa == pb;
}

// ---- model ----------------------------------------------------------------

TEST(DetectionLoss, PerfectClassifierHasZeroLoss) {
  ForwardCache c;
  const std::vector<int> labels = {0, 2, 1, 2};
  c.logits1 = Eigen::MatrixXd::Zero(4, 2);
  c.logits2 = Eigen::MatrixXd::Zero(4, 3);
  for (int i = 0; i < 4; ++i) {
    c.logits1(i, foreground_label(labels[i])) = 800.0;
    c.logits2(i, labels[i]) = 800.0;
  }
  c.probs1 = softmax_rows(c.logits1);
  c.probs2 = softmax_rows(c.logits2);
  EXPECT_EQ(detection_loss_terms(c, labels, nullptr, nullptr).value, 0.0);
}

TEST(DetectionLoss, UniformLogitsGiveLogC) {
  for (int classes : {2, 3, 5, 9}) {
    ForwardCache c;
    c.logits1 = Eigen::MatrixXd::Zero(6, 2);
    c.logits2 = Eigen::MatrixXd::Zero(6, classes);
    c.probs1 = softmax_rows(c.logits1);
    c.probs2 = softmax_rows(c.logits2);
    const std::vector<int> labels(6, classes - 1);
    const auto l = detection_loss_terms(c, labels, nullptr, nullptr);
    EXPECT_NEAR(l.stage2, std::log(classes), 1e-14);
    EXPECT_NEAR(l.stage1, std::log(2.0), 1e-14);
  }
}

TEST(DetectionLoss, LabelOutOfRange) {
  ForwardCache c;
  c.logits1 = c.probs1 = Eigen::MatrixXd::Constant(1, 2, 0.5);
  c.logits2 = c.probs2 = Eigen::MatrixXd::Constant(1, 3, 1.0 / 3.0);
  const std::vector<int> labels = {3};
  EXPECT_THROW(detection_loss_terms(c, labels, nullptr, nullptr), invalid_input);
}

TEST(DetectionLoss, ParameterGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(41);
  for (int t = 0; t < 10; ++t) {
    ToyModel m = ToyModel::random(3, 5, 4, 3, rng);
    m.b1 = oracle::random_matrix(5, 1, rng);
    m.c2 = oracle::random_matrix(3, 1, rng);
    const Eigen::MatrixXd raw = oracle::random_matrix(6, 3, rng);
    const std::vector<int> labels = {0, 1, 2, 0, 2, 1};
    const auto r = detection_surrogate_loss(m, raw, labels);
    std::vector<double*> coords;
    Eigen::VectorXd analytic(m.parameter_count());
    Eigen::Index at = 0;
    m.for_each_block([&](const char*, double* p, Eigen::Index n) {
      for (Eigen::Index i = 0; i < n; ++i) coords.push_back(p + i);
    });
    r.grad.for_each_block([&](const char*, const double* g, Eigen::Index n) {
      for (Eigen::Index i = 0; i < n; ++i) analytic(at++) = g[i];
    });
    const auto numeric = central_differences([&] { return detection_surrogate_loss(m, raw, labels).loss.value; },
                                             coords, 1e-6);
    EXPECT_LE(relative_error(analytic, numeric), 1e-5);
  }
}

// ---- two-stage objective --------------------------------------------------

TEST(Objective, GradientMatchesFiniteDifferences) {
  GradcheckOptions o;
  std::mt19937_64 rng(42);
  for (int i = 0; i < 8; ++i) EXPECT_LE(check_objective_gradient(i, rng, o).relative_error, 1e-5) << "trial " << i;
}

TEST(Objective, TotalIsWeightedSumAndStagesHaveRightClassCounts) {
  const auto cfg = small_config();
  const TrainData data = small_data(cfg, 0);
  std::mt19937_64 rng(43);
  const ToyModel m = ToyModel::random(cfg.sim.raw_dim, 16, 8, 5, rng);
  const std::vector<const PreparedScene*> src = {&data.source_train[0], &data.source_train[1]};
  const std::vector<const PreparedScene*> tgt = {&data.target_train[0], &data.target_train[1]};
  for (double l1 : {0.0, 0.25, 1.0, 2.0})
    for (double l2 : {0.0, 0.5, 1.0}) {
      TrainConfig tc = cfg.train;
      tc.lambda1 = l1;
      tc.lambda2 = l2;
      const auto r = objective(m, src, tgt, tc, false).report;
      EXPECT_NEAR(r.total, r.l_det + l1 * r.l_da_rpn + l2 * r.l_da_rcnn, 1e-12);
      if (l1 > 0.0) {
        EXPECT_EQ(r.rpn.source.num_classes(), 2);
      } else {
        EXPECT_EQ(r.l_da_rpn, 0.0);
      }
      if (l2 > 0.0) {
        EXPECT_EQ(r.rcnn.source.num_classes(), 5);
      } else {
        EXPECT_EQ(r.l_da_rcnn, 0.0);
      }
    }
}

TEST(Objective, GammaZeroEqualsUnweightedLoss) {
  // With gamma = 0 every present class above the threshold gets weight one,
  // which is the plain (unweighted) prototype loss.
  std::mt19937_64 rng(44);
  for (int t = 0; t < 100; ++t) {
    const Eigen::Index n = 3 + t % 10, c = 2 + t % 6;
    const auto bs = oracle::random_boxes(static_cast<std::size_t>(n), rng);
    const auto bt = oracle::random_boxes(static_cast<std::size_t>(n), rng);
    const ProposalBatch s{bs, oracle::random_matrix(n, 3, rng), oracle::random_confidences(n, c, rng)};
    const ProposalBatch g{bt, oracle::random_matrix(n, 3, rng), oracle::random_confidences(n, c, rng)};
    AlignmentOptions o;
    o.gamma = 0.0;
    const auto l = da_loss_backward(s, iou_adjacency(bs), g, iou_adjacency(bt), o);
    auto ps = merge_prototypes(aggregate(s, iou_adjacency(bs)));
    auto pt = merge_prototypes(aggregate(g, iou_adjacency(bt)));
    const Eigen::VectorXd ms = max_confidence(aggregate(s, iou_adjacency(bs)).confidences);
    const Eigen::VectorXd mt = max_confidence(aggregate(g, iou_adjacency(bt)).confidences);
    for (Eigen::Index k = 0; k < c; ++k) {
      ps.weights(k) = ms(k) > 1.0 / static_cast<double>(c) ? 1.0 : 0.0;
      pt.weights(k) = mt(k) > 1.0 / static_cast<double>(c) ? 1.0 : 0.0;
    }
    EXPECT_NEAR(l.total, total_da_loss(ps, pt, 1.0).total, 1e-12);
  }
}

// ---- trainer --------------------------------------------------------------

// Plain source-only SGD with momentum, written against the detection loss
// alone, iterating batches in the same order as the trainer.
ToyModel source_only_reference(const TrainData& data, ToyModel m, const TrainConfig& cfg) {
  ToyModel vel = m.zeros_like();
  auto rng = experiment_stream(cfg.seed, 3);
  std::vector<std::size_t> so(data.source_train.size()), to(data.target_train.size());
  std::iota(so.begin(), so.end(), 0);
  std::iota(to.begin(), to.end(), 0);
  const auto b = static_cast<std::size_t>(cfg.batch_scenes);
  for (int e = 0; e < cfg.epochs; ++e) {
    std::shuffle(so.begin(), so.end(), rng);
    std::shuffle(to.begin(), to.end(), rng);
    const std::size_t steps = std::max<std::size_t>(std::min(so.size() / b, to.size() / b), 1);
    for (std::size_t s = 0; s < steps; ++s) {
      std::vector<const PreparedScene*> batch;
      for (std::size_t i = 0; i < b && s * b + i < so.size(); ++i) batch.push_back(&data.source_train[so[s * b + i]]);
      const auto r = detection_surrogate_loss(m, detail::stack_raw(batch), detail::stack_labels(batch));
      std::vector<double*> p, v;
      std::vector<const double*> g;
      std::vector<Eigen::Index> n;
      std::vector<bool> is_transform;
      m.for_each_block([&](const char* name, double* x, Eigen::Index k) {
        p.push_back(x);
        n.push_back(k);
        is_transform.push_back(name[0] == 't');
      });
      r.grad.for_each_block([&](const char*, const double* x, Eigen::Index) { g.push_back(x); });
      vel.for_each_block([&](const char*, double* x, Eigen::Index) { v.push_back(x); });
      for (std::size_t j = 0; j < p.size(); ++j) {
        if (is_transform[j]) continue;
        for (Eigen::Index i = 0; i < n[j]; ++i) {
          v[j][i] = cfg.momentum * v[j][i] + (g[j][i] + cfg.weight_decay * p[j][i]);
          p[j][i] -= cfg.learning_rate * v[j][i];
        }
      }
    }
  }
  return m;
}

TEST(Trainer, ZeroLambdasMatchSourceOnlyTrainerBitwise) {
  auto cfg = small_config();
  cfg.variant = Variant::source_only;
  const TrainData data = small_data(cfg, 1);
  std::mt19937_64 rng(45);
  const ToyModel init = ToyModel::random(cfg.sim.raw_dim, 16, 8, 5, rng);
  const TrainConfig tc = cfg.train_config(1);
  const auto trained = train(data, init, tc);
  EXPECT_TRUE(same_parameters(trained.model, source_only_reference(data, init, tc)));
  for (const auto& e : trained.history) {
    EXPECT_EQ(e.l_da_rpn, 0.0);
    EXPECT_EQ(e.l_da_rcnn, 0.0);
    EXPECT_EQ(e.total, e.l_det);
  }
}

TEST(Trainer, VariantsSetLambdas) {
  ExperimentConfig cfg;
  cfg.variant = Variant::rpn_align;
  EXPECT_EQ(cfg.train_config(0).lambda1, 1.0);
  EXPECT_EQ(cfg.train_config(0).lambda2, 0.0);
  cfg.variant = Variant::rcnn_align;
  EXPECT_EQ(cfg.train_config(0).lambda1, 0.0);
  EXPECT_EQ(cfg.train_config(0).lambda2, 1.0);
}

TEST(Trainer, DeterministicUnderFixedSeed) {
  auto cfg = small_config();
  cfg.train.learnable_transform = true;
  const auto a = run_seed(cfg, 3);
  const auto b = run_seed(cfg, 3);
  ASSERT_EQ(a.history.size(), b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    EXPECT_EQ(a.history[i].total, b.history[i].total);
    EXPECT_EQ(a.history[i].metrics.target.features, b.history[i].metrics.target.features);
  }
}

TEST(Trainer, HistoryIsConsistent) {
  const auto cfg = small_config();
  for (auto v : {Variant::source_only, Variant::rpn_align, Variant::rcnn_align, Variant::two_stage}) {
    auto c = cfg;
    c.variant = v;
    const auto run = run_seed(c, 0);
    EXPECT_EQ(run.history.size(), 3u);
    EXPECT_TRUE(check_run(c, run).empty()) << to_string(v);
  }
}

TEST(Trainer, TransformsStayFixedUnlessLearnable) {
  auto cfg = small_config();
  const TrainData data = small_data(cfg, 0);
  std::mt19937_64 rng(46);
  const ToyModel init = ToyModel::random(cfg.sim.raw_dim, 16, 8, 5, rng);
  const auto fixed = train(data, init, cfg.train_config(0));
  EXPECT_EQ(fixed.model.t2, init.t2);
  cfg.train.learnable_transform = true;
  const auto learned = train(data, init, cfg.train_config(0));
  EXPECT_NE(learned.model.t2, init.t2);
}

// ---- evaluation -----------------------------------------------------------

TEST(Evaluate, OracleModelIsPerfect) {
  const int classes = 4;
  ToyModel m = ToyModel::zeros(classes, classes, classes, classes);
  m.w1 = 3.0 * Eigen::MatrixXd::Identity(classes, classes);
  m.w2 = Eigen::MatrixXd::Identity(classes, classes);
  m.v2 = 10.0 * Eigen::MatrixXd::Identity(classes, classes);
  m.t1 = m.t2 = Eigen::MatrixXd::Identity(classes, classes);
  std::mt19937_64 rng(47);
  std::vector<PreparedScene> scenes;
  for (int s = 0; s < 5; ++s) {
    PreparedScene p;
    const auto boxes = oracle::random_boxes(8, rng);
    for (int i = 0; i < 8; ++i) p.labels.push_back((i + s) % classes);
    p.raw = one_hot(p.labels, classes);
    p.propagator = normalize(iou_adjacency(boxes));
    scenes.push_back(std::move(p));
  }
  const auto r = evaluate(m, scenes, scenes);
  EXPECT_EQ(r.target.accuracy, 1.0);
  for (double d : r.prototype_distance) EXPECT_EQ(d, 0.0);
}

TEST(Evaluate, RandomModelIsAtChance) {
  const int classes = 4;
  std::mt19937_64 rng(48);
  const ToyModel m = ToyModel::random(6, 16, 8, classes, rng);
  std::uniform_int_distribution<int> label(0, classes - 1);
  std::vector<PreparedScene> scenes;
  std::size_t n = 0;
  for (int s = 0; s < 400; ++s) {
    PreparedScene p;
    p.raw = oracle::random_matrix(10, 6, rng);
    for (int i = 0; i < 10; ++i) p.labels.push_back(label(rng));
    p.propagator = Eigen::MatrixXd::Identity(10, 10);
    n += 10;
    scenes.push_back(std::move(p));
  }
  const double acc = evaluate_domain(m, scenes).accuracy;
  const double sd = std::sqrt(0.25 * 0.75 / static_cast<double>(n));
  EXPECT_NEAR(acc, 0.25, 3.0 * sd);
}

// ---- PCA ------------------------------------------------------------------

TEST(Pca, AxisAlignedDataGivesIdentity) {
  std::mt19937_64 rng(49);
  Eigen::MatrixXd x = oracle::random_matrix(200, 2, rng);
  x.col(0) *= 5.0;
  x.col(0).array() -= x.col(0).mean();
  x.col(1).array() -= x.col(1).mean();
  x.col(1) -= (x.col(0).dot(x.col(1)) / x.col(0).squaredNorm()) * x.col(0);  // decorrelate exactly
  const auto p = pca_project(x);
  EXPECT_LE((p.components.cwiseAbs() - Eigen::MatrixXd::Identity(2, 2)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Pca, RankOneHasZeroSecondComponent) {
  std::mt19937_64 rng(50);
  const Eigen::MatrixXd s = oracle::random_matrix(30, 1, rng);
  const Eigen::MatrixXd x = s * oracle::random_matrix(1, 4, rng);
  EXPECT_EQ(pca_project(x).scores.col(1).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Pca, ReconstructionErrorIsTrailingEigenvalues) {
  std::mt19937_64 rng(51);
  for (int t = 0; t < 50; ++t) {
    const Eigen::MatrixXd x = oracle::random_matrix(20, 5, rng);
    const auto p = pca_project(x);
    const Eigen::MatrixXd centered = x.rowwise() - x.colwise().mean();
    const Eigen::MatrixXd cov = centered.transpose() * centered / 19.0;
    const Eigen::VectorXd ev = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(cov).eigenvalues();  // ascending
    const Eigen::MatrixXd recon = p.scores * p.components.transpose();
    const double err = (centered - recon).squaredNorm() / 19.0;
    EXPECT_NEAR(err, ev(0) + ev(1) + ev(2), 1e-10);
    EXPECT_NEAR(p.variances(0), ev(4), 1e-10);
    EXPECT_NEAR(p.variances(1), ev(3), 1e-10);
  }
}

TEST(Pca, RejectsOneDimensionalData) {
  EXPECT_THROW(pca_project(Eigen::MatrixXd::Zero(5, 1)), invalid_input);
}

// ---- configuration --------------------------------------------------------

TEST(Config, EmptyTextGivesDefaults) {
  EXPECT_EQ(canonical_config(parse_config("")), canonical_config(ExperimentConfig{}));
  EXPECT_EQ(config_hash(parse_config("# nothing\n\n")), config_hash(ExperimentConfig{}));
}

TEST(Config, SectionsAndComments) {
  const auto cfg = parse_config("[train]\nlambda1 = 0.5  # half\n[sim]\nfrequencies = 0.4,0.3,0.2,0.1\n");
  EXPECT_EQ(cfg.train.lambda1, 0.5);
  EXPECT_EQ(cfg.sim.class_frequencies.size(), 4u);
}

TEST(Config, CanonicalFormRoundTrips) {
  auto cfg = parse_config("variant = rcnn-align\ngraph.kind = gaussian\ngraph.sigma = 7.5\nseeds = 3,9\n");
  EXPECT_EQ(canonical_config(parse_config(canonical_config(cfg))), canonical_config(cfg));
  EXPECT_EQ(canonical_config(config_from_json(config_to_json(cfg))), canonical_config(cfg));
  EXPECT_NE(config_hash(cfg), config_hash(ExperimentConfig{}));
}

std::string failing_key(const std::string& text) {
  try {
    parse_config(text);
  } catch (const config_error& e) {
    return e.key();
  }
  return "";
}

TEST(Config, ErrorsNameTheOffendingKey) {
  EXPECT_EQ(failing_key("train.lambda3 = 1\n"), "train.lambda3");
  EXPECT_EQ(failing_key("train.epochs = 0\n"), "train.epochs");
  EXPECT_EQ(failing_key("train.epochs = two\n"), "train.epochs");
  EXPECT_EQ(failing_key("train.gamma = -1\n"), "train.gamma");
  EXPECT_EQ(failing_key("train.momentum = 1\n"), "train.momentum");
  EXPECT_EQ(failing_key("sim.frequencies = 0.5,0.5\n"), "sim.frequencies");
  EXPECT_EQ(failing_key("sim.frequencies = 0.5,0.5,0.5,0.5\n"), "sim.frequencies");
  EXPECT_EQ(failing_key("sim.size_max = 500\n"), "sim.size_max");
  EXPECT_EQ(failing_key("graph.kind = star\n"), "graph.kind");
  EXPECT_EQ(failing_key("variant = both\n"), "variant");
  EXPECT_EQ(failing_key("seeds = 1,1\n"), "seeds");
  EXPECT_EQ(failing_key("train.lambda1 = 1\ntrain.lambda1 = 2\n"), "train.lambda1");
  EXPECT_EQ(failing_key("no equals sign\n"), "line 1");
}

// ---- experiment layer -----------------------------------------------------

TEST(Experiment, SourceOnlyReportsNoAlignmentLoss) {
  auto cfg = small_config();
  cfg.variant = Variant::source_only;
  const auto run = run_seed(cfg, 0);
  std::ostringstream csv;
  write_metrics_csv(csv, run, config_hash(cfg), 5);
  std::istringstream in(csv.str());
  std::string line;
  std::getline(in, line);  // manifest
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    const auto cells = io::split(line, ',');
    EXPECT_EQ(std::stod(cells[2]), 0.0);
    EXPECT_EQ(std::stod(cells[3]), 0.0);
  }
}

TEST(Experiment, GammaZeroSweepRowEqualsDirectRun) {
  auto cfg = small_config();
  cfg.seeds = {2};
  const auto sweep = run_sweep(cfg, SweepParam::gamma, {0.0, 2.0});
  auto direct = cfg;
  direct.train.gamma = 0.0;
  const auto run = run_seed(direct, 2);
  ASSERT_EQ(sweep.rows.size(), 2u);
  EXPECT_EQ(sweep.rows[0].target_accuracy, run.target_accuracy());
  EXPECT_EQ(sweep.rows[0].total, run.final_epoch().total);
  EXPECT_TRUE(sweep.violations.empty());
}

TEST(Experiment, SingletonSweepEqualsRun) {
  auto cfg = small_config();
  const auto sweep = run_sweep(cfg, SweepParam::lambda1, {1.0});
  const auto result = run_experiment(cfg);
  ASSERT_EQ(sweep.rows.size(), result.runs.size());
  for (std::size_t i = 0; i < sweep.rows.size(); ++i)
    EXPECT_EQ(sweep.rows[i].target_accuracy, result.runs[i].target_accuracy());
}

TEST(Experiment, AblationRowsShareSeeds) {
  auto cfg = small_config();
  cfg.train.epochs = 1;
  const auto rows = run_graph_ablation(cfg);
  ASSERT_EQ(rows.size(), 5u);
  for (const auto& r : rows) {
    ASSERT_EQ(r.result.runs.size(), 2u);
    EXPECT_EQ(r.result.runs[0].seed, 0u);
    EXPECT_EQ(r.result.runs[1].seed, 1u);
  }
  EXPECT_GT(ablation_row(rows, "gaussian").mean_sigma(), 0.0);
  EXPECT_THROW(ablation_row(rows, "star"), invalid_input);
}

TEST(Experiment, SweepRejectsNegativeValues) {
  EXPECT_THROW(with_sweep_value(ExperimentConfig{}, SweepParam::gamma, -1.0), config_error);
  EXPECT_THROW(parse_sweep_param("lambda3"), config_error);
}

TEST(Experiment, RarestClassFollowsFrequencies) {
  SimConfig sim;
  sim.class_frequencies = {0.4, 0.05, 0.3, 0.25};
  EXPECT_EQ(rarest_class(sim), 2);
}

}  // namespace
}  // namespace gpa
