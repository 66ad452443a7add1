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
#include <cstdio>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "gpa/error.hpp"
#include "gpa/experiment.hpp"
#include "gpa/io.hpp"
#include "gpa/pca.hpp"
#include "gpa/svg.hpp"

namespace gpa {

inline std::string seed_list(const std::vector<std::uint64_t>& seeds) {
  std::string out;
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(seeds[i]);
  }
  return out;
}

// ---- per-epoch metrics ----------------------------------------------------

inline std::vector<std::string> metrics_header(int classes) {
  std::vector<std::string> h = {"epoch", "L_det", "L_da_rpn", "L_da_rcnn", "total", "src_acc", "tgt_acc"};
  for (int k = 0; k < classes; ++k) h.push_back("tgt_acc_c" + std::to_string(k));
  for (int k = 0; k < classes; ++k) h.push_back("proto_dist_c" + std::to_string(k));
  return h;
}

inline void write_metrics_csv(std::ostream& out, const RunResult& run, std::uint64_t config_hash, int classes) {
  io::CsvWriter csv(out, config_hash, run.seed, metrics_header(classes));
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (const auto& e : run.history) {
    std::vector<double> row = {static_cast<double>(e.epoch), e.l_det,     e.l_da_rpn,
                               e.l_da_rcnn,                 e.total,     e.metrics.source.accuracy,
                               e.metrics.target.accuracy};
    for (int k = 0; k < classes; ++k) {
      const auto& acc = e.metrics.target.class_accuracy;
      row.push_back(static_cast<std::size_t>(k) < acc.size() ? acc[static_cast<std::size_t>(k)] : nan);
    }
    for (int k = 0; k < classes; ++k) {
      const auto& d = e.metrics.prototype_distance;
      row.push_back(static_cast<std::size_t>(k) < d.size() ? d[static_cast<std::size_t>(k)] : nan);
    }
    csv.row(row);
  }
}

inline io::json nullable(double v) { return std::isfinite(v) ? io::json(v) : io::json(nullptr); }

inline io::json nullable(const std::vector<double>& v) {
  io::json a = io::json::array();
  for (double x : v) a.push_back(nullable(x));
  return a;
}

inline io::json domain_report(const DomainMetrics& m) {
  io::json j;
  j["accuracy"] = m.accuracy;
  j["class_accuracy"] = nullable(m.class_accuracy);
  j["class_count"] = m.class_count;
  j["fg_bg_margin"] = m.fg_bg_margin;
  return j;
}

inline io::json run_report(const ExperimentConfig& cfg, const RunResult& run) {
  const auto& last = run.final_epoch();
  const TrainConfig tc = cfg.train_config(run.seed);
  io::json j;
  j["seed"] = run.seed;
  j["config_hash"] = io::hex64(config_hash(cfg));
  j["variant"] = to_string(cfg.variant);
  j["graph"] = to_string(cfg.train.graph.kind);
  j["sigma"] = run.sigma;
  j["lambda1"] = tc.lambda1;
  j["lambda2"] = tc.lambda2;
  j["epochs"] = last.epoch;
  j["final"] = {{"L_det", last.l_det},
                {"L_da_rpn", last.l_da_rpn},
                {"L_da_rcnn", last.l_da_rcnn},
                {"total", last.total},
                {"source", domain_report(last.metrics.source)},
                {"target", domain_report(last.metrics.target)},
                {"prototype_distance", nullable(last.metrics.prototype_distance)},
                {"minority_accuracy", nullable(run.minority_accuracy)}};
  return j;
}

// ---- embedding projection -------------------------------------------------

struct EmbeddingProjection {
  PcaProjection pca;
  std::vector<int> domain;  // 0 source, 1 target
  std::vector<int> label;
};

inline EmbeddingProjection project_embeddings(const MetricsReport& m) {
  const auto& s = m.source;
  const auto& t = m.target;
  Eigen::MatrixXd x(s.features.rows() + t.features.rows(), std::max(s.features.cols(), t.features.cols()));
  x << s.features, t.features;
  EmbeddingProjection p;
  p.pca = pca_project(x);
  p.domain.assign(static_cast<std::size_t>(s.features.rows()), 0);
  p.domain.insert(p.domain.end(), static_cast<std::size_t>(t.features.rows()), 1);
  p.label = s.labels;
  p.label.insert(p.label.end(), t.labels.begin(), t.labels.end());
  return p;
}

inline void write_projection_csv(std::ostream& out, const EmbeddingProjection& p, std::uint64_t config_hash,
                                 std::uint64_t seed) {
  io::CsvWriter csv(out, config_hash, seed, {"domain", "label", "pc1", "pc2"});
  for (std::size_t i = 0; i < p.label.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    csv.row_strings({p.domain[i] == 0 ? "source" : "target", std::to_string(p.label[i]),
                     io::format_double(p.pca.scores(r, 0)), io::format_double(p.pca.scores(r, 1))});
  }
}

inline std::string projection_svg(const EmbeddingProjection& p, int classes, const std::string& title) {
  std::vector<svg::Series> series;
  for (int dom = 0; dom < 2; ++dom) {
    for (int k = 0; k < classes; ++k) {
      svg::Series s;
      s.label = std::string(dom == 0 ? "source" : "target") + (k == 0 ? " bg" : " c" + std::to_string(k));
      s.color = svg::palette(static_cast<std::size_t>(k));
      s.marker = dom == 0 ? svg::Marker::circle : svg::Marker::square;
      for (std::size_t i = 0; i < p.label.size(); ++i)
        if (p.domain[i] == dom && p.label[i] == k) {
          const auto r = static_cast<Eigen::Index>(i);
          s.points.push_back({p.pca.scores(r, 0), p.pca.scores(r, 1)});
        }
      if (!s.points.empty()) series.push_back(std::move(s));
    }
  }
  return svg::render(series, title);
}

// ---- run artifacts --------------------------------------------------------

// Internal consistency of a finished run; returns one message per violation.
inline std::vector<std::string> check_run(const ExperimentConfig& cfg, const RunResult& run) {
  std::vector<std::string> bad;
  const TrainConfig tc = cfg.train_config(run.seed);
  const std::string tag = "seed " + std::to_string(run.seed) + ": ";
  if (run.history.empty()) bad.push_back(tag + "no epochs recorded");
  for (const auto& e : run.history) {
    const std::string at = tag + "epoch " + std::to_string(e.epoch) + ": ";
    for (double v : {e.l_det, e.l_da_rpn, e.l_da_rcnn, e.total})
      if (!std::isfinite(v) || v < 0.0) bad.push_back(at + "loss term negative or not finite");
    const double composed = e.l_det + tc.lambda1 * e.l_da_rpn + tc.lambda2 * e.l_da_rcnn;
    if (std::abs(composed - e.total) > 1e-10 * (1.0 + std::abs(e.total)))
      bad.push_back(at + "total objective is not the weighted sum of its terms");
    if ((tc.lambda1 == 0.0 && e.l_da_rpn != 0.0) || (tc.lambda2 == 0.0 && e.l_da_rcnn != 0.0))
      bad.push_back(at + "disabled alignment term is nonzero");
    for (double a : {e.metrics.source.accuracy, e.metrics.target.accuracy})
      if (!(a >= 0.0 && a <= 1.0)) bad.push_back(at + "accuracy outside [0, 1]");
  }
  return bad;
}

inline io::json aggregate_report(const ExperimentConfig& cfg, const ExperimentResult& result) {
  const auto stat = [](const Stat& s) { return io::json{{"mean", s.mean}, {"std", s.stddev}}; };
  io::json j;
  j["config_hash"] = io::hex64(result.config_hash);
  j["config"] = config_to_json(cfg);
  j["seeds"] = cfg.seeds;
  j["target_accuracy"] = stat(result.target_accuracy());
  j["source_accuracy"] = stat(result.source_accuracy());
  j["minority_accuracy"] = stat(result.minority_accuracy());
  io::json runs = io::json::array();
  for (const auto& r : result.runs)
    runs.push_back({{"seed", r.seed},
                    {"sigma", r.sigma},
                    {"target_accuracy", r.target_accuracy()},
                    {"source_accuracy", r.source_accuracy()},
                    {"minority_accuracy", nullable(r.minority_accuracy)}});
  j["runs"] = runs;
  return j;
}

inline void write_aggregate_csv(std::ostream& out, const ExperimentConfig& cfg, const ExperimentResult& result) {
  io::CsvWriter csv(out, result.config_hash, seed_list(cfg.seeds), {"metric", "mean", "std"});
  const auto put = [&](const char* name, const Stat& s) {
    csv.row_strings({name, io::format_double(s.mean), io::format_double(s.stddev)});
  };
  put("target_accuracy", result.target_accuracy());
  put("source_accuracy", result.source_accuracy());
  put("minority_accuracy", result.minority_accuracy());
}

inline std::filesystem::path prepare_output_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) throw invalid_input("cannot create output directory " + dir.string());
  const auto probe = dir / ".write_probe";
  {
    std::ofstream out(probe);
    if (!out) throw invalid_input("output directory is not writable: " + dir.string());
  }
  std::filesystem::remove(probe, ec);
  return dir;
}

inline void write_seed_artifacts(const std::filesystem::path& dir, const ExperimentConfig& cfg,
                                 const RunResult& run, std::uint64_t hash) {
  const int classes = cfg.sim.foreground_classes + 1;
  prepare_output_dir(dir);
  std::ostringstream metrics;
  write_metrics_csv(metrics, run, hash, classes);
  io::write_text_file((dir / "metrics.csv").string(), metrics.str());
  io::write_text_file((dir / "report.json").string(), run_report(cfg, run).dump(2) + "\n");
  const auto proj = project_embeddings(run.final_epoch().metrics);
  std::ostringstream csv;
  write_projection_csv(csv, proj, hash, run.seed);
  io::write_text_file((dir / "projection.csv").string(), csv.str());
  io::write_text_file((dir / "projection.svg").string(),
                      projection_svg(proj, classes, "embedding PCA, seed " + std::to_string(run.seed)));
}

// Runs every seed, writing seed_<s>/ artifacts as each finishes, then the
// aggregate report. Returns the result and any invariant violations.
inline ExperimentResult run_with_artifacts(const ExperimentConfig& cfg, const std::filesystem::path& out_dir,
                                           std::vector<std::string>* violations = nullptr) {
  cfg.validate();
  prepare_output_dir(out_dir);
  ExperimentResult result;
  result.config_hash = config_hash(cfg);
  for (auto seed : cfg.seeds) {
    result.runs.push_back(run_seed(cfg, seed));
    const auto& run = result.runs.back();
    write_seed_artifacts(out_dir / ("seed_" + std::to_string(seed)), cfg, run, result.config_hash);
    if (violations != nullptr)
      for (auto& v : check_run(cfg, run)) violations->push_back(std::move(v));
  }
  io::write_text_file((out_dir / "config.txt").string(), canonical_config(cfg));
  std::ostringstream agg;
  write_aggregate_csv(agg, cfg, result);
  io::write_text_file((out_dir / "aggregate.csv").string(), agg.str());
  io::write_text_file((out_dir / "aggregate.json").string(), aggregate_report(cfg, result).dump(2) + "\n");
  return result;
}

// ---- sensitivity sweeps ---------------------------------------------------

enum class SweepParam { lambda1, lambda2, gamma };

inline const char* to_string(SweepParam p) {
  switch (p) {
    case SweepParam::lambda1: return "lambda1";
    case SweepParam::lambda2: return "lambda2";
    case SweepParam::gamma: return "gamma";
  }
  return "?";
}

inline SweepParam parse_sweep_param(const std::string& s) {
  if (s == "lambda1") return SweepParam::lambda1;
  if (s == "lambda2") return SweepParam::lambda2;
  if (s == "gamma") return SweepParam::gamma;
  throw config_error("--param", "expected lambda1, lambda2 or gamma, got '" + s + "'");
}

inline ExperimentConfig with_sweep_value(ExperimentConfig cfg, SweepParam p, double value) {
  if (!(value >= 0.0) || !std::isfinite(value))
    throw config_error("--values", "sweep values must be finite and >= 0");
  switch (p) {
    case SweepParam::lambda1: cfg.train.lambda1 = value; break;
    case SweepParam::lambda2: cfg.train.lambda2 = value; break;
    case SweepParam::gamma: cfg.train.gamma = value; break;
  }
  return cfg;
}

struct SweepRow {
  double value = 0.0;
  std::uint64_t seed = 0;
  double target_accuracy = 0.0;
  double source_accuracy = 0.0;
  double minority_accuracy = 0.0;
  double l_det = 0.0;
  double l_da_rpn = 0.0;
  double l_da_rcnn = 0.0;
  double total = 0.0;
};

struct SweepResult {
  SweepParam param = SweepParam::lambda1;
  std::vector<SweepRow> rows;
  std::vector<std::string> violations;

  // Mean target accuracy per swept value, in sweep order.
  std::vector<std::pair<double, double>> means() const {
    std::vector<std::pair<double, double>> out;
    for (const auto& r : rows) {
      if (out.empty() || out.back().first != r.value) out.push_back({r.value, 0.0});
      out.back().second += r.target_accuracy;
    }
    for (auto& [v, m] : out) {
      std::size_t n = 0;
      for (const auto& r : rows) n += r.value == v ? 1 : 0;
      m /= static_cast<double>(n);
    }
    return out;
  }
};

inline SweepResult run_sweep(const ExperimentConfig& base, SweepParam param, const std::vector<double>& values) {
  if (values.empty()) throw config_error("--values", "sweep needs at least one value");
  SweepResult out;
  out.param = param;
  for (double v : values) {
    const ExperimentConfig cfg = with_sweep_value(base, param, v);
    cfg.validate();
    for (auto seed : cfg.seeds) {
      const RunResult run = run_seed(cfg, seed);
      for (auto& msg : check_run(cfg, run)) out.violations.push_back(std::move(msg));
      const auto& e = run.final_epoch();
      out.rows.push_back({v, seed, run.target_accuracy(), run.source_accuracy(), run.minority_accuracy, e.l_det,
                          e.l_da_rpn, e.l_da_rcnn, e.total});
    }
  }
  return out;
}

inline void write_sweep_csv(std::ostream& out, const SweepResult& s, std::uint64_t base_hash,
                            const std::vector<std::uint64_t>& seeds) {
  io::CsvWriter csv(out, base_hash, seed_list(seeds),
                    {to_string(s.param), "seed", "tgt_acc", "src_acc", "minority_acc", "L_det", "L_da_rpn",
                     "L_da_rcnn", "total"});
  for (const auto& r : s.rows)
    csv.row({r.value, static_cast<double>(r.seed), r.target_accuracy, r.source_accuracy, r.minority_accuracy, r.l_det,
             r.l_da_rpn, r.l_da_rcnn, r.total});
}

inline std::string sweep_svg(const SweepResult& s) {
  svg::Series runs;
  runs.label = "per seed";
  runs.color = svg::palette(1);
  for (const auto& r : s.rows) runs.points.push_back({r.value, r.target_accuracy});
  svg::Series mean;
  mean.label = "mean";
  mean.color = svg::palette(3);
  mean.polyline = true;
  for (const auto& [v, m] : s.means()) mean.points.push_back({v, m});
  return svg::render({runs, mean}, std::string("target accuracy vs ") + to_string(s.param));
}

// ---- graph ablation -------------------------------------------------------

struct AblationRow {
  std::string name;
  GraphKind kind = GraphKind::identity;
  bool learnable_transform = false;
  ExperimentResult result;

  double mean_sigma() const {
    double s = 0.0;
    for (const auto& r : result.runs) s += r.sigma;
    return result.runs.empty() ? 0.0 : s / static_cast<double>(result.runs.size());
  }
};

inline std::vector<AblationRow> run_graph_ablation(const ExperimentConfig& base,
                                                   std::vector<std::string>* violations = nullptr) {
  const struct {
    const char* name;
    GraphKind kind;
    bool lp;
  } cells[] = {{"none", GraphKind::identity, false},
               {"gaussian+LP", GraphKind::gaussian, true},
               {"gaussian", GraphKind::gaussian, false},
               {"iou+LP", GraphKind::iou, true},
               {"iou", GraphKind::iou, false}};
  std::vector<AblationRow> rows;
  for (const auto& c : cells) {
    ExperimentConfig cfg = base;
    cfg.train.graph.kind = c.kind;
    cfg.train.learnable_transform = c.lp;
    cfg.validate();
    AblationRow row{c.name, c.kind, c.lp, run_experiment(cfg)};
    if (violations != nullptr)
      for (const auto& r : row.result.runs)
        for (auto& v : check_run(cfg, r)) violations->push_back(std::string(c.name) + ": " + v);
    rows.push_back(std::move(row));
  }
  return rows;
}

inline const AblationRow& ablation_row(const std::vector<AblationRow>& rows, const std::string& name) {
  for (const auto& r : rows)
    if (r.name == name) return r;
  throw invalid_input("no ablation row named " + name);
}

inline void write_ablation_csv(std::ostream& out, const std::vector<AblationRow>& rows, std::uint64_t base_hash,
                               const std::vector<std::uint64_t>& seeds) {
  std::vector<std::string> header = {"graph", "learnable_transform", "sigma", "tgt_acc_mean", "tgt_acc_std",
                                     "src_acc_mean"};
  for (auto s : seeds) header.push_back("tgt_acc_seed_" + std::to_string(s));
  io::CsvWriter csv(out, base_hash, seed_list(seeds), header);
  for (const auto& r : rows) {
    std::vector<std::string> cells = {to_string(r.kind), r.learnable_transform ? "1" : "0",
                                      io::format_double(r.mean_sigma()),
                                      io::format_double(r.result.target_accuracy().mean),
                                      io::format_double(r.result.target_accuracy().stddev),
                                      io::format_double(r.result.source_accuracy().mean)};
    for (const auto& run : r.result.runs) cells.push_back(io::format_double(run.target_accuracy()));
    csv.row_strings(cells);
  }
}

// ---- datasets on disk -----------------------------------------------------

// One JSON file per scene under <dir>/<split>/, plus manifest.json holding the
// configuration and seed that regenerate every file exactly.
inline void write_dataset(const std::filesystem::path& dir, const ExperimentConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  prepare_output_dir(dir);
  const Dataset data = make_dataset(cfg.sim, seed);
  const std::pair<const char*, const std::vector<Scene>*> splits[] = {{"source_train", &data.source_train},
                                                                      {"target_train", &data.target_train},
                                                                      {"source_test", &data.source_test},
                                                                      {"target_test", &data.target_test}};
  io::json manifest;
  manifest["seed"] = seed;
  manifest["config_hash"] = io::hex64(config_hash(cfg));
  manifest["config"] = config_to_json(cfg);
  manifest["domains"] = {{"source", io::to_json(data.domains.source)}, {"target", io::to_json(data.domains.target)}};
  io::json listing = io::json::object();
  for (const auto& [name, scenes] : splits) {
    const auto sub = prepare_output_dir(dir / name);
    io::json files = io::json::array();
    for (std::size_t i = 0; i < scenes->size(); ++i) {
      char file[32];
      std::snprintf(file, sizeof file, "scene_%04zu.json", i);
      io::write_text_file((sub / file).string(), io::to_json((*scenes)[i]).dump() + "\n");
      files.push_back(std::string(name) + "/" + file);
    }
    listing[name] = files;
  }
  manifest["files"] = listing;
  io::write_text_file((dir / "manifest.json").string(), manifest.dump(2) + "\n");
}

inline std::vector<Scene> read_split(const std::filesystem::path& dir, const std::string& split) {
  const io::json manifest = io::read_json_file((dir / "manifest.json").string());
  std::vector<Scene> out;
  for (const auto& f : manifest.at("files").at(split))
    out.push_back(io::scene_from_json(io::read_json_file((dir / f.get<std::string>()).string())));
  return out;
}

}  // namespace gpa
