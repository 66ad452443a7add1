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

// gpa: command-line front end for graph-induced prototype alignment.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "gpa/gradcheck.hpp"
#include "gpa/io.hpp"
#include "gpa/report.hpp"

namespace {

struct Globals {
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string config;
};

gpa::ExperimentConfig load(const Globals& g) {
  gpa::ExperimentConfig cfg = g.config.empty() ? gpa::parse_config("") : gpa::load_config(g.config);
  if (g.seed) cfg.seeds = {*g.seed};
  return cfg;
}

std::uint64_t single_seed(const Globals& g, const gpa::ExperimentConfig& cfg) {
  return g.seed ? *g.seed : cfg.seeds.front();
}

void emit(const Globals& g, const std::string& text) {
  if (g.out.empty() || g.out == "-") {
    std::cout << text;
  } else {
    gpa::io::write_text_file(g.out, text);
  }
}

std::filesystem::path require_out_dir(const Globals& g, const char* command) {
  if (g.out.empty()) throw gpa::config_error("--out", std::string(command) + " needs an output directory");
  return g.out;
}

int report_violations(const std::vector<std::string>& violations) {
  for (const auto& v : violations) std::cerr << "invariant violated: " << v << "\n";
  return violations.empty() ? 0 : 3;
}

gpa::GraphKind parse_kind(const std::string& s) {
  if (s == "iou") return gpa::GraphKind::iou;
  if (s == "gaussian") return gpa::GraphKind::gaussian;
  if (s == "none") return gpa::GraphKind::identity;
  throw gpa::config_error("--kind", "expected iou, gaussian or none, got '" + s + "'");
}

std::vector<double> parse_values(const std::string& text) {
  std::vector<double> out;
  for (const auto& item : gpa::io::split(text, ',')) {
    double v = 0.0;
    if (!gpa::io::parse_double(gpa::io::trim(item), v)) throw gpa::config_error("--values", "not a number: " + item);
    out.push_back(v);
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Graph-induced prototype alignment: graphs, losses, simulator and experiments"};
  app.require_subcommand(1);
  Globals g;
  std::uint64_t seed_value = 0;
  auto* seed_opt = app.add_option("--seed", seed_value, "seed (replaces the configured seed list)");
  app.add_option("--out", g.out, "output file or directory");
  app.add_option("--config", g.config, "key = value configuration file");
  app.fallthrough();

  std::string boxes_path;
  std::string kind = "iou";
  double sigma = 15.0;
  auto* graph_cmd = app.add_subcommand("graph", "adjacency matrix of a box list (CSV)");
  graph_cmd->add_option("--boxes", boxes_path, "CSV with x_min,y_min,x_max,y_max rows")->required();
  graph_cmd->add_option("--kind", kind, "iou | gaussian | none");
  graph_cmd->add_option("--sigma", sigma, "Gaussian kernel width");
  bool normalized = false;
  graph_cmd->add_flag("--normalized", normalized, "emit D^-1/2 A D^-1/2 instead of A");

  std::string source_path;
  std::string target_path;
  double gamma = 2.0;
  double margin = 1.0;
  bool confidence_grad = false;
  bool with_grad = false;
  auto* align_cmd = app.add_subcommand("align", "alignment loss of two proposal batches (JSON)");
  align_cmd->add_option("--source", source_path, "source batch JSON")->required();
  align_cmd->add_option("--target", target_path, "target batch JSON")->required();
  align_cmd->add_option("--gamma", gamma, "class-balancing exponent");
  align_cmd->add_option("--margin", margin, "inter-class margin");
  align_cmd->add_option("--kind", kind, "iou | gaussian | none");
  align_cmd->add_option("--sigma", sigma, "Gaussian kernel width");
  align_cmd->add_flag("--confidence-grad", confidence_grad, "differentiate through the merge weights");
  align_cmd->add_flag("--gradients", with_grad, "include feature gradients in the output");

  gpa::GradcheckOptions gc;
  auto* gc_cmd = app.add_subcommand("gradcheck", "finite-difference check of loss and objective gradients");
  gc_cmd->add_option("--trials", gc.trials, "random alignment-loss draws");
  gc_cmd->add_option("--objective-trials", gc.objective_trials, "random tiny-model objective draws");
  gc_cmd->add_option("--tolerance", gc.tolerance, "largest accepted relative error");
  gc_cmd->add_option("--step", gc.step, "central-difference step");

  auto* sim_cmd = app.add_subcommand("simulate", "write the simulated splits as JSON scene files");
  auto* run_cmd = app.add_subcommand("run", "train and evaluate every configured seed");

  std::string param;
  std::string values;
  auto* sweep_cmd = app.add_subcommand("sweep", "sensitivity sweep over lambda1, lambda2 or gamma");
  sweep_cmd->add_option("--param", param, "lambda1 | lambda2 | gamma")->required();
  sweep_cmd->add_option("--values", values, "comma-separated values, each >= 0")->required();

  auto* ablate_cmd = app.add_subcommand("ablate-graph", "none / gaussian / iou graphs, with and without transform");
  auto* config_cmd = app.add_subcommand("config", "print every configuration key with its default");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  if (*seed_opt) g.seed = seed_value;

  try {
    if (*config_cmd) {
      std::cout << gpa::config_reference();
      return 0;
    }
    if (*graph_cmd) {
      std::ifstream in(boxes_path);
      if (!in) throw gpa::config_error("--boxes", "cannot open " + boxes_path);
      const auto boxes = gpa::io::read_boxes_csv(in);
      const auto graph = gpa::build_graph(boxes, {parse_kind(kind), sigma});
      const Eigen::MatrixXd m = normalized ? gpa::normalize(graph) : graph.adjacency;
      std::ostringstream os;
      gpa::io::write_matrix_csv(os, m, gpa::io::fnv1a(std::string("graph ") + kind + " " + std::to_string(sigma)),
                                g.seed.value_or(0));
      emit(g, os.str());
      return 0;
    }
    if (*align_cmd) {
      const auto src = gpa::io::batches_from_json(gpa::io::read_json_file(source_path));
      const auto tgt = gpa::io::batches_from_json(gpa::io::read_json_file(target_path));
      const gpa::GraphSpec spec{parse_kind(kind), sigma};
      std::vector<gpa::RelationGraph> gs;
      std::vector<gpa::RelationGraph> gt;
      for (const auto& b : src) gs.push_back(gpa::build_graph(b.boxes, spec));
      for (const auto& b : tgt) gt.push_back(gpa::build_graph(b.boxes, spec));
      gpa::AlignmentOptions opts;
      opts.gamma = gamma;
      opts.margin = margin;
      opts.confidence_grad = confidence_grad;
      auto loss = gpa::da_loss_backward(src, gs, tgt, gt, opts);
      auto j = gpa::io::to_json(loss);
      if (!with_grad) {
        j.erase("grad_f_source");
        j.erase("grad_f_target");
        j.erase("grad_p_source");
        j.erase("grad_p_target");
      }
      emit(g, j.dump(2) + "\n");
      return 0;
    }
    if (*gc_cmd) {
      gc.seed = g.seed.value_or(0);
      const auto t0 = std::chrono::steady_clock::now();
      const auto report = gpa::run_gradcheck(gc);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::ostringstream os;
      os << "alignment-loss trials: " << report.loss_trials.size() << ", max relative error "
         << report.max_loss_error() << "\n"
         << "objective trials: " << report.objective_trials.size() << ", max relative error "
         << report.max_objective_error() << "\n"
         << "tolerance " << gc.tolerance << ", " << secs << " s, " << (report.passed() ? "PASS" : "FAIL") << "\n";
      std::cout << os.str();
      if (!g.out.empty()) {
        gpa::io::json j;
        j["tolerance"] = gc.tolerance;
        j["seed"] = gc.seed;
        j["max_loss_error"] = report.max_loss_error();
        j["max_objective_error"] = report.max_objective_error();
        j["passed"] = report.passed();
        gpa::io::json trials = gpa::io::json::array();
        for (const auto* set : {&report.loss_trials, &report.objective_trials})
          for (const auto& t : *set)
            trials.push_back({{"kind", set == &report.loss_trials ? "loss" : "objective"},
                              {"index", t.index},
                              {"graph", gpa::to_string(t.kind)},
                              {"confidence_grad", t.confidence_grad},
                              {"transform", t.transform},
                              {"classes", t.classes},
                              {"dim", t.dim},
                              {"coordinates", t.coordinates},
                              {"redraws", t.redraws},
                              {"relative_error", t.relative_error}});
        j["trials"] = trials;
        gpa::io::write_text_file(g.out, j.dump(2) + "\n");
      }
      return report.passed() ? 0 : 1;
    }
    if (*sim_cmd) {
      const auto cfg = load(g);
      const auto dir = require_out_dir(g, "simulate");
      gpa::write_dataset(dir, cfg, single_seed(g, cfg));
      std::cout << "wrote " << dir.string() << "/manifest.json\n";
      return 0;
    }
    if (*run_cmd) {
      const auto cfg = load(g);
      const auto dir = require_out_dir(g, "run");
      std::vector<std::string> violations;
      const auto result = gpa::run_with_artifacts(cfg, dir, &violations);
      const auto t = result.target_accuracy();
      const auto s = result.source_accuracy();
      std::cout << "variant " << gpa::to_string(cfg.variant) << ", seeds " << gpa::seed_list(cfg.seeds) << "\n"
                << "target accuracy " << t.mean << " +- " << t.stddev << ", source accuracy " << s.mean << " +- "
                << s.stddev << "\n";
      return report_violations(violations);
    }
    if (*sweep_cmd) {
      const auto cfg = load(g);
      cfg.validate();
      const auto dir = require_out_dir(g, "sweep");
      gpa::prepare_output_dir(dir);
      const auto sweep = gpa::run_sweep(cfg, gpa::parse_sweep_param(param), parse_values(values));
      std::ostringstream os;
      gpa::write_sweep_csv(os, sweep, gpa::config_hash(cfg), cfg.seeds);
      gpa::io::write_text_file((dir / "sweep.csv").string(), os.str());
      gpa::io::write_text_file((dir / "sweep.svg").string(), gpa::sweep_svg(sweep));
      for (const auto& [v, m] : sweep.means()) std::cout << param << " = " << v << ": target accuracy " << m << "\n";
      return report_violations(sweep.violations);
    }
    if (*ablate_cmd) {
      const auto cfg = load(g);
      cfg.validate();
      const auto dir = require_out_dir(g, "ablate-graph");
      gpa::prepare_output_dir(dir);
      std::vector<std::string> violations;
      const auto rows = gpa::run_graph_ablation(cfg, &violations);
      std::ostringstream os;
      gpa::write_ablation_csv(os, rows, gpa::config_hash(cfg), cfg.seeds);
      gpa::io::write_text_file((dir / "ablation.csv").string(), os.str());
      for (const auto& r : rows)
        std::cout << r.name << ": target accuracy " << r.result.target_accuracy().mean << " +- "
                  << r.result.target_accuracy().stddev << "\n";
      return report_violations(violations);
    }
  } catch (const gpa::config_error& e) {
    std::cerr << "gpa: invalid configuration: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "gpa: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
