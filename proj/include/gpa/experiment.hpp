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

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "gpa/error.hpp"
#include "gpa/io.hpp"
#include "gpa/relation_graph.hpp"
#include "gpa/simulator.hpp"
#include "gpa/trainer.hpp"

namespace gpa {

enum class Variant { source_only, rpn_align, rcnn_align, two_stage };

inline const char* to_string(Variant v) {
  switch (v) {
    case Variant::source_only: return "source-only";
    case Variant::rpn_align: return "rpn-align";
    case Variant::rcnn_align: return "rcnn-align";
    case Variant::two_stage: return "two-stage";
  }
  return "?";
}

struct ModelConfig {
  int hidden = 16;
  int embed_dim = 8;
  double init_scale = 1.0;
};

struct ExperimentConfig {
  SimConfig sim;
  TrainConfig train;
  ModelConfig model;
  Variant variant = Variant::two_stage;
  bool sigma_auto = true;  // calibrate the Gaussian bandwidth by sparsity matching
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};

  void validate() const {
    if (seeds.empty()) throw config_error("seeds", "seed list must not be empty");
    for (std::size_t i = 0; i < seeds.size(); ++i)
      for (std::size_t j = i + 1; j < seeds.size(); ++j)
        if (seeds[i] == seeds[j]) throw config_error("seeds", "duplicate seed " + std::to_string(seeds[i]));
    if (model.hidden < 1) throw config_error("model.hidden", "must be >= 1");
    if (model.embed_dim < 1) throw config_error("model.embed_dim", "must be >= 1");
    if (sim.train_scenes < 1) throw config_error("sim.train_scenes", "must be >= 1");
    if (sim.test_scenes < 1) throw config_error("sim.test_scenes", "must be >= 1");
    if (!sim.class_frequencies.empty() &&
        static_cast<int>(sim.class_frequencies.size()) != sim.foreground_classes)
      throw config_error("sim.frequencies", "needs one entry per foreground class");
    const auto require = [](bool ok, const char* key, const char* what) {
      if (!ok) throw config_error(key, what);
    };
    require(sim.raw_dim >= 1, "sim.raw_dim", "must be >= 1");
    require(sim.foreground_classes >= 1, "sim.classes", "must be >= 1");
    require(sim.modes_per_class >= 1, "sim.modes_per_class", "must be >= 1");
    require(sim.class_separation > 0.0, "sim.class_separation", "must be > 0");
    require(sim.mode_scale >= 0.0, "sim.mode_scale", "must be >= 0");
    require(sim.background_overlap >= 0.0 && sim.background_overlap <= 1.0, "sim.background_overlap",
            "must be in [0, 1]");
    require(sim.background_scale >= 0.0, "sim.background_scale", "must be >= 0");
    require(sim.extent > 0.0, "sim.extent", "must be > 0");
    require(sim.instances_min >= 1, "sim.instances_min", "must be >= 1");
    require(sim.instances_max >= sim.instances_min, "sim.instances_max", "must be >= sim.instances_min");
    require(sim.proposals_min >= 1, "sim.proposals_min", "must be >= 1");
    require(sim.proposals_max >= sim.proposals_min, "sim.proposals_max", "must be >= sim.proposals_min");
    require(sim.background_min >= 0, "sim.background_min", "must be >= 0");
    require(sim.background_max >= sim.background_min, "sim.background_max", "must be >= sim.background_min");
    require(sim.size_min > 0.0, "sim.size_min", "must be > 0");
    require(sim.size_max >= sim.size_min, "sim.size_max", "must be >= sim.size_min");
    require(sim.size_max < sim.extent, "sim.size_max", "must be smaller than sim.extent");
    require(sim.jitter >= 0.0, "sim.jitter", "must be >= 0");
    require(sim.noise >= 0.0, "sim.noise", "must be >= 0");
    require(sim.shift_angle >= 0.0, "sim.shift_angle", "must be >= 0");
    require(sim.shift_dims >= 0, "sim.shift_dims", "must be >= 0");
    require(sim.shift_offset >= 0.0, "sim.shift_offset", "must be >= 0");
    if (!sim.class_frequencies.empty()) {
      double total = 0.0;
      for (double f : sim.class_frequencies) {
        require(f > 0.0, "sim.frequencies", "entries must be positive");
        total += f;
      }
      require(std::abs(total - 1.0) <= 1e-9, "sim.frequencies", "entries must sum to 1");
    }
    require(train.lambda1 >= 0.0, "train.lambda1", "must be >= 0");
    require(train.lambda2 >= 0.0, "train.lambda2", "must be >= 0");
    require(train.gamma >= 0.0, "train.gamma", "must be >= 0");
    require(train.margin_rpn > 0.0, "train.margin_rpn", "must be > 0");
    require(train.margin_rcnn > 0.0, "train.margin_rcnn", "must be > 0");
    require(train.learning_rate > 0.0, "train.learning_rate", "must be > 0");
    require(train.momentum >= 0.0 && train.momentum < 1.0, "train.momentum", "must be in [0, 1)");
    require(train.weight_decay >= 0.0, "train.weight_decay", "must be >= 0");
    require(train.epochs >= 1, "train.epochs", "must be >= 1");
    require(train.batch_scenes >= 1, "train.batch_scenes", "must be >= 1");
    require(sigma_auto || train.graph.kind != GraphKind::gaussian || train.graph.sigma > 0.0, "graph.sigma",
            "must be > 0 or 'auto'");
    require(model.init_scale > 0.0, "model.init_scale", "must be > 0");
  }

  // Training configuration for one seed with the variant's lambdas applied.
  TrainConfig train_config(std::uint64_t seed) const {
    TrainConfig t = train;
    t.seed = seed;
    switch (variant) {
      case Variant::source_only: t.lambda1 = 0.0; t.lambda2 = 0.0; break;
      case Variant::rpn_align: t.lambda2 = 0.0; break;
      case Variant::rcnn_align: t.lambda1 = 0.0; break;
      case Variant::two_stage: break;
    }
    return t;
  }
};

// ---- flat key = value configuration --------------------------------------

namespace detail {

struct ConfigKey {
  std::string name;
  std::string doc;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

inline double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  if (!io::parse_double(v, out) || !std::isfinite(out)) throw config_error(key, "invalid number '" + v + "'");
  return out;
}

inline int to_int(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const int out = std::stoi(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw config_error(key, "invalid integer '" + v + "'");
  }
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw config_error(key, "invalid boolean '" + v + "'");
}

inline std::string join_doubles(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + io::format_double(v[i]);
  return s;
}

inline std::string fmt_bool(bool b) { return b ? "true" : "false"; }

inline const std::vector<ConfigKey>& config_keys() {
  using E = ExperimentConfig;
  using S = const std::string&;
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    const auto add_double = [&k](std::string name, std::string doc, auto ref) {
      k.push_back({name, doc, [name, ref](E& c, S v) { ref(c) = to_double(name, v); },
                   [ref](const E& c) { return io::format_double(ref(const_cast<E&>(c))); }});
    };
    const auto add_int = [&k](std::string name, std::string doc, auto ref) {
      k.push_back({name, doc, [name, ref](E& c, S v) { ref(c) = to_int(name, v); },
                   [ref](const E& c) { return std::to_string(ref(const_cast<E&>(c))); }});
    };
    const auto add_bool = [&k](std::string name, std::string doc, auto ref) {
      k.push_back({name, doc, [name, ref](E& c, S v) { ref(c) = to_bool(name, v); },
                   [ref](const E& c) { return fmt_bool(ref(const_cast<E&>(c))); }});
    };

    k.push_back({"seeds", "comma-separated list of run seeds",
                 [](E& c, S v) {
                   c.seeds.clear();
                   for (const auto& s : io::split(v, ',')) {
                     const std::string t = io::trim(s);
                     try {
                       std::size_t pos = 0;
                       c.seeds.push_back(std::stoull(t, &pos));
                       if (pos != t.size()) throw std::invalid_argument(t);
                     } catch (const std::exception&) {
                       throw config_error("seeds", "invalid seed '" + t + "'");
                     }
                   }
                 },
                 [](const E& c) {
                   std::string s;
                   for (std::size_t i = 0; i < c.seeds.size(); ++i) s += (i ? "," : "") + std::to_string(c.seeds[i]);
                   return s;
                 }});
    k.push_back({"variant", "source-only | rpn-align | rcnn-align | two-stage",
                 [](E& c, S v) {
                   if (v == "source-only") c.variant = Variant::source_only;
                   else if (v == "rpn-align") c.variant = Variant::rpn_align;
                   else if (v == "rcnn-align") c.variant = Variant::rcnn_align;
                   else if (v == "two-stage") c.variant = Variant::two_stage;
                   else throw config_error("variant", "unknown variant '" + v + "'");
                 },
                 [](const E& c) { return std::string(to_string(c.variant)); }});
    k.push_back({"graph.kind", "iou | gaussian | none",
                 [](E& c, S v) {
                   if (v == "iou") c.train.graph.kind = GraphKind::iou;
                   else if (v == "gaussian") c.train.graph.kind = GraphKind::gaussian;
                   else if (v == "none") c.train.graph.kind = GraphKind::identity;
                   else throw config_error("graph.kind", "unknown graph kind '" + v + "'");
                 },
                 [](const E& c) { return std::string(to_string(c.train.graph.kind)); }});
    k.push_back({"graph.sigma", "Gaussian bandwidth, or 'auto' to match IoU-graph sparsity",
                 [](E& c, S v) {
                   if (v == "auto") {
                     c.sigma_auto = true;
                     return;
                   }
                   c.sigma_auto = false;
                   c.train.graph.sigma = to_double("graph.sigma", v);
                   if (!(c.train.graph.sigma > 0.0)) throw config_error("graph.sigma", "must be > 0");
                 },
                 [](const E& c) { return c.sigma_auto ? std::string("auto") : io::format_double(c.train.graph.sigma); }});
    add_bool("graph.learnable_transform", "append a learnable d x d matrix after propagation",
             [](E& c) -> bool& { return c.train.learnable_transform; });

    add_double("train.gamma", "class-balancing exponent", [](E& c) -> double& { return c.train.gamma; });
    add_double("train.margin_rpn", "inter-class margin, stage 1", [](E& c) -> double& { return c.train.margin_rpn; });
    add_double("train.margin_rcnn", "inter-class margin, stage 2", [](E& c) -> double& { return c.train.margin_rcnn; });
    add_double("train.lambda1", "weight of stage-1 alignment", [](E& c) -> double& { return c.train.lambda1; });
    add_double("train.lambda2", "weight of stage-2 alignment", [](E& c) -> double& { return c.train.lambda2; });
    add_double("train.learning_rate", "SGD step size", [](E& c) -> double& { return c.train.learning_rate; });
    add_double("train.momentum", "SGD momentum", [](E& c) -> double& { return c.train.momentum; });
    add_double("train.weight_decay", "L2 penalty", [](E& c) -> double& { return c.train.weight_decay; });
    add_int("train.epochs", "passes over the training split", [](E& c) -> int& { return c.train.epochs; });
    add_int("train.batch_scenes", "scenes per domain per step", [](E& c) -> int& { return c.train.batch_scenes; });
    add_bool("train.confidence_grad", "differentiate through merge weights",
             [](E& c) -> bool& { return c.train.confidence_grad; });
    add_bool("train.normalize_prototypes", "compare unit-norm prototypes",
             [](E& c) -> bool& { return c.train.normalize_prototypes; });

    add_int("model.hidden", "extractor hidden width", [](E& c) -> int& { return c.model.hidden; });
    add_int("model.embed_dim", "embedding dimension d", [](E& c) -> int& { return c.model.embed_dim; });
    add_double("model.init_scale", "weight init scale", [](E& c) -> double& { return c.model.init_scale; });

    add_int("sim.raw_dim", "appearance space dimension", [](E& c) -> int& { return c.sim.raw_dim; });
    add_int("sim.classes", "foreground classes", [](E& c) -> int& { return c.sim.foreground_classes; });
    add_int("sim.modes_per_class", "appearance modes per class", [](E& c) -> int& { return c.sim.modes_per_class; });
    add_double("sim.class_separation", "std of mode means", [](E& c) -> double& { return c.sim.class_separation; });
    add_double("sim.mode_scale", "instance spread around its mode", [](E& c) -> double& { return c.sim.mode_scale; });
    add_double("sim.background_overlap", "pull of background mean toward foreground",
               [](E& c) -> double& { return c.sim.background_overlap; });
    add_double("sim.background_scale", "per-scene background spread",
               [](E& c) -> double& { return c.sim.background_scale; });
    k.push_back({"sim.frequencies", "foreground class frequencies (empty = uniform)",
                 [](E& c, S v) {
                   c.sim.class_frequencies.clear();
                   if (v.empty()) return;
                   for (const auto& s : io::split(v, ','))
                     c.sim.class_frequencies.push_back(to_double("sim.frequencies", io::trim(s)));
                 },
                 [](const E& c) { return join_doubles(c.sim.class_frequencies); }});
    add_double("sim.extent", "scene side length", [](E& c) -> double& { return c.sim.extent; });
    add_int("sim.instances_min", "instances per scene, lower bound", [](E& c) -> int& { return c.sim.instances_min; });
    add_int("sim.instances_max", "instances per scene, upper bound", [](E& c) -> int& { return c.sim.instances_max; });
    add_int("sim.proposals_min", "proposals per instance, lower bound", [](E& c) -> int& { return c.sim.proposals_min; });
    add_int("sim.proposals_max", "proposals per instance, upper bound", [](E& c) -> int& { return c.sim.proposals_max; });
    add_int("sim.background_min", "background proposals per scene, lower bound",
            [](E& c) -> int& { return c.sim.background_min; });
    add_int("sim.background_max", "background proposals per scene, upper bound",
            [](E& c) -> int& { return c.sim.background_max; });
    add_double("sim.size_min", "smallest box side", [](E& c) -> double& { return c.sim.size_min; });
    add_double("sim.size_max", "largest box side", [](E& c) -> double& { return c.sim.size_max; });
    add_double("sim.jitter", "relative proposal jitter", [](E& c) -> double& { return c.sim.jitter; });
    add_double("sim.noise", "isotropic feature noise", [](E& c) -> double& { return c.sim.noise; });
    add_double("sim.shift_angle", "largest rotation angle of the domain shift",
               [](E& c) -> double& { return c.sim.shift_angle; });
    add_int("sim.shift_dims", "leading dimensions rotated by the shift", [](E& c) -> int& { return c.sim.shift_dims; });
    add_double("sim.shift_offset", "norm of the domain offset", [](E& c) -> double& { return c.sim.shift_offset; });
    add_int("sim.train_scenes", "training scenes per domain", [](E& c) -> int& { return c.sim.train_scenes; });
    add_int("sim.test_scenes", "evaluation scenes per domain", [](E& c) -> int& { return c.sim.test_scenes; });
    return k;
  }();
  return keys;
}

}  // namespace detail

inline void set_config_value(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& k : detail::config_keys()) {
    if (k.name == key) {
      k.set(cfg, value);
      return;
    }
  }
  throw config_error(key, "unknown configuration key");
}

// Lines of `key = value`; `[section]` prefixes following keys with
// "section."; '#' and ';' start comments.
inline ExperimentConfig parse_config(const std::string& text, ExperimentConfig base = {}) {
  std::istringstream in(text);
  std::string line;
  std::string section;
  std::vector<std::string> seen;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find_first_of("#;");
    const std::string t = io::trim(hash == std::string::npos ? line : line.substr(0, hash));
    if (t.empty()) continue;
    if (t.front() == '[') {
      if (t.back() != ']') throw config_error("line " + std::to_string(lineno), "unterminated section header");
      section = io::trim(t.substr(1, t.size() - 2));
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw config_error("line " + std::to_string(lineno), "expected key = value");
    std::string key = io::trim(t.substr(0, eq));
    if (!section.empty()) key = section + "." + key;
    if (std::find(seen.begin(), seen.end(), key) != seen.end()) throw config_error(key, "duplicate key");
    seen.push_back(key);
    set_config_value(base, key, io::trim(t.substr(eq + 1)));
  }
  base.validate();
  return base;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw config_error("--config", "cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

// Every key with its current value, in a fixed order.
inline std::string canonical_config(const ExperimentConfig& cfg) {
  std::string out;
  for (const auto& k : detail::config_keys()) out += k.name + " = " + k.get(cfg) + "\n";
  return out;
}

inline std::string config_reference() {
  const ExperimentConfig defaults;
  std::string out;
  for (const auto& k : detail::config_keys()) out += k.name + " = " + k.get(defaults) + "    # " + k.doc + "\n";
  return out;
}

inline std::uint64_t config_hash(const ExperimentConfig& cfg) { return io::fnv1a(canonical_config(cfg)); }

inline io::json config_to_json(const ExperimentConfig& cfg) {
  io::json j = io::json::object();
  for (const auto& k : detail::config_keys()) j[k.name] = k.get(cfg);
  return j;
}

inline ExperimentConfig config_from_json(const io::json& j) {
  ExperimentConfig cfg;
  for (const auto& [key, value] : j.items()) set_config_value(cfg, key, value.get<std::string>());
  cfg.validate();
  return cfg;
}

// ---- datasets -------------------------------------------------------------

struct Dataset {
  DomainPair domains;
  std::vector<Scene> source_train;
  std::vector<Scene> target_train;
  std::vector<Scene> source_test;
  std::vector<Scene> target_test;
};

inline std::uint64_t derived_seed(std::uint64_t seed, std::uint64_t purpose) {
  auto rng = experiment_stream(seed, purpose);
  return rng();
}

inline Dataset make_dataset(const SimConfig& sim, std::uint64_t seed) {
  Dataset d{make_domain_pair(sim, seed), {}, {}, {}, {}};
  d.source_train = generate_split(d.domains.source, sim.train_scenes, derived_seed(seed, 10));
  d.target_train = generate_split(d.domains.target, sim.train_scenes, derived_seed(seed, 11));
  d.source_test = generate_split(d.domains.source, sim.test_scenes, derived_seed(seed, 12));
  d.target_test = generate_split(d.domains.target, sim.test_scenes, derived_seed(seed, 13));
  return d;
}

inline GraphSpec resolve_graph(const ExperimentConfig& cfg, const Dataset& data) {
  GraphSpec g = cfg.train.graph;
  if (g.kind == GraphKind::gaussian && cfg.sigma_auto) {
    std::vector<std::vector<BBox>> boxes;
    for (const auto& s : data.source_train) boxes.push_back(s.boxes());
    for (const auto& s : data.target_train) boxes.push_back(s.boxes());
    g.sigma = calibrate_sigma(boxes).sigma;
  }
  return g;
}

// ---- runs -----------------------------------------------------------------

struct RunResult {
  std::uint64_t seed = 0;
  double sigma = 0.0;
  std::vector<EpochRecord> history;
  const EpochRecord& final_epoch() const { return history.back(); }
  double target_accuracy() const { return final_epoch().metrics.target.accuracy; }
  double source_accuracy() const { return final_epoch().metrics.source.accuracy; }
  // Accuracy on the rarest foreground class (by frequency), or the last class.
  double minority_accuracy = 0.0;
};

struct Stat {
  double mean = 0.0;
  double stddev = 0.0;
};

inline Stat mean_std(const std::vector<double>& v) {
  Stat s;
  if (v.empty()) return s;
  for (double x : v) s.mean += x;
  s.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    for (double x : v) s.stddev += (x - s.mean) * (x - s.mean);
    s.stddev = std::sqrt(s.stddev / static_cast<double>(v.size() - 1));
  }
  return s;
}

struct ExperimentResult {
  std::vector<RunResult> runs;
  std::uint64_t config_hash = 0;
  Stat target_accuracy() const {
    std::vector<double> v;
    for (const auto& r : runs) v.push_back(r.target_accuracy());
    return mean_std(v);
  }
  Stat source_accuracy() const {
    std::vector<double> v;
    for (const auto& r : runs) v.push_back(r.source_accuracy());
    return mean_std(v);
  }
  Stat minority_accuracy() const {
    std::vector<double> v;
    for (const auto& r : runs) v.push_back(r.minority_accuracy);
    return mean_std(v);
  }
};

inline int rarest_class(const SimConfig& sim) {
  if (sim.class_frequencies.empty()) return sim.foreground_classes;
  int best = 0;
  for (int k = 1; k < static_cast<int>(sim.class_frequencies.size()); ++k)
    if (sim.class_frequencies[static_cast<std::size_t>(k)] <= sim.class_frequencies[static_cast<std::size_t>(best)])
      best = k;
  return best + 1;
}

inline RunResult run_seed(const ExperimentConfig& cfg, std::uint64_t seed) {
  const Dataset data = make_dataset(cfg.sim, seed);
  const GraphSpec graph = resolve_graph(cfg, data);
  TrainConfig tc = cfg.train_config(seed);
  tc.graph = graph;
  TrainData td;
  td.source_train = prepare_scenes(data.source_train, graph);
  td.target_train = prepare_scenes(data.target_train, graph);
  td.source_test = prepare_scenes(data.source_test, graph);
  td.target_test = prepare_scenes(data.target_test, graph);
  auto init_rng = experiment_stream(seed, 2);
  ToyModel init = ToyModel::random(cfg.sim.raw_dim, cfg.model.hidden, cfg.model.embed_dim,
                                   cfg.sim.foreground_classes + 1, init_rng, cfg.model.init_scale);
  RunResult r;
  r.seed = seed;
  r.sigma = graph.kind == GraphKind::gaussian ? graph.sigma : 0.0;
  r.history = train(td, std::move(init), tc).history;
  const auto& acc = r.final_epoch().metrics.target.class_accuracy;
  r.minority_accuracy = acc[static_cast<std::size_t>(rarest_class(cfg.sim))];
  return r;
}

inline ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  ExperimentResult out;
  out.config_hash = config_hash(cfg);
  for (auto seed : cfg.seeds) out.runs.push_back(run_seed(cfg, seed));
  return out;
}

}  // namespace gpa
