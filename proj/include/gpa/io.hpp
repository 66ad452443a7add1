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
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "gpa/alignment_loss.hpp"
#include "gpa/error.hpp"
#include "gpa/geometry.hpp"
#include "gpa/prototype.hpp"
#include "gpa/relation_graph.hpp"
#include "gpa/simulator.hpp"

namespace gpa::io {

using json = nlohmann::json;

// 17 significant digits: round-trips every double.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// 64-bit FNV-1a, used to fingerprint configurations in manifests.
inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string manifest_line(std::uint64_t config_hash, std::string_view seeds) {
  return "# config_hash=" + hex64(config_hash) + " seed=" + std::string(seeds);
}

inline std::string manifest_line(std::uint64_t config_hash, std::uint64_t seed) {
  return manifest_line(config_hash, std::to_string(seed));
}

class CsvWriter {
 public:
  CsvWriter(std::ostream& out, std::uint64_t config_hash, std::uint64_t seed, const std::vector<std::string>& header)
      : CsvWriter(out, config_hash, std::to_string(seed), header) {}

  CsvWriter(std::ostream& out, std::uint64_t config_hash, std::string_view seeds,
            const std::vector<std::string>& header)
      : out_(out) {
    out_ << manifest_line(config_hash, seeds) << '\n';
    row_strings(header);
  }

  void row(const std::vector<double>& cells) {
    std::vector<std::string> text;
    text.reserve(cells.size());
    for (double v : cells) text.push_back(format_double(v));
    row_strings(text);
  }

  void row_strings(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) out_ << (i ? "," : "") << cells[i];
    out_ << '\n';
  }

 private:
  std::ostream& out_;
};

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.emplace_back(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

inline bool parse_double(const std::string& s, double& out) {
  if (s.empty()) return false;
  char* end = nullptr;
  out = std::strtod(s.c_str(), &end);
  return end != nullptr && *end == '\0';
}

// Rows of x_min,y_min,x_max,y_max; blank lines, '#' comments and a
// non-numeric header row are skipped.
inline std::vector<BBox> read_boxes_csv(std::istream& in) {
  std::vector<BBox> boxes;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto cells = split(t, ',');
    double v[4];
    bool ok = cells.size() == 4;
    for (std::size_t i = 0; ok && i < 4; ++i) ok = parse_double(trim(cells[i]), v[i]);
    if (!ok) {
      if (boxes.empty() && lineno <= 2) continue;  // header
      throw invalid_input("boxes csv line " + std::to_string(lineno) + ": expected 4 numbers");
    }
    BBox b{v[0], v[1], v[2], v[3]};
    if (!b.valid()) throw invalid_input("boxes csv line " + std::to_string(lineno) + ": min exceeds max");
    boxes.push_back(b);
  }
  return boxes;
}

inline void write_boxes_csv(std::ostream& out, const std::vector<BBox>& boxes) {
  for (const auto& b : boxes)
    out << format_double(b.x_min) << ',' << format_double(b.y_min) << ',' << format_double(b.x_max) << ','
        << format_double(b.y_max) << '\n';
}

inline void write_matrix_csv(std::ostream& out, const Eigen::MatrixXd& m, std::uint64_t config_hash,
                             std::uint64_t seed) {
  std::vector<std::string> header;
  for (Eigen::Index j = 0; j < m.cols(); ++j) header.push_back("c" + std::to_string(j));
  CsvWriter w(out, config_hash, seed, header);
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    std::vector<std::string> cells;
    for (Eigen::Index j = 0; j < m.cols(); ++j) cells.push_back(format_double(m(i, j)));
    w.row_strings(cells);
  }
}

// ---- JSON ----------------------------------------------------------------

inline json to_json(const Eigen::VectorXd& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

inline json to_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json r = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) r.push_back(m(i, j));
    rows.push_back(std::move(r));
  }
  return rows;
}

inline Eigen::VectorXd vector_from_json(const json& j) {
  if (!j.is_array()) throw invalid_input("json: expected an array of numbers");
  Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v(static_cast<Eigen::Index>(i)) = j[i].get<double>();
  return v;
}

inline Eigen::MatrixXd matrix_from_json(const json& j, Eigen::Index cols_if_empty = 0) {
  if (!j.is_array()) throw invalid_input("json: expected an array of rows");
  if (j.empty()) return Eigen::MatrixXd(0, cols_if_empty);
  const auto cols = static_cast<Eigen::Index>(j[0].size());
  Eigen::MatrixXd m(static_cast<Eigen::Index>(j.size()), cols);
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_array() || static_cast<Eigen::Index>(j[i].size()) != cols)
      throw invalid_input("json: ragged matrix at row " + std::to_string(i));
    for (Eigen::Index c = 0; c < cols; ++c) m(static_cast<Eigen::Index>(i), c) = j[i][static_cast<std::size_t>(c)].get<double>();
  }
  return m;
}

inline json to_json(const BBox& b) { return json::array({b.x_min, b.y_min, b.x_max, b.y_max}); }

inline BBox box_from_json(const json& j) {
  if (!j.is_array() || j.size() != 4) throw invalid_input("json: a box is [x_min, y_min, x_max, y_max]");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
}

inline json to_json(const ProposalBatch& b) {
  json boxes = json::array();
  for (const auto& x : b.boxes) boxes.push_back(to_json(x));
  return {{"stage", to_string(b.stage)},
          {"boxes", std::move(boxes)},
          {"features", to_json(b.features)},
          {"confidences", to_json(b.confidences)}};
}

inline ProposalBatch batch_from_json(const json& j) {
  try {
    ProposalBatch b;
    const std::string stage = j.value("stage", std::string("rcnn"));
    if (stage == "rpn")
      b.stage = Stage::rpn;
    else if (stage == "rcnn")
      b.stage = Stage::rcnn;
    else
      throw invalid_input("json: stage must be \"rpn\" or \"rcnn\"");
    for (const auto& x : j.at("boxes")) b.boxes.push_back(box_from_json(x));
    b.features = matrix_from_json(j.at("features"));
    b.confidences = matrix_from_json(j.at("confidences"));
    b.validate();
    return b;
  } catch (const json::exception& e) {
    throw invalid_input(std::string("json: malformed proposal batch: ") + e.what());
  }
}

// Accepts one batch object, an array of batches, or {"scenes": [...]}.
inline std::vector<ProposalBatch> batches_from_json(const json& j) {
  std::vector<ProposalBatch> out;
  const json* list = &j;
  if (j.is_object() && j.contains("scenes")) list = &j.at("scenes");
  if (list->is_array()) {
    for (const auto& b : *list) out.push_back(batch_from_json(b));
  } else {
    out.push_back(batch_from_json(*list));
  }
  if (out.empty()) throw invalid_input("json: no proposal batches");
  return out;
}

inline json to_json(const PrototypeSet& p) {
  json items = json::array();
  for (Eigen::Index k = 0; k < p.num_classes(); ++k) {
    Eigen::VectorXd v = p.vectors.row(k).transpose();
    items.push_back({{"class_id", k},
                     {"present", static_cast<bool>(p.present[static_cast<std::size_t>(k)])},
                     {"weight", k < p.weights.size() ? p.weights(k) : 0.0},
                     {"vector", to_json(v)}});
  }
  return {{"domain", to_string(p.domain)}, {"prototypes", std::move(items)}};
}

inline PrototypeSet prototypes_from_json(const json& j) {
  PrototypeSet p;
  p.domain = j.value("domain", std::string("source")) == "target" ? Domain::target : Domain::source;
  const auto& items = j.at("prototypes");
  const auto c = static_cast<Eigen::Index>(items.size());
  const auto d = c > 0 ? static_cast<Eigen::Index>(items[0].at("vector").size()) : 0;
  p.vectors = Eigen::MatrixXd::Zero(c, d);
  p.weights = Eigen::VectorXd::Zero(c);
  p.mass = Eigen::VectorXd::Zero(c);
  p.present.assign(static_cast<std::size_t>(c), false);
  for (const auto& it : items) {
    const auto k = it.at("class_id").get<Eigen::Index>();
    if (k < 0 || k >= c) throw invalid_input("json: class_id out of range");
    p.present[static_cast<std::size_t>(k)] = it.at("present").get<bool>();
    p.weights(k) = it.at("weight").get<double>();
    p.vectors.row(k) = vector_from_json(it.at("vector")).transpose();
  }
  return p;
}

inline json to_json(const AlignmentLoss& l) {
  json j = {{"intra", l.intra},       {"inter_ss", l.inter_ss}, {"inter_st", l.inter_st},
            {"inter_tt", l.inter_tt}, {"total", l.total},       {"grad_f_source", to_json(l.grad_f_source)},
            {"grad_f_target", to_json(l.grad_f_target)}};
  if (l.grad_p_source.size() > 0 && l.grad_p_source.cwiseAbs().maxCoeff() > 0.0) {
    j["grad_p_source"] = to_json(l.grad_p_source);
    j["grad_p_target"] = to_json(l.grad_p_target);
  }
  j["source_prototypes"] = to_json(l.source);
  j["target_prototypes"] = to_json(l.target);
  return j;
}

inline json to_json(const Scene& s) {
  json inst = json::array();
  for (const auto& i : s.instances)
    inst.push_back({{"box", to_json(i.box)}, {"class", i.label}, {"mode", i.mode}, {"appearance", to_json(i.appearance)}});
  json props = json::array();
  for (const auto& p : s.proposals)
    props.push_back({{"box", to_json(p.box)}, {"label", p.label}, {"instance", p.instance}, {"feature", to_json(p.feature)}});
  return {{"instances", std::move(inst)}, {"background", to_json(s.background)}, {"proposals", std::move(props)}};
}

inline Scene scene_from_json(const json& j) {
  Scene s;
  for (const auto& i : j.at("instances"))
    s.instances.push_back({box_from_json(i.at("box")), i.at("class").get<int>(), i.at("mode").get<int>(),
                           vector_from_json(i.at("appearance"))});
  s.background = vector_from_json(j.at("background"));
  for (const auto& p : j.at("proposals"))
    s.proposals.push_back({box_from_json(p.at("box")), vector_from_json(p.at("feature")), p.at("label").get<int>(),
                           p.at("instance").get<int>()});
  return s;
}

inline json to_json(const DomainSpec& s) {
  json modes = json::array();
  for (const auto& cls : s.class_modes) {
    json m = json::array();
    for (const auto& v : cls) m.push_back(to_json(v));
    modes.push_back(std::move(m));
  }
  return {{"raw_dim", s.raw_dim},
          {"class_modes", std::move(modes)},
          {"mode_scale", s.mode_scale},
          {"background_mean", to_json(s.background_mean)},
          {"background_scale", s.background_scale},
          {"shift_rotation", to_json(s.shift.rotation)},
          {"shift_offset", to_json(s.shift.offset)},
          {"class_frequencies", s.class_frequencies},
          {"extent", s.extent},
          {"instances", {s.instances_min, s.instances_max}},
          {"proposals", {s.proposals_min, s.proposals_max}},
          {"background_proposals", {s.background_min, s.background_max}},
          {"size", {s.size_min, s.size_max}},
          {"jitter", s.jitter},
          {"noise", s.noise},
          {"background_max_iou", s.background_max_iou}};
}

inline DomainSpec domain_spec_from_json(const json& j) {
  DomainSpec s;
  s.raw_dim = j.at("raw_dim").get<Eigen::Index>();
  for (const auto& cls : j.at("class_modes")) {
    std::vector<Eigen::VectorXd> modes;
    for (const auto& v : cls) modes.push_back(vector_from_json(v));
    s.class_modes.push_back(std::move(modes));
  }
  s.mode_scale = j.at("mode_scale").get<double>();
  s.background_mean = vector_from_json(j.at("background_mean"));
  s.background_scale = j.at("background_scale").get<double>();
  s.shift.rotation = matrix_from_json(j.at("shift_rotation"));
  s.shift.offset = vector_from_json(j.at("shift_offset"));
  s.class_frequencies = j.at("class_frequencies").get<std::vector<double>>();
  s.extent = j.at("extent").get<double>();
  s.instances_min = j.at("instances")[0].get<int>();
  s.instances_max = j.at("instances")[1].get<int>();
  s.proposals_min = j.at("proposals")[0].get<int>();
  s.proposals_max = j.at("proposals")[1].get<int>();
  s.background_min = j.at("background_proposals")[0].get<int>();
  s.background_max = j.at("background_proposals")[1].get<int>();
  s.size_min = j.at("size")[0].get<double>();
  s.size_max = j.at("size")[1].get<double>();
  s.jitter = j.at("jitter").get<double>();
  s.noise = j.at("noise").get<double>();
  s.background_max_iou = j.at("background_max_iou").get<double>();
  s.validate();
  return s;
}

inline json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw invalid_input("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw invalid_input(path + ": " + e.what());
  }
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw invalid_input("cannot write " + path);
  out << text;
  if (!out) throw invalid_input("write failed: " + path);
}

}  // namespace gpa::io
