#pragma once

// Checkpoints, telemetry, evaluation reports and estimation records.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bacon/error.hpp"
#include "bacon/estimate.hpp"
#include "bacon/eval.hpp"
#include "bacon/nn.hpp"
#include "bacon/train.hpp"

namespace bacon {

using Json = nlohmann::json;

/// Writes `contents` to a sibling temp file and renames it into place.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create directory " + path.parent_path().string() + ": " + ec.message());
  }
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + tmp.string());
    os << contents;
    if (!os) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline Json read_json(const std::filesystem::path& path) {
  const std::string text = read_file(path);
  try {
    return Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw IoError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

inline Json to_json(const Vector& v) { return Json(std::vector<double>(v.data(), v.data() + v.size())); }

inline Vector vector_from_json(const Json& j) {
  const auto values = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(values.data(), static_cast<Eigen::Index>(values.size()));
}

inline Json optional_json(const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); }

// ---------------------------------------------------------------------------
// Checkpoints.

inline Json model_config_json(const ModelConfig& c) {
  return {{"d_in", c.d_in},       {"d_hidden", c.d_hidden}, {"d_feat", c.d_feat},
          {"proj_hidden", c.proj_hidden}, {"d_proj", c.d_proj},   {"num_classes", c.num_classes},
          {"classifier_scale", c.classifier_scale}};
}

inline ModelConfig model_config_from_json(const Json& j) {
  ModelConfig c;
  c.d_in = j.at("d_in").get<int>();
  c.d_hidden = j.at("d_hidden").get<int>();
  c.d_feat = j.at("d_feat").get<int>();
  c.proj_hidden = j.at("proj_hidden").get<int>();
  c.d_proj = j.at("d_proj").get<int>();
  c.num_classes = j.at("num_classes").get<int>();
  c.classifier_scale = j.at("classifier_scale").get<double>();
  return c;
}

inline Json tensors_json(const Model& m) {
  Json arr = Json::array();
  for_each_tensor(m, [&](const std::string& name, Block, const auto& t) {
    // Row-major data.
    std::vector<double> data;
    data.reserve(static_cast<std::size_t>(t.size()));
    for (Eigen::Index r = 0; r < t.rows(); ++r)
      for (Eigen::Index c = 0; c < t.cols(); ++c) data.push_back(t(r, c));
    arr.push_back({{"name", name}, {"shape", {t.rows(), t.cols()}}, {"data", data}});
  });
  return arr;
}

// Fills `m` (already shaped) from a tensor list, rejecting any shape mismatch.
inline void load_tensors(Model& m, const Json& arr) {
  std::size_t k = 0;
  for_each_tensor(m, [&](const std::string& name, Block, auto& t) {
    if (k >= arr.size()) throw InvalidArgument("checkpoint: missing tensor " + name);
    const Json& e = arr.at(k++);
    if (e.at("name").get<std::string>() != name)
      throw InvalidArgument("checkpoint: expected tensor " + name + ", found " + e.at("name").get<std::string>());
    const auto shape = e.at("shape").get<std::vector<Eigen::Index>>();
    if (shape.size() != 2 || shape[0] != t.rows() || shape[1] != t.cols())
      throw InvalidArgument("checkpoint: shape mismatch for " + name + ": expected [" + std::to_string(t.rows()) +
                            "," + std::to_string(t.cols()) + "]");
    const auto data = e.at("data").get<std::vector<double>>();
    if (static_cast<Eigen::Index>(data.size()) != t.size())
      throw InvalidArgument("checkpoint: data size mismatch for " + name);
    std::size_t i = 0;
    for (Eigen::Index r = 0; r < t.rows(); ++r)
      for (Eigen::Index c = 0; c < t.cols(); ++c) t(r, c) = data[i++];
  });
  if (k != arr.size()) throw InvalidArgument("checkpoint: unexpected extra tensors");
}

struct Checkpoint {
  ModelConfig model_config;
  TrainState state;
  std::string config_hash;
  Json config;  // effective experiment config
};

inline std::string hash_hex(std::uint64_t h) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

inline Json checkpoint_json(const ModelConfig& mc, const TrainState& s, const Json& config) {
  Json j;
  j["format"] = "bacon-checkpoint";
  j["version"] = 1;
  j["config_hash"] = hash_hex(fnv1a(config.dump()));
  j["config"] = config;
  j["model"] = model_config_json(mc);
  j["tensors"] = tensors_json(s.model);
  j["state"] = {{"epoch", s.epoch},
                {"pi_e", to_json(s.pi_e)},
                {"cls_velocity", tensors_json(s.cls_velocity)},
                {"con_velocity", tensors_json(s.con_velocity)}};
  return j;
}

inline void save_checkpoint(const std::filesystem::path& path, const ModelConfig& mc, const TrainState& s,
                            const Json& config) {
  write_file_atomic(path, checkpoint_json(mc, s, config).dump() + "\n");
}

/// Loads a checkpoint. When `expected` is given, the stored model config must
/// match it.
inline Checkpoint load_checkpoint(const std::filesystem::path& path,
                                  const std::optional<ModelConfig>& expected = std::nullopt) {
  const Json j = read_json(path);
  try {
    if (j.at("format") != "bacon-checkpoint") throw InvalidArgument("not a checkpoint: " + path.string());
    Checkpoint c;
    c.model_config = model_config_from_json(j.at("model"));
    if (expected) {
      const auto a = model_config_json(*expected), b = model_config_json(c.model_config);
      if (a != b) throw InvalidArgument("checkpoint: model shape " + b.dump() + " does not match " + a.dump());
    }
    c.state.model = init_model(c.model_config, 0);
    load_tensors(c.state.model, j.at("tensors"));
    c.state.cls_velocity = zeros_like(c.state.model);
    c.state.con_velocity = zeros_like(c.state.model);
    const Json& st = j.at("state");
    c.state.epoch = st.at("epoch").get<int>();
    c.state.pi_e = vector_from_json(st.at("pi_e"));
    load_tensors(c.state.cls_velocity, st.at("cls_velocity"));
    load_tensors(c.state.con_velocity, st.at("con_velocity"));
    c.config_hash = j.at("config_hash").get<std::string>();
    c.config = j.at("config");
    return c;
  } catch (const Json::exception& e) {
    throw InvalidArgument("malformed checkpoint " + path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Telemetry, one JSON object per epoch.

inline Json telemetry_json(const EpochTelemetry& t) {
  return {{"epoch", t.epoch},         {"lr", t.lr},
          {"L_s", t.l_s},             {"L_u", t.l_u},
          {"L_reg", t.l_reg},         {"L_cls", t.l_cls},
          {"L_CL_u", t.l_cl_u},       {"L_CL_s", t.l_cl_s},
          {"L_CL_soft", t.l_cl_soft}, {"L_con", t.l_con},
          {"estimated", t.estimated}, {"soft_active", t.soft_active},
          {"sampled_fraction", t.sampled_fraction}, {"pi_e", to_json(t.pi_e)}};
}

// ---------------------------------------------------------------------------
// Evaluation reports.

inline Json group_json(const GroupAccuracy& g) {
  return {{"Many", optional_json(g.groups[0])},
          {"Median", optional_json(g.groups[1])},
          {"Few", optional_json(g.groups[2])},
          {"Std", g.std_dev},
          {"members", {g.members[0], g.members[1], g.members[2]}}};
}

inline Json report_json(const EvalReport& r) {
  return {{"All", r.acc_all},
          {"Old", optional_json(r.acc_old)},
          {"New", optional_json(r.acc_new)},
          {"known_groups", group_json(r.known)},
          {"novel_groups", group_json(r.novel)},
          {"per_class_acc", r.per_class_acc},
          {"per_class_count", r.per_class_count},
          {"assignment", r.assignment},
          {"num_known", r.num_known},
          {"num_classes", r.num_classes},
          {"warnings", r.warnings}};
}

inline const std::vector<std::string>& report_csv_columns() {
  static const std::vector<std::string> cols = {"Old",      "New",     "All",     "Many_Old", "Med_Old",
                                                "Few_Old",  "Std_Old", "Many_New", "Med_New", "Few_New",
                                                "Std_New"};
  return cols;
}

inline std::vector<std::optional<double>> report_row(const EvalReport& r) {
  return {r.acc_old,         r.acc_new,         r.acc_all,         r.known.groups[0], r.known.groups[1],
          r.known.groups[2], r.known.std_dev,   r.novel.groups[0], r.novel.groups[1], r.novel.groups[2],
          r.novel.std_dev};
}

inline std::string format_cell(const std::optional<double>& v) {
  if (!v) return "";
  std::ostringstream os;
  os << std::setprecision(std::numeric_limits<double>::max_digits10) << *v;
  return os.str();
}

/// Header plus one row; `key` labels the row (e.g. the seed or variant).
inline std::string report_csv(const std::string& key_name, const std::string& key, const EvalReport& r) {
  std::ostringstream os;
  os << key_name;
  for (const auto& c : report_csv_columns()) os << ',' << c;
  os << '\n' << key;
  for (const auto& v : report_row(r)) os << ',' << format_cell(v);
  os << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Estimation diagnostics.

inline Json estimation_json(const EstimationRound& r) {
  return {{"assignments", r.clusters.assignments},
          {"cluster_freq", to_json(r.by_cluster.freq)},
          {"cluster_to_class", r.map.cluster_to_class},
          {"pi_e", to_json(r.aligned.freq)},
          {"pi_e_floored", to_json(r.floored.freq)},
          {"inertia", r.clusters.inertia},
          {"iterations", r.clusters.iterations}};
}

}  // namespace bacon
