#pragma once
// Run-archive file formats: JSON weights and optimizer state, JSON-lines
// datasets and acquisition traces, and tidy CSV tables.

#include <nlohmann/json.hpp>

#include <cstdint>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "emunet/acquisition.hpp"
#include "emunet/ensemble.hpp"
#include "emunet/errors.hpp"
#include "emunet/hmc.hpp"
#include "emunet/tensor.hpp"

namespace emunet::io {

using nlohmann::json;
namespace fs = std::filesystem;

/// Shortest round-trip decimal representation.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  for (int prec = 15; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

inline json to_json(const Vector& v) { return json(std::vector<double>(v.data(), v.data() + v.size())); }
inline Vector vector_from_json(const json& j) {
  const auto vals = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(vals.data(), static_cast<Eigen::Index>(vals.size()));
}

/// {"shapes": [[rows, cols], ...], "values": [row-major entries of every tensor]}
inline json to_json(const ParameterSet& p) {
  json shapes = json::array();
  std::vector<double> values;
  values.reserve(static_cast<std::size_t>(p.count()));
  for (const auto& t : p.tensors) {
    shapes.push_back({t.rows(), t.cols()});
    for (Eigen::Index i = 0; i < t.rows(); ++i)
      for (Eigen::Index j = 0; j < t.cols(); ++j) values.push_back(t(i, j));
  }
  return {{"shapes", shapes}, {"values", values}};
}

inline ParameterSet parameters_from_json(const json& j) {
  ParameterSet p;
  const auto values = j.at("values").get<std::vector<double>>();
  std::size_t k = 0;
  for (const auto& s : j.at("shapes")) {
    Matrix t(s.at(0).get<Eigen::Index>(), s.at(1).get<Eigen::Index>());
    for (Eigen::Index r = 0; r < t.rows(); ++r)
      for (Eigen::Index c = 0; c < t.cols(); ++c) {
        if (k >= values.size()) throw DimensionError("weights: fewer values than the shapes require");
        t(r, c) = values[k++];
      }
    p.tensors.push_back(std::move(t));
  }
  if (k != values.size()) throw DimensionError("weights: more values than the shapes require");
  return p;
}

inline json to_json(const Mlp& net) {
  return {{"input_dim", net.input_dim},       {"hidden", net.hidden},
          {"output_dim", net.output_dim},     {"activation", to_string(net.activation)},
          {"input_scale", to_json(Vector(net.input_scale.diagonal()))},
          {"input_shift", to_json(Vector(net.input_shift.col(0)))}};
}

inline Mlp mlp_from_json(const json& j) {
  Mlp net(j.at("input_dim").get<int>(), j.at("hidden").get<std::vector<int>>(), j.at("output_dim").get<int>(),
          activation_from_string(j.at("activation").get<std::string>()));
  net.input_scale = vector_from_json(j.at("input_scale")).asDiagonal();
  net.input_shift = vector_from_json(j.at("input_shift"));
  return net;
}

inline json to_json(const HeadSpec& h) {
  return {{"kind", to_string(h.kind)}, {"dim", h.dim}, {"trials", h.trials}, {"classes", h.classes}};
}
inline HeadSpec head_from_json(const json& j) {
  return {head_kind_from_string(j.at("kind").get<std::string>()), j.at("dim").get<int>(), j.at("trials").get<int>(),
          j.at("classes").get<int>()};
}

/// Ensemble weights; with `with_optimizer` also the Adam moments so that
/// training can continue bit-identically.
inline json to_json(const Ensemble& e, bool with_optimizer) {
  json members = json::array();
  for (const auto& m : e.members()) {
    json jm{{"weights", to_json(m.weights)}};
    if (with_optimizer)
      jm["adam"] = {{"m", to_json(m.optimizer.m)}, {"v", to_json(m.optimizer.v)}, {"step", m.optimizer.step}};
    members.push_back(std::move(jm));
  }
  return {{"net", to_json(e.net())}, {"head", to_json(e.head())}, {"seed", e.seed()}, {"members", members}};
}

inline Ensemble ensemble_from_json(const json& j, EnsembleConfig cfg) {
  std::vector<Member> members;
  for (const auto& jm : j.at("members")) {
    Member m;
    m.weights = parameters_from_json(jm.at("weights"));
    if (jm.contains("adam")) {
      m.optimizer.m = parameters_from_json(jm.at("adam").at("m"));
      m.optimizer.v = parameters_from_json(jm.at("adam").at("v"));
      m.optimizer.step = jm.at("adam").at("step").get<long>();
    } else {
      m.optimizer = AdamState::for_params(m.weights);
    }
    members.push_back(std::move(m));
  }
  return Ensemble(mlp_from_json(j.at("net")), head_from_json(j.at("head")), std::move(cfg),
                  j.at("seed").get<std::uint64_t>(), std::move(members));
}

// ---------------------------------------------------------------------------

inline json to_json(const Record& r) { return {{"round", r.round}, {"theta", to_json(r.theta)}, {"x", to_json(r.x)}}; }

inline Record record_from_json(const json& j) {
  return {j.at("round").get<int>(), vector_from_json(j.at("theta")), vector_from_json(j.at("x"))};
}

inline std::string to_jsonl(const Record& r) { return to_json(r).dump() + "\n"; }

inline void write_dataset(const fs::path& path, const Dataset& d) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& r : d.records()) out << to_jsonl(r);
}

inline Dataset read_dataset(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  Dataset d;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) d.add(record_from_json(json::parse(line)));
  return d;
}

inline std::string to_jsonl(int round, const AcquisitionResult& a) {
  json j{{"round", round},
         {"rule", to_string(a.rule)},
         {"theta", to_json(a.theta)},
         {"objective", a.objective ? json(*a.objective) : json(nullptr)},
         {"n_restarts", a.restarts.size()},
         {"fallback", a.fallback}};
  return j.dump() + "\n";
}

// ---------------------------------------------------------------------------

/// Columns: member, sample_index, theta_1..theta_p.
inline void write_posterior_csv(const fs::path& path, const PosteriorSampleSet& set) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  const Eigen::Index p = set.chains.empty() ? 0 : set.chains[0].samples.rows();
  out << "member,sample_index";
  for (Eigen::Index i = 0; i < p; ++i) out << ",theta_" << (i + 1);
  out << "\n";
  for (const auto& c : set.chains) {
    for (Eigen::Index j = 0; j < c.samples.cols(); ++j) {
      out << c.member << "," << j;
      for (Eigen::Index i = 0; i < p; ++i) out << "," << format_double(c.samples(i, j));
      out << "\n";
    }
  }
}

/// Returns (member tags, samples p x n).
inline std::pair<std::vector<int>, Matrix> read_posterior_csv(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  std::vector<int> members;
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> vals;
    std::getline(ss, cell, ',');
    members.push_back(std::stoi(cell));
    std::getline(ss, cell, ',');
    while (std::getline(ss, cell, ',')) vals.push_back(std::stod(cell));
    rows.push_back(std::move(vals));
  }
  Matrix m(rows.empty() ? 0 : static_cast<Eigen::Index>(rows[0].size()), static_cast<Eigen::Index>(rows.size()));
  for (std::size_t j = 0; j < rows.size(); ++j)
    for (std::size_t i = 0; i < rows[j].size(); ++i) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[j][i];
  return {members, m};
}

inline constexpr const char* kMetricsHeader = "run_id,rule,round,metric,value\n";

inline std::string metric_row(const std::string& run_id, const std::string& rule, int round, const std::string& metric,
                              double value) {
  return run_id + "," + rule + "," + std::to_string(round) + "," + metric + "," + format_double(value) + "\n";
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << content;
}

inline void append_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::app);
  if (!out) throw std::runtime_error("cannot append to " + path.string());
  out << content;
}

/// FNV-1a, used to fingerprint configs and constant files.
inline std::uint64_t fingerprint(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}


// ---------------------------------------------------------------------------
// Binary checkpoint: the JSON header carries the architecture, the sidecar
// holds raw doubles (weights, Adam m, Adam v per member) and Adam step counts.

inline json checkpoint_header(const Ensemble& e) {
  json shapes = json::array();
  if (!e.members().empty())
    for (const auto& t : e.members()[0].weights.tensors) shapes.push_back({t.rows(), t.cols()});
  return {{"net", to_json(e.net())}, {"head", to_json(e.head())}, {"seed", e.seed()}, {"members", e.size()},
          {"shapes", shapes}};
}

inline std::string ensemble_bytes(const Ensemble& e) {
  std::string out;
  auto put = [&](const void* p, std::size_t n) { out.append(static_cast<const char*>(p), n); };
  for (const auto& m : e.members()) {
    for (const ParameterSet* ps : {&m.weights, &m.optimizer.m, &m.optimizer.v})
      for (const auto& t : ps->tensors) put(t.data(), sizeof(double) * static_cast<std::size_t>(t.size()));
    const std::int64_t step = m.optimizer.step;
    put(&step, sizeof step);
  }
  return out;
}

inline Ensemble ensemble_from_bytes(const json& header, const std::string& bytes, EnsembleConfig cfg) {
  std::vector<std::pair<Eigen::Index, Eigen::Index>> shapes;
  for (const auto& s : header.at("shapes")) shapes.emplace_back(s.at(0).get<Eigen::Index>(), s.at(1).get<Eigen::Index>());
  std::size_t pos = 0;
  auto take = [&](void* p, std::size_t n) {
    if (pos + n > bytes.size()) throw DimensionError("checkpoint: truncated ensemble data");
    std::memcpy(p, bytes.data() + pos, n);
    pos += n;
  };
  std::vector<Member> members(header.at("members").get<std::size_t>());
  for (auto& m : members) {
    for (ParameterSet* ps : {&m.weights, &m.optimizer.m, &m.optimizer.v})
      for (const auto& [r, c] : shapes) {
        Matrix t(r, c);
        take(t.data(), sizeof(double) * static_cast<std::size_t>(t.size()));
        ps->tensors.push_back(std::move(t));
      }
    std::int64_t step = 0;
    take(&step, sizeof step);
    m.optimizer.step = static_cast<long>(step);
  }
  if (pos != bytes.size()) throw DimensionError("checkpoint: trailing ensemble data");
  return Ensemble(mlp_from_json(header.at("net")), head_from_json(header.at("head")), std::move(cfg),
                  header.at("seed").get<std::uint64_t>(), std::move(members));
}

/// Writes via a temporary file and rename, so readers never see a torn file.
inline void write_file_atomic(const fs::path& path, const std::string& content) {
  fs::path tmp = path;
  tmp += ".tmp";
  write_file(tmp, content);
  fs::rename(tmp, path);
}

}  // namespace emunet::io
