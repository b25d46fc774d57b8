#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <fstream>
#include <functional>
#include <nlohmann/json.hpp>
#include <string>
#include <utility>
#include <vector>

#include "fomemo/errors.hpp"

namespace fomemo {

// One evaluated point of an optimization run. Serialized as a single JSONL
// line; the field order below is the wire order.
struct RunRecord {
  std::int64_t iter = 0;         // global record index within the run
  std::string phase;             // "init" or "opt"
  Eigen::VectorXd x;             // native-bounds input
  Eigen::VectorXd y;             // raw objective values
  std::string acq;               // "ei"|"ucb"|"uhvi"|"sobol"|"gp-parego"
  Eigen::VectorXd preference;    // empty means null (no single preference)
  bool has_utility = false;
  double utility = 0.0;
  std::uint64_t seed = 0;        // the run's master seed
  std::uint64_t wall_ms = 0;
};

using RunSink = std::function<void(const RunRecord&)>;

inline nlohmann::ordered_json record_to_json(const RunRecord& r) {
  nlohmann::ordered_json j;
  j["iter"] = r.iter;
  j["phase"] = r.phase;
  j["x"] = std::vector<double>(r.x.data(), r.x.data() + r.x.size());
  j["y"] = std::vector<double>(r.y.data(), r.y.data() + r.y.size());
  j["acq"] = r.acq;
  if (r.preference.size() > 0)
    j["preference"] = std::vector<double>(
        r.preference.data(), r.preference.data() + r.preference.size());
  else
    j["preference"] = nullptr;
  if (r.has_utility)
    j["utility"] = r.utility;
  else
    j["utility"] = nullptr;
  j["seed"] = r.seed;
  j["wall_ms"] = r.wall_ms;
  return j;
}

inline RunRecord record_from_json(const nlohmann::json& j) {
  RunRecord r;
  try {
    r.iter = j.at("iter").get<std::int64_t>();
    r.phase = j.at("phase").get<std::string>();
    const auto xv = j.at("x").get<std::vector<double>>();
    const auto yv = j.at("y").get<std::vector<double>>();
    r.x = Eigen::Map<const Eigen::VectorXd>(xv.data(), xv.size());
    r.y = Eigen::Map<const Eigen::VectorXd>(yv.data(), yv.size());
    r.acq = j.at("acq").get<std::string>();
    if (!j.at("preference").is_null()) {
      const auto pv = j.at("preference").get<std::vector<double>>();
      r.preference = Eigen::Map<const Eigen::VectorXd>(pv.data(), pv.size());
    }
    if (!j.at("utility").is_null()) {
      r.has_utility = true;
      r.utility = j.at("utility").get<double>();
    }
    r.seed = j.at("seed").get<std::uint64_t>();
    r.wall_ms = j.at("wall_ms").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw SerializationError(std::string("run record: ") + e.what());
  }
  if (r.phase != "init" && r.phase != "opt")
    throw SerializationError("run record: phase must be \"init\" or \"opt\"");
  return r;
}

// Append-mode JSONL writer; one line per record, flushed immediately so a
// crashed run keeps its partial log.
class JsonlWriter {
 public:
  explicit JsonlWriter(const std::string& path)
      : path_(path), os_(path, std::ios::out | std::ios::trunc) {
    if (!os_) throw IoError("cannot open for writing: " + path);
  }

  void write(const RunRecord& r) {
    os_ << record_to_json(r).dump() << '\n';
    os_.flush();
    if (!os_) throw IoError("write failed: " + path_);
  }

  RunSink sink() {
    return [this](const RunRecord& r) { write(r); };
  }

 private:
  std::string path_;
  std::ofstream os_;
};

// Reads a whole run file; a malformed line raises SerializationError naming
// file:line.
inline std::vector<RunRecord> read_run_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open run file: " + path);
  std::vector<RunRecord> out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded())
      throw SerializationError(path + ":" + std::to_string(lineno) +
                               ": malformed JSON line");
    try {
      out.push_back(record_from_json(j));
    } catch (const SerializationError& e) {
      throw SerializationError(path + ":" + std::to_string(lineno) + ": " +
                               e.what());
    }
  }
  return out;
}

}  // namespace fomemo
