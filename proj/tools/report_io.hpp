#pragma once

#include "config.hpp"

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <vector>

namespace chivi::cli {

// Fixed formatting so identical runs produce identical bytes.
inline std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string fmt_short(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

inline void write_text(const std::string& path, const std::string& body) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << body;
}

inline void write_trace_csv(const std::string& path,
                            const std::vector<TraceRow>& rows) {
  std::ostringstream os;
  os << "iteration,elbo,cubo,n,samples,elbo_se,cubo_se,grad_norm,"
        "log_scale_correction\n";
  for (const auto& r : rows)
    os << r.iteration << ',' << fmt(r.elbo) << ',' << fmt(r.cubo) << ','
       << fmt(r.n) << ',' << r.samples << ',' << fmt(r.elbo_se) << ','
       << fmt(r.cubo_se) << ',' << fmt(r.grad_norm) << ','
       << fmt(r.log_scale_correction) << '\n';
  write_text(path, os.str());
}

inline void write_gap_trace_csv(const std::string& path,
                                const std::vector<GapRow>& rows) {
  std::ostringstream os;
  os << "iteration,cubo,elbo,gap,joint_se\n";
  for (const auto& r : rows)
    os << r.iteration << ',' << fmt(r.cubo) << ',' << fmt(r.elbo) << ','
       << fmt(r.gap) << ',' << fmt(r.joint_se) << '\n';
  write_text(path, os.str());
}

struct ResultRow {
  std::string dataset;
  std::string method;
  std::string metric;
  double mean = 0.0;
  double std = 0.0;
  int repeats = 1;
};

struct ResultTable {
  std::vector<ResultRow> rows;

  void add(std::string dataset, std::string method, std::string metric,
           const std::vector<double>& values) {
    require(!values.empty(), "ResultTable: need at least one repeat");
    const auto ms = mean_std(values);
    ResultRow r;
    r.dataset = std::move(dataset);
    r.method = std::move(method);
    r.metric = std::move(metric);
    r.mean = ms.mean;
    r.std = values.size() > 1 ? ms.std : 0.0;
    r.repeats = static_cast<int>(values.size());
    rows.push_back(std::move(r));
  }
};

inline std::string table_csv(const ResultTable& t) {
  std::ostringstream os;
  os << "dataset,method,metric,mean,std,repeats\n";
  for (const auto& r : t.rows)
    os << r.dataset << ',' << r.method << ',' << r.metric << ','
       << fmt(r.mean) << ',' << fmt(r.std) << ',' << r.repeats << '\n';
  return os.str();
}

// Same numbers as the CSV, aligned for reading.
inline std::string table_text(const ResultTable& t) {
  std::vector<std::array<std::string, 6>> cells;
  cells.push_back({"dataset", "method", "metric", "mean", "std", "repeats"});
  for (const auto& r : t.rows)
    cells.push_back({r.dataset, r.method, r.metric, fmt(r.mean), fmt(r.std),
                     std::to_string(r.repeats)});
  std::array<std::size_t, 6> width{};
  for (const auto& row : cells)
    for (int c = 0; c < 6; ++c) width[c] = std::max(width[c], row[c].size());
  std::ostringstream os;
  for (const auto& row : cells) {
    for (int c = 0; c < 6; ++c) {
      os << std::left << std::setw(static_cast<int>(width[c])) << row[c];
      os << (c == 5 ? "" : "  ");
    }
    os << '\n';
  }
  return os.str();
}

inline void write_table(const std::string& base, const ResultTable& t) {
  write_text(base + ".csv", table_csv(t));
  write_text(base + ".txt", table_text(t));
}

// Row-major ny x nx grid of values, one CSV row per y index.
inline void write_grid_map_csv(const std::string& path, int nx, int ny,
                               const Vec& values) {
  require(values.size() == nx * ny, "grid map: size mismatch");
  std::ostringstream os;
  for (int y = 0; y < ny; ++y) {
    for (int x = 0; x < nx; ++x)
      os << fmt(values[y * nx + x]) << (x + 1 < nx ? "," : "");
    os << '\n';
  }
  write_text(path, os.str());
}

struct RunMeta {
  json config;
  std::uint64_t seed = 0;
  std::string status = "incomplete";
  std::vector<std::string> warnings;
  std::vector<std::string> notes;
};

inline void write_run_meta(const std::string& dir, const RunMeta& meta) {
  json j;
  j["config"] = meta.config;
  j["seed"] = meta.seed;
  j["status"] = meta.status;
  j["warnings"] = meta.warnings;
  j["notes"] = meta.notes;
  j["versions"] = {{"chivi", "0.1.0"},
                   {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." +
                                 std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                 std::to_string(EIGEN_MINOR_VERSION)}};
  write_text(dir + "/run_meta.json", j.dump(2) + "\n");
}

}  // namespace chivi::cli
