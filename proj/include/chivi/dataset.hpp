#pragma once

#include "chivi/common.hpp"

#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace chivi {

struct Dataset {
  Mat features;         // N x F
  Vec labels;           // entries in {-1, +1} for classification
  int rows() const { return static_cast<int>(features.rows()); }
  int cols() const { return static_cast<int>(features.cols()); }

  void validate() const {
    require(features.rows() == labels.size(),
            "Dataset: feature/label row mismatch");
    require(features.allFinite(), "Dataset: non-finite feature entry");
    for (int i = 0; i < labels.size(); ++i)
      require(labels[i] == -1.0 || labels[i] == 1.0,
              "Dataset: label outside {-1,+1} at row " + std::to_string(i));
  }
};

struct CsvSchema {
  std::string label_column;
  std::vector<std::string> feature_columns;  // empty = all non-label columns
  std::map<std::string, double> label_map;   // empty = parse numeric -1/+1
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) {
    // trim surrounding whitespace
    const auto b = cell.find_first_not_of(" \t\r");
    const auto e = cell.find_last_not_of(" \t\r");
    out.push_back(b == std::string::npos ? "" : cell.substr(b, e - b + 1));
  }
  if (!line.empty() && line.back() == ',') out.push_back("");
  return out;
}

}  // namespace detail

// CSV with header row; labels mapped into {-1,+1} through the schema.
// Parse failures name the offending row (1-based, header = row 1).
inline Dataset load_csv_dataset(const std::string& path, const CsvSchema& schema) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_csv_dataset: cannot open " + path);

  std::string line;
  if (!std::getline(in, line))
    throw std::runtime_error("load_csv_dataset: empty file " + path);
  const auto header = detail::split_csv_line(line);

  auto column_index = [&](const std::string& name) -> int {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return static_cast<int>(i);
    throw std::runtime_error("load_csv_dataset: missing column '" + name +
                             "' in " + path);
  };

  const int label_idx = column_index(schema.label_column);
  std::vector<int> feat_idx;
  if (schema.feature_columns.empty()) {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (static_cast<int>(i) != label_idx) feat_idx.push_back(static_cast<int>(i));
  } else {
    for (const auto& name : schema.feature_columns)
      feat_idx.push_back(column_index(name));
  }

  std::vector<std::vector<double>> feats;
  std::vector<double> labels;
  int row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty() || line.find_first_not_of(" \t\r") == std::string::npos)
      continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size())
      throw std::runtime_error("load_csv_dataset: row " + std::to_string(row) +
                               " has " + std::to_string(cells.size()) +
                               " cells, expected " +
                               std::to_string(header.size()));

    // label
    double y;
    const std::string& raw = cells[label_idx];
    if (!schema.label_map.empty()) {
      auto it = schema.label_map.find(raw);
      if (it == schema.label_map.end())
        throw std::runtime_error("load_csv_dataset: row " + std::to_string(row) +
                                 ": label '" + raw + "' not in label_map");
      y = it->second;
    } else {
      try {
        std::size_t pos = 0;
        y = std::stod(raw, &pos);
        if (pos != raw.size()) throw std::invalid_argument(raw);
      } catch (const std::exception&) {
        throw std::runtime_error("load_csv_dataset: row " + std::to_string(row) +
                                 ": non-numeric label '" + raw + "'");
      }
    }
    if (y != -1.0 && y != 1.0)
      throw std::runtime_error("load_csv_dataset: row " + std::to_string(row) +
                               ": label maps to " + std::to_string(y) +
                               ", expected -1 or +1");

    std::vector<double> frow;
    frow.reserve(feat_idx.size());
    for (int fi : feat_idx) {
      double v;
      try {
        std::size_t pos = 0;
        v = std::stod(cells[fi], &pos);
        if (pos != cells[fi].size()) throw std::invalid_argument(cells[fi]);
      } catch (const std::exception&) {
        throw std::runtime_error("load_csv_dataset: row " + std::to_string(row) +
                                 ": non-numeric feature '" + cells[fi] +
                                 "' in column " + header[fi]);
      }
      if (!std::isfinite(v))
        throw std::runtime_error("load_csv_dataset: row " + std::to_string(row) +
                                 ": non-finite feature in column " + header[fi]);
      frow.push_back(v);
    }
    feats.push_back(std::move(frow));
    labels.push_back(y);
  }

  Dataset ds;
  ds.features.resize(static_cast<int>(feats.size()),
                     static_cast<int>(feat_idx.size()));
  ds.labels.resize(static_cast<int>(labels.size()));
  for (std::size_t i = 0; i < feats.size(); ++i) {
    for (std::size_t j = 0; j < feats[i].size(); ++j)
      ds.features(static_cast<int>(i), static_cast<int>(j)) = feats[i][j];
    ds.labels[static_cast<int>(i)] = labels[i];
  }
  ds.validate();
  return ds;
}

// Zero mean, unit variance per column. Constant columns are left centered.
inline Dataset standardize_features(const Dataset& ds) {
  Dataset out = ds;
  for (int j = 0; j < out.features.cols(); ++j) {
    auto col = out.features.col(j);
    const double mean = col.mean();
    col.array() -= mean;
    const double sd =
        std::sqrt(col.squaredNorm() / std::max<double>(1.0, col.size() - 1.0));
    if (sd > 1e-12) col /= sd;
  }
  return out;
}

// Append a constant-1 column (probit intercept).
inline Dataset with_intercept(const Dataset& ds) {
  Dataset out;
  out.labels = ds.labels;
  out.features.resize(ds.features.rows(), ds.features.cols() + 1);
  out.features.leftCols(ds.features.cols()) = ds.features;
  out.features.col(ds.features.cols()).setOnes();
  return out;
}

}  // namespace chivi
