#pragma once

#include "chivi/chivi.hpp"

#include <json.hpp>

#include <fstream>
#include <string>

namespace chivi::cli {

using nlohmann::json;

inline json load_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  json j;
  in >> j;
  return j;
}

namespace detail {

inline bool type_matches(const json& v, const std::string& t) {
  if (t == "object") return v.is_object();
  if (t == "array") return v.is_array();
  if (t == "string") return v.is_string();
  if (t == "boolean") return v.is_boolean();
  if (t == "integer") return v.is_number_integer();
  if (t == "number") return v.is_number();
  return false;
}

// Recursive check against the subset of JSON Schema the published file uses:
// type, enum, properties, required, additionalProperties, items.
inline void validate_against(const json& value, const json& schema,
                             const std::string& path) {
  const auto where = path.empty() ? "top level" : path;
  if (schema.contains("type")) {
    const auto t = schema["type"].get<std::string>();
    if (!type_matches(value, t))
      throw std::runtime_error("config: " + where + " must have type " + t);
  }
  if (schema.contains("enum")) {
    bool ok = false;
    for (const auto& e : schema["enum"])
      if (e == value) ok = true;
    if (!ok)
      throw std::runtime_error("config: " + where + " has value " +
                               value.dump() + " outside the allowed set " +
                               schema["enum"].dump());
  }
  if (value.is_object()) {
    const json props =
        schema.contains("properties") ? schema["properties"] : json::object();
    const bool open = schema.contains("additionalProperties") &&
                      schema["additionalProperties"] == true;
    for (const auto& [key, sub] : value.items()) {
      const std::string child = path.empty() ? key : path + "." + key;
      if (props.contains(key)) {
        validate_against(sub, props[key], child);
      } else if (!open) {
        throw std::runtime_error("config: unknown key \"" + child + "\"");
      }
    }
    if (schema.contains("required"))
      for (const auto& req : schema["required"]) {
        const auto name = req.get<std::string>();
        if (!value.contains(name))
          throw std::runtime_error("config: " + where +
                                   " is missing required key \"" + name + "\"");
      }
  }
  if (value.is_array() && schema.contains("items")) {
    for (std::size_t i = 0; i < value.size(); ++i)
      validate_against(value[i], schema["items"],
                       path + "[" + std::to_string(i) + "]");
  }
}

}  // namespace detail

// Schema gate: every config passes through here before any compute.
inline void validate_config(const json& config, const json& schema) {
  detail::validate_against(config, schema, "");
}

struct SplitConfig {
  double train_fraction = 0.9;
  int num_repeats = 10;
  int folds = 10;
};

struct RunConfig {
  std::string experiment;
  std::uint64_t seed = 0;
  std::string output_dir = "out";
  bool paper_scale = false;
  std::string fault_injection = "none";
  json model = json::object();
  json optimizer = json::object();
  json oracle = json::object();
  SplitConfig splits;
};

inline OptimizerConfig optimizer_from_json(const json& j) {
  OptimizerConfig cfg;
  if (j.contains("n")) cfg.n = j["n"].get<double>();
  if (j.contains("samples_per_step"))
    cfg.samples_per_step = j["samples_per_step"].get<int>();
  if (j.contains("minibatch")) cfg.minibatch = j["minibatch"].get<int>();
  if (j.contains("max_iters")) cfg.max_iters = j["max_iters"].get<int>();
  if (j.contains("estimator")) {
    const auto e = j["estimator"].get<std::string>();
    cfg.estimator = e == "score" ? EstimatorTag::score : EstimatorTag::reparam;
  }
  if (j.contains("schedule")) {
    const auto& s = j["schedule"];
    if (s.contains("kind"))
      cfg.schedule.kind = s["kind"].get<std::string>() == "robbins_monro"
                              ? ScheduleKind::robbins_monro
                              : ScheduleKind::adaptive;
    if (s.contains("base_rate"))
      cfg.schedule.base_rate = s["base_rate"].get<double>();
    if (s.contains("decay")) cfg.schedule.decay = s["decay"].get<double>();
  }
  if (j.contains("init"))
    cfg.init = j["init"].get<std::string>() == "seeded_random"
                   ? InitKind::seeded_random
                   : InitKind::zero;
  if (j.contains("init_std")) cfg.init_std = j["init_std"].get<double>();
  if (j.contains("convergence")) {
    const auto& c = j["convergence"];
    if (c.contains("window")) cfg.convergence.window = c["window"].get<int>();
    if (c.contains("tol")) cfg.convergence.tol = c["tol"].get<double>();
  }
  if (j.contains("trace_every")) cfg.trace_every = j["trace_every"].get<int>();
  if (j.contains("monitor_samples"))
    cfg.monitor_samples = j["monitor_samples"].get<int>();
  if (j.contains("average_tail"))
    cfg.average_tail = j["average_tail"].get<double>();
  if (j.contains("min_step_ess"))
    cfg.min_step_ess = j["min_step_ess"].get<double>();
  return cfg;
}

inline json optimizer_to_json(const OptimizerConfig& cfg) {
  json j;
  j["n"] = cfg.n;
  j["samples_per_step"] = cfg.samples_per_step;
  j["minibatch"] = cfg.minibatch;
  j["max_iters"] = cfg.max_iters;
  j["estimator"] = cfg.estimator == EstimatorTag::score ? "score" : "reparam";
  j["schedule"] = {
      {"kind", cfg.schedule.kind == ScheduleKind::robbins_monro
                   ? "robbins_monro"
                   : "adaptive"},
      {"base_rate", cfg.schedule.base_rate},
      {"decay", cfg.schedule.decay}};
  j["init"] = cfg.init == InitKind::seeded_random ? "seeded_random" : "zero";
  j["init_std"] = cfg.init_std;
  j["convergence"] = {{"window", cfg.convergence.window},
                      {"tol", cfg.convergence.tol}};
  j["trace_every"] = cfg.trace_every;
  j["monitor_samples"] = cfg.monitor_samples;
  j["average_tail"] = cfg.average_tail;
  j["min_step_ess"] = cfg.min_step_ess;
  return j;
}

inline RunConfig parse_run_config(const json& j) {
  RunConfig cfg;
  cfg.experiment = j.at("experiment").get<std::string>();
  if (j.contains("seed")) cfg.seed = j["seed"].get<std::uint64_t>();
  if (j.contains("output_dir"))
    cfg.output_dir = j["output_dir"].get<std::string>();
  if (j.contains("paper_scale")) cfg.paper_scale = j["paper_scale"].get<bool>();
  if (j.contains("fault_injection"))
    cfg.fault_injection = j["fault_injection"].get<std::string>();
  if (j.contains("model")) cfg.model = j["model"];
  if (j.contains("optimizer")) cfg.optimizer = j["optimizer"];
  if (j.contains("oracle")) cfg.oracle = j["oracle"];
  if (j.contains("splits")) {
    const auto& s = j["splits"];
    if (s.contains("train_fraction"))
      cfg.splits.train_fraction = s["train_fraction"].get<double>();
    if (s.contains("num_repeats"))
      cfg.splits.num_repeats = s["num_repeats"].get<int>();
    if (s.contains("folds")) cfg.splits.folds = s["folds"].get<int>();
  }
  require(cfg.splits.train_fraction > 0.0 && cfg.splits.train_fraction < 1.0,
          "config: splits.train_fraction must lie in (0, 1)");
  require(cfg.splits.num_repeats >= 1, "config: splits.num_repeats >= 1");
  require(cfg.splits.folds >= 2, "config: splits.folds >= 2");
  return cfg;
}

// The exact settings of a run, replayable as a config file.
inline json resolved_config(const RunConfig& cfg) {
  json j;
  j["experiment"] = cfg.experiment;
  j["seed"] = cfg.seed;
  j["output_dir"] = cfg.output_dir;
  j["paper_scale"] = cfg.paper_scale;
  j["fault_injection"] = cfg.fault_injection;
  j["model"] = cfg.model;
  j["optimizer"] = optimizer_to_json(optimizer_from_json(cfg.optimizer));
  j["oracle"] = cfg.oracle;
  j["splits"] = {{"train_fraction", cfg.splits.train_fraction},
                 {"num_repeats", cfg.splits.num_repeats},
                 {"folds", cfg.splits.folds}};
  return j;
}

}  // namespace chivi::cli
