#pragma once

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "td/comm.hpp"
#include "td/data.hpp"
#include "td/engine.hpp"
#include "td/errors.hpp"
#include "td/nets.hpp"

namespace td {

/// Experiment configuration: a flat JSON object with dotted keys.
///
/// Built-in defaults are overridden by a config file, which is overridden by
/// command-line values. Unknown keys are rejected. The resolved object is
/// what gets persisted next to every run.
class ExperimentConfig {
 public:
  using json = nlohmann::ordered_json;

  ExperimentConfig() : values_(defaults()) {}

  static const json& defaults() {
    static const json d = {
        {"data.source", "synthetic"},  // synthetic | movielens
        {"data.dir", ""},              // MovieLens-100K directory; falls back to $TD_DATA_DIR
        {"data.genre", ""},            // downstream genre by name, or "rank:N" (1 = densest)
        {"data.min_eval", 500},

        {"synthetic.input_dim", 16},
        {"synthetic.subpopulations", 4},
        {"synthetic.mixture", {0.25, 0.25, 0.25, 0.25}},
        {"synthetic.downstream", 0},
        {"synthetic.noise_std", 0.3},
        {"synthetic.linear", false},
        {"synthetic.feature_width", 24},
        {"synthetic.readout_shift", 0.5},
        {"synthetic.center_scale", 1.5},
        {"synthetic.pretrain_train", 20000},
        {"synthetic.pretrain_eval", 2000},
        {"synthetic.downstream_train", 200},
        {"synthetic.downstream_eval", 2000},
        {"synthetic.seed", 7},

        {"teacher.hidden", {512, 256}},
        {"teacher.dropout", 0.0},
        {"teacher.steps", 3000},
        {"teacher.batch_size", 256},
        {"teacher.lr", 1e-3},
        {"teacher.eval_every", 500},
        {"teacher.seed", 1},
        {"teacher.checkpoint", ""},

        {"student.hidden", {128, 64}},
        {"student.dropout", 0.0},

        {"channel.hidden", 256},
        {"channel.message_dim", 128},
        {"channel.dropout", 0.1},

        {"train.method", "TD"},
        {"train.k", 1},
        {"train.interaction", true},
        {"train.steps", 2000},
        {"train.batch_size", 128},
        {"train.lr", 1e-3},
        {"train.seed", 1},
        {"train.eval_every", 200},
        {"train.noise", false},
        {"train.noise_sigma", 0.01},
        {"train.ramp_up", false},
        {"train.ramp_student_steps", 1000},
        {"train.ramp_channel_steps", 500},

        {"weights.interact", 1.0},
        {"weights.sc", 1.0},
        {"weights.mc", 1.0},
        {"weights.logit", 1.0},
        {"weights.feature", 1.0},
        {"weights.fitnet", 1.0},
        {"weights.hybrid_logit", 1.0},
        {"weights.hybrid_feature", 1.0},

        {"analysis.per_class_n", 20},
        {"analysis.seed", 0},

        {"sweep.seeds", {1, 2, 3, 4, 5}},
        {"sweep.max_runs", 400},
        {"sweep.teacher_per_seed", true},
    };
    return d;
  }

  static ExperimentConfig from_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    json j;
    try {
      j = json::parse(in);
    } catch (const std::exception& e) {
      throw ConfigError(path.string() + ": " + e.what());
    }
    ExperimentConfig c;
    c.merge(j);
    return c;
  }

  /// Overlays a flat object. Keys under "sweep.grid." and "sweep.cells" hold sweep definitions.
  void merge(const json& overrides) {
    if (!overrides.is_object()) throw ConfigError("configuration must be a JSON object with dotted keys");
    for (auto it = overrides.begin(); it != overrides.end(); ++it) set(it.key(), it.value());
  }

  void set(const std::string& key, const json& value) {
    if (key.rfind("sweep.grid.", 0) == 0) {
      check_known(key.substr(11));
      if (!value.is_array() || value.empty()) throw ConfigError(key + " must be a non-empty list");
    } else if (key == "sweep.cells") {
      if (!value.is_array()) throw ConfigError("sweep.cells must be a list of override objects");
      for (const auto& cell : value) {
        if (!cell.is_object()) throw ConfigError("sweep.cells entries must be objects");
        for (auto it = cell.begin(); it != cell.end(); ++it) check_known(it.key());
      }
    } else {
      check_known(key);
      const auto& def = defaults().at(key);
      if (def.is_number() && !value.is_number()) throw ConfigError(key + " must be a number");
      if (def.is_boolean() && !value.is_boolean()) throw ConfigError(key + " must be true or false");
      if (def.is_string() && !value.is_string()) throw ConfigError(key + " must be a string");
      if (def.is_array() && !value.is_array()) throw ConfigError(key + " must be a list");
    }
    values_[key] = value;
  }

  /// "key=value" from the command line; the value is parsed as JSON, else taken as a string.
  void set_from_string(const std::string& assignment) {
    auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("expected key=value, got '" + assignment + "'");
    const std::string key = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);
    json v;
    try {
      v = json::parse(raw);
    } catch (const std::exception&) {
      v = raw;
    }
    set(key, v);
  }

  const json& values() const { return values_; }
  bool has(const std::string& key) const { return values_.contains(key); }

  template <typename V>
  V get(const std::string& key) const {
    if (!values_.contains(key)) throw ConfigError("missing config key " + key);
    try {
      return values_.at(key).get<V>();
    } catch (const std::exception& e) {
      throw ConfigError(key + ": " + e.what());
    }
  }

  void write(const std::filesystem::path& path) const {
    std::ofstream os(path);
    if (!os) throw DataError("cannot write " + path.string());
    os << values_.dump(2) << '\n';
  }

  // Typed views -----------------------------------------------------------

  TrainConfig train_config() const {
    TrainConfig t;
    t.method = parse_method(get<std::string>("train.method"));
    t.k = get<std::size_t>("train.k");
    t.interaction = get<bool>("train.interaction");
    t.train_steps = get<std::size_t>("train.steps");
    t.batch_size = get<std::size_t>("train.batch_size");
    t.adam.lr = get<double>("train.lr");
    t.seed = get<std::uint64_t>("train.seed");
    t.eval_every = get<std::size_t>("train.eval_every");
    if (get<bool>("train.noise")) t.noise_sigma = get<double>("train.noise_sigma");
    if (get<bool>("train.ramp_up")) {
      t.ramp_up = RampUp{get<std::size_t>("train.ramp_student_steps"), get<std::size_t>("train.ramp_channel_steps")};
    }
    t.weights.interact = get<double>("weights.interact");
    t.weights.sc = get<double>("weights.sc");
    t.weights.mc = get<double>("weights.mc");
    t.weights.logit = get<double>("weights.logit");
    t.weights.feature = get<double>("weights.feature");
    t.weights.fitnet = get<double>("weights.fitnet");
    t.weights.hybrid_logit = get<double>("weights.hybrid_logit");
    t.weights.hybrid_feature = get<double>("weights.hybrid_feature");
    t.validate();
    return t;
  }

  /// Teacher pretraining schedule, expressed as a plain (scratch) run.
  TrainConfig teacher_train_config() const {
    TrainConfig t;
    t.method = Method::Scratch;
    t.train_steps = get<std::size_t>("teacher.steps");
    t.batch_size = get<std::size_t>("teacher.batch_size");
    t.adam.lr = get<double>("teacher.lr");
    t.seed = get<std::uint64_t>("teacher.seed");
    t.eval_every = get<std::size_t>("teacher.eval_every");
    t.validate();
    return t;
  }

  ChannelConfig channel_config() const {
    return {get<std::size_t>("channel.hidden"), get<std::size_t>("channel.message_dim"), get<double>("channel.dropout")};
  }

  data::SyntheticSpec synthetic_spec() const {
    data::SyntheticSpec s;
    s.input_dim = get<std::size_t>("synthetic.input_dim");
    s.subpopulations = get<std::size_t>("synthetic.subpopulations");
    s.mixture = get<std::vector<double>>("synthetic.mixture");
    s.downstream = get<std::size_t>("synthetic.downstream");
    s.noise_std = get<double>("synthetic.noise_std");
    s.linear = get<bool>("synthetic.linear");
    s.feature_width = get<std::size_t>("synthetic.feature_width");
    s.readout_shift = get<double>("synthetic.readout_shift");
    s.center_scale = get<double>("synthetic.center_scale");
    s.pretrain_train = get<std::size_t>("synthetic.pretrain_train");
    s.pretrain_eval = get<std::size_t>("synthetic.pretrain_eval");
    s.downstream_train = get<std::size_t>("synthetic.downstream_train");
    s.downstream_eval = get<std::size_t>("synthetic.downstream_eval");
    s.seed = get<std::uint64_t>("synthetic.seed");
    s.validate();
    return s;
  }

  std::filesystem::path data_dir() const {
    auto dir = get<std::string>("data.dir");
    if (dir.empty()) {
      if (const char* env = std::getenv("TD_DATA_DIR")) dir = env;
    }
    if (dir.empty()) throw ConfigError("MovieLens directory not set (data.dir or TD_DATA_DIR)");
    return dir;
  }

 private:
  static void check_known(const std::string& key) {
    if (!defaults().contains(key)) throw ConfigError("unknown config key '" + key + "'");
  }

  json values_;
};

}  // namespace td
