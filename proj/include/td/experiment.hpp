#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "td/analysis.hpp"
#include "td/checkpoint.hpp"
#include "td/comm.hpp"
#include "td/config.hpp"
#include "td/data.hpp"
#include "td/engine.hpp"
#include "td/errors.hpp"
#include "td/nets.hpp"

namespace td::experiment {

namespace fs = std::filesystem;

/// Pretraining and downstream splits for one experiment.
struct Splits {
  Dataset pretrain_train, pretrain_eval, downstream_train, downstream_eval;
  std::optional<FeatureEncoderConfig> features;
  std::string downstream_name;
};

inline data::TaskSpec pick_genre(const data::Tasks& tasks, const std::string& selector) {
  if (selector.empty()) return tasks.downstream.front();
  if (selector.rfind("rank:", 0) == 0) {
    const auto rank = std::stoul(selector.substr(5));
    if (rank == 0 || rank > tasks.downstream.size()) {
      throw ConfigError("genre rank " + selector + " outside 1.." + std::to_string(tasks.downstream.size()));
    }
    return tasks.downstream[rank - 1];
  }
  for (const auto& t : tasks.downstream)
    if (t.name == selector) return t;
  throw ConfigError("genre '" + selector + "' is not a qualifying downstream task");
}

inline Splits load_splits(const ExperimentConfig& cfg) {
  Splits s;
  const auto source = cfg.get<std::string>("data.source");
  if (source == "synthetic") {
    auto t = data::gen_synthetic(cfg.synthetic_spec());
    s.pretrain_train = std::move(t.pretrain_train);
    s.pretrain_eval = std::move(t.pretrain_eval);
    s.downstream_train = std::move(t.downstream_train);
    s.downstream_eval = std::move(t.downstream_eval);
    s.downstream_name = "subpopulation-" + std::to_string(cfg.get<std::size_t>("synthetic.downstream"));
    return s;
  }
  if (source != "movielens") throw ConfigError("data.source must be 'synthetic' or 'movielens'");
  const auto examples = data::ingest_movielens(cfg.data_dir());
  const auto tasks = data::make_tasks(examples, cfg.get<std::size_t>("data.min_eval"));
  const auto vocab = data::Vocabulary::build(examples, tasks.pretrain.train);
  const auto genre = pick_genre(tasks, cfg.get<std::string>("data.genre"));
  s.pretrain_train = data::to_dataset(examples, tasks.pretrain.train, vocab);
  s.pretrain_eval = data::to_dataset(examples, tasks.pretrain.eval, vocab);
  s.downstream_train = data::to_dataset(examples, genre.train, vocab);
  s.downstream_eval = data::to_dataset(examples, genre.eval, vocab);
  s.downstream_name = genre.name;
  FeatureEncoderConfig f;
  f.users = vocab.max_user + 1;
  f.movies = vocab.max_movie + 1;
  f.title_vocab = vocab.vocab_size();
  f.genres = data::kGenreCount;
  s.features = f;
  return s;
}

inline NetConfig net_config(const ExperimentConfig& cfg, const Splits& s, const std::string& who) {
  NetConfig n;
  n.hidden = cfg.get<std::vector<std::size_t>>(who + ".hidden");
  if (n.hidden.size() < 2) throw ConfigError(who + ".hidden needs at least two relu layers");
  n.input_width = s.pretrain_train.input_width;
  n.output_width = 1;
  n.partition = {1, 2, n.hidden.size() + 1};
  n.dropout = cfg.get<double>(who + ".dropout");
  n.features = s.features;
  return n;
}

inline PartitionedNet build_net(const NetConfig& n, std::uint64_t seed, std::uint64_t stream) {
  Rng rng = RngStreams::derive(seed, stream);
  return PartitionedNet(n, rng);
}

// Init streams, disjoint from the training streams in RngStreams.
inline constexpr std::uint64_t kTeacherInit = 101, kStudentInit = 102, kChannelInit = 103;

inline PartitionedNet build_teacher(const ExperimentConfig& cfg, const Splits& s) {
  return build_net(net_config(cfg, s, "teacher"), cfg.get<std::uint64_t>("teacher.seed"), kTeacherInit);
}

inline PartitionedNet build_student(const ExperimentConfig& cfg, const Splits& s) {
  return build_net(net_config(cfg, s, "student"), cfg.get<std::uint64_t>("train.seed"), kStudentInit);
}

inline Channels build_channels(const ExperimentConfig& cfg, const PartitionedNet& student,
                               const PartitionedNet& teacher) {
  Rng rng = RngStreams::derive(cfg.get<std::uint64_t>("train.seed"), kChannelInit);
  const bool fitnet = parse_method(cfg.get<std::string>("train.method")) == Method::FitNet;
  return Channels::for_models(student, teacher, cfg.channel_config(), rng, fitnet);
}

// Metrics log ---------------------------------------------------------------

inline constexpr const char* kMetricsHeader =
    "step,wall_ms,split,method,k,loss_total,loss_gt,loss_interact,loss_mc,loss_sc,metric_name,metric_value,"
    "loss_distill";

inline std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline std::string format_row(const MetricRow& r) {
  std::string line = std::to_string(r.step) + "," + format_number(std::round(r.wall_ms * 1000.0) / 1000.0) + "," +
                     r.split + "," + r.method + "," + std::to_string(r.k) + ",";
  if (r.split == "train") {
    line += format_number(r.loss.total) + "," + format_number(r.loss.gt) + "," +
            format_number(r.loss.weighted_interact) + "," + format_number(r.loss.weighted_mc) + "," +
            format_number(r.loss.weighted_sc) + ",,,";
    line += format_number(r.loss.weighted_distill);
  } else {
    line += ",,,,," + r.metric_name + "," + format_number(r.metric_value) + ",";
  }
  return line;
}

class MetricsLog {
 public:
  explicit MetricsLog(const fs::path& path) : os_(path) {
    if (!os_) throw DataError("cannot write " + path.string());
    os_ << kMetricsHeader << '\n';
  }
  void operator()(const MetricRow& r) { os_ << format_row(r) << '\n'; }

 private:
  std::ofstream os_;
};

inline void prepare_out_dir(const fs::path& out, bool force, const std::vector<std::string>& outputs) {
  fs::create_directories(out);
  if (force) return;
  for (const auto& name : outputs) {
    if (fs::exists(out / name)) {
      throw ConfigError("output " + (out / name).string() + " already exists (use --force to overwrite)");
    }
  }
}

// Commands ------------------------------------------------------------------

struct PretrainResult {
  double eval_metric = 0.0;
  fs::path checkpoint;
};

/// Trains the teacher on the all-population pretraining split and writes teacher.tdck.
inline PretrainResult cmd_pretrain(const ExperimentConfig& cfg, const fs::path& out, bool force,
                                   const Splits* preloaded = nullptr) {
  prepare_out_dir(out, force, {"teacher.tdck"});
  std::optional<Splits> owned;
  if (!preloaded) owned = load_splits(cfg);
  const Splits& s = preloaded ? *preloaded : *owned;
  auto teacher = build_teacher(cfg, s);
  cfg.write(out / "teacher_config.json");
  MetricsLog log(out / "teacher_metrics.csv");
  auto result = train(nullptr, teacher, nullptr, s.pretrain_train, s.pretrain_eval, cfg.teacher_train_config(),
                      [&](const MetricRow& r) { log(r); });
  const auto params = teacher.params("teacher");
  const auto tensors = checkpoint::from_params(params);
  checkpoint::save(out / "teacher.tdck", tensors);
  return {result.final_metric, out / "teacher.tdck"};
}

inline PartitionedNet load_teacher(const ExperimentConfig& cfg, const Splits& s, const fs::path& ckpt) {
  auto teacher = build_teacher(cfg, s);
  const auto stored = checkpoint::load(ckpt);
  checkpoint::restore(teacher.params("teacher"), stored, "teacher checkpoint " + ckpt.string());
  teacher.freeze();
  return teacher;
}

struct DistillResult {
  double final_metric = 0.0;
  double best_metric = 0.0;
  double mean_step_ms = 0.0;
  std::string metric_name;
  fs::path metrics;
};

/// Trains the student with the configured method and writes student.tdck
/// (student body, plus E_g/D_g/E_h/D_h for channel methods), student_best.tdck, metrics.csv and
/// the resolved configuration.
inline DistillResult cmd_distill(const ExperimentConfig& cfg, const fs::path& teacher_ckpt, const fs::path& out,
                                 bool force, const Splits* preloaded = nullptr) {
  prepare_out_dir(out, force, {"student.tdck", "metrics.csv"});
  std::optional<Splits> owned;
  if (!preloaded) owned = load_splits(cfg);
  const Splits& s = preloaded ? *preloaded : *owned;
  const auto tc = cfg.train_config();
  auto teacher = load_teacher(cfg, s, teacher_ckpt);
  auto student = build_student(cfg, s);
  auto ch = build_channels(cfg, student, teacher);
  cfg.write(out / "config.json");

  TrainResult r;
  {
    MetricsLog log(out / "metrics.csv");
    r = train(&teacher, student, &ch, s.downstream_train, s.downstream_eval, tc, [&](const MetricRow& row) { log(row); });
  }
  auto tensors = checkpoint::from_params(student.params("student"));
  // Scratch and LD never touch the channels, so their untrained values are not saved.
  if (tc.method != Method::Scratch && tc.method != Method::LD) {
    for (auto& t : checkpoint::from_params(ch.params())) tensors.push_back(t);
  }
  checkpoint::save(out / "student.tdck", tensors);

  auto best = checkpoint::from_params(student.params("student"));
  for (std::size_t i = 0; i < best.size() && i < r.best_student.size(); ++i) best[i].tensor = r.best_student[i];
  checkpoint::save(out / "student_best.tdck", best);

  nlohmann::ordered_json summary = {{"method", method_name(tc.method)},
                                    {"k", tc.k},
                                    {"downstream", s.downstream_name},
                                    {"metric", metric_name(s.downstream_eval)},
                                    {"final", r.final_metric},
                                    {"best", r.best_metric},
                                    {"best_step", r.best_step}};
  std::ofstream(out / "result.json") << summary.dump(2) << '\n';
  return {r.final_metric, r.best_metric, r.mean_step_ms, metric_name(s.downstream_eval), out / "metrics.csv"};
}

/// Writes one CKA matrix per probe bucket plus summary.csv.
inline std::vector<analysis::SimilarityGrid> cmd_analyze(const ExperimentConfig& cfg, const fs::path& teacher_ckpt,
                                                         const fs::path& student_ckpt, const fs::path& out,
                                                         const Splits* preloaded = nullptr) {
  fs::create_directories(out);
  std::optional<Splits> owned;
  if (!preloaded) owned = load_splits(cfg);
  const Splits& s = preloaded ? *preloaded : *owned;
  auto teacher = load_teacher(cfg, s, teacher_ckpt);
  auto student = build_student(cfg, s);
  auto ch = build_channels(cfg, student, teacher);
  const auto stored = checkpoint::load(student_ckpt);
  checkpoint::restore(student.params("student"), stored, "student checkpoint " + student_ckpt.string());
  for (const char* prefix : {"E_g.", "D_g.", "E_h.", "D_h."}) {
    if (!checkpoint::contains_prefix(stored, prefix)) {
      throw ShapeError("student checkpoint " + student_ckpt.string() + " has no " + std::string(prefix, 3) +
                       " channel tensors; analysis needs a run that trained communication channels "
                       "(TD, FD, FitNet or Hybrid), not a scratch or LD checkpoint");
    }
  }
  checkpoint::restore(ch.params(), stored, "channel tensors in " + student_ckpt.string());
  // Probe on the pretraining evaluation split so every subpopulation / rating bucket is present.
  auto grids = analysis::probe_and_grid(teacher, student, ch, s.pretrain_eval, cfg.get<std::size_t>("analysis.per_class_n"),
                                        cfg.get<std::uint64_t>("analysis.seed"));
  for (const auto& g : grids) {
    std::ofstream os(out / ("cka_bucket_" + std::to_string(g.bucket) + ".tsv"));
    analysis::write_grid(os, g);
  }
  std::ofstream summary(out / "summary.csv");
  analysis::write_summary(summary, grids);
  return grids;
}

/// Materializes the task splits as columnar text files.
inline std::vector<fs::path> cmd_gen_data(const ExperimentConfig& cfg, const fs::path& out, bool force) {
  fs::create_directories(out);
  std::vector<fs::path> written;
  auto open = [&](const std::string& name) {
    const auto p = out / name;
    if (!force && fs::exists(p)) throw ConfigError("output " + p.string() + " already exists (use --force to overwrite)");
    written.push_back(p);
    return std::ofstream(p);
  };
  if (cfg.get<std::string>("data.source") == "synthetic") {
    auto t = data::gen_synthetic(cfg.synthetic_spec());
    {
      auto os = open("pretrain.tsv");
      data::write_dense_columns(os, t.pretrain_train, "train");
    }
    {
      auto os = open("pretrain_eval.tsv");
      data::write_dense_columns(os, t.pretrain_eval, "eval");
    }
    {
      auto os = open("downstream.tsv");
      data::write_dense_columns(os, t.downstream_train, "train");
    }
    {
      auto os = open("downstream_eval.tsv");
      data::write_dense_columns(os, t.downstream_eval, "eval");
    }
  } else {
    const auto examples = data::ingest_movielens(cfg.data_dir());
    const auto tasks = data::make_tasks(examples, cfg.get<std::size_t>("data.min_eval"));
    {
      auto os = open("pretrain.tsv");
      data::write_task_columns(os, examples, tasks.pretrain);
    }
    auto idx = open("tasks.csv");
    idx << "rank,genre,train,eval\n";
    for (const auto& t : tasks.downstream) {
      idx << t.density_rank << ',' << t.name << ',' << t.train.size() << ',' << t.eval.size() << '\n';
      auto os = open("genre_" + std::to_string(t.density_rank) + ".tsv");
      data::write_task_columns(os, examples, t);
    }
  }
  cfg.write(out / "config.json");
  return written;
}

// Sweeps --------------------------------------------------------------------

struct CellSummary {
  std::string id;
  nlohmann::ordered_json overrides;
  std::vector<std::uint64_t> seeds;
  std::vector<double> metrics;  // per seed
  double mean = 0.0;
  double stderr_ = 0.0;
  double rel_improvement = 0.0;  // percent vs the scratch arm; positive is better
  std::size_t wins = 0;          // seeds where this cell beats scratch with the same seed
};

inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / double(v.size());
}

/// Sample standard deviation / sqrt(n); 0 for fewer than two values.
inline double stderr_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / double(v.size() - 1)) / std::sqrt(double(v.size()));
}

/// Percent improvement of `value` over `baseline`; lower is better for RMSE.
inline double relative_improvement(double value, double baseline, bool lower_is_better) {
  if (baseline == 0.0) return 0.0;
  return lower_is_better ? (baseline - value) / baseline * 100.0 : (value - baseline) / baseline * 100.0;
}

/// Fills mean, stderr, relative improvement and win counts. The cell whose
/// overrides set train.method=scratch (and nothing else) is the baseline.
inline void aggregate(std::vector<CellSummary>& cells, bool lower_is_better) {
  const CellSummary* scratch = nullptr;
  for (auto& c : cells) {
    c.mean = mean_of(c.metrics);
    c.stderr_ = stderr_of(c.metrics);
    if (c.overrides.size() == 1 && c.overrides.contains("train.method") &&
        parse_method(c.overrides["train.method"].get<std::string>()) == Method::Scratch) {
      scratch = &c;
    }
  }
  if (!scratch) throw ConfigError("sweep has no scratch arm to compare against");
  for (auto& c : cells) {
    c.rel_improvement = relative_improvement(c.mean, scratch->mean, lower_is_better);
    c.wins = 0;
    for (std::size_t i = 0; i < c.seeds.size(); ++i) {
      for (std::size_t j = 0; j < scratch->seeds.size(); ++j) {
        if (scratch->seeds[j] != c.seeds[i]) continue;
        const bool better = lower_is_better ? c.metrics[i] < scratch->metrics[j] : c.metrics[i] > scratch->metrics[j];
        if (better) ++c.wins;
      }
    }
  }
}

inline void write_aggregate(std::ostream& os, const std::vector<CellSummary>& cells, const std::string& metric) {
  os << "cell,overrides,n,mean_" << metric << ",stderr,rel_improvement_pct,wins_vs_scratch\n";
  for (const auto& c : cells) {
    std::string ov = c.overrides.dump();
    for (auto& ch : ov)
      if (ch == '"') ch = '\'';
    os << c.id << ",\"" << ov << "\"," << c.metrics.size() << ',' << format_number(c.mean) << ','
       << format_number(c.stderr_) << ',' << format_number(c.rel_improvement) << ',' << c.wins << '\n';
  }
}

/// Cells from "sweep.cells" (list form) or the Cartesian product of "sweep.grid.*".
inline std::vector<nlohmann::ordered_json> expand_cells(const ExperimentConfig& cfg) {
  using json = nlohmann::ordered_json;
  std::vector<json> cells;
  if (cfg.has("sweep.cells")) {
    for (const auto& c : cfg.values().at("sweep.cells")) cells.push_back(c);
  }
  std::vector<std::pair<std::string, json>> axes;
  for (auto it = cfg.values().begin(); it != cfg.values().end(); ++it) {
    if (it.key().rfind("sweep.grid.", 0) == 0) axes.emplace_back(it.key().substr(11), it.value());
  }
  if (!axes.empty()) {
    std::vector<json> product = {json::object()};
    for (const auto& [key, values] : axes) {
      std::vector<json> next;
      for (const auto& partial : product) {
        for (const auto& v : values) {
          json c = partial;
          c[key] = v;
          next.push_back(c);
        }
      }
      product = std::move(next);
    }
    cells.insert(cells.end(), product.begin(), product.end());
  }
  const bool has_scratch = std::any_of(cells.begin(), cells.end(), [](const json& c) {
    return c.size() == 1 && c.contains("train.method") && parse_method(c["train.method"].get<std::string>()) == Method::Scratch;
  });
  if (!has_scratch) cells.insert(cells.begin(), json{{"train.method", "scratch"}});
  return cells;
}

struct SweepResult {
  std::vector<CellSummary> cells;
  std::string metric;
  fs::path table;
};

/// Runs every cell for every seed (teacher pretrained once per seed unless
/// teacher.checkpoint is set) and writes results.csv.
inline SweepResult cmd_sweep(const ExperimentConfig& cfg, const fs::path& out, std::size_t jobs, bool force,
                             std::ostream& progress = std::cerr) {
  const auto cell_overrides = expand_cells(cfg);
  const auto seeds = cfg.get<std::vector<std::uint64_t>>("sweep.seeds");
  if (seeds.empty()) throw ConfigError("sweep.seeds is empty");
  const std::size_t runs = cell_overrides.size() * seeds.size();
  const auto budget = cfg.get<std::size_t>("sweep.max_runs");
  if (runs > budget) {
    throw ConfigError("sweep needs " + std::to_string(runs) + " runs (" + std::to_string(cell_overrides.size()) +
                      " cells x " + std::to_string(seeds.size()) + " seeds), over the budget sweep.max_runs=" +
                      std::to_string(budget));
  }
  prepare_out_dir(out, force, {"results.csv"});
  cfg.write(out / "sweep_config.json");
  const Splits splits = load_splits(cfg);

  // Teachers first: one per seed, or a shared one.
  const bool per_seed = cfg.get<bool>("sweep.teacher_per_seed");
  const auto given = cfg.get<std::string>("teacher.checkpoint");
  std::map<std::uint64_t, fs::path> teachers;
  for (auto seed : seeds) {
    if (!given.empty()) {
      teachers[seed] = given;
      continue;
    }
    if (!per_seed && !teachers.empty()) {
      teachers[seed] = teachers.begin()->second;
      continue;
    }
    ExperimentConfig tcfg = cfg;
    if (per_seed) tcfg.set("teacher.seed", seed);
    const auto dir = out / "teachers" / ("seed_" + std::to_string(per_seed ? seed : tcfg.get<std::uint64_t>("teacher.seed")));
    if (fs::exists(dir / "teacher.tdck") && !force) {
      teachers[seed] = dir / "teacher.tdck";
    } else {
      auto r = cmd_pretrain(tcfg, dir, true, &splits);
      progress << "teacher seed " << seed << ": eval " << metric_name(splits.pretrain_eval) << " = " << r.eval_metric
               << '\n';
      teachers[seed] = r.checkpoint;
    }
  }

  std::vector<CellSummary> cells(cell_overrides.size());
  for (std::size_t c = 0; c < cells.size(); ++c) {
    cells[c].id = "cell" + std::to_string(c);
    cells[c].overrides = cell_overrides[c];
    cells[c].seeds = seeds;
    cells[c].metrics.assign(seeds.size(), 0.0);
  }
  struct Job {
    std::size_t cell, seed_index;
  };
  std::vector<Job> queue;
  for (std::size_t c = 0; c < cells.size(); ++c)
    for (std::size_t s = 0; s < seeds.size(); ++s) queue.push_back({c, s});

  std::atomic<std::size_t> next{0};
  std::mutex mu;
  std::exception_ptr failure;
  auto worker = [&] {
    for (;;) {
      const std::size_t j = next.fetch_add(1);
      if (j >= queue.size()) return;
      const auto [c, si] = queue[j];
      try {
        ExperimentConfig run_cfg = cfg;
        run_cfg.merge(cells[c].overrides);
        run_cfg.set("train.seed", seeds[si]);
        const auto dir = out / cells[c].id / ("seed_" + std::to_string(seeds[si]));
        auto r = cmd_distill(run_cfg, teachers.at(seeds[si]), dir, true, &splits);
        std::lock_guard<std::mutex> lock(mu);
        cells[c].metrics[si] = r.final_metric;
        progress << cells[c].id << ' ' << cells[c].overrides.dump() << " seed " << seeds[si] << ": " << r.metric_name
                 << " = " << r.final_metric << '\n';
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        if (!failure) failure = std::current_exception();
        next = queue.size();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < std::max<std::size_t>(jobs, 1); ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);

  const bool lower = splits.downstream_eval.kind == TaskKind::Regression;
  aggregate(cells, lower);
  const std::string metric = metric_name(splits.downstream_eval);
  std::ofstream table(out / "results.csv");
  write_aggregate(table, cells, metric);
  return {cells, metric, out / "results.csv"};
}

}  // namespace td::experiment
