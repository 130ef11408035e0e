#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <regex>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "td/dataset.hpp"
#include "td/errors.hpp"
#include "td/tensor.hpp"

namespace td::data {

inline constexpr std::size_t kGenreCount = 19;
inline constexpr std::size_t kUnknownGenre = 0;
inline const std::array<const char*, kGenreCount> kGenreNames = {
    "unknown", "Action", "Adventure", "Animation", "Children's", "Comedy",  "Crime",
    "Documentary", "Drama", "Fantasy", "Film-Noir", "Horror", "Musical", "Mystery",
    "Romance", "Sci-Fi", "Thriller", "War", "Western"};

struct RatingExample {
  std::size_t user_id = 0;
  std::size_t movie_id = 0;
  float rating = 0.0f;
  std::int64_t timestamp = 0;
  std::vector<std::string> title_tokens;
  std::vector<std::size_t> genre_ids;  // {kUnknownGenre} when no flag is set
};

/// Replaces invalid UTF-8 sequences with U+FFFD. Returns the number of replacements.
inline std::size_t sanitize_utf8(std::string& s) {
  std::string out;
  std::size_t bad = 0;
  for (std::size_t i = 0; i < s.size();) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t len = c < 0x80 ? 1 : (c >> 5) == 0x6 ? 2 : (c >> 4) == 0xE ? 3 : (c >> 3) == 0x1E ? 4 : 0;
    bool ok = len > 0 && i + len <= s.size();
    for (std::size_t j = 1; ok && j < len; ++j) ok = (static_cast<unsigned char>(s[i + j]) >> 6) == 0x2;
    if (ok) {
      out.append(s, i, len);
      i += len;
    } else {
      out += "\xEF\xBF\xBD";
      ++bad;
      ++i;
    }
  }
  s = std::move(out);
  return bad;
}

/// Lowercase alphanumeric tokens with "(1995)"-style year parentheticals removed.
inline std::vector<std::string> tokenize_title(const std::string& title) {
  static const std::regex year(R"(\(\s*\d{4}\s*\))");
  const std::string stripped = std::regex_replace(title, year, " ");
  std::vector<std::string> tokens;
  std::string cur;
  for (char ch : stripped) {
    const auto c = static_cast<unsigned char>(ch);
    if (c < 0x80 && std::isalnum(c)) {
      cur += char(std::tolower(c));
    } else if (!cur.empty()) {
      tokens.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) tokens.push_back(std::move(cur));
  return tokens;
}

namespace detail {

inline std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream is(line);
  while (std::getline(is, field, sep)) out.push_back(field);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

template <typename Int>
Int parse_int(const std::string& s, const std::string& where) {
  try {
    std::size_t pos = 0;
    const long long v = std::stoll(s, &pos);
    if (pos != s.size()) throw std::invalid_argument("trailing characters");
    return Int(v);
  } catch (const std::exception&) {
    throw DataError(where + ": expected an integer, got '" + s + "'");
  }
}

}  // namespace detail

struct MovieInfo {
  std::vector<std::string> title_tokens;
  std::vector<std::size_t> genre_ids;
};

/// Parses u.item: id|title|release|video release|url|19 genre flags.
inline std::map<std::size_t, MovieInfo> read_movies(const std::filesystem::path& path, std::ostream& warn = std::cerr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::map<std::size_t, MovieInfo> movies;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::string where = path.filename().string() + ":" + std::to_string(lineno);
    auto f = detail::split(line, '|');
    if (f.size() != 5 + kGenreCount) {
      throw DataError(where + ": expected " + std::to_string(5 + kGenreCount) + " fields, got " + std::to_string(f.size()));
    }
    const auto id = detail::parse_int<std::size_t>(f[0], where);
    std::string title = f[1];
    if (auto bad = sanitize_utf8(title)) warn << "warning: " << where << ": " << bad << " invalid UTF-8 byte(s) in title\n";
    MovieInfo info;
    info.title_tokens = tokenize_title(title);
    for (std::size_t g = 0; g < kGenreCount; ++g) {
      const auto& flag = f[5 + g];
      if (flag != "0" && flag != "1") throw DataError(where + ": genre flag must be 0 or 1, got '" + flag + "'");
      if (flag == "1") info.genre_ids.push_back(g);
    }
    if (info.genre_ids.empty()) info.genre_ids.push_back(kUnknownGenre);
    movies[id] = std::move(info);
  }
  return movies;
}

/// Reads u.data (user, item, rating, timestamp; tab separated) joined with u.item.
inline std::vector<RatingExample> ingest_movielens(const std::filesystem::path& dir, std::ostream& warn = std::cerr) {
  const auto movies = read_movies(dir / "u.item", warn);
  const auto data_path = dir / "u.data";
  std::ifstream in(data_path);
  if (!in) throw DataError("cannot open " + data_path.string());
  std::vector<RatingExample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::string where = "u.data:" + std::to_string(lineno);
    auto f = detail::split(line, '\t');
    if (f.size() != 4) throw DataError(where + ": expected 4 tab-separated fields, got " + std::to_string(f.size()));
    RatingExample ex;
    ex.user_id = detail::parse_int<std::size_t>(f[0], where);
    ex.movie_id = detail::parse_int<std::size_t>(f[1], where);
    const int rating = detail::parse_int<int>(f[2], where);
    if (rating < 1 || rating > 5) throw DataError(where + ": rating out of [1,5]: " + f[2]);
    ex.rating = float(rating);
    ex.timestamp = detail::parse_int<std::int64_t>(f[3], where);
    auto it = movies.find(ex.movie_id);
    if (it == movies.end()) throw DataError(where + ": movie id " + f[1] + " missing from u.item");
    ex.title_tokens = it->second.title_tokens;
    ex.genre_ids = it->second.genre_ids;
    out.push_back(std::move(ex));
  }
  return out;
}

/// A train/eval pair of index lists into a shared example corpus.
struct TaskSpec {
  std::string name;  // "pretrain" or a genre name
  std::size_t genre = kUnknownGenre;
  std::size_t density_rank = 0;  // 1 = most eval examples
  std::vector<std::size_t> train;
  std::vector<std::size_t> eval;
};

/// Earliest 90% by timestamp for training; ties at the boundary go to training.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> temporal_split(
    const std::vector<RatingExample>& ex, double train_fraction = 0.9) {
  if (ex.empty()) throw DataError("cannot split an empty corpus");
  std::vector<std::size_t> order(ex.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return ex[a].timestamp < ex[b].timestamp; });
  const auto cut = std::size_t(std::ceil(train_fraction * double(ex.size())));
  const std::int64_t boundary = ex[order[std::max<std::size_t>(cut, 1) - 1]].timestamp;
  std::vector<std::size_t> train, eval;
  for (std::size_t i = 0; i < ex.size(); ++i) (ex[i].timestamp <= boundary ? train : eval).push_back(i);
  return {train, eval};
}

struct Tasks {
  TaskSpec pretrain;
  std::vector<TaskSpec> downstream;  // dense -> sparse
};

/// Pretraining over all genres plus one downstream task per genre with more
/// than `min_eval` evaluation examples, ordered by evaluation count.
inline Tasks make_tasks(const std::vector<RatingExample>& ex, std::size_t min_eval = 500) {
  auto [train, eval] = temporal_split(ex);
  Tasks t;
  t.pretrain = {"pretrain", kUnknownGenre, 0, train, eval};
  for (std::size_t g = 0; g < kGenreCount; ++g) {
    TaskSpec task{kGenreNames[g], g, 0, {}, {}};
    auto has = [&](std::size_t i) {
      const auto& ids = ex[i].genre_ids;
      return std::find(ids.begin(), ids.end(), g) != ids.end();
    };
    for (auto i : train)
      if (has(i)) task.train.push_back(i);
    for (auto i : eval)
      if (has(i)) task.eval.push_back(i);
    if (task.eval.size() > min_eval) t.downstream.push_back(std::move(task));
  }
  std::stable_sort(t.downstream.begin(), t.downstream.end(),
                   [](const TaskSpec& a, const TaskSpec& b) { return a.eval.size() > b.eval.size(); });
  for (std::size_t i = 0; i < t.downstream.size(); ++i) t.downstream[i].density_rank = i + 1;
  if (t.downstream.empty()) throw DataError("no genre has more than " + std::to_string(min_eval) + " eval examples");
  return t;
}

/// Title vocabulary plus id-table sizes, computed from training examples only.
struct Vocabulary {
  std::unordered_map<std::string, std::size_t> tokens;
  std::size_t max_user = 0;
  std::size_t max_movie = 0;

  static Vocabulary build(const std::vector<RatingExample>& ex, const std::vector<std::size_t>& train_idx) {
    Vocabulary v;
    std::vector<std::string> seen;
    for (auto i : train_idx)
      for (const auto& tok : ex[i].title_tokens) seen.push_back(tok);
    std::sort(seen.begin(), seen.end());
    seen.erase(std::unique(seen.begin(), seen.end()), seen.end());
    for (std::size_t i = 0; i < seen.size(); ++i) v.tokens.emplace(seen[i], i);
    // Ids index the tables directly; eval-only ids keep their (untrained) rows.
    for (const auto& e : ex) {
      v.max_user = std::max(v.max_user, e.user_id);
      v.max_movie = std::max(v.max_movie, e.movie_id);
    }
    return v;
  }

  std::size_t vocab_size() const { return std::max<std::size_t>(tokens.size(), 1); }
};

/// Sparse dataset over the selected examples. Out-of-vocabulary tokens are dropped.
inline Dataset to_dataset(const std::vector<RatingExample>& ex, const std::vector<std::size_t>& idx,
                          const Vocabulary& vocab) {
  Dataset d;
  d.kind = TaskKind::Regression;
  for (auto i : idx) {
    const auto& e = ex.at(i);
    d.sparse.user.push_back(e.user_id);
    d.sparse.movie.push_back(e.movie_id);
    std::vector<std::size_t> toks;
    for (const auto& t : e.title_tokens) {
      auto it = vocab.tokens.find(t);
      if (it != vocab.tokens.end()) toks.push_back(it->second);
    }
    d.sparse.title.push_back(std::move(toks));
    d.sparse.genre.push_back(e.genre_ids);
    d.targets.push_back(e.rating);
    d.group.push_back(std::int64_t(std::lround(e.rating)));
  }
  return d;
}

/// Header plus one tab-separated row per example.
inline void write_task_columns(std::ostream& os, const std::vector<RatingExample>& ex, const TaskSpec& task) {
  os << "split\tuser_id\tmovie_id\trating\ttimestamp\tgenres\ttitle_tokens\n";
  auto emit = [&](const char* split, std::size_t i) {
    const auto& e = ex[i];
    os << split << '\t' << e.user_id << '\t' << e.movie_id << '\t' << e.rating << '\t' << e.timestamp << '\t';
    for (std::size_t g = 0; g < e.genre_ids.size(); ++g) os << (g ? "," : "") << kGenreNames[e.genre_ids[g]];
    os << '\t';
    for (std::size_t t = 0; t < e.title_tokens.size(); ++t) os << (t ? " " : "") << e.title_tokens[t];
    os << '\n';
  };
  for (auto i : task.train) emit("train", i);
  for (auto i : task.eval) emit("eval", i);
}

/// Desk-scale distribution-shift generator.
///
/// Subpopulation c draws x ~ N(mu_c, I) and y = f_c(x) + noise. Nonlinear
/// tasks share a tanh feature map across subpopulations with
/// subpopulation-specific read-out; linear tasks use y = w_c.x + a_c.
struct SyntheticSpec {
  std::size_t input_dim = 16;
  std::size_t subpopulations = 4;
  std::vector<double> mixture = {0.25, 0.25, 0.25, 0.25};  // pretraining weights
  std::size_t downstream = 0;
  double noise_std = 0.3;
  bool linear = false;
  std::size_t feature_width = 24;  // shared tanh features (nonlinear only)
  double readout_shift = 0.5;      // per-subpopulation deviation of the read-out
  double center_scale = 1.5;
  std::size_t pretrain_train = 20000;
  std::size_t pretrain_eval = 2000;
  std::size_t downstream_train = 200;
  std::size_t downstream_eval = 2000;
  std::uint64_t seed = 7;

  void validate() const {
    if (input_dim == 0 || subpopulations == 0) throw ConfigError("synthetic: dims must be positive");
    if (mixture.size() != subpopulations) throw ConfigError("synthetic: mixture needs one weight per subpopulation");
    double total = 0.0;
    for (double w : mixture) {
      if (!(w >= 0.0)) throw ConfigError("synthetic: mixture weights must be non-negative");
      total += w;
    }
    if (!(total > 0.0)) throw ConfigError("synthetic: mixture weights sum to zero");
    if (downstream >= subpopulations) throw ConfigError("synthetic: downstream index out of range");
    if (!(noise_std >= 0.0)) throw ConfigError("synthetic: noise std must be non-negative");
    if (pretrain_train == 0 || pretrain_eval == 0 || downstream_train == 0 || downstream_eval == 0) {
      throw ConfigError("synthetic: split sizes must be positive");
    }
    if (!linear && feature_width == 0) throw ConfigError("synthetic: feature width must be positive");
  }
};

struct SyntheticTasks {
  Dataset pretrain_train, pretrain_eval, downstream_train, downstream_eval;
};

class SyntheticGenerator {
 public:
  explicit SyntheticGenerator(SyntheticSpec spec) : spec_(std::move(spec)), rng_(spec_.seed) {
    spec_.validate();
    std::normal_distribution<double> n01(0.0, 1.0);
    const std::size_t d = spec_.input_dim;
    centers_.assign(spec_.subpopulations, std::vector<double>(d));
    for (auto& c : centers_)
      for (auto& v : c) v = spec_.center_scale * n01(rng_);
    const std::size_t f = spec_.linear ? d : spec_.feature_width;
    if (!spec_.linear) {
      proj_.assign(f * d, 0.0);
      for (auto& v : proj_) v = n01(rng_) / std::sqrt(double(d));
      proj_bias_.assign(f, 0.0);
      for (auto& v : proj_bias_) v = 0.5 * n01(rng_);
    }
    std::vector<double> shared(f);
    for (auto& v : shared) v = n01(rng_) / std::sqrt(double(f));
    readout_.assign(spec_.subpopulations, std::vector<double>(f));
    offset_.assign(spec_.subpopulations, 0.0);
    for (std::size_t c = 0; c < spec_.subpopulations; ++c) {
      for (std::size_t j = 0; j < f; ++j) readout_[c][j] = shared[j] + spec_.readout_shift * n01(rng_) / std::sqrt(double(f));
      offset_[c] = 0.5 * n01(rng_);
    }
  }

  const SyntheticSpec& spec() const { return spec_; }

  /// Noise-free target for subpopulation c.
  double target(std::size_t c, std::span<const double> x) const {
    const std::size_t d = spec_.input_dim;
    double y = offset_[c];
    if (spec_.linear) {
      for (std::size_t j = 0; j < d; ++j) y += readout_[c][j] * x[j];
      return y;
    }
    for (std::size_t j = 0; j < spec_.feature_width; ++j) {
      double a = proj_bias_[j];
      for (std::size_t i = 0; i < d; ++i) a += proj_[j * d + i] * x[i];
      y += readout_[c][j] * std::tanh(a);
    }
    return y;
  }

  /// n examples; subpopulation drawn from `weights` (or fixed when weights has one nonzero entry).
  Dataset sample(std::size_t n, const std::vector<double>& weights) {
    std::discrete_distribution<std::size_t> pick(weights.begin(), weights.end());
    std::normal_distribution<double> n01(0.0, 1.0);
    Dataset out;
    out.kind = TaskKind::Regression;
    out.input_width = spec_.input_dim;
    std::vector<double> x(spec_.input_dim);
    for (std::size_t r = 0; r < n; ++r) {
      const std::size_t c = pick(rng_);
      for (std::size_t j = 0; j < x.size(); ++j) x[j] = centers_[c][j] + n01(rng_);
      const double y = target(c, x) + spec_.noise_std * n01(rng_);
      for (double v : x) out.dense.push_back(float(v));
      out.targets.push_back(float(y));
      out.group.push_back(std::int64_t(c));
    }
    return out;
  }

  SyntheticTasks generate() {
    std::vector<double> only(spec_.subpopulations, 0.0);
    only[spec_.downstream] = 1.0;
    SyntheticTasks t;
    t.pretrain_train = sample(spec_.pretrain_train, spec_.mixture);
    t.pretrain_eval = sample(spec_.pretrain_eval, spec_.mixture);
    t.downstream_train = sample(spec_.downstream_train, only);
    t.downstream_eval = sample(spec_.downstream_eval, only);
    return t;
  }

 private:
  SyntheticSpec spec_;
  Rng rng_;
  std::vector<std::vector<double>> centers_;
  std::vector<double> proj_, proj_bias_;
  std::vector<std::vector<double>> readout_;
  std::vector<double> offset_;
};

inline SyntheticTasks gen_synthetic(const SyntheticSpec& spec) { return SyntheticGenerator(spec).generate(); }

/// Dense dataset as a header plus tab-separated rows (group, target, features).
inline void write_dense_columns(std::ostream& os, const Dataset& d, const std::string& split) {
  os << "split\tgroup\ttarget";
  for (std::size_t j = 0; j < d.input_width; ++j) os << "\tx" << j;
  os << '\n';
  os.precision(9);
  for (std::size_t i = 0; i < d.size(); ++i) {
    os << split << '\t' << (d.group.empty() ? 0 : d.group[i]) << '\t' << d.targets[i];
    for (std::size_t j = 0; j < d.input_width; ++j) os << '\t' << d.dense[i * d.input_width + j];
    os << '\n';
  }
}

}  // namespace td::data
