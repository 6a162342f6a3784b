#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "clora/errors.hpp"

namespace clora::bench {

using json = nlohmann::json;

inline constexpr const char* run_header = "method,config,shots,seed,zs_acc,acc,trainable,total,iters,seconds";
inline constexpr const char* ablation_extra_header = "group,rank,span,encoders";

/// One evaluated run; `seed` is empty for a mean-over-seeds row.
struct RunReport {
  std::string method;
  std::string config;
  std::size_t shots = 0;
  std::optional<std::uint64_t> seed;
  double zs_acc = 0;
  double acc = 0;
  std::size_t trainable = 0;
  std::size_t total = 0;
  std::size_t iters = 0;
  double seconds = 0;

  bool is_mean() const noexcept { return !seed.has_value(); }
  friend bool operator==(const RunReport&, const RunReport&) = default;
};

struct AblationRow {
  RunReport run;
  std::string group;
  std::size_t rank = 0;
  std::string span;
  std::string encoders;
  std::string error;  // set when the cell could not run
};

inline std::string format_fixed(double v, int digits) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

inline std::string to_csv(const RunReport& r) {
  std::ostringstream os;
  os << r.method << ',' << r.config << ',' << r.shots << ',' << (r.seed ? std::to_string(*r.seed) : "mean") << ','
     << format_fixed(r.zs_acc, 6) << ',' << format_fixed(r.acc, 6) << ',' << r.trainable << ',' << r.total << ','
     << r.iters << ',' << format_fixed(r.seconds, 3);
  return os.str();
}

inline std::string to_csv(const AblationRow& r) {
  return to_csv(r.run) + ',' + r.group + ',' + std::to_string(r.rank) + ',' + r.span + ',' + r.encoders;
}

/// Mean over the per-seed rows (all must share method, config and shots).
inline RunReport mean_row(const std::vector<RunReport>& rows) {
  if (rows.empty()) throw DomainError("mean over zero runs");
  RunReport m = rows.front();
  m.seed.reset();
  m.zs_acc = m.acc = m.seconds = 0;
  for (const auto& r : rows) {
    m.zs_acc += r.zs_acc;
    m.acc += r.acc;
    m.seconds += r.seconds;
  }
  const double n = static_cast<double>(rows.size());
  m.zs_acc /= n;
  m.acc /= n;
  m.seconds /= n;
  return m;
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
  if (!f) throw IoError("failed writing " + path.string());
}

inline std::string run_csv(const std::vector<RunReport>& rows) {
  std::string out = std::string(run_header) + '\n';
  for (const auto& r : rows) out += to_csv(r) + '\n';
  return out;
}

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::string out = std::string(run_header) + ',' + ablation_extra_header + '\n';
  for (const auto& r : rows) out += to_csv(r) + '\n';
  return out;
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cols;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      cols.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  cols.push_back(cur);
  return cols;
}

template <class F>
auto parse_field(const std::string& text, std::size_t line, const char* column, F&& f) {
  try {
    std::size_t used = 0;
    auto v = f(text, &used);
    if (used != text.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw FormatError("line " + std::to_string(line) + ": bad " + column + " value '" + text + "'");
  }
}

inline double parse_double(const std::string& s, std::size_t line, const char* col) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  return parse_field(s, line, col, [](const std::string& t, std::size_t* u) { return std::stod(t, u); });
}

inline std::size_t parse_size(const std::string& s, std::size_t line, const char* col) {
  if (!s.empty() && s[0] == '-') throw FormatError("line " + std::to_string(line) + ": negative " + col);
  return parse_field(s, line, col, [](const std::string& t, std::size_t* u) { return std::stoull(t, u); });
}

}  // namespace detail

/// Parses a run-report or ablation CSV (the header decides which). Errors
/// carry the 1-based line number.
inline std::vector<RunReport> parse_run_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw FormatError("line 1: missing header");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const std::string ablation = std::string(run_header) + ',' + ablation_extra_header;
  std::size_t expected = 0;
  if (line == run_header) {
    expected = 10;
  } else if (line == ablation) {
    expected = 14;
  } else {
    throw FormatError("line 1: unexpected header '" + line + "'");
  }
  std::vector<RunReport> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto c = detail::split_csv_line(line);
    if (c.size() != expected) {
      throw FormatError("line " + std::to_string(lineno) + ": expected " + std::to_string(expected) + " fields, got " +
                        std::to_string(c.size()));
    }
    RunReport r;
    r.method = c[0];
    if (r.method.empty()) throw FormatError("line " + std::to_string(lineno) + ": empty method");
    r.config = c[1];
    r.shots = detail::parse_size(c[2], lineno, "shots");
    if (c[3] != "mean") r.seed = detail::parse_size(c[3], lineno, "seed");
    r.zs_acc = detail::parse_double(c[4], lineno, "zs_acc");
    r.acc = detail::parse_double(c[5], lineno, "acc");
    for (double a : {r.zs_acc, r.acc}) {
      if (!std::isnan(a) && (a < 0.0 || a > 1.0)) {
        throw FormatError("line " + std::to_string(lineno) + ": accuracy outside [0, 1]");
      }
    }
    r.trainable = detail::parse_size(c[6], lineno, "trainable");
    r.total = detail::parse_size(c[7], lineno, "total");
    r.iters = detail::parse_size(c[8], lineno, "iters");
    r.seconds = detail::parse_double(c[9], lineno, "seconds");
    rows.push_back(std::move(r));
  }
  return rows;
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

/// Method x shots pivot of mean accuracy. mark: 1 = best in its shots column
/// (every tied cell), 2 = second best, 0 = neither.
struct SummaryCell {
  std::string method;
  std::size_t shots = 0;
  double mean = 0;
  std::size_t runs = 0;
  int mark = 0;

  friend bool operator==(const SummaryCell&, const SummaryCell&) = default;
};

struct SummaryTable {
  std::vector<std::string> methods;  // first-appearance order
  std::vector<std::size_t> shots;    // ascending
  std::vector<SummaryCell> cells;

  const SummaryCell* find(const std::string& method, std::size_t s) const {
    for (const auto& c : cells)
      if (c.method == method && c.shots == s) return &c;
    return nullptr;
  }

  friend bool operator==(const SummaryTable&, const SummaryTable&) = default;
};

/// Averages per-seed rows; mean rows and failed (nan) runs are skipped.
inline SummaryTable summarize(const std::vector<RunReport>& rows) {
  SummaryTable t;
  struct Acc {
    double sum = 0;
    std::size_t n = 0;
  };
  std::vector<std::vector<Acc>> acc;
  for (const auto& r : rows) {
    if (r.is_mean() || std::isnan(r.acc)) continue;
    auto m = std::find(t.methods.begin(), t.methods.end(), r.method);
    if (m == t.methods.end()) {
      t.methods.push_back(r.method);
      m = t.methods.end() - 1;
    }
    if (std::find(t.shots.begin(), t.shots.end(), r.shots) == t.shots.end()) t.shots.push_back(r.shots);
  }
  std::sort(t.shots.begin(), t.shots.end());
  acc.assign(t.methods.size(), std::vector<Acc>(t.shots.size()));
  for (const auto& r : rows) {
    if (r.is_mean() || std::isnan(r.acc)) continue;
    const auto mi = static_cast<std::size_t>(std::find(t.methods.begin(), t.methods.end(), r.method) - t.methods.begin());
    const auto si = static_cast<std::size_t>(std::find(t.shots.begin(), t.shots.end(), r.shots) - t.shots.begin());
    acc[mi][si].sum += r.acc;
    acc[mi][si].n += 1;
  }
  for (std::size_t mi = 0; mi < t.methods.size(); ++mi)
    for (std::size_t si = 0; si < t.shots.size(); ++si)
      if (acc[mi][si].n) {
        t.cells.push_back({t.methods[mi], t.shots[si], acc[mi][si].sum / static_cast<double>(acc[mi][si].n), acc[mi][si].n, 0});
      }
  for (std::size_t s : t.shots) {
    double best = -1, second = -1;
    for (const auto& c : t.cells)
      if (c.shots == s) best = std::max(best, c.mean);
    for (const auto& c : t.cells)
      if (c.shots == s && c.mean < best) second = std::max(second, c.mean);
    for (auto& c : t.cells) {
      if (c.shots != s) continue;
      c.mark = c.mean == best ? 1 : (c.mean == second ? 2 : 0);
    }
  }
  return t;
}

/// Plain-text table in percent; best cells wrapped in *...*, second best in _..._.
inline std::string render_text(const SummaryTable& t) {
  std::size_t w0 = 6;
  for (const auto& m : t.methods) w0 = std::max(w0, m.size());
  std::ostringstream os;
  os << std::left << std::setw(static_cast<int>(w0)) << "method";
  for (std::size_t s : t.shots) os << "  " << std::right << std::setw(9) << (std::to_string(s) + "-shot");
  os << '\n';
  for (const auto& m : t.methods) {
    os << std::left << std::setw(static_cast<int>(w0)) << m;
    for (std::size_t s : t.shots) {
      const SummaryCell* c = t.find(m, s);
      std::string v = c ? format_fixed(100.0 * c->mean, 2) : "-";
      if (c && c->mark == 1) v = "*" + v + "*";
      if (c && c->mark == 2) v = "_" + v + "_";
      os << "  " << std::right << std::setw(9) << v;
    }
    os << '\n';
  }
  os << "(*best*, _second best_, ties share a mark)\n";
  return os.str();
}

inline json to_json(const SummaryTable& t) {
  json cells = json::array();
  for (const auto& c : t.cells) {
    cells.push_back({{"method", c.method}, {"shots", c.shots}, {"mean", c.mean}, {"runs", c.runs}, {"mark", c.mark}});
  }
  return {{"methods", t.methods}, {"shots", t.shots}, {"cells", cells}};
}

inline SummaryTable summary_from_json(const json& j) {
  SummaryTable t;
  try {
    t.methods = j.at("methods").get<std::vector<std::string>>();
    t.shots = j.at("shots").get<std::vector<std::size_t>>();
    for (const auto& c : j.at("cells")) {
      t.cells.push_back({c.at("method").get<std::string>(), c.at("shots").get<std::size_t>(), c.at("mean").get<double>(),
                         c.at("runs").get<std::size_t>(), c.at("mark").get<int>()});
    }
  } catch (const json::exception& e) {
    throw FormatError("malformed summary JSON: " + std::string(e.what()));
  }
  return t;
}

}  // namespace clora::bench
