// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <memory>
#include <numbers>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "msft/backbone.hpp"
#include "msft/numerics/rng.hpp"

namespace msft {

struct SeriesTable {
  std::vector<std::string> names;
  std::vector<std::vector<double>> columns;
  std::vector<std::string> timestamps;  // empty unless the file had a timestamp column

  std::size_t length() const { return columns.empty() ? 0 : columns.front().size(); }
  std::size_t width() const { return columns.size(); }

  void validate() const {
    for (std::size_t c = 0; c < columns.size(); ++c) {
      if (columns[c].size() != length()) throw ParseError("column '" + names[c] + "' has a different length");
      for (double v : columns[c])
        if (!std::isfinite(v)) throw ParseError("column '" + names[c] + "' holds a non-finite value");
    }
  }
};

namespace detail {

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline bool parse_double(const std::string& cell, double& out) {
  const std::string t = trim(cell);
  if (t.empty()) return false;
  const char* first = t.data();
  if (*first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, t.data() + t.size(), out);
  return ec == std::errc() && ptr == t.data() + t.size() && std::isfinite(out);
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cur;
  bool quoted = false;
  for (char ch : line) {
    if (ch == '"') {
      quoted = !quoted;
    } else if (ch == ',' && !quoted) {
      cells.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  cells.push_back(cur);
  return cells;
}

}  // namespace detail

/// Comma-separated numeric table. The first row is a header when any of
/// its cells fails to parse as a number; column 0 is a timestamp column
/// when its first data cell fails to parse. Errors cite 1-based file lines.
inline SeriesTable parse_csv(std::istream& in, const std::string& source = "<csv>") {
  std::vector<std::pair<std::size_t, std::vector<std::string>>> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    rows.emplace_back(lineno, detail::split_csv_line(line));
  }
  if (rows.empty()) throw ParseError(source + ": no rows");

  std::size_t first_data = 0;
  std::vector<std::string> header;
  for (const auto& cell : rows[0].second) {
    double v;
    if (!detail::parse_double(cell, v)) {
      header = rows[0].second;
      first_data = 1;
      break;
    }
  }
  if (first_data >= rows.size()) throw ParseError(source + ": header without data rows");
  const std::size_t width = rows[first_data].second.size();
  double probe;
  const bool has_time = !detail::parse_double(rows[first_data].second[0], probe);
  const std::size_t start = has_time ? 1 : 0;
  if (width <= start) throw ParseError(source + ": no numeric columns");

  SeriesTable table;
  for (std::size_t c = start; c < width; ++c) {
    table.names.push_back(!header.empty() && c < header.size() ? detail::trim(header[c]) : "col" + std::to_string(c - start));
  }
  table.columns.assign(width - start, {});
  for (std::size_t r = first_data; r < rows.size(); ++r) {
    const auto& [ln, cells] = rows[r];
    if (cells.size() != width) {
      throw ParseError(source + ": row " + std::to_string(ln) + " has " + std::to_string(cells.size()) +
                       " cells, expected " + std::to_string(width));
    }
    if (has_time) table.timestamps.push_back(detail::trim(cells[0]));
    for (std::size_t c = start; c < width; ++c) {
      double v;
      if (!detail::parse_double(cells[c], v)) {
        throw ParseError(source + ": row " + std::to_string(ln) + ", column " + std::to_string(c + 1) +
                         ": cannot parse '" + detail::trim(cells[c]) + "' as a number");
      }
      table.columns[c - start].push_back(v);
    }
  }
  return table;
}

inline SeriesTable load_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open '" + path + "'");
  return parse_csv(in, path);
}

// ---------------------------------------------------------------------------
// Synthetic series

struct SineComponent {
  double period = 8.0;
  double amplitude = 1.0;
};

/// sum_k a_k sin(2 pi t / p_k) + N(0, noise^2) noise from `seed`.
inline SeriesTable synth_series(const std::vector<SineComponent>& components, double noise, std::size_t T,
                                std::uint64_t seed, const std::string& name = "synth") {
  for (const auto& c : components)
    if (c.period < 2.0) throw ConfigError("synthetic period must be >= 2, got " + std::to_string(c.period));
  Rng rng(seed);
  SeriesTable t;
  t.names = {name};
  t.columns.assign(1, std::vector<double>(T, 0.0));
  for (std::size_t i = 0; i < T; ++i) {
    double v = 0.0;
    for (const auto& c : components) v += c.amplitude * std::sin(2.0 * std::numbers::pi * static_cast<double>(i) / c.period);
    if (noise != 0.0) v += noise * rng.normal();
    t.columns[0][i] = v;
  }
  return t;
}

// ---------------------------------------------------------------------------
// Splits and normalization

struct SplitSpec {
  double train = 0.7, val = 0.1, test = 0.2;

  void validate() const {
    if (!(train > 0 && val > 0 && test > 0)) throw ConfigError("split ratios must be positive");
    if (std::abs(train + val + test - 1.0) > 1e-9) throw ConfigError("split ratios must sum to 1");
  }
  /// [begin, end) of each split along the time axis.
  std::array<std::pair<std::size_t, std::size_t>, 3> bounds(std::size_t T) const {
    validate();
    const auto n_train = static_cast<std::size_t>(std::floor(static_cast<double>(T) * train + 1e-9));
    const auto n_val = static_cast<std::size_t>(std::floor(static_cast<double>(T) * val + 1e-9));
    return {{{0, n_train}, {n_train, n_train + n_val}, {n_train + n_val, T}}};
  }
};

struct Normalizer {
  std::vector<double> mean, stddev;
  static constexpr double kStdFloor = 1e-8;

  /// Statistics from rows [0, train_end) of every column.
  static Normalizer fit(const SeriesTable& table, std::size_t train_end) {
    if (train_end == 0 || train_end > table.length()) throw ContractError("normalizer: empty train range");
    Normalizer n;
    for (const auto& col : table.columns) {
      double mu = 0.0;
      for (std::size_t i = 0; i < train_end; ++i) mu += col[i];
      mu /= static_cast<double>(train_end);
      double var = 0.0;
      for (std::size_t i = 0; i < train_end; ++i) var += (col[i] - mu) * (col[i] - mu);
      var /= static_cast<double>(train_end);
      n.mean.push_back(mu);
      n.stddev.push_back(std::max(std::sqrt(var), kStdFloor));
    }
    return n;
  }

  double normalize(std::size_t col, double v) const { return (v - mean.at(col)) / stddev.at(col); }
  double denormalize(std::size_t col, double z) const { return z * stddev.at(col) + mean.at(col); }

  SeriesTable apply(const SeriesTable& t) const {
    if (t.width() != mean.size()) throw DimensionError("normalizer column count mismatch");
    SeriesTable out = t;
    for (std::size_t c = 0; c < t.width(); ++c)
      for (double& v : out.columns[c]) v = normalize(c, v);
    return out;
  }
  SeriesTable invert(const SeriesTable& t) const {
    if (t.width() != mean.size()) throw DimensionError("normalizer column count mismatch");
    SeriesTable out = t;
    for (std::size_t c = 0; c < t.width(); ++c)
      for (double& v : out.columns[c]) v = denormalize(c, v);
    return out;
  }
};

// ---------------------------------------------------------------------------
// Windows

struct Window {
  std::size_t column = 0;
  std::size_t start = 0;  // first context step
};

/// Sliding (context, horizon) windows over a shared table.
struct WindowDataset {
  std::shared_ptr<const SeriesTable> table;
  std::size_t context_len = 0;
  std::size_t horizon_len = 0;
  std::vector<Window> windows;
  std::string name;

  std::size_t size() const { return windows.size(); }

  std::span<const double> context(std::size_t i) const {
    const auto& w = windows.at(i);
    return std::span<const double>(table->columns[w.column]).subspan(w.start, context_len);
  }
  std::span<const double> horizon(std::size_t i) const {
    const auto& w = windows.at(i);
    return std::span<const double>(table->columns[w.column]).subspan(w.start + context_len, horizon_len);
  }

  Batch batch(std::span<const std::size_t> indices, bool with_targets = true) const {
    Batch b;
    b.context_len = context_len;
    b.horizon_len = horizon_len;
    for (std::size_t i : indices) {
      auto c = context(i);
      b.context.insert(b.context.end(), c.begin(), c.end());
      if (with_targets) {
        auto h = horizon(i);
        b.horizon.insert(b.horizon.end(), h.begin(), h.end());
      }
    }
    return b;
  }

  /// Indices 0, stride, 2*stride, ...
  std::vector<std::size_t> strided(std::size_t stride) const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < size(); i += std::max<std::size_t>(stride, 1)) idx.push_back(i);
    return idx;
  }
};

struct SplitDatasets {
  WindowDataset train, val, test;
  Normalizer normalizer;
};

/// Windows of one time range [begin, end) for every column.
inline WindowDataset windows_in_range(std::shared_ptr<const SeriesTable> table, std::size_t begin, std::size_t end,
                                      std::size_t C, std::size_t H, std::size_t stride, const std::string& name) {
  if (C == 0 || H == 0) throw ConfigError("context and horizon lengths must be >= 1");
  if (stride == 0) throw ConfigError("window stride must be >= 1");
  const std::size_t len = end - begin;
  if (C + H > len) {
    throw ConfigError("split '" + name + "' has " + std::to_string(len) + " steps, fewer than one window of " +
                      std::to_string(C + H));
  }
  WindowDataset ds;
  ds.table = std::move(table);
  ds.context_len = C;
  ds.horizon_len = H;
  ds.name = name;
  for (std::size_t c = 0; c < ds.table->width(); ++c)
    for (std::size_t s = begin; s + C + H <= end; s += stride) ds.windows.push_back({c, s});
  return ds;
}

/// Normalizes with train-range statistics, then cuts stride-spaced windows
/// inside each split; no window crosses a split boundary.
inline SplitDatasets make_windows(const SeriesTable& raw, std::size_t C, std::size_t H, const SplitSpec& split,
                                  std::size_t stride = 1, bool normalize = true) {
  raw.validate();
  const auto b = split.bounds(raw.length());
  SplitDatasets out;
  std::shared_ptr<const SeriesTable> table;
  if (normalize) {
    out.normalizer = Normalizer::fit(raw, b[0].second);
    table = std::make_shared<const SeriesTable>(out.normalizer.apply(raw));
  } else {
    table = std::make_shared<const SeriesTable>(raw);
  }
  out.train = windows_in_range(table, b[0].first, b[0].second, C, H, stride, "train");
  out.val = windows_in_range(table, b[1].first, b[1].second, C, H, stride, "val");
  out.test = windows_in_range(table, b[2].first, b[2].second, C, H, stride, "test");
  return out;
}

// ---------------------------------------------------------------------------
// Autocorrelation

/// Sample ACF r_k = sum_{t<n-k} (x_t - m)(x_{t+k} - m) / sum_t (x_t - m)^2
/// for k = 1..max_lag; a constant window gives all zeros.
inline std::vector<double> acf(std::span<const double> x, std::size_t max_lag) {
  if (x.size() <= max_lag) {
    throw ContractError("acf: window of " + std::to_string(x.size()) + " steps needs more than max_lag " +
                        std::to_string(max_lag));
  }
  const std::size_t n = x.size();
  std::vector<double> zeros(max_lag, 0.0);
  if (std::all_of(x.begin(), x.end(), [&](double v) { return v == x.front(); })) return zeros;
  double m = 0.0;
  for (double v : x) m += v;
  m /= static_cast<double>(n);
  double denom = 0.0;
  for (double v : x) denom += (v - m) * (v - m);
  if (denom <= 0.0) return zeros;
  std::vector<double> out(max_lag, 0.0);
  for (std::size_t k = 1; k <= max_lag; ++k) {
    double num = 0.0;
    for (std::size_t t = 0; t + k < n; ++t) num += (x[t] - m) * (x[t + k] - m);
    out[k - 1] = num / denom;
  }
  return out;
}

}  // namespace msft
