#pragma once

#include <algorithm>
#include <array>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "tste/rng.hpp"
#include "tste/tensor.hpp"

namespace tste::data {

/// Multivariate series, values[D, T]. The leading CSV field is kept both ways:
/// an integral non-negative head becomes a class label, and it is always
/// available as a forecast target.
struct TimeSeries {
  Tensor values;
  std::optional<int> label;
  std::optional<std::vector<float>> target;

  int channels() const { return values.dim(0); }
  int length() const { return values.dim(1); }
};

/// Contiguous slice [start, end) of a source series.
struct TsToken {
  Tensor values;  // [D, L]
  int source = 0;
  int start = 0;
  int end = 0;

  int channels() const { return values.dim(0); }
  int length() const { return values.dim(1); }

  bool overlaps(const TsToken& o) const {
    return source == o.source && start < o.end && o.start < end;
  }
};

struct AugmentConfig {
  float jitter_sigma = 0.08f;
  float scale_sigma = 0.1f;
  int max_segments = 5;
  uint64_t seed = 0;
};

inline TsToken slice_token(const TimeSeries& x, int source, int start, int end) {
  const int D = x.channels();
  Tensor v({D, end - start});
  for (int d = 0; d < D; ++d)
    for (int t = start; t < end; ++t) v.at(d, t - start) = x.values.at(d, t);
  return TsToken{std::move(v), source, start, end};
}

/// Sliding windows with random lengths and advance steps; walks the series
/// left to right until fewer than len_range.min points remain.
inline std::vector<TsToken> segment(const TimeSeries& x, std::array<int, 2> len_range,
                                    std::array<int, 2> step_range, uint64_t seed, int source = 0) {
  const int T = x.length();
  if (len_range[0] < 4) throw ParamError("segment: minimum token length must be >= 4");
  if (len_range[1] < len_range[0] || step_range[1] < step_range[0])
    throw ParamError("segment: empty range");
  if (step_range[0] < 1) throw ParamError("segment: step must be >= 1");

  std::vector<TsToken> out;
  if (T < len_range[0]) return out;
  Rng rng(seed);
  int pos = 0;
  while (T - pos >= len_range[0]) {
    int len = rng.uniform_int(len_range[0], len_range[1]);
    len = std::min(len, T - pos);
    out.push_back(slice_token(x, source, pos, pos + len));
    pos += rng.uniform_int(step_range[0], step_range[1]);
  }
  return out;
}

/// Jitter-and-scale: per-channel scale noise plus per-point jitter.
inline TsToken augment_weak(const TsToken& s, const AugmentConfig& cfg) {
  if (cfg.jitter_sigma < 0 || cfg.scale_sigma < 0) throw ParamError("augment: negative sigma");
  Rng rng(cfg.seed);
  const int D = s.channels(), L = s.length();
  TsToken out = s;
  for (int d = 0; d < D; ++d) {
    const float gain = 1.0f + rng.normal(0.0f, cfg.scale_sigma);
    for (int t = 0; t < L; ++t)
      out.values.at(d, t) = s.values.at(d, t) * gain + rng.normal(0.0f, cfg.jitter_sigma);
  }
  return out;
}

/// Permutation-and-jitter: split into a random number of contiguous segments,
/// shuffle segment order, then jitter. Value multiset is preserved up to jitter.
inline TsToken augment_strong(const TsToken& s, const AugmentConfig& cfg) {
  const int L = s.length();
  if (cfg.max_segments < 1) throw ParamError("augment_strong: max_segments must be >= 1");
  if (cfg.max_segments > L) throw ParamError("augment_strong: max_segments exceeds token length");
  Rng rng(cfg.seed);
  const int nseg = rng.uniform_int(1, cfg.max_segments);

  // nseg-1 distinct cut points in [1, L-1], uniform.
  std::vector<int> cuts;
  if (nseg > 1) {
    std::vector<int> candidates(static_cast<size_t>(L - 1));
    for (int i = 0; i < L - 1; ++i) candidates[static_cast<size_t>(i)] = i + 1;
    rng.shuffle(candidates);
    cuts.assign(candidates.begin(), candidates.begin() + (nseg - 1));
    std::sort(cuts.begin(), cuts.end());
  }
  std::vector<std::pair<int, int>> segs;
  int prev = 0;
  for (int c : cuts) {
    segs.emplace_back(prev, c);
    prev = c;
  }
  segs.emplace_back(prev, L);
  rng.shuffle(segs);

  const int D = s.channels();
  TsToken out = s;
  int w = 0;
  for (const auto& [b, e] : segs)
    for (int t = b; t < e; ++t, ++w)
      for (int d = 0; d < D; ++d) out.values.at(d, w) = s.values.at(d, t);
  for (int d = 0; d < D; ++d)
    for (int t = 0; t < L; ++t) out.values.at(d, t) += rng.normal(0.0f, cfg.jitter_sigma);
  return out;
}

/// Result of positive/negative sampling for one anchor. positive == -1 means
/// the positive is an augmented view of the anchor rather than another token.
struct PairSample {
  int anchor = -1;
  int positive = -1;
  bool augmented = false;
  std::vector<int> negatives;
};

inline PairSample sample_pairs(const std::vector<TsToken>& tokens, int anchor_id, uint64_t seed,
                               float overlap_prob = 0.5f) {
  if (tokens.size() < 2) throw UsageError("sample_pairs: need at least 2 tokens");
  if (anchor_id < 0 || anchor_id >= static_cast<int>(tokens.size()))
    throw UsageError("sample_pairs: anchor id out of range");
  const TsToken& a = tokens[static_cast<size_t>(anchor_id)];

  PairSample out;
  out.anchor = anchor_id;
  std::vector<int> overlapping;
  for (int j = 0; j < static_cast<int>(tokens.size()); ++j) {
    if (j == anchor_id) continue;
    if (a.overlaps(tokens[static_cast<size_t>(j)]))
      overlapping.push_back(j);
    else
      out.negatives.push_back(j);
  }
  if (out.negatives.empty()) throw SamplingError("sample_pairs: no valid negative exists");

  Rng rng(seed);
  if (!overlapping.empty() && rng.coin(overlap_prob)) {
    out.positive = overlapping[rng.bounded(static_cast<uint32_t>(overlapping.size()))];
  } else {
    out.positive = -1;
    out.augmented = true;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset CSV: one series per line, `head;v1,v2,...`. Multivariate steps use
// space-separated channel values inside each comma field.
// ---------------------------------------------------------------------------

namespace detail {

inline float parse_float_strict(const std::string& s, int line_no) {
  if (s.empty()) throw ParseError("line " + std::to_string(line_no) + ": empty numeric field");
  size_t used = 0;
  float v;
  try {
    v = std::stof(s, &used);
  } catch (const std::exception&) {
    throw ParseError("line " + std::to_string(line_no) + ": non-numeric cell '" + s + "'");
  }
  if (used != s.size())
    throw ParseError("line " + std::to_string(line_no) + ": non-numeric cell '" + s + "'");
  if (!std::isfinite(v)) throw ParseError("line " + std::to_string(line_no) + ": non-finite value");
  return v;
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace detail

inline std::vector<TimeSeries> parse_dataset(std::istream& in) {
  std::vector<TimeSeries> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.pop_back();
    if (line.empty()) continue;
    const size_t semi = line.find(';');
    if (semi == std::string::npos)
      throw ParseError("line " + std::to_string(line_no) + ": missing ';' separator");
    const float head = detail::parse_float_strict(line.substr(0, semi), line_no);
    const auto steps = detail::split(line.substr(semi + 1), ',');
    if (steps.empty() || (steps.size() == 1 && steps[0].empty()))
      throw ParseError("line " + std::to_string(line_no) + ": no values");
    int D = -1;
    std::vector<std::vector<float>> cols;
    cols.reserve(steps.size());
    for (const auto& step : steps) {
      std::vector<float> ch;
      for (const auto& cell : detail::split(step, ' ')) {
        if (cell.empty()) continue;
        ch.push_back(detail::parse_float_strict(cell, line_no));
      }
      if (ch.empty()) throw ParseError("line " + std::to_string(line_no) + ": empty time step");
      if (D < 0) D = static_cast<int>(ch.size());
      if (static_cast<int>(ch.size()) != D)
        throw ParseError("line " + std::to_string(line_no) + ": inconsistent channel count");
      cols.push_back(std::move(ch));
    }
    const int T = static_cast<int>(cols.size());
    if (T < 4) throw ParseError("line " + std::to_string(line_no) + ": series shorter than 4 points");
    TimeSeries ts;
    ts.values = Tensor({D, T});
    for (int t = 0; t < T; ++t)
      for (int d = 0; d < D; ++d) ts.values.at(d, t) = cols[static_cast<size_t>(t)][static_cast<size_t>(d)];
    const float r = std::round(head);
    if (head >= 0.0f && std::abs(head - r) < 1e-9f) ts.label = static_cast<int>(r);
    ts.target = std::vector<float>{head};
    out.push_back(std::move(ts));
  }
  return out;
}

inline std::vector<TimeSeries> load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open dataset: " + path);
  return parse_dataset(in);
}

inline std::string format_float(float v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(v));
  return buf;
}

inline void write_dataset(std::ostream& out, const std::vector<TimeSeries>& data) {
  for (const auto& ts : data) {
    float head = 0.0f;
    if (ts.target && !ts.target->empty())
      head = (*ts.target)[0];
    else if (ts.label)
      head = static_cast<float>(*ts.label);
    out << format_float(head) << ';';
    const int D = ts.channels(), T = ts.length();
    for (int t = 0; t < T; ++t) {
      if (t) out << ',';
      for (int d = 0; d < D; ++d) {
        if (d) out << ' ';
        out << format_float(ts.values.at(d, t));
      }
    }
    out << '\n';
  }
}

inline void save_dataset(const std::string& path, const std::vector<TimeSeries>& data) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path);
  write_dataset(out, data);
  if (!out) throw IoError("write failed: " + path);
}

}  // namespace tste::data
