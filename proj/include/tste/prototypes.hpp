#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "tste/rng.hpp"
#include "tste/serialize.hpp"
#include "tste/tensor.hpp"

namespace tste::proto {

/// Frozen vocabulary embedding matrix [V, M] plus token strings.
struct VocabMatrix {
  Tensor embeddings;
  std::vector<std::string> tokens;

  int size() const { return embeddings.dim(0); }
  int width() const { return embeddings.dim(1); }

  int find(const std::string& word) const {
    for (int i = 0; i < static_cast<int>(tokens.size()); ++i)
      if (tokens[static_cast<size_t>(i)] == word) return i;
    return -1;
  }
};

/// k direction vectors in the text embedding space, rows of [k, M].
struct PrototypeSet {
  Tensor vectors;

  int count() const { return vectors.dim(0); }
  int width() const { return vectors.dim(1); }
};

namespace detail {

inline void sign_fix(std::vector<double>& v) {
  size_t arg = 0;
  for (size_t i = 1; i < v.size(); ++i)
    if (std::abs(v[i]) > std::abs(v[arg])) arg = i;
  if (v[arg] < 0.0)
    for (auto& x : v) x = -x;
}

}  // namespace detail

/// Top-k principal components of the mean-centered vocab rows, computed by
/// power iteration with deflation (tolerance 1e-9, at most 1e4 iterations).
/// Each returned row is unit-norm with its largest-magnitude coordinate
/// positive.
inline PrototypeSet pca_prototypes(const VocabMatrix& vocab, int k) {
  const int V = vocab.size(), M = vocab.width();
  if (k < 1) throw ParamError("pca_prototypes: k must be >= 1");
  if (k > std::min(V, M)) throw ParamError("pca_prototypes: k exceeds min(V, M)");

  std::vector<double> mean(static_cast<size_t>(M), 0.0);
  for (int v = 0; v < V; ++v)
    for (int m = 0; m < M; ++m) mean[static_cast<size_t>(m)] += vocab.embeddings.at(v, m);
  for (auto& x : mean) x /= V;

  // Covariance of centered rows, in double.
  std::vector<double> cov(static_cast<size_t>(M) * M, 0.0);
  for (int v = 0; v < V; ++v)
    for (int i = 0; i < M; ++i) {
      const double xi = vocab.embeddings.at(v, i) - mean[static_cast<size_t>(i)];
      for (int j = i; j < M; ++j)
        cov[static_cast<size_t>(i) * M + j] +=
            xi * (vocab.embeddings.at(v, j) - mean[static_cast<size_t>(j)]);
    }
  const double denom = V > 1 ? V - 1 : 1;
  for (int i = 0; i < M; ++i)
    for (int j = i; j < M; ++j) {
      cov[static_cast<size_t>(i) * M + j] /= denom;
      cov[static_cast<size_t>(j) * M + i] = cov[static_cast<size_t>(i) * M + j];
    }

  constexpr double kTol = 1e-9;
  constexpr int kMaxIters = 10000;
  std::vector<std::vector<double>> found;
  std::vector<double> eigenvalues;
  double lambda_first = 0.0;
  Rng rng(0x70636170u);  // fixed stream; the solve is deterministic

  for (int comp = 0; comp < k; ++comp) {
    std::vector<double> v(static_cast<size_t>(M));
    for (auto& x : v) x = rng.normal();
    auto orthogonalize = [&](std::vector<double>& u) {
      for (const auto& f : found) {
        double d = 0.0;
        for (int i = 0; i < M; ++i) d += u[static_cast<size_t>(i)] * f[static_cast<size_t>(i)];
        for (int i = 0; i < M; ++i) u[static_cast<size_t>(i)] -= d * f[static_cast<size_t>(i)];
      }
    };
    auto normalize = [&](std::vector<double>& u) {
      double n = 0.0;
      for (double x : u) n += x * x;
      n = std::sqrt(n);
      if (n < 1e-300) throw RankError("pca_prototypes: k exceeds the rank of the vocab matrix");
      for (auto& x : u) x /= n;
    };
    orthogonalize(v);
    normalize(v);

    std::vector<double> next(static_cast<size_t>(M));
    for (int it = 0; it < kMaxIters; ++it) {
      for (int i = 0; i < M; ++i) {
        double s = 0.0;
        const double* crow = cov.data() + static_cast<size_t>(i) * M;
        for (int j = 0; j < M; ++j) s += crow[j] * v[static_cast<size_t>(j)];
        next[static_cast<size_t>(i)] = s;
      }
      orthogonalize(next);
      normalize(next);
      double diff = 0.0;
      for (int i = 0; i < M; ++i) {
        const double d = next[static_cast<size_t>(i)] - v[static_cast<size_t>(i)];
        diff += d * d;
      }
      v = next;
      if (std::sqrt(diff) < kTol) break;
    }

    double lambda = 0.0;
    for (int i = 0; i < M; ++i) {
      double s = 0.0;
      const double* crow = cov.data() + static_cast<size_t>(i) * M;
      for (int j = 0; j < M; ++j) s += crow[j] * v[static_cast<size_t>(j)];
      lambda += v[static_cast<size_t>(i)] * s;
    }
    if (comp == 0) lambda_first = std::abs(lambda);
    if (lambda <= std::max(1e-12, 1e-10 * lambda_first))
      throw RankError("pca_prototypes: k exceeds the rank of the vocab matrix");

    for (int i = 0; i < M; ++i)
      for (int j = 0; j < M; ++j)
        cov[static_cast<size_t>(i) * M + j] -= lambda * v[static_cast<size_t>(i)] * v[static_cast<size_t>(j)];

    detail::sign_fix(v);
    found.push_back(v);
    eigenvalues.push_back(lambda);
  }

  PrototypeSet out;
  out.vectors = Tensor({k, M});
  for (int c = 0; c < k; ++c)
    for (int m = 0; m < M; ++m)
      out.vectors.at(c, m) = static_cast<float>(found[static_cast<size_t>(c)][static_cast<size_t>(m)]);
  return out;
}

/// Prototypes taken directly from named vocab rows, unit-normalized.
/// Orthogonality is not enforced for this constructor.
inline PrototypeSet fixed_word_prototypes(const VocabMatrix& vocab,
                                          const std::vector<std::string>& words) {
  if (words.empty()) throw ParamError("fixed_word_prototypes: at least one word required");
  const int M = vocab.width();
  PrototypeSet out;
  out.vectors = Tensor({static_cast<int>(words.size()), M});
  for (int w = 0; w < static_cast<int>(words.size()); ++w) {
    const int idx = vocab.find(words[static_cast<size_t>(w)]);
    if (idx < 0) throw LookupError("fixed_word_prototypes: unknown word '" + words[static_cast<size_t>(w)] + "'");
    const double n = kern::norm_f64(M, vocab.embeddings.row(idx));
    if (n < 1e-12) throw DegenerateInputError("fixed_word_prototypes: zero-norm vocab row");
    for (int m = 0; m < M; ++m)
      out.vectors.at(w, m) = static_cast<float>(vocab.embeddings.at(idx, m) / n);
  }
  return out;
}

/// Coordinates of e on the prototype axes: e . tp^T.
inline Tensor prototype_coords(const Tensor& e, const PrototypeSet& tp) {
  if (e.rank() != 1 || e.dim(0) != tp.width()) throw ShapeError("prototype_coords: width mismatch");
  Tensor out({tp.count()});
  for (int kidx = 0; kidx < tp.count(); ++kidx)
    out[kidx] = kern::dot(tp.width(), e.data(), tp.vectors.row(kidx));
  return out;
}

/// Top-n vocab tokens by cosine similarity to e, descending, ties broken by
/// vocab index.
inline std::vector<std::pair<std::string, float>> nearest_words(const Tensor& e,
                                                                const VocabMatrix& vocab, int n) {
  if (n < 0 || n > vocab.size()) throw ParamError("nearest_words: n out of range");
  if (e.rank() != 1 || e.dim(0) != vocab.width()) throw ShapeError("nearest_words: width mismatch");
  const double ne = kern::norm_f64(e.size(), e.data());
  if (ne < 1e-12) throw DegenerateInputError("nearest_words: zero-norm query");
  std::vector<std::pair<float, int>> scored;
  scored.reserve(static_cast<size_t>(vocab.size()));
  for (int v = 0; v < vocab.size(); ++v) {
    const double nr = kern::norm_f64(vocab.width(), vocab.embeddings.row(v));
    const double c = nr < 1e-12 ? -2.0 : kern::dot_f64(vocab.width(), e.data(), vocab.embeddings.row(v)) / (ne * nr);
    scored.emplace_back(static_cast<float>(c), v);
  }
  std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  std::vector<std::pair<std::string, float>> out;
  out.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i)
    out.emplace_back(vocab.tokens[static_cast<size_t>(scored[static_cast<size_t>(i)].second)],
                     scored[static_cast<size_t>(i)].first);
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic vocab. First entries are a fixed word list so fixed-word
// prototypes and task-token prompt init resolve; the rest are seeded
// pseudo-words. Embeddings get a decaying per-dimension spectrum so the
// principal components are well separated.
// ---------------------------------------------------------------------------

constexpr uint64_t kDefaultVocabSeed = 0x5653454Dull;

inline const std::vector<std::string>& reserved_words() {
  static const std::vector<std::string> words = {
      "value", "shape", "frequency", "classify", "the",  "given",       "sequence", "up",
      "down",  "stable", "rise",     "fall",     "small", "big",        "noise",    "trend"};
  return words;
}

inline VocabMatrix make_synthetic_vocab(int V = 512, int M = 64, uint64_t seed = kDefaultVocabSeed) {
  if (V < 1 || M < 1) throw ParamError("make_synthetic_vocab: V and M must be positive");
  VocabMatrix vocab;
  vocab.embeddings = Tensor({V, M});
  Rng rng(seed);
  for (int v = 0; v < V; ++v)
    for (int m = 0; m < M; ++m)
      vocab.embeddings.at(v, m) = rng.normal(0.0f, 1.0f / std::sqrt(1.0f + 0.15f * m));

  static const char* syllables[] = {"ba", "ke", "mi", "so", "tu", "ra", "ne", "lo",
                                    "vi", "da", "pu", "ze", "ko", "fa", "ri", "mu"};
  const auto& reserved = reserved_words();
  for (int v = 0; v < V; ++v) {
    if (v < static_cast<int>(reserved.size())) {
      vocab.tokens.push_back(reserved[static_cast<size_t>(v)]);
    } else {
      std::string name;
      int x = v;
      for (int s = 0; s < 3; ++s) {
        name += syllables[x % 16];
        x /= 16;
      }
      name += std::to_string(v);
      vocab.tokens.push_back(name);
    }
  }
  return vocab;
}

/// Vocab file: tensor container holding `vocab.embeddings` plus a UTF-8
/// token sidecar at <path>.tokens, one token per line.
inline void save_vocab(const std::string& path, const VocabMatrix& vocab) {
  serialize::TensorMap map;
  map.push_back({"vocab.embeddings", vocab.embeddings});
  serialize::write_container(path, map);
  std::ofstream out(path + ".tokens", std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path + ".tokens");
  for (const auto& t : vocab.tokens) out << t << '\n';
  if (!out) throw IoError("write failed: " + path + ".tokens");
}

inline VocabMatrix load_vocab(const std::string& path) {
  VocabMatrix vocab;
  const auto map = serialize::read_container(path);
  vocab.embeddings = serialize::require(map, "vocab.embeddings");
  if (vocab.embeddings.rank() != 2) throw IoError("vocab.embeddings must be rank 2");
  std::ifstream in(path + ".tokens");
  if (!in) throw IoError("cannot open vocab token sidecar: " + path + ".tokens");
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.pop_back();
    vocab.tokens.push_back(line);
  }
  if (static_cast<int>(vocab.tokens.size()) != vocab.size())
    throw IoError("vocab token sidecar line count does not match embedding rows");
  return vocab;
}

}  // namespace tste::proto
