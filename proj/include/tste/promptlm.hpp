#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "tste/autograd.hpp"
#include "tste/data.hpp"
#include "tste/encoder.hpp"
#include "tste/optim.hpp"
#include "tste/prototypes.hpp"
#include "tste/rng.hpp"
#include "tste/serialize.hpp"

namespace tste::promptlm {

struct LmConfig {
  int width = 64;
  int layers = 2;
  int heads = 2;
  int ff_mult = 4;
};

constexpr uint64_t kDefaultLmSeed = 0x4C4D3031ull;

/// Fixed-parameter causal transformer. Pre-norm blocks, residual stream, no
/// final normalization, so zeroed attention/FF output weights make the whole
/// model an identity map. Every parameter is created frozen.
class FrozenLM {
 public:
  FrozenLM() = default;

  static FrozenLM generate(LmConfig cfg, uint64_t seed = kDefaultLmSeed) {
    if (cfg.width < cfg.heads || cfg.width % cfg.heads != 0)
      throw ParamError("lm width must be divisible by head count");
    FrozenLM lm;
    lm.cfg_ = cfg;
    Rng rng(seed);
    const int M = cfg.width, F = cfg.width * cfg.ff_mult;
    auto mat = [&](const std::string& name, int rows, int cols, int fan_in) {
      Tensor t({rows, cols});
      const float sd = 1.0f / std::sqrt(static_cast<float>(fan_in));
      for (int64_t i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0f, sd);
      return Parameter(name, std::move(t), false);
    };
    auto vec = [&](const std::string& name, int n, float fill) {
      return Parameter(name, Tensor::full({n}, fill), false);
    };
    for (int l = 0; l < cfg.layers; ++l) {
      const std::string p = "lm.layer" + std::to_string(l);
      Layer layer;
      layer.ln1_g = vec(p + ".ln1.g", M, 1.0f);
      layer.ln1_b = vec(p + ".ln1.b", M, 0.0f);
      layer.wq = mat(p + ".attn.wq", M, M, M);
      layer.wk = mat(p + ".attn.wk", M, M, M);
      layer.wv = mat(p + ".attn.wv", M, M, M);
      layer.wo = mat(p + ".attn.wo", M, M, M);
      layer.bq = vec(p + ".attn.bq", M, 0.0f);
      layer.bk = vec(p + ".attn.bk", M, 0.0f);
      layer.bv = vec(p + ".attn.bv", M, 0.0f);
      layer.bo = vec(p + ".attn.bo", M, 0.0f);
      layer.ln2_g = vec(p + ".ln2.g", M, 1.0f);
      layer.ln2_b = vec(p + ".ln2.b", M, 0.0f);
      layer.ff_w1 = mat(p + ".ff.w1", M, F, M);
      layer.ff_b1 = vec(p + ".ff.b1", F, 0.0f);
      layer.ff_w2 = mat(p + ".ff.w2", F, M, F);
      layer.ff_b2 = vec(p + ".ff.b2", M, 0.0f);
      lm.layers_.push_back(std::move(layer));
    }
    return lm;
  }

  const LmConfig& config() const { return cfg_; }
  int width() const { return cfg_.width; }

  /// Runs the stack over h[S, M]; output position i depends only on
  /// positions <= i.
  Var forward(Tape& t, Var h) {
    const Tensor& H = t.value(h);
    if (H.rank() != 2 || H.dim(1) != cfg_.width)
      throw ShapeError("lm forward: input width " + H.shape_str() + " does not match " +
                       std::to_string(cfg_.width));
    const int S = H.dim(0);
    const int hd = cfg_.width / cfg_.heads;
    const float att_scale = 1.0f / std::sqrt(static_cast<float>(hd));
    for (auto& layer : layers_) {
      Var x = layernorm_rows(h, t.lease(layer.ln1_g), t.lease(layer.ln1_b));
      Var q = add_col_bias(matmul(x, t.lease(layer.wq)), t.lease(layer.bq));
      Var k = add_col_bias(matmul(x, t.lease(layer.wk)), t.lease(layer.bk));
      Var v = add_col_bias(matmul(x, t.lease(layer.wv)), t.lease(layer.bv));
      Var ctx{};
      for (int head = 0; head < cfg_.heads; ++head) {
        Var qh = slice_cols(q, head * hd, hd);
        Var kh = slice_cols(k, head * hd, hd);
        Var vh = slice_cols(v, head * hd, hd);
        Var probs = causal_softmax(scale(matmul(qh, transpose(kh)), att_scale));
        Var ch = matmul(probs, vh);
        ctx = head == 0 ? ch : concat_cols(ctx, ch);
      }
      Var attn = add_col_bias(matmul(ctx, t.lease(layer.wo)), t.lease(layer.bo));
      h = add(h, attn);
      Var y = layernorm_rows(h, t.lease(layer.ln2_g), t.lease(layer.ln2_b));
      Var ff = add_col_bias(matmul(gelu(add_col_bias(matmul(y, t.lease(layer.ff_w1)), t.lease(layer.ff_b1))),
                                   t.lease(layer.ff_w2)),
                            t.lease(layer.ff_b2));
      h = add(h, ff);
    }
    (void)S;
    return h;
  }

  std::vector<Parameter*> params() {
    std::vector<Parameter*> out;
    for (auto& l : layers_)
      for (Parameter* p : {&l.ln1_g, &l.ln1_b, &l.wq, &l.wk, &l.wv, &l.wo, &l.bq, &l.bk, &l.bv,
                           &l.bo, &l.ln2_g, &l.ln2_b, &l.ff_w1, &l.ff_b1, &l.ff_w2, &l.ff_b2})
        out.push_back(p);
    return out;
  }

  void collect(serialize::TensorMap& map) {
    for (Parameter* p : params()) map.push_back({p->name, p->value});
  }

  void restore(const serialize::TensorMap& map) {
    for (Parameter* p : params()) {
      const Tensor& t = serialize::require(map, p->name);
      if (!t.same_dims(p->value)) throw ShapeError("lm checkpoint shape mismatch for " + p->name);
      p->value = t;
    }
  }

  serialize::TensorMap snapshot() {
    serialize::TensorMap m;
    collect(m);
    return m;
  }

  uint64_t checksum() { return serialize::checksum(snapshot()); }

  /// Zeroes the attention/FF output projections; the stack becomes identity.
  void make_identity() {
    for (auto& l : layers_) {
      for (int64_t i = 0; i < l.wo.value.size(); ++i) l.wo.value[i] = 0.0f;
      for (int64_t i = 0; i < l.bo.value.size(); ++i) l.bo.value[i] = 0.0f;
      for (int64_t i = 0; i < l.ff_w2.value.size(); ++i) l.ff_w2.value[i] = 0.0f;
      for (int64_t i = 0; i < l.ff_b2.value.size(); ++i) l.ff_b2.value[i] = 0.0f;
    }
  }

 private:
  struct Layer {
    Parameter ln1_g, ln1_b;
    Parameter wq, wk, wv, wo, bq, bk, bv, bo;
    Parameter ln2_g, ln2_b;
    Parameter ff_w1, ff_b1, ff_w2, ff_b2;
  };

  LmConfig cfg_;
  std::vector<Layer> layers_;
};

// ---------------------------------------------------------------------------
// Soft prompt
// ---------------------------------------------------------------------------

enum class PromptInit { Random, TaskTokens };

/// Trainable [P, M] table prepended to the TS embedding sequence. P == 0 is a
/// valid empty prompt.
struct SoftPrompt {
  Parameter table;  // absent when length == 0
  int length = 0;
  int width = 0;

  bool empty() const { return length == 0; }
};

inline SoftPrompt init_prompt(PromptInit mode, const proto::VocabMatrix& vocab,
                              const std::vector<std::string>& task_words, int length, int width,
                              uint64_t seed) {
  if (length < 0) throw ParamError("init_prompt: negative prompt length");
  SoftPrompt pe;
  pe.length = length;
  pe.width = width;
  if (length == 0) return pe;
  Tensor t({length, width});
  if (mode == PromptInit::Random) {
    Rng rng(seed);
    for (int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-0.1f, 0.1f);
  } else {
    if (static_cast<int>(task_words.size()) != length)
      throw ParamError("init_prompt: task_tokens mode needs exactly P words");
    if (vocab.width() != width) throw ShapeError("init_prompt: vocab width mismatch");
    for (int p = 0; p < length; ++p) {
      const int idx = vocab.find(task_words[static_cast<size_t>(p)]);
      if (idx < 0) throw LookupError("init_prompt: unknown word '" + task_words[static_cast<size_t>(p)] + "'");
      for (int m = 0; m < width; ++m) t.at(p, m) = vocab.embeddings.at(idx, m);
    }
  }
  pe.table = Parameter("prompt.pe", std::move(t), true);
  return pe;
}

// ---------------------------------------------------------------------------
// Prompted forward pass
// ---------------------------------------------------------------------------

enum class PositionSource { SoftPrompt, TsEmbedding };

struct PromptForward {
  Var last;                               // final position output [M]
  Var sequence;                           // all positions [S, M]
  std::vector<PositionSource> provenance;  // one tag per input position
};

/// Runs the frozen LM over [pe; e_seq]. Prompt rows come straight from the
/// prompt table and TS rows from the encoder; both bypass any token-embedding
/// lookup. Returns the final position's output vector.
inline PromptForward forward_with_prompt(Tape& t, SoftPrompt& pe, const std::vector<Tensor>& e_seq,
                                         FrozenLM& lm) {
  const int P = pe.length, K = static_cast<int>(e_seq.size());
  if (P + K < 1) throw UsageError("forward_with_prompt: empty input sequence");
  const int M = lm.width();
  if (P > 0 && pe.width != M) throw ShapeError("forward_with_prompt: prompt width mismatch");

  Var input{};
  std::vector<PositionSource> tags;
  if (P > 0) {
    input = t.lease(pe.table);
    tags.assign(static_cast<size_t>(P), PositionSource::SoftPrompt);
  }
  if (K > 0) {
    Tensor emb({K, M});
    for (int i = 0; i < K; ++i) {
      if (e_seq[static_cast<size_t>(i)].rank() != 1 || e_seq[static_cast<size_t>(i)].dim(0) != M)
        throw ShapeError("forward_with_prompt: embedding width mismatch");
      for (int m = 0; m < M; ++m) emb.at(i, m) = e_seq[static_cast<size_t>(i)][m];
    }
    Var ev = t.constant(std::move(emb));
    input = P > 0 ? concat_rows(input, ev) : ev;
    tags.insert(tags.end(), static_cast<size_t>(K), PositionSource::TsEmbedding);
  }

  // Position provenance: prompt rows must be the prompt table, bit for bit.
  const Tensor& assembled = t.value(input);
  for (int p = 0; p < P; ++p)
    for (int m = 0; m < M; ++m)
      if (assembled.at(p, m) != pe.table.value.at(p, m))
        throw UsageError("forward_with_prompt: prompt position not sourced from the prompt table");

  PromptForward out;
  out.provenance = std::move(tags);
  out.sequence = lm.forward(t, input);
  out.last = select_row(out.sequence, P + K - 1);
  return out;
}

// ---------------------------------------------------------------------------
// Task heads and prompt training
// ---------------------------------------------------------------------------

struct ClassifierHead {
  enc::Affine layer;
  int num_classes = 0;

  ClassifierHead() = default;
  ClassifierHead(int classes, int m, uint64_t seed) : num_classes(classes) {
    Rng rng(seed);
    layer = enc::Affine("head", classes, m, rng);
  }

  Var logits(Tape& t, Var h) { return layer.apply_vec(t, h); }

  std::vector<Parameter*> params() { return {&layer.w, &layer.b}; }
  void collect(serialize::TensorMap& m) {
    m.push_back({layer.w.name, layer.w.value});
    m.push_back({layer.b.name, layer.b.value});
  }
  void restore(const serialize::TensorMap& m) {
    layer.w.value = serialize::require(m, layer.w.name);
    layer.b.value = serialize::require(m, layer.b.name);
  }
};

struct PromptHyper {
  double lr = 1e-3;        // prompt and classifier
  double decoder_lr = 1e-3;  // forecast decoder fine-tune
  int batch = 32;
  int epochs = 200;
  int patience = 20;
  uint64_t seed = 0;
};

struct EpochMetric {
  int epoch = 0;
  double loss = 0.0;
  double metric = 0.0;  // accuracy for classify, mse for forecast
};

/// Cached token-embedding sequences for a frozen encoder; phase-2 training
/// never re-runs the encoder.
inline std::vector<std::vector<Tensor>> embed_series(
    const std::vector<data::TimeSeries>& series, enc::Encoder& encoder,
    std::array<int, 2> len_range, std::array<int, 2> step_range, uint64_t seed) {
  encoder.set_training(false);
  std::vector<std::vector<Tensor>> out;
  out.reserve(series.size());
  for (size_t i = 0; i < series.size(); ++i) {
    const auto tokens = data::segment(series[i], len_range, step_range, mix_seed(seed, i),
                                      static_cast<int>(i));
    if (tokens.empty())
      throw ConfigError("series " + std::to_string(i) + " too short for the token length range");
    std::vector<Tensor> seq;
    seq.reserve(tokens.size());
    for (const auto& tok : tokens) seq.push_back(encoder.encode_value(tok.values));
    out.push_back(std::move(seq));
  }
  return out;
}

namespace detail {

inline bool plateaued(const std::vector<double>& losses, int patience, double min_delta = 1e-5) {
  if (static_cast<int>(losses.size()) <= patience) return false;
  const double best_before =
      *std::min_element(losses.begin(), losses.end() - patience);
  const double best_recent = *std::min_element(losses.end() - patience, losses.end());
  return best_recent > best_before - min_delta;
}

}  // namespace detail

/// Cross-entropy prompt/classifier training against a frozen encoder and LM.
/// Only pe and the head receive gradient steps.
inline std::vector<EpochMetric> train_prompt_classify(
    const std::vector<data::TimeSeries>& series,
    const std::vector<std::vector<Tensor>>& embeddings, FrozenLM& lm, SoftPrompt& pe,
    ClassifierHead& head, const PromptHyper& hyper) {
  if (series.size() != embeddings.size()) throw UsageError("train_prompt_classify: size mismatch");
  std::vector<int> labels;
  for (const auto& s : series) {
    if (!s.label) throw DegenerateTaskError("train_prompt_classify: unlabeled series");
    labels.push_back(*s.label);
  }
  int max_label = -1;
  for (int l : labels) max_label = std::max(max_label, l);
  bool multi = false;
  for (int l : labels)
    if (l != labels[0]) multi = true;
  if (!multi) throw DegenerateTaskError("train_prompt_classify: single-class dataset");
  if (max_label >= head.num_classes)
    throw ShapeError("train_prompt_classify: label exceeds classifier size");

  std::vector<EpochMetric> metrics;
  std::vector<double> losses;
  optim::Adam opt(hyper.lr);
  Rng rng(mix_seed(hyper.seed, 0xC15Full));
  const int n = static_cast<int>(series.size());
  std::vector<int> order(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;

  for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
    rng.shuffle(order);
    double loss_sum = 0.0;
    int correct = 0;
    for (int b0 = 0; b0 < n; b0 += hyper.batch) {
      const int bsz = std::min(hyper.batch, n - b0);
      Tape tape;
      std::vector<Var> sample_losses;
      for (int bi = 0; bi < bsz; ++bi) {
        const int idx = order[static_cast<size_t>(b0 + bi)];
        auto fwd = forward_with_prompt(tape, pe, embeddings[static_cast<size_t>(idx)], lm);
        Var lg = head.logits(tape, fwd.last);
        const Tensor& lv = tape.value(lg);
        int arg = 0;
        for (int c = 1; c < head.num_classes; ++c)
          if (lv[c] > lv[arg]) arg = c;
        if (arg == labels[static_cast<size_t>(idx)]) ++correct;
        sample_losses.push_back(cross_entropy_logits(lg, labels[static_cast<size_t>(idx)]));
      }
      Var batch_loss = mean(stack_rows(sample_losses));
      loss_sum += static_cast<double>(tape.value(batch_loss)[0]) * bsz;
      opt.step(tape.backward(batch_loss));
    }
    EpochMetric m;
    m.epoch = epoch + 1;
    m.loss = loss_sum / n;
    m.metric = static_cast<double>(correct) / n;
    metrics.push_back(m);
    losses.push_back(m.loss);
    if (detail::plateaued(losses, hyper.patience)) break;
  }
  return metrics;
}

/// MSE prompt/decoder training; the decoder is fine-tuned with its own rate.
inline std::vector<EpochMetric> train_prompt_forecast(
    const std::vector<data::TimeSeries>& series,
    const std::vector<std::vector<Tensor>>& embeddings, FrozenLM& lm, SoftPrompt& pe,
    enc::Decoder& dec, const PromptHyper& hyper) {
  if (series.size() != embeddings.size()) throw UsageError("train_prompt_forecast: size mismatch");
  const int out_n = dec.channels * dec.out_len;
  std::vector<Tensor> targets;
  for (const auto& s : series) {
    if (!s.target || s.target->empty())
      throw DegenerateTaskError("train_prompt_forecast: series without target");
    if (static_cast<int>(s.target->size()) != out_n)
      throw ShapeError("train_prompt_forecast: horizon mismatch (target size " +
                       std::to_string(s.target->size()) + ", decoder output " +
                       std::to_string(out_n) + ")");
    targets.push_back(Tensor({out_n}, *s.target));
  }

  std::vector<EpochMetric> metrics;
  std::vector<double> losses;
  optim::Adam opt_prompt(hyper.lr);
  optim::Adam opt_dec(hyper.decoder_lr);
  Rng rng(mix_seed(hyper.seed, 0xF0C5ull));
  const int n = static_cast<int>(series.size());
  std::vector<int> order(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;

  for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
    rng.shuffle(order);
    double loss_sum = 0.0;
    for (int b0 = 0; b0 < n; b0 += hyper.batch) {
      const int bsz = std::min(hyper.batch, n - b0);
      Tape tape;
      std::vector<Var> sample_losses;
      for (int bi = 0; bi < bsz; ++bi) {
        const int idx = order[static_cast<size_t>(b0 + bi)];
        auto fwd = forward_with_prompt(tape, pe, embeddings[static_cast<size_t>(idx)], lm);
        sample_losses.push_back(mse(dec.decode(tape, fwd.last), targets[static_cast<size_t>(idx)]));
      }
      Var batch_loss = mean(stack_rows(sample_losses));
      loss_sum += static_cast<double>(tape.value(batch_loss)[0]) * bsz;
      GradMap grads = tape.backward(batch_loss);
      if (!pe.empty()) opt_prompt.step(optim::filter_grads(grads, {&pe.table}));
      opt_dec.step(optim::filter_grads(grads, dec.params()));
    }
    EpochMetric m;
    m.epoch = epoch + 1;
    m.loss = loss_sum / n;
    m.metric = m.loss;
    metrics.push_back(m);
    losses.push_back(m.loss);
    if (detail::plateaued(losses, hyper.patience)) break;
  }
  return metrics;
}

}  // namespace tste::promptlm
