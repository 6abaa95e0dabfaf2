#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "tste/autograd.hpp"
#include "tste/data.hpp"
#include "tste/rng.hpp"
#include "tste/serialize.hpp"
#include "tste/tensor.hpp"

namespace tste::enc {

struct EncoderConfig {
  int num_blocks = 10;
  int hidden = 64;
  int kernel = 3;
  int embed_dim = 64;  // matches the frozen LM width
  float momentum = 0.99f;
};

namespace detail {

inline Tensor kaiming(std::vector<int> dims, int fan_in, Rng& rng) {
  Tensor t(std::move(dims));
  const float std_dev = std::sqrt(2.0f / static_cast<float>(fan_in));
  for (int64_t i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0f, std_dev);
  return t;
}

}  // namespace detail

/// y = W x + b applied to vectors, or per time step when x is [D, T].
struct Affine {
  Parameter w;
  Parameter b;

  Affine() = default;
  Affine(const std::string& name, int out_dim, int in_dim, Rng& rng)
      : w(name + ".w", detail::kaiming({out_dim, in_dim}, in_dim, rng)),
        b(name + ".b", Tensor({out_dim})) {}

  Var apply_vec(Tape& t, Var x) { return add(matvec(t.lease(w), x), t.lease(b)); }
  Var apply_cols(Tape& t, Var x) { return add_row_bias(matmul(t.lease(w), x), t.lease(b)); }
};

struct ConvLayer {
  Parameter w;  // [Co, Ci, K]
  Parameter b;  // [Co]
  int dilation = 1;

  ConvLayer() = default;
  ConvLayer(const std::string& name, int co, int ci, int k, int dil, Rng& rng)
      : w(name + ".w", detail::kaiming({co, ci, k}, ci * k, rng)),
        b(name + ".b", Tensor({co})),
        dilation(dil) {}

  Var apply(Tape& t, Var x) {
    return add_row_bias(conv1d_causal(x, t.lease(w), dilation), t.lease(b));
  }
};

struct BatchNorm {
  Parameter gamma;
  Parameter beta;
  Tensor running_mean;
  Tensor running_var;

  BatchNorm() = default;
  explicit BatchNorm(const std::string& name, int channels)
      : gamma(name + ".gamma", Tensor::full({channels}, 1.0f)),
        beta(name + ".beta", Tensor({channels})),
        running_mean(Tensor({channels})),
        running_var(Tensor::full({channels}, 1.0f)) {}

  Var apply(Tape& t, Var x, bool training) {
    return batchnorm1d(x, t.lease(gamma), t.lease(beta), running_mean, running_var, training);
  }
};

/// GELU, DilatedConv, BatchNorm, GELU, DilatedConv; skip connection across
/// the block. Dilation doubles per block.
struct ConvBlock {
  ConvLayer conv1;
  BatchNorm bn;
  ConvLayer conv2;

  ConvBlock() = default;
  ConvBlock(const std::string& name, int channels, int kernel, int dilation, Rng& rng)
      : conv1(name + ".conv1", channels, channels, kernel, dilation, rng),
        bn(name + ".bn", channels),
        conv2(name + ".conv2", channels, channels, kernel, dilation, rng) {}

  Var apply(Tape& t, Var x, bool training) {
    Var h = conv1.apply(t, gelu(x));
    h = bn.apply(t, h, training);
    h = conv2.apply(t, gelu(h));
    return add(h, x);
  }
};

/// Dilated causal TCN embedding a variable-length token into one M-vector.
class Encoder {
 public:
  Encoder() = default;

  Encoder(EncoderConfig cfg, int input_dim, uint64_t seed) : cfg_(cfg), input_dim_(input_dim) {
    Rng rng(seed);
    in_proj_ = Affine("enc.in_proj", cfg_.hidden, input_dim, rng);
    int dilation = 1;
    for (int i = 0; i < cfg_.num_blocks; ++i) {
      blocks_.emplace_back("enc.block" + std::to_string(i), cfg_.hidden, cfg_.kernel, dilation, rng);
      dilation *= 2;
    }
    out_conv_ = ConvLayer("enc.out", cfg_.embed_dim, cfg_.hidden, 1, 1, rng);
  }

  const EncoderConfig& config() const { return cfg_; }
  int input_dim() const { return input_dim_; }
  int embed_dim() const { return cfg_.embed_dim; }

  void set_training(bool on) { training_ = on; }
  bool training() const { return training_; }

  /// Full taped forward over a token's values [D, L] -> sequence [M, L].
  Var forward_seq(Tape& t, const Tensor& token_values) {
    if (token_values.rank() != 2 || token_values.dim(0) != input_dim_)
      throw ShapeError("encode: token channel count " + token_values.shape_str() +
                       " does not match encoder input dim " + std::to_string(input_dim_));
    if (token_values.dim(1) < 4) throw ShapeError("encode: token length must be >= 4");
    Var x = in_proj_.apply_cols(t, t.constant(token_values));
    for (auto& b : blocks_) x = b.apply(t, x, training_);
    return out_conv_.apply(t, gelu(x));
  }

  /// Last-time-step readout: the causal summary of the token.
  Var encode(Tape& t, const Tensor& token_values) {
    Var seq = forward_seq(t, token_values);
    return select_col(seq, t.value(seq).dim(1) - 1);
  }

  Var encode(Tape& t, const data::TsToken& token) { return encode(t, token.values); }

  /// Gradient-free embedding.
  Tensor encode_value(const Tensor& token_values) {
    Tape t(false);
    return t.value(encode(t, token_values));
  }

  std::vector<Parameter*> params() {
    std::vector<Parameter*> out{&in_proj_.w, &in_proj_.b};
    for (auto& b : blocks_) {
      out.push_back(&b.conv1.w);
      out.push_back(&b.conv1.b);
      out.push_back(&b.bn.gamma);
      out.push_back(&b.bn.beta);
      out.push_back(&b.conv2.w);
      out.push_back(&b.conv2.b);
    }
    out.push_back(&out_conv_.w);
    out.push_back(&out_conv_.b);
    return out;
  }

  std::vector<Tensor*> buffers() {
    std::vector<Tensor*> out;
    for (auto& b : blocks_) {
      out.push_back(&b.bn.running_mean);
      out.push_back(&b.bn.running_var);
    }
    return out;
  }

  void set_trainable(bool on) {
    for (Parameter* p : params()) p->trainable = on;
  }

  /// Serializes parameters and batch-norm buffers under their canonical names.
  void collect(serialize::TensorMap& map) {
    for (Parameter* p : params()) map.push_back({p->name, p->value});
    for (int i = 0; i < static_cast<int>(blocks_.size()); ++i) {
      map.push_back({"enc.block" + std::to_string(i) + ".bn.running_mean", blocks_[static_cast<size_t>(i)].bn.running_mean});
      map.push_back({"enc.block" + std::to_string(i) + ".bn.running_var", blocks_[static_cast<size_t>(i)].bn.running_var});
    }
  }

  void restore(const serialize::TensorMap& map) {
    for (Parameter* p : params()) {
      const Tensor& t = serialize::require(map, p->name);
      if (!t.same_dims(p->value)) throw ShapeError("checkpoint shape mismatch for " + p->name);
      p->value = t;
    }
    for (int i = 0; i < static_cast<int>(blocks_.size()); ++i) {
      blocks_[static_cast<size_t>(i)].bn.running_mean =
          serialize::require(map, "enc.block" + std::to_string(i) + ".bn.running_mean");
      blocks_[static_cast<size_t>(i)].bn.running_var =
          serialize::require(map, "enc.block" + std::to_string(i) + ".bn.running_var");
    }
  }

  serialize::TensorMap snapshot() {
    serialize::TensorMap m;
    collect(m);
    return m;
  }

  uint64_t checksum() { return serialize::checksum(snapshot()); }

  ConvBlock& block(int i) { return blocks_.at(static_cast<size_t>(i)); }
  Affine& input_projection() { return in_proj_; }
  ConvLayer& output_conv() { return out_conv_; }
  int num_blocks() const { return static_cast<int>(blocks_.size()); }

 private:
  EncoderConfig cfg_;
  int input_dim_ = 1;
  bool training_ = true;
  Affine in_proj_;
  std::vector<ConvBlock> blocks_;
  ConvLayer out_conv_;
};

/// EMA update of the key encoder toward the query encoder. The key never
/// receives gradients; buffers follow the same schedule as parameters.
inline void momentum_update(Encoder& query, Encoder& key, float m) {
  if (m < 0.0f || m > 1.0f) throw ParamError("momentum_update: m must lie in [0,1]");
  auto qp = query.params();
  auto kp = key.params();
  if (qp.size() != kp.size()) throw ShapeError("momentum_update: architecture mismatch");
  for (size_t i = 0; i < qp.size(); ++i) {
    Tensor& q = qp[i]->value;
    Tensor& k = kp[i]->value;
    if (!q.same_dims(k)) throw ShapeError("momentum_update: parameter shape mismatch");
    for (int64_t j = 0; j < q.size(); ++j) k[j] = m * k[j] + (1.0f - m) * q[j];
  }
  auto qb = query.buffers();
  auto kb = key.buffers();
  for (size_t i = 0; i < qb.size(); ++i)
    for (int64_t j = 0; j < qb[i]->size(); ++j)
      (*kb[i])[j] = m * (*kb[i])[j] + (1.0f - m) * (*qb[i])[j];
}

/// Copy of the query encoder used to produce key views; frozen.
inline Encoder make_key_encoder(const Encoder& query) {
  Encoder key = query;
  key.set_trainable(false);
  return key;
}

/// One-layer MLP projection head, M -> M with GELU.
struct ProjectionHead {
  Affine layer;
  int dim = 0;

  ProjectionHead() = default;
  ProjectionHead(int m, uint64_t seed) : dim(m) {
    Rng rng(seed);
    layer = Affine("proj", m, m, rng);
  }

  Var apply(Tape& t, Var e) { return gelu(layer.apply_vec(t, e)); }

  /// Projects each row of a matrix [N, M] -> [N, M].
  Var apply_rows(Tape& t, Var rows) {
    return gelu(add_col_bias(matmul(rows, transpose(t.lease(layer.w))), t.lease(layer.b)));
  }

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

/// Affine reconstruction / forecast map, M -> D * L_out.
struct Decoder {
  Affine layer;
  int channels = 1;
  int out_len = 1;

  Decoder() = default;
  Decoder(int d, int l_out, int m, uint64_t seed) : channels(d), out_len(l_out) {
    Rng rng(seed);
    layer = Affine("dec", d * l_out, m, rng);
  }

  Var decode(Tape& t, Var e) { return layer.apply_vec(t, e); }

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

/// Token values aligned to the decoder's fixed output length: the trailing
/// out_len columns are kept, front-padded with zeros when shorter.
inline Tensor crop_or_pad_tail(const Tensor& values, int out_len) {
  const int D = values.dim(0), L = values.dim(1);
  Tensor out({D, out_len});
  for (int d = 0; d < D; ++d)
    for (int i = 0; i < out_len; ++i) {
      const int src = L - out_len + i;
      out.at(d, i) = src >= 0 ? values.at(d, src) : 0.0f;
    }
  return out;
}

/// Mean squared reconstruction error between a token and its decoding.
inline Var autoencode_loss(Tape& t, const data::TsToken& s, Var e, Decoder& dec) {
  const Tensor target = crop_or_pad_tail(s.values, dec.out_len).reshaped({dec.channels * dec.out_len});
  return mse(dec.decode(t, e), target);
}

}  // namespace tste::enc
