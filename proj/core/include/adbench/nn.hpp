#pragma once

// Layer primitives composed from tape ops. Layers own their parameters and
// register them under hierarchical dotted names for checkpointing and
// optimizer state.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "adbench/tensor.hpp"

namespace adbench::nn {

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
};

// Non-learned state persisted in checkpoints (batch-norm running stats).
template <typename T>
struct NamedBuffer {
  std::string name;
  std::vector<T>* data;
};

template <typename T>
struct ParamCollector {
  std::vector<NamedParam<T>> params;
  std::vector<NamedBuffer<T>> buffers;

  void add(const std::string& name, const Tensor<T>& t) {
    params.push_back({name, t});
  }
  void add_buffer(const std::string& name, std::vector<T>* v) {
    buffers.push_back({name, v});
  }
};

// Kaiming (He) normal init with fan-in scaling.
template <typename T>
void he_normal_fill(Tensor<T>& t, std::size_t fan_in, Rng& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  for (auto& v : t.values()) v = static_cast<T>(dist(rng));
}

template <typename T>
struct Linear {
  Tensor<T> w, b;
  bool has_bias = true;

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng, bool bias = true)
      : w({in, out}, true), has_bias(bias) {
    he_normal_fill(w, in, rng);
    if (bias) b = Tensor<T>({out}, true);
  }

  Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x) const {
    return tape.linear(x, w, has_bias ? b : Tensor<T>());
  }

  void collect(const std::string& prefix, ParamCollector<T>& pc) const {
    pc.add(prefix + ".weight", w);
    if (has_bias) pc.add(prefix + ".bias", b);
  }
};

template <typename T>
struct Conv2d {
  Tensor<T> w, b;
  std::size_t stride = 1, pad = 0;
  bool has_bias = false;

  Conv2d() = default;
  Conv2d(std::size_t in, std::size_t out, std::size_t k, std::size_t stride_,
         std::size_t pad_, Rng& rng, bool bias = false)
      : w({out, in, k, k}, true), stride(stride_), pad(pad_), has_bias(bias) {
    he_normal_fill(w, in * k * k, rng);
    if (bias) b = Tensor<T>({out}, true);
  }

  Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x) const {
    return tape.conv2d(x, w, has_bias ? b : Tensor<T>(), stride, pad);
  }

  void collect(const std::string& prefix, ParamCollector<T>& pc) const {
    pc.add(prefix + ".weight", w);
    if (has_bias) pc.add(prefix + ".bias", b);
  }
};

template <typename T>
struct BatchNorm2d {
  Tensor<T> gamma, beta;
  mutable BatchNormState<T> state;
  T momentum = T(0.1);
  T eps = T(1e-5);

  BatchNorm2d() : state(0) {}
  explicit BatchNorm2d(std::size_t channels)
      : gamma(Tensor<T>::full({channels}, T(1), true)),
        beta(Tensor<T>({channels}, true)),
        state(channels) {}

  Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x, bool training) const {
    return tape.batch_norm2d(x, gamma, beta, state, training, momentum, eps);
  }

  void collect(const std::string& prefix, ParamCollector<T>& pc) const {
    pc.add(prefix + ".weight", gamma);
    pc.add(prefix + ".bias", beta);
    pc.add_buffer(prefix + ".running_mean", &state.running_mean);
    pc.add_buffer(prefix + ".running_var", &state.running_var);
  }
};

template <typename T>
struct LayerNorm {
  Tensor<T> gamma, beta;
  T eps = T(1e-5);

  LayerNorm() = default;
  explicit LayerNorm(std::size_t dim)
      : gamma(Tensor<T>::full({dim}, T(1), true)), beta(Tensor<T>({dim}, true)) {}

  Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x) const {
    return tape.layer_norm(x, gamma, beta, eps);
  }

  void collect(const std::string& prefix, ParamCollector<T>& pc) const {
    pc.add(prefix + ".weight", gamma);
    pc.add(prefix + ".bias", beta);
  }
};

// conv -> batch norm -> relu, the standard building unit.
template <typename T>
struct ConvBnRelu {
  Conv2d<T> conv;
  BatchNorm2d<T> bn;

  ConvBnRelu() = default;
  ConvBnRelu(std::size_t in, std::size_t out, std::size_t k, std::size_t stride,
             std::size_t pad, Rng& rng)
      : conv(in, out, k, stride, pad, rng, false), bn(out) {}

  Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x, bool training) const {
    return tape.relu(bn.forward(tape, conv.forward(tape, x), training));
  }

  void collect(const std::string& prefix, ParamCollector<T>& pc) const {
    conv.collect(prefix + ".conv", pc);
    bn.collect(prefix + ".bn", pc);
  }
};

// ResNet basic block: two 3x3 convs with identity (or 1x1-projected) skip.
template <typename T>
struct BasicBlock {
  Conv2d<T> conv1, conv2;
  BatchNorm2d<T> bn1, bn2;
  std::optional<Conv2d<T>> down_conv;
  std::optional<BatchNorm2d<T>> down_bn;

  BasicBlock() = default;
  BasicBlock(std::size_t in, std::size_t out, std::size_t stride, Rng& rng)
      : conv1(in, out, 3, stride, 1, rng), conv2(out, out, 3, 1, 1, rng),
        bn1(out), bn2(out) {
    if (stride != 1 || in != out) {
      down_conv.emplace(in, out, 1, stride, 0, rng);
      down_bn.emplace(out);
    }
  }

  Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x, bool training) const {
    Tensor<T> h = tape.relu(bn1.forward(tape, conv1.forward(tape, x), training));
    h = bn2.forward(tape, conv2.forward(tape, h), training);
    Tensor<T> skip = x;
    if (down_conv)
      skip = down_bn->forward(tape, down_conv->forward(tape, x), training);
    return tape.relu(tape.add(h, skip));
  }

  void collect(const std::string& prefix, ParamCollector<T>& pc) const {
    conv1.collect(prefix + ".conv1", pc);
    bn1.collect(prefix + ".bn1", pc);
    conv2.collect(prefix + ".conv2", pc);
    bn2.collect(prefix + ".bn2", pc);
    if (down_conv) {
      down_conv->collect(prefix + ".downsample.conv", pc);
      down_bn->collect(prefix + ".downsample.bn", pc);
    }
  }
};

// ResNet-18 topology 2-D encoder: 7x7 stem, 4 stages of 2 basic blocks with
// channel widths (w, 2w, 4w, 8w), global average pool. Output dim is 8w.
template <typename T>
struct ResNetEncoder {
  Conv2d<T> stem;
  BatchNorm2d<T> stem_bn;
  std::vector<BasicBlock<T>> blocks;
  std::size_t out_dim = 0;

  ResNetEncoder() = default;
  ResNetEncoder(std::size_t in_channels, std::size_t base_width, Rng& rng)
      : stem(in_channels, base_width, 7, 2, 3, rng), stem_bn(base_width) {
    const std::size_t w = base_width;
    std::size_t widths[4] = {w, 2 * w, 4 * w, 8 * w};
    std::size_t in = w;
    for (int s = 0; s < 4; ++s) {
      const std::size_t stride = s == 0 ? 1 : 2;
      blocks.emplace_back(in, widths[s], stride, rng);
      blocks.emplace_back(widths[s], widths[s], 1, rng);
      in = widths[s];
    }
    out_dim = widths[3];
  }

  // [N,1,H,W] -> [N, out_dim]
  Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x, bool training) const {
    Tensor<T> h = tape.relu(stem_bn.forward(tape, stem.forward(tape, x), training));
    h = tape.max_pool2d(h, 3, 2, 1);
    for (const auto& b : blocks) h = b.forward(tape, h, training);
    return tape.global_avg_pool(h);
  }

  void collect(const std::string& prefix, ParamCollector<T>& pc) const {
    stem.collect(prefix + ".stem", pc);
    stem_bn.collect(prefix + ".stem_bn", pc);
    for (std::size_t i = 0; i < blocks.size(); ++i)
      blocks[i].collect(prefix + ".layer" + std::to_string(i / 2 + 1) + "." +
                            std::to_string(i % 2),
                        pc);
  }
};

// Inception-style block: parallel 1x1 / 3x3 / double-3x3 / pooled branches,
// channel-concatenated.
template <typename T>
struct InceptionBlock {
  ConvBnRelu<T> b1;          // 1x1
  ConvBnRelu<T> b2a, b2b;    // 1x1 reduce -> 3x3
  ConvBnRelu<T> b3a, b3b, b3c;  // 1x1 reduce -> 3x3 -> 3x3
  ConvBnRelu<T> b4;          // avg pool -> 1x1
  std::size_t out_channels = 0;

  InceptionBlock() = default;
  InceptionBlock(std::size_t in, std::size_t c1, std::size_t r3, std::size_t c3,
                 std::size_t r5, std::size_t c5, std::size_t cp, Rng& rng)
      : b1(in, c1, 1, 1, 0, rng),
        b2a(in, r3, 1, 1, 0, rng), b2b(r3, c3, 3, 1, 1, rng),
        b3a(in, r5, 1, 1, 0, rng), b3b(r5, c5, 3, 1, 1, rng), b3c(c5, c5, 3, 1, 1, rng),
        b4(in, cp, 1, 1, 0, rng),
        out_channels(c1 + c3 + c5 + cp) {}

  Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x, bool training) const {
    Tensor<T> p1 = b1.forward(tape, x, training);
    Tensor<T> p2 = b2b.forward(tape, b2a.forward(tape, x, training), training);
    Tensor<T> p3 = b3c.forward(
        tape, b3b.forward(tape, b3a.forward(tape, x, training), training), training);
    Tensor<T> p4 = b4.forward(tape, tape.avg_pool2d(x, 3, 1, 1), training);
    return tape.concat({p1, p2, p3, p4}, 1);
  }

  void collect(const std::string& prefix, ParamCollector<T>& pc) const {
    b1.collect(prefix + ".b1", pc);
    b2a.collect(prefix + ".b2a", pc);
    b2b.collect(prefix + ".b2b", pc);
    b3a.collect(prefix + ".b3a", pc);
    b3b.collect(prefix + ".b3b", pc);
    b3c.collect(prefix + ".b3c", pc);
    b4.collect(prefix + ".b4", pc);
  }
};

// Scaled dot-product multi-head self-attention with learned Q/K/V/output
// projections. Attention weights of the last forward can be captured for
// inspection via attn_out.
template <typename T>
struct MultiHeadSelfAttention {
  Linear<T> wq, wk, wv, wo;
  std::size_t dim = 0, heads = 0;

  MultiHeadSelfAttention() = default;
  MultiHeadSelfAttention(std::size_t d, std::size_t n_heads, Rng& rng)
      : wq(d, d, rng), wk(d, d, rng), wv(d, d, rng), wo(d, d, rng),
        dim(d), heads(n_heads) {
    if (d % n_heads != 0)
      throw ConfigError(msg("attention: token dim ", d,
                            " not divisible by head count ", n_heads));
  }

  // tokens [N,L,D] -> [N,L,D]; attn_out, if given, receives [N*H,L,L].
  Tensor<T> forward(Tape<T>& tape, const Tensor<T>& tokens,
                    Tensor<T>* attn_out = nullptr) const {
    if (tokens.ndim() != 3 || tokens.dim(2) != dim)
      throw ShapeError(msg("attention: expected tokens [N,L,", dim, "], got ",
                           shape_str(tokens.shape())));
    const std::size_t n = tokens.dim(0), l = tokens.dim(1);
    const std::size_t dh = dim / heads;
    Tensor<T> flat = tokens.reshaped({n * l, dim});
    auto heads_of = [&](const Linear<T>& proj) {
      return tape.split_heads(proj.forward(tape, flat).reshaped({n, l, dim}), heads);
    };
    Tensor<T> q = heads_of(wq);
    Tensor<T> k = heads_of(wk);
    Tensor<T> v = heads_of(wv);
    Tensor<T> scores =
        tape.scale(tape.bmm(q, k, /*trans_b=*/true),
                   static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
    Tensor<T> attn = tape.softmax(scores);
    if (attn_out) *attn_out = attn;
    Tensor<T> ctx = tape.merge_heads(tape.bmm(attn, v), heads);
    return wo.forward(tape, ctx.reshaped({n * l, dim})).reshaped({n, l, dim});
  }

  void collect(const std::string& prefix, ParamCollector<T>& pc) const {
    wq.collect(prefix + ".wq", pc);
    wk.collect(prefix + ".wk", pc);
    wv.collect(prefix + ".wv", pc);
    wo.collect(prefix + ".wo", pc);
  }
};

// Post-norm transformer encoder layer: attention and feed-forward sublayers
// with residual connections and layer norm.
template <typename T>
struct TransformerLayer {
  MultiHeadSelfAttention<T> attn;
  LayerNorm<T> ln1, ln2;
  Linear<T> ff1, ff2;

  TransformerLayer() = default;
  TransformerLayer(std::size_t d, std::size_t heads, std::size_t ff_mult, Rng& rng)
      : attn(d, heads, rng), ln1(d), ln2(d),
        ff1(d, d * ff_mult, rng), ff2(d * ff_mult, d, rng) {}

  Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x) const {
    const std::size_t n = x.dim(0), l = x.dim(1), d = x.dim(2);
    Tensor<T> h = ln1.forward(tape, tape.add(x, attn.forward(tape, x)));
    Tensor<T> ff = ff2.forward(tape, tape.relu(ff1.forward(tape, h.reshaped({n * l, d}))));
    return ln2.forward(tape, tape.add(h, ff.reshaped({n, l, d})));
  }

  void collect(const std::string& prefix, ParamCollector<T>& pc) const {
    attn.collect(prefix + ".attn", pc);
    ln1.collect(prefix + ".ln1", pc);
    ln2.collect(prefix + ".ln2", pc);
    ff1.collect(prefix + ".ff1", pc);
    ff2.collect(prefix + ".ff2", pc);
  }
};

// Fixed sinusoidal positional encodings over one shared index space,
// returned flattened to [L*D] for broadcast addition.
template <typename T>
Tensor<T> sinusoidal_positional_encoding(std::size_t length, std::size_t dim) {
  Tensor<T> pe({length * dim});
  for (std::size_t pos = 0; pos < length; ++pos)
    for (std::size_t i = 0; i < dim; ++i) {
      const double exponent = static_cast<double>(2 * (i / 2)) / static_cast<double>(dim);
      const double angle = static_cast<double>(pos) / std::pow(10000.0, exponent);
      pe.data()[pos * dim + i] =
          static_cast<T>(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  return pe;
}

template <typename T>
std::size_t count_scalars(const std::vector<NamedParam<T>>& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor.size();
  return n;
}

}  // namespace adbench::nn
