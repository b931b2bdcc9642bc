#pragma once

// The three benchmark architectures: an Inception-style CNN over the 4x4
// axial-slice montage, a plane transformer with per-plane ResNet encoders
// and slice tokens, and the pruned ResNet that embeds each of 16 axial
// slices to a single scalar.

#include <cmath>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "adbench/nn.hpp"
#include "adbench/tensor.hpp"

namespace adbench::models {

enum class ModelKind { InceptionGrid, PlaneTransformer, PrunedResNet };

ModelKind parse_model_kind(const std::string& name);
std::string to_string(ModelKind k);

struct ModelConfig {
  ModelKind kind = ModelKind::PrunedResNet;
  int num_classes = 2;        // 2 or 3
  int slices = 16;            // 16, or 77 for the transformer's full mode
  double dropout = 0.4;
  double width_mult = 1.0;
  int token_dim = 64;
  int heads = 4;
  int transformer_layers = 1;
  std::uint64_t init_seed = 1;

  void validate() const;
  std::string id() const { return to_string(kind); }
};

std::string model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& json_text);

// What a model consumes from a preprocessed volume.
enum class InputKind { Montage, AxialStack, AllPlanes };

template <typename T>
struct Batch {
  Tensor<T> montage;    // [N,1,4H,4W]
  Tensor<T> axial;      // [N,Sa,H,W]
  Tensor<T> coronal;    // [N,Sc,H,W]
  Tensor<T> sagittal;   // [N,Sx,H,W]
  std::vector<int> labels;

  std::size_t batch_size() const {
    if (montage.defined()) return montage.dim(0);
    if (axial.defined()) return axial.dim(0);
    return 0;
  }
};

template <typename T>
class Model {
 public:
  explicit Model(ModelConfig cfg) : cfg_(cfg), dropout_rng_(make_rng(cfg.init_seed)) {}
  virtual ~Model() = default;

  const ModelConfig& config() const { return cfg_; }
  virtual InputKind input_kind() const = 0;

  // Logits [N, num_classes]. Raises NumericError naming the failing stage
  // if activations go non-finite.
  virtual Tensor<T> forward(Tape<T>& tape, const Batch<T>& batch, bool training) = 0;

  // Eval-mode class probabilities (softmax rows), no gradient recording.
  Tensor<T> predict_probs(const Batch<T>& batch) {
    Tape<T> tape;
    tape.set_grad_enabled(false);
    return tape.softmax(forward(tape, batch, /*training=*/false));
  }

  std::vector<nn::NamedParam<T>> parameters() const {
    nn::ParamCollector<T> pc;
    collect(pc);
    return pc.params;
  }

  std::vector<nn::NamedBuffer<T>> buffers() const {
    nn::ParamCollector<T> pc;
    collect(pc);
    return pc.buffers;
  }

  std::size_t count_parameters() const { return nn::count_scalars(parameters()); }

  // (block name, scalar count) rows for the describe table.
  std::vector<std::pair<std::string, std::size_t>> parameter_table() const {
    std::vector<std::pair<std::string, std::size_t>> rows;
    for (const auto& p : parameters()) rows.emplace_back(p.name, p.tensor.size());
    return rows;
  }

  void zero_grad() {
    for (auto& p : parameters()) {
      Tensor<T> t = p.tensor;
      t.zero_grad();
    }
  }

  void seed_dropout(std::uint64_t seed) { dropout_rng_ = make_rng(seed); }
  Rng& dropout_rng() { return dropout_rng_; }

  // Token count of the most recent transformer forward; 0 for other models.
  virtual std::size_t last_token_count() const { return 0; }
  // Width of the vector feeding the final fully connected layer.
  virtual std::size_t penultimate_dim() const = 0;

 protected:
  virtual void collect(nn::ParamCollector<T>& pc) const = 0;

  void check_finite(const Tensor<T>& t, const char* stage) const {
    if (!t.all_finite())
      throw NumericError(msg(to_string(cfg_.kind), ": non-finite activations in ",
                             stage));
  }

  static std::size_t scaled(double base, double mult) {
    const long v = std::lround(base * mult);
    return static_cast<std::size_t>(v < 1 ? 1 : v);
  }

  ModelConfig cfg_;
  Rng dropout_rng_;
};

// ---- Inception-style montage CNN ----

template <typename T>
class InceptionGridModel final : public Model<T> {
 public:
  explicit InceptionGridModel(ModelConfig cfg) : Model<T>(cfg) {
    cfg.validate();
    Rng rng = make_rng(mix_seed(cfg.init_seed, 0x1ceU));
    const double m = cfg.width_mult;
    auto s = [&](double b) { return Model<T>::scaled(b, m); };

    stem1_ = nn::ConvBnRelu<T>(1, s(16), 3, 2, 1, rng);
    stem2_ = nn::ConvBnRelu<T>(s(16), s(32), 3, 1, 1, rng);
    stem3_ = nn::ConvBnRelu<T>(s(32), s(48), 1, 1, 0, rng);
    stem4_ = nn::ConvBnRelu<T>(s(48), s(80), 3, 1, 1, rng);

    std::size_t in = s(80);
    auto add_block = [&](double c1, double r3, double c3, double r5, double c5,
                         double cp) {
      blocks_.emplace_back(in, s(c1), s(r3), s(c3), s(r5), s(c5), s(cp), rng);
      in = blocks_.back().out_channels;
    };
    add_block(32, 48, 64, 16, 32, 32);    // group A
    add_block(48, 64, 96, 16, 32, 32);
    pool_after_ = {1, 3};                 // pool after these block indices
    add_block(64, 64, 128, 24, 48, 48);   // group B
    add_block(64, 80, 160, 32, 64, 64);
    add_block(96, 96, 192, 32, 64, 64);   // group C
    head_ = nn::Linear<T>(in, static_cast<std::size_t>(cfg.num_classes), rng);
    gap_channels_ = in;
  }

  InputKind input_kind() const override { return InputKind::Montage; }
  std::size_t penultimate_dim() const override { return gap_channels_; }

  Tensor<T> forward(Tape<T>& tape, const Batch<T>& batch, bool training) override {
    const auto& cfg = this->cfg_;
    if (!batch.montage.defined() || batch.montage.ndim() != 4 ||
        batch.montage.dim(1) != 1)
      throw ShapeError("inception_grid: expected montage input [N,1,4H,4W]");
    this->check_finite(batch.montage, "input montage");
    Tensor<T> h = stem1_.forward(tape, batch.montage, training);
    h = stem2_.forward(tape, h, training);
    h = tape.max_pool2d(h, 3, 2, 1);
    h = stem3_.forward(tape, h, training);
    h = stem4_.forward(tape, h, training);
    h = tape.max_pool2d(h, 3, 2, 1);
    this->check_finite(h, "stem");
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      h = blocks_[i].forward(tape, h, training);
      if (pool_after_.count(i)) h = tape.max_pool2d(h, 3, 2, 1);
    }
    this->check_finite(h, "inception blocks");
    Tensor<T> feat = tape.global_avg_pool(h);
    feat = tape.dropout(feat, cfg.dropout, training, this->dropout_rng_);
    Tensor<T> logits = head_.forward(tape, feat);
    this->check_finite(logits, "classifier head");
    return logits;
  }

 protected:
  void collect(nn::ParamCollector<T>& pc) const override {
    stem1_.collect("stem1", pc);
    stem2_.collect("stem2", pc);
    stem3_.collect("stem3", pc);
    stem4_.collect("stem4", pc);
    for (std::size_t i = 0; i < blocks_.size(); ++i)
      blocks_[i].collect("block" + std::to_string(i), pc);
    head_.collect("head", pc);
  }

 private:
  nn::ConvBnRelu<T> stem1_, stem2_, stem3_, stem4_;
  std::vector<nn::InceptionBlock<T>> blocks_;
  std::set<std::size_t> pool_after_;
  nn::Linear<T> head_;
  std::size_t gap_channels_ = 0;
};

// ---- Plane transformer ----

template <typename T>
class PlaneTransformerModel final : public Model<T> {
 public:
  explicit PlaneTransformerModel(ModelConfig cfg) : Model<T>(cfg) {
    cfg.validate();
    Rng rng = make_rng(mix_seed(cfg.init_seed, 0x7afU));
    const std::size_t w = Model<T>::scaled(16, cfg.width_mult);
    const auto d = static_cast<std::size_t>(cfg.token_dim);
    enc_axial_ = nn::ResNetEncoder<T>(1, w, rng);
    proj_axial_ = nn::Linear<T>(enc_axial_.out_dim, d, rng);
    if (cfg.slices == 77) {
      enc_coronal_ = nn::ResNetEncoder<T>(1, w, rng);
      proj_coronal_ = nn::Linear<T>(enc_coronal_.out_dim, d, rng);
      enc_sagittal_ = nn::ResNetEncoder<T>(1, w, rng);
      proj_sagittal_ = nn::Linear<T>(enc_sagittal_.out_dim, d, rng);
    }
    for (int i = 0; i < cfg.transformer_layers; ++i)
      layers_.emplace_back(d, static_cast<std::size_t>(cfg.heads), 4, rng);
    fc1_ = nn::Linear<T>(d, d, rng);
    fc2_ = nn::Linear<T>(d, static_cast<std::size_t>(cfg.num_classes), rng);
  }

  InputKind input_kind() const override {
    return this->cfg_.slices == 77 ? InputKind::AllPlanes : InputKind::AxialStack;
  }
  std::size_t penultimate_dim() const override {
    return static_cast<std::size_t>(this->cfg_.token_dim);
  }
  std::size_t last_token_count() const override { return last_tokens_; }

  Tensor<T> forward(Tape<T>& tape, const Batch<T>& batch, bool training) override {
    const auto& cfg = this->cfg_;
    if (!batch.axial.defined() || batch.axial.ndim() != 4)
      throw ShapeError("plane_transformer: expected axial slice stack [N,S,H,W]");
    this->check_finite(batch.axial, "input slices");
    const std::size_t n = batch.axial.dim(0);
    const auto d = static_cast<std::size_t>(cfg.token_dim);

    std::vector<Tensor<T>> token_groups;
    token_groups.push_back(
        plane_tokens(tape, batch.axial, enc_axial_, proj_axial_, training));
    if (cfg.slices == 77) {
      if (!batch.coronal.defined() || !batch.sagittal.defined())
        throw ShapeError("plane_transformer: 77-slice mode requires coronal and "
                         "sagittal slice stacks");
      token_groups.push_back(
          plane_tokens(tape, batch.coronal, enc_coronal_, proj_coronal_, training));
      token_groups.push_back(
          plane_tokens(tape, batch.sagittal, enc_sagittal_, proj_sagittal_, training));
    } else if (batch.axial.dim(1) != static_cast<std::size_t>(cfg.slices)) {
      throw ShapeError(msg("plane_transformer: expected ", cfg.slices,
                           " axial slices, got ", batch.axial.dim(1)));
    }
    Tensor<T> tokens = token_groups.size() == 1 ? token_groups[0]
                                                : tape.concat(token_groups, 1);
    const std::size_t seq = tokens.dim(1);
    last_tokens_ = seq;
    this->check_finite(tokens, "slice tokens");

    // one shared positional index space over the concatenated sequence
    auto pe_it = pe_cache_.find(seq);
    if (pe_it == pe_cache_.end())
      pe_it = pe_cache_.emplace(seq, nn::sinusoidal_positional_encoding<T>(seq, d)).first;
    tokens = tape.add_rowvec(tokens.reshaped({n, seq * d}), pe_it->second)
                 .reshaped({n, seq, d});

    for (const auto& layer : layers_) tokens = layer.forward(tape, tokens);
    this->check_finite(tokens, "transformer layer");

    tokens = tape.dropout(tokens, cfg.dropout, training, this->dropout_rng_);
    Tensor<T> pooled = tape.mean_tokens(tokens);
    Tensor<T> h = tape.relu(fc1_.forward(tape, pooled));
    Tensor<T> logits = fc2_.forward(tape, h);
    this->check_finite(logits, "classifier head");
    return logits;
  }

 protected:
  void collect(nn::ParamCollector<T>& pc) const override {
    enc_axial_.collect("encoder.axial", pc);
    proj_axial_.collect("proj.axial", pc);
    if (this->cfg_.slices == 77) {
      enc_coronal_.collect("encoder.coronal", pc);
      proj_coronal_.collect("proj.coronal", pc);
      enc_sagittal_.collect("encoder.sagittal", pc);
      proj_sagittal_.collect("proj.sagittal", pc);
    }
    for (std::size_t i = 0; i < layers_.size(); ++i)
      layers_[i].collect("transformer" + std::to_string(i), pc);
    fc1_.collect("fc1", pc);
    fc2_.collect("fc2", pc);
  }

 private:
  // [N,S,H,W] -> [N,S,token_dim]: shared-weight encoder over slices, global
  // average pooled, linearly projected to one token per slice.
  Tensor<T> plane_tokens(Tape<T>& tape, const Tensor<T>& stack,
                         const nn::ResNetEncoder<T>& enc,
                         const nn::Linear<T>& proj, bool training) {
    const std::size_t n = stack.dim(0), s = stack.dim(1);
    const std::size_t h = stack.dim(2), w = stack.dim(3);
    Tensor<T> flat = stack.reshaped({n * s, 1, h, w});
    Tensor<T> feat = enc.forward(tape, flat, training);
    Tensor<T> tok = proj.forward(tape, feat);
    return tok.reshaped({n, s, static_cast<std::size_t>(this->cfg_.token_dim)});
  }

  nn::ResNetEncoder<T> enc_axial_, enc_coronal_, enc_sagittal_;
  nn::Linear<T> proj_axial_, proj_coronal_, proj_sagittal_;
  std::vector<nn::TransformerLayer<T>> layers_;
  nn::Linear<T> fc1_, fc2_;
  mutable std::map<std::size_t, Tensor<T>> pe_cache_;
  std::size_t last_tokens_ = 0;
};

// ---- Pruned ResNet ----

template <typename T>
class PrunedResNetModel final : public Model<T> {
 public:
  explicit PrunedResNetModel(ModelConfig cfg) : Model<T>(cfg) {
    cfg.validate();
    Rng rng = make_rng(mix_seed(cfg.init_seed, 0x9e5U));
    const std::size_t w = Model<T>::scaled(16, cfg.width_mult);
    encoder_ = nn::ResNetEncoder<T>(1, w, rng);
    embed_ = nn::Linear<T>(encoder_.out_dim, 1, rng);
    head_ = nn::Linear<T>(static_cast<std::size_t>(cfg.slices),
                          static_cast<std::size_t>(cfg.num_classes), rng);
  }

  InputKind input_kind() const override { return InputKind::AxialStack; }
  std::size_t penultimate_dim() const override {
    return static_cast<std::size_t>(this->cfg_.slices);
  }

  Tensor<T> forward(Tape<T>& tape, const Batch<T>& batch, bool training) override {
    const auto& cfg = this->cfg_;
    if (!batch.axial.defined() || batch.axial.ndim() != 4)
      throw ShapeError("pruned_resnet: expected axial slice stack [N,S,H,W]");
    const std::size_t n = batch.axial.dim(0), s = batch.axial.dim(1);
    if (s != static_cast<std::size_t>(cfg.slices))
      throw ShapeError(msg("pruned_resnet: expected ", cfg.slices,
                           " axial slices, got ", s));
    this->check_finite(batch.axial, "input slices");
    Tensor<T> flat =
        batch.axial.reshaped({n * s, 1, batch.axial.dim(2), batch.axial.dim(3)});
    Tensor<T> feat = encoder_.forward(tape, flat, training);
    this->check_finite(feat, "encoder");
    // each slice embeds to a single scalar -> a slices-wide feature vector
    Tensor<T> scalars = embed_.forward(tape, feat).reshaped({n, s});
    scalars = tape.dropout(scalars, cfg.dropout, training, this->dropout_rng_);
    Tensor<T> logits = head_.forward(tape, scalars);
    this->check_finite(logits, "classifier head");
    return logits;
  }

 protected:
  void collect(nn::ParamCollector<T>& pc) const override {
    encoder_.collect("encoder", pc);
    embed_.collect("embed", pc);
    head_.collect("head", pc);
  }

 private:
  nn::ResNetEncoder<T> encoder_;
  nn::Linear<T> embed_;
  nn::Linear<T> head_;
};

template <typename T>
std::unique_ptr<Model<T>> build_model(const ModelConfig& cfg) {
  cfg.validate();
  switch (cfg.kind) {
    case ModelKind::InceptionGrid:
      return std::make_unique<InceptionGridModel<T>>(cfg);
    case ModelKind::PlaneTransformer:
      return std::make_unique<PlaneTransformerModel<T>>(cfg);
    case ModelKind::PrunedResNet:
      return std::make_unique<PrunedResNetModel<T>>(cfg);
  }
  throw ConfigError("unknown model kind");
}

std::string describe(const std::vector<std::pair<std::string, std::size_t>>& table);

}  // namespace adbench::models
