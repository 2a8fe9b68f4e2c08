#pragma once

// Reformer-base, Reformer-fast (PreNet + trunk) and the Transformer
// encoder-decoder baseline, plus parameter counting.

#include <atomic>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "reformer/joint.hpp"
#include "reformer/nn.hpp"
#include "reformer/tensor.hpp"

namespace reformer {

inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kUnk = 3;
inline constexpr int kNumSpecial = 4;

enum class Variant { reformer_base, reformer_fast, transformer };

std::string to_string(Variant v);
// Throws ConfigError listing the accepted names.
Variant parse_variant(const std::string& name);

// For reformer-fast `prenet_l` is the PreNet depth; for the transformer it is
// the encoder depth and `l` the decoder depth.  Unused by reformer-base.
struct ModelConfig {
  Variant variant = Variant::reformer_base;
  int l = 7;
  int e = 256;
  int w = 4;
  int heads = 4;
  double dropout = 0.1;
  int vocab_src = 32;
  int vocab_tgt = 32;
  int prenet_l = 0;

  static ModelConfig defaults(Variant v);
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

// Row-major [rows, cols] matrix of token ids, every row the same length.
struct IdBatch {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<int> ids;

  static IdBatch single(std::span<const int> row);
  std::span<const int> row(std::size_t r) const { return {ids.data() + r * cols, cols}; }
};

template <typename T>
struct EncoderLayerParams {
  LayerNormParams<T> attn_norm;
  AttentionParams<T> self_attn;
  LayerNormParams<T> ffn_norm;
  FfnParams<T> ffn;

  static EncoderLayerParams init(std::size_t e, int width, int heads, Rng& rng);
  void collect(const std::string& prefix, ParamRefs<T>& out);
};

template <typename T>
struct DecoderLayerParams {
  LayerNormParams<T> self_norm;
  AttentionParams<T> self_attn;
  LayerNormParams<T> cross_norm;
  AttentionParams<T> cross_attn;
  LayerNormParams<T> ffn_norm;
  FfnParams<T> ffn;

  static DecoderLayerParams init(std::size_t e, int width, int heads, Rng& rng);
  void collect(const std::string& prefix, ParamRefs<T>& out);
};

// Members unused by a variant stay empty.  The trunk's final layer norm is
// reduction.pre_norm.
template <typename T>
struct ModelParams {
  BasicTensor<T> src_embed;  // [vocab_src, e]
  BasicTensor<T> tgt_embed;  // [vocab_tgt, e]
  std::vector<EncoderLayerParams<T>> source_layers;
  LayerNormParams<T> source_norm;
  std::vector<ReformerLayerParams<T>> trunk;
  ReductionParams<T> reduction;
  std::vector<DecoderLayerParams<T>> decoder;
  LayerNormParams<T> decoder_norm;
  BasicTensor<T> out_w;  // [e, vocab_tgt]
  BasicTensor<T> out_b;  // [vocab_tgt]
};

// Per-sequence incremental decoding state.
template <typename T>
struct DecodeState {
  BasicTensor<T> source;  // [B, S, e]: joint-input source rows or encoder memory
  DecodeCache<T> cache;
};

template <typename T>
class Model {
 public:
  Model(const ModelConfig& config, std::uint64_t seed);
  Model(const ModelConfig& config, ModelParams<T> params);

  const ModelConfig& config() const { return config_; }
  ModelParams<T>& params() { return params_; }
  const ModelParams<T>& params() const { return params_; }

  // Canonical order: embeddings, source stack, source norm, trunk layers,
  // reduction, decoder layers, decoder norm, output projection.  Layer-major,
  // sublayers in execution order.
  ParamRefs<T> parameters();

  // logits [T, vocab_tgt].  tgt_in is BOS-prefixed.
  BasicTensor<T> forward(std::span<const int> src, std::span<const int> tgt_in,
                         const ForwardContext& ctx = {}) const;
  // logits [B, T, vocab_tgt].
  BasicTensor<T> forward(const IdBatch& src, const IdBatch& tgt_in,
                         const ForwardContext& ctx = {}) const;

  // [B, S, e]: raw embeddings (reformer-base), PreNet output (reformer-fast)
  // or encoder memory (transformer).
  BasicTensor<T> encode_source(const IdBatch& src, const ForwardContext& ctx = {}) const;

  DecodeState<T> begin_decode(std::span<const int> src, const ForwardContext& ctx = {}) const;
  DecodeState<T> begin_decode(const IdBatch& src, const ForwardContext& ctx = {}) const;
  // Feeds one token per row and returns next-token logits [B, vocab_tgt].
  BasicTensor<T> decode_step(DecodeState<T>& state, std::span<const int> tokens,
                             const ForwardContext& ctx = {}) const;

  // Number of source-side encoder/PreNet evaluations so far.
  std::size_t source_passes() const { return source_passes_->load(); }

  template <typename U>
  Model<U> cast() const;

 private:
  BasicTensor<T> embed(const BasicTensor<T>& table, const IdBatch& ids, std::size_t vocab) const;
  BasicTensor<T> project(const BasicTensor<T>& hidden) const;
  BasicTensor<T> trunk_head(const BasicTensor<T>& top) const;
  BasicTensor<T> reformer_forward(const IdBatch& src, const IdBatch& tgt_in,
                                  const ForwardContext& ctx) const;
  BasicTensor<T> transformer_forward(const IdBatch& src, const IdBatch& tgt_in,
                                     const ForwardContext& ctx) const;

  ModelConfig config_;
  ModelParams<T> params_;
  std::unique_ptr<std::atomic<std::size_t>> source_passes_ =
      std::make_unique<std::atomic<std::size_t>>(0);
};

// Copies every parameter value into a fresh, independent set.
template <typename T>
ModelParams<T> clone_params(const Model<T>& model);

struct ParamCount {
  double simplified = 0;  // matrix parameters in units of e^2
  std::size_t full = 0;   // every scalar in the ParamSet
};

ParamCount count_parameters(const ModelConfig& config);

// Sums attention and FFN matrix sizes over the trunk (reformer variants) or
// encoder + decoder stacks (transformer), straight from the parameter list.
template <typename T>
std::size_t stack_matrix_parameters(Model<T>& model);

}  // namespace reformer
