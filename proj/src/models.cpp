#include "reformer/models.hpp"

#include <cmath>

#include "reformer/ops.hpp"

namespace reformer {

std::string to_string(Variant v) {
  switch (v) {
    case Variant::reformer_base:
      return "reformer-base";
    case Variant::reformer_fast:
      return "reformer-fast";
    case Variant::transformer:
      return "transformer";
  }
  return "?";
}

Variant parse_variant(const std::string& name) {
  for (auto v : {Variant::reformer_base, Variant::reformer_fast, Variant::transformer}) {
    if (to_string(v) == name) return v;
  }
  throw ConfigError("unknown variant '" + name +
                    "'; expected one of reformer-base, reformer-fast, transformer");
}

ModelConfig ModelConfig::defaults(Variant v) {
  ModelConfig c;
  c.variant = v;
  switch (v) {
    case Variant::reformer_base:
      c.l = 7;
      c.prenet_l = 0;
      break;
    case Variant::reformer_fast:
      c.l = 5;
      c.prenet_l = 5;
      break;
    case Variant::transformer:
      c.l = 6;
      c.prenet_l = 6;
      break;
  }
  return c;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
  if (l < 1) fail("l must be >= 1, got " + std::to_string(l));
  if (e <= 0 || e % 2 != 0) fail("e must be positive and even, got " + std::to_string(e));
  if (heads <= 0 || e % heads != 0) {
    fail("e=" + std::to_string(e) + " is not divisible by heads=" + std::to_string(heads));
  }
  if (w < 1) fail("w must be >= 1, got " + std::to_string(w));
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must lie in [0, 1)");
  if (vocab_src <= kNumSpecial || vocab_tgt <= kNumSpecial) {
    fail("vocabularies need more than the " + std::to_string(kNumSpecial) + " reserved ids");
  }
  if (prenet_l < 0) fail("prenet_l must be >= 0");
}

IdBatch IdBatch::single(std::span<const int> row) {
  return {1, row.size(), std::vector<int>(row.begin(), row.end())};
}

namespace {

const std::set<std::size_t> kUnshared{};

template <typename T>
BasicTensor<T> normal_table(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
  std::vector<T> data(rows * cols);
  for (auto& v : data) v = static_cast<T>(stddev * rng.normal());
  BasicTensor<T> t({rows, cols}, std::move(data));
  t.set_requires_grad(true);
  return t;
}

template <typename T>
BasicTensor<T> norm(const BasicTensor<T>& x, const LayerNormParams<T>& p) {
  return ops::layer_norm(x, p.gain, p.bias);
}

// (x + pos) * sqrt(e) with unshared dropout, x [B, n, e].
template <typename T>
BasicTensor<T> positioned(const BasicTensor<T>& x, std::size_t offset, const ForwardContext& ctx) {
  const std::size_t e = x.dim(-1);
  auto y = ops::add(x, sinusoidal_positions<T>(x.dim(-2), e, offset));
  y = ops::scale(y, static_cast<T>(std::sqrt(static_cast<double>(e))));
  return structured_dropout(y, ctx.dropout, kUnshared, ctx.rng, ctx.training);
}

template <typename T>
BasicTensor<T> encoder_layer(const BasicTensor<T>& x, const EncoderLayerParams<T>& p,
                             const ForwardContext& ctx, int layer) {
  auto h = sublayer<T>(
      x, p.attn_norm,
      [&](const BasicTensor<T>& y) {
        return multi_head_attention<T>(y, y, p.self_attn, nullptr, ctx,
                                       AttentionTag{layer, AttentionKind::encoder_self});
      },
      {ctx.dropout, kUnshared}, ctx);
  return sublayer<T>(
      h, p.ffn_norm, [&](const BasicTensor<T>& y) { return ffn(y, p.ffn); },
      {ctx.dropout, kUnshared}, ctx);
}

// Queries come from x; self-attention keys/values from `context` (x itself
// in the parallel pass, cached rows plus x when decoding).
template <typename T>
BasicTensor<T> decoder_layer(const BasicTensor<T>& x, const BasicTensor<T>* context,
                             const BasicTensor<T>& memory, const DecoderLayerParams<T>& p,
                             const BasicTensor<T>* mask, const ForwardContext& ctx, int layer) {
  auto h = sublayer<T>(
      x, p.self_norm,
      [&](const BasicTensor<T>& y) {
        const auto keys = context ? norm(*context, p.self_norm) : y;
        return multi_head_attention<T>(y, keys, p.self_attn, mask, ctx,
                                       AttentionTag{layer, AttentionKind::decoder_self});
      },
      {ctx.dropout, kUnshared}, ctx);
  h = sublayer<T>(
      h, p.cross_norm,
      [&](const BasicTensor<T>& y) {
        return multi_head_attention<T>(y, memory, p.cross_attn, nullptr, ctx,
                                       AttentionTag{layer, AttentionKind::decoder_cross});
      },
      {ctx.dropout, kUnshared}, ctx);
  return sublayer<T>(
      h, p.ffn_norm, [&](const BasicTensor<T>& y) { return ffn(y, p.ffn); },
      {ctx.dropout, kUnshared}, ctx);
}

template <typename T>
void add_ref(ParamRefs<T>& out, const std::string& name, BasicTensor<T>& t) {
  t.set_name(name);
  out.push_back({name, &t});
}

template <typename T>
ParamRefs<T> collect_params(ModelParams<T>& p, Variant variant) {
  ParamRefs<T> out;
  add_ref(out, "src_embed", p.src_embed);
  add_ref(out, "tgt_embed", p.tgt_embed);
  const std::string source = variant == Variant::transformer ? "encoder" : "prenet";
  if (variant != Variant::reformer_base) {
    for (std::size_t i = 0; i < p.source_layers.size(); ++i) {
      p.source_layers[i].collect(source + "." + std::to_string(i), out);
    }
    p.source_norm.collect(source + ".norm", out);
  }
  if (variant == Variant::transformer) {
    for (std::size_t i = 0; i < p.decoder.size(); ++i) {
      p.decoder[i].collect("decoder." + std::to_string(i), out);
    }
    p.decoder_norm.collect("decoder.norm", out);
  } else {
    for (std::size_t i = 0; i < p.trunk.size(); ++i) {
      p.trunk[i].collect("trunk." + std::to_string(i), out);
    }
    p.reduction.collect("reduction", out);
  }
  add_ref(out, "out_w", p.out_w);
  add_ref(out, "out_b", p.out_b);
  return out;
}

}  // namespace

template <typename T>
EncoderLayerParams<T> EncoderLayerParams<T>::init(std::size_t e, int width, int heads, Rng& rng) {
  EncoderLayerParams p;
  p.attn_norm = LayerNormParams<T>::init(e);
  p.self_attn = AttentionParams<T>::init(e, heads, rng);
  p.ffn_norm = LayerNormParams<T>::init(e);
  p.ffn = FfnParams<T>::init(e, width, rng);
  return p;
}

template <typename T>
void EncoderLayerParams<T>::collect(const std::string& prefix, ParamRefs<T>& out) {
  attn_norm.collect(prefix + ".attn_norm", out);
  self_attn.collect(prefix + ".self_attn", out);
  ffn_norm.collect(prefix + ".ffn_norm", out);
  ffn.collect(prefix + ".ffn", out);
}

template <typename T>
DecoderLayerParams<T> DecoderLayerParams<T>::init(std::size_t e, int width, int heads, Rng& rng) {
  DecoderLayerParams p;
  p.self_norm = LayerNormParams<T>::init(e);
  p.self_attn = AttentionParams<T>::init(e, heads, rng);
  p.cross_norm = LayerNormParams<T>::init(e);
  p.cross_attn = AttentionParams<T>::init(e, heads, rng);
  p.ffn_norm = LayerNormParams<T>::init(e);
  p.ffn = FfnParams<T>::init(e, width, rng);
  return p;
}

template <typename T>
void DecoderLayerParams<T>::collect(const std::string& prefix, ParamRefs<T>& out) {
  self_norm.collect(prefix + ".self_norm", out);
  self_attn.collect(prefix + ".self_attn", out);
  cross_norm.collect(prefix + ".cross_norm", out);
  cross_attn.collect(prefix + ".cross_attn", out);
  ffn_norm.collect(prefix + ".ffn_norm", out);
  ffn.collect(prefix + ".ffn", out);
}

template <typename T>
Model<T>::Model(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  const auto e = static_cast<std::size_t>(config_.e);
  const double embed_std = 1.0 / std::sqrt(static_cast<double>(e));
  auto& p = params_;
  p.src_embed = normal_table<T>(static_cast<std::size_t>(config_.vocab_src), e, embed_std, rng);
  p.tgt_embed = normal_table<T>(static_cast<std::size_t>(config_.vocab_tgt), e, embed_std, rng);
  if (config_.variant != Variant::reformer_base) {
    for (int i = 0; i < config_.prenet_l; ++i) {
      p.source_layers.push_back(EncoderLayerParams<T>::init(e, config_.w, config_.heads, rng));
    }
    p.source_norm = LayerNormParams<T>::init(e);
  }
  if (config_.variant == Variant::transformer) {
    for (int i = 0; i < config_.l; ++i) {
      p.decoder.push_back(DecoderLayerParams<T>::init(e, config_.w, config_.heads, rng));
    }
    p.decoder_norm = LayerNormParams<T>::init(e);
  } else {
    for (int i = 0; i < config_.l; ++i) {
      p.trunk.push_back(ReformerLayerParams<T>::init(e, config_.w, config_.heads, rng));
    }
    p.reduction = ReductionParams<T>::init(e, rng);
  }
  p.out_w = xavier_uniform<T>(e, static_cast<std::size_t>(config_.vocab_tgt), rng);
  p.out_b = BasicTensor<T>::zeros({static_cast<std::size_t>(config_.vocab_tgt)});
  p.out_b.set_requires_grad(true);
  parameters();  // assigns names
}

template <typename T>
Model<T>::Model(const ModelConfig& config, ModelParams<T> params)
    : config_(config), params_(std::move(params)) {
  config_.validate();
  parameters();
}

template <typename T>
ParamRefs<T> Model<T>::parameters() {
  return collect_params(params_, config_.variant);
}

template <typename T>
BasicTensor<T> Model<T>::embed(const BasicTensor<T>& table, const IdBatch& ids,
                               std::size_t vocab) const {
  if (ids.rows == 0 || ids.cols == 0) throw ShapeError("empty token sequence");
  if (ids.ids.size() != ids.rows * ids.cols) throw ShapeError("IdBatch size mismatch");
  for (int id : ids.ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw ConfigError("token id " + std::to_string(id) + " outside vocabulary of size " +
                        std::to_string(vocab));
    }
  }
  auto flat = ops::embedding(table, std::span<const int>(ids.ids));
  return ops::reshape(flat, {ids.rows, ids.cols, table.dim(1)});
}

template <typename T>
BasicTensor<T> Model<T>::project(const BasicTensor<T>& hidden) const {
  return ops::add(ops::matmul(hidden, params_.out_w), params_.out_b);
}

// top [B, S, T, e] -> logits [B, T, V]
template <typename T>
BasicTensor<T> Model<T>::trunk_head(const BasicTensor<T>& top) const {
  auto per_target = ops::permute(top, {0, 2, 1, 3});
  return project(reduction(per_target, params_.reduction));
}

template <typename T>
BasicTensor<T> Model<T>::encode_source(const IdBatch& src, const ForwardContext& ctx) const {
  auto x = embed(params_.src_embed, src, static_cast<std::size_t>(config_.vocab_src));
  if (config_.variant == Variant::reformer_base) return x;
  source_passes_->fetch_add(1);
  x = positioned(x, 0, ctx);
  for (std::size_t i = 0; i < params_.source_layers.size(); ++i) {
    x = encoder_layer(x, params_.source_layers[i], ctx, static_cast<int>(i));
  }
  return norm(x, params_.source_norm);
}

template <typename T>
BasicTensor<T> Model<T>::reformer_forward(const IdBatch& src, const IdBatch& tgt_in,
                                          const ForwardContext& ctx) const {
  auto source = encode_source(src, ctx);
  auto target = embed(params_.tgt_embed, tgt_in, static_cast<std::size_t>(config_.vocab_tgt));
  auto x = build_joint_input(source, target, ctx);
  for (std::size_t i = 0; i < params_.trunk.size(); ++i) {
    x = reformer_layer(x, params_.trunk[i], ctx, static_cast<int>(i));
  }
  return trunk_head(x.value);
}

template <typename T>
BasicTensor<T> Model<T>::transformer_forward(const IdBatch& src, const IdBatch& tgt_in,
                                             const ForwardContext& ctx) const {
  auto memory = encode_source(src, ctx);
  auto y = positioned(
      embed(params_.tgt_embed, tgt_in, static_cast<std::size_t>(config_.vocab_tgt)), 0, ctx);
  const auto mask = future_mask<T>(tgt_in.cols);
  for (std::size_t i = 0; i < params_.decoder.size(); ++i) {
    y = decoder_layer<T>(y, nullptr, memory, params_.decoder[i], &mask, ctx, static_cast<int>(i));
  }
  return project(norm(y, params_.decoder_norm));
}

template <typename T>
BasicTensor<T> Model<T>::forward(const IdBatch& src, const IdBatch& tgt_in,
                                 const ForwardContext& ctx) const {
  if (src.rows != tgt_in.rows) {
    throw ShapeError("batch has " + std::to_string(src.rows) + " sources but " +
                     std::to_string(tgt_in.rows) + " targets");
  }
  return config_.variant == Variant::transformer ? transformer_forward(src, tgt_in, ctx)
                                                 : reformer_forward(src, tgt_in, ctx);
}

template <typename T>
BasicTensor<T> Model<T>::forward(std::span<const int> src, std::span<const int> tgt_in,
                                 const ForwardContext& ctx) const {
  auto logits = forward(IdBatch::single(src), IdBatch::single(tgt_in), ctx);
  return ops::reshape(logits, {tgt_in.size(), static_cast<std::size_t>(config_.vocab_tgt)});
}

template <typename T>
DecodeState<T> Model<T>::begin_decode(const IdBatch& src, const ForwardContext& ctx) const {
  DecodeState<T> state;
  state.source = encode_source(src, ctx);
  return state;
}

template <typename T>
DecodeState<T> Model<T>::begin_decode(std::span<const int> src, const ForwardContext& ctx) const {
  return begin_decode(IdBatch::single(src), ctx);
}

template <typename T>
BasicTensor<T> Model<T>::decode_step(DecodeState<T>& state, std::span<const int> tokens,
                                     const ForwardContext& ctx) const {
  const std::size_t rows = state.source.dim(0);
  if (tokens.size() != rows) {
    throw ShapeError("decode_step: " + std::to_string(tokens.size()) + " tokens for " +
                     std::to_string(rows) + " sequences");
  }
  const std::size_t vocab = static_cast<std::size_t>(config_.vocab_tgt);
  const std::size_t t = state.cache.t_done;
  IdBatch step{rows, 1, std::vector<int>(tokens.begin(), tokens.end())};
  auto emb = embed(params_.tgt_embed, step, vocab);
  if (config_.variant != Variant::transformer) {
    auto column = build_joint_input(state.source, emb, ctx, t);
    auto top = step_decode<T>(state.cache, column.value, params_.trunk, ctx);
    return ops::reshape(trunk_head(top), {rows, vocab});
  }
  auto& layers = state.cache.layer_inputs;
  if (t == 0 && layers.empty()) layers.resize(params_.decoder.size());
  if (layers.size() != params_.decoder.size()) {
    throw ConfigError("decode cache holds " + std::to_string(layers.size()) +
                      " layers but the model has " + std::to_string(params_.decoder.size()));
  }
  auto y = positioned(emb, t, ctx);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (t == 0) {
      layers[i] = y;
    } else {
      const BasicTensor<T> parts[] = {layers[i], y};
      layers[i] = ops::concat<T>(parts, 1);
    }
    y = decoder_layer<T>(y, &layers[i], state.source, params_.decoder[i], nullptr, ctx,
                         static_cast<int>(i));
  }
  ++state.cache.t_done;
  return ops::reshape(project(norm(y, params_.decoder_norm)), {rows, vocab});
}

template <typename T>
template <typename U>
Model<U> Model<T>::cast() const {
  Model<U> out(config_, 0);
  auto dst = out.parameters();
  auto src = collect_params(const_cast<ModelParams<T>&>(params_), config_.variant);
  for (std::size_t i = 0; i < dst.size(); ++i) {
    *dst[i].tensor = src[i].tensor->template cast<U>();
    dst[i].tensor->set_requires_grad(true);
    dst[i].tensor->set_name(dst[i].name);
  }
  return out;
}

template <typename T>
ModelParams<T> clone_params(const Model<T>& model) {
  ModelParams<T> copy = model.params();
  for (auto& ref : collect_params(copy, model.config().variant)) {
    auto fresh = ref.tensor->clone();
    fresh.set_requires_grad(true);
    fresh.set_name(ref.name);
    *ref.tensor = fresh;
  }
  return copy;
}

ParamCount count_parameters(const ModelConfig& c) {
  c.validate();
  const std::size_t e = static_cast<std::size_t>(c.e), w = static_cast<std::size_t>(c.w);
  const std::size_t vs = static_cast<std::size_t>(c.vocab_src);
  const std::size_t vt = static_cast<std::size_t>(c.vocab_tgt);
  const std::size_t l = static_cast<std::size_t>(c.l), pl = static_cast<std::size_t>(c.prenet_l);
  const std::size_t ln = 2 * e;
  const std::size_t attn = 4 * e * e;
  const std::size_t ffn = 2 * w * e * e + w * e + e;
  const std::size_t encoder_layer = 2 * ln + attn + ffn;

  ParamCount out;
  out.full = vs * e + vt * e + e * vt + vt;
  switch (c.variant) {
    case Variant::reformer_fast:
      out.full += pl * encoder_layer + ln;
      [[fallthrough]];
    case Variant::reformer_base:
      out.full += l * (4 * ln + 2 * attn + 2 * ffn) + 2 * ln + e * e;
      out.simplified = 2.0 * c.l * (4.0 + 2.0 * c.w);
      break;
    case Variant::transformer:
      out.full += pl * encoder_layer + ln + l * (3 * ln + 2 * attn + ffn) + ln;
      out.simplified = c.prenet_l * (4.0 + 2.0 * c.w) + c.l * (8.0 + 2.0 * c.w);
      break;
  }
  return out;
}

template <typename T>
std::size_t stack_matrix_parameters(Model<T>& model) {
  auto ends_with = [](const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  const bool transformer = model.config().variant == Variant::transformer;
  std::size_t total = 0;
  for (const auto& ref : model.parameters()) {
    const bool in_stack = transformer ? (ref.name.starts_with("encoder.") || ref.name.starts_with("decoder."))
                                      : ref.name.starts_with("trunk.");
    if (!in_stack) continue;
    for (const char* m : {".w_q", ".w_k", ".w_v", ".w_o", ".w1", ".w2"}) {
      if (ends_with(ref.name, m)) total += ref.tensor->numel();
    }
  }
  return total;
}

template struct EncoderLayerParams<float>;
template struct EncoderLayerParams<double>;
template struct DecoderLayerParams<float>;
template struct DecoderLayerParams<double>;
template class Model<float>;
template class Model<double>;
template Model<double> Model<float>::cast<double>() const;
template Model<float> Model<double>::cast<float>() const;
template Model<float> Model<float>::cast<float>() const;
template Model<double> Model<double>::cast<double>() const;
template ModelParams<float> clone_params(const Model<float>&);
template ModelParams<double> clone_params(const Model<double>&);
template std::size_t stack_matrix_parameters(Model<float>&);
template std::size_t stack_matrix_parameters(Model<double>&);

}  // namespace reformer
