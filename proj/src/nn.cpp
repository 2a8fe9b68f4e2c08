#include "reformer/nn.hpp"

#include <cmath>

#include "reformer/ops.hpp"

namespace reformer {

std::string to_string(AttentionKind kind) {
  switch (kind) {
    case AttentionKind::target:
      return "T";
    case AttentionKind::source:
      return "S";
    case AttentionKind::encoder_self:
      return "enc";
    case AttentionKind::decoder_self:
      return "dec";
    case AttentionKind::decoder_cross:
      return "cross";
  }
  return "?";
}

namespace {

template <typename T>
BasicTensor<T> param(BasicTensor<T> t) {
  t.set_requires_grad(true);
  return t;
}

template <typename T>
void add_ref(ParamRefs<T>& out, const std::string& name, BasicTensor<T>& t) {
  t.set_name(name);
  out.push_back({name, &t});
}

}  // namespace

template <typename T>
LayerNormParams<T> LayerNormParams<T>::init(std::size_t e) {
  if (e == 0) throw ConfigError("layer norm width must be positive");
  return {param(BasicTensor<T>::full({e}, T(1))), param(BasicTensor<T>::zeros({e}))};
}

template <typename T>
void LayerNormParams<T>::collect(const std::string& prefix, ParamRefs<T>& out) {
  add_ref(out, prefix + ".gain", gain);
  add_ref(out, prefix + ".bias", bias);
}

template <typename T>
BasicTensor<T> xavier_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<T> data(fan_in * fan_out);
  for (auto& v : data) v = static_cast<T>(rng.uniform(-bound, bound));
  return param(BasicTensor<T>({fan_in, fan_out}, std::move(data)));
}

template <typename T>
AttentionParams<T> AttentionParams<T>::init(std::size_t e, int heads, Rng& rng) {
  if (heads <= 0 || e % static_cast<std::size_t>(heads) != 0) {
    throw ConfigError("embedding size " + std::to_string(e) + " is not divisible by " +
                      std::to_string(heads) + " heads");
  }
  AttentionParams p;
  p.w_q = xavier_uniform<T>(e, e, rng);
  p.w_k = xavier_uniform<T>(e, e, rng);
  p.w_v = xavier_uniform<T>(e, e, rng);
  p.w_o = xavier_uniform<T>(e, e, rng);
  p.heads = heads;
  return p;
}

template <typename T>
void AttentionParams<T>::collect(const std::string& prefix, ParamRefs<T>& out) {
  add_ref(out, prefix + ".w_q", w_q);
  add_ref(out, prefix + ".w_k", w_k);
  add_ref(out, prefix + ".w_v", w_v);
  add_ref(out, prefix + ".w_o", w_o);
}

template <typename T>
FfnParams<T> FfnParams<T>::init(std::size_t e, int width, Rng& rng) {
  if (width < 1) throw ConfigError("FFN width multiplier must be >= 1");
  const std::size_t hidden = e * static_cast<std::size_t>(width);
  FfnParams p;
  p.w1 = xavier_uniform<T>(e, hidden, rng);
  p.b1 = param(BasicTensor<T>::zeros({hidden}));
  p.w2 = xavier_uniform<T>(hidden, e, rng);
  p.b2 = param(BasicTensor<T>::zeros({e}));
  return p;
}

template <typename T>
void FfnParams<T>::collect(const std::string& prefix, ParamRefs<T>& out) {
  add_ref(out, prefix + ".w1", w1);
  add_ref(out, prefix + ".b1", b1);
  add_ref(out, prefix + ".w2", w2);
  add_ref(out, prefix + ".b2", b2);
}

template <typename T>
BasicTensor<T> scaled_dot_attention(const BasicTensor<T>& q, const BasicTensor<T>& k,
                                    const BasicTensor<T>& v, const BasicTensor<T>* mask,
                                    BasicTensor<T>* weights) {
  const std::size_t d = q.dim(-1);
  auto scores = ops::scale(ops::matmul_transposed(q, k), static_cast<T>(1.0 / std::sqrt(double(d))));
  if (mask) {
    if (mask->rank() < 2) throw ShapeError("attention mask must have rank >= 2");
    const std::size_t nk = mask->dim(-1);
    const auto m = mask->data();
    for (std::size_t row = 0; row < m.size() / std::max<std::size_t>(nk, 1); ++row) {
      bool open = false;
      for (std::size_t j = 0; j < nk && !open; ++j) open = m[row * nk + j] > kBlocked / 2;
      if (!open) throw ConfigError("attention mask blocks every key in a query row");
    }
    scores = ops::add(scores, *mask);
  }
  auto attn = ops::softmax(scores, -1);
  if (weights) *weights = attn;
  return ops::matmul(attn, v);
}

template <typename T>
BasicTensor<T> multi_head_attention(const BasicTensor<T>& x_q, const BasicTensor<T>& x_kv,
                                    const AttentionParams<T>& p, const BasicTensor<T>* mask,
                                    const ForwardContext& ctx, std::optional<AttentionTag> tag) {
  if (x_q.rank() < 2 || x_kv.rank() != x_q.rank()) {
    throw ShapeError("multi_head_attention: incompatible inputs " + to_string(x_q.shape()) +
                     " and " + to_string(x_kv.shape()));
  }
  const std::size_t e = x_q.dim(-1);
  const std::size_t h = static_cast<std::size_t>(p.heads);
  if (p.heads <= 0 || e % h != 0) {
    throw ConfigError("embedding size " + std::to_string(e) + " is not divisible by " +
                      std::to_string(p.heads) + " heads");
  }
  const std::size_t d = e / h;
  const std::size_t nq = x_q.dim(-2), nk = x_kv.dim(-2);
  Shape lead(x_q.shape().begin(), x_q.shape().end() - 2);
  Shape lead_kv(x_kv.shape().begin(), x_kv.shape().end() - 2);
  if (lead != lead_kv || x_kv.dim(-1) != e) {
    throw ShapeError("multi_head_attention: query shape " + to_string(x_q.shape()) +
                     " and key/value shape " + to_string(x_kv.shape()) + " disagree");
  }
  const std::size_t batch = numel(lead);

  auto split = [&](const BasicTensor<T>& x, std::size_t n) {
    auto r = ops::reshape(x, {batch, n, h, d});
    return h == 1 ? ops::reshape(r, {batch, 1, n, d}) : ops::permute(r, {0, 2, 1, 3});
  };
  auto q = split(ops::matmul(x_q, p.w_q), nq);
  auto k = split(ops::matmul(x_kv, p.w_k), nk);
  auto v = split(ops::matmul(x_kv, p.w_v), nk);

  BasicTensor<T> weights;
  const bool want = ctx.recorder && tag.has_value();
  auto heads = scaled_dot_attention(q, k, v, mask, want ? &weights : nullptr);
  if (want) {
    const auto w = weights.data();
    for (std::size_t head = 0; head < h; ++head) {
      AttentionRecord rec;
      rec.shape = {batch, nq, nk};
      rec.weights.reserve(batch * nq * nk);
      for (std::size_t b = 0; b < batch; ++b) {
        const std::size_t base = (b * h + head) * nq * nk;
        rec.weights.insert(rec.weights.end(), w.begin() + base, w.begin() + base + nq * nk);
      }
      ctx.recorder->record({tag->layer, tag->kind, static_cast<int>(head)}, std::move(rec));
    }
  }

  auto merged = h == 1 ? heads : ops::permute(heads, {0, 2, 1, 3});
  Shape out_shape = lead;
  out_shape.push_back(nq);
  out_shape.push_back(e);
  return ops::matmul(ops::reshape(merged, out_shape), p.w_o);
}

template <typename T>
BasicTensor<T> ffn(const BasicTensor<T>& x, const FfnParams<T>& p) {
  auto hidden = ops::relu(ops::add(ops::matmul(x, p.w1), p.b1));
  return ops::add(ops::matmul(hidden, p.w2), p.b2);
}

template <typename T>
BasicTensor<T> structured_dropout(const BasicTensor<T>& x, double rate,
                                  const std::set<std::size_t>& shared_axes, Rng* rng,
                                  bool training) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw ConfigError("dropout rate must lie in [0, 1), got " + std::to_string(rate));
  }
  if (!training || rate == 0.0) return x;
  if (!rng) throw ConfigError("dropout in training mode needs a random generator");
  Shape mask_shape = x.shape();
  for (auto axis : shared_axes) {
    if (axis >= mask_shape.size()) {
      throw ShapeError("dropout shared axis " + std::to_string(axis) + " out of range for " +
                       to_string(x.shape()));
    }
    mask_shape[axis] = 1;
  }
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> mask(numel(mask_shape));
  for (auto& m : mask) m = rng->bernoulli(rate) ? T(0) : keep_scale;
  BasicTensor<T> mask_t(mask_shape, std::move(mask));
  if (mask_shape != x.shape()) mask_t = ops::expand(mask_t, x.shape());
  return ops::mul(x, mask_t);
}

template <typename T>
BasicTensor<T> sublayer(const BasicTensor<T>& x, const LayerNormParams<T>& norm,
                        const std::function<BasicTensor<T>(const BasicTensor<T>&)>& block,
                        const DropoutSpec& dropout, const ForwardContext& ctx) {
  auto y = block(ops::layer_norm(x, norm.gain, norm.bias));
  if (y.shape() != x.shape()) {
    throw ShapeError("sublayer block changed shape " + to_string(x.shape()) + " -> " +
                     to_string(y.shape()));
  }
  y = structured_dropout(y, dropout.rate, dropout.shared_axes, ctx.rng, ctx.training);
  return ops::add(x, y);
}

template <typename T>
BasicTensor<T> sinusoidal_positions(std::size_t n, std::size_t e, std::size_t offset) {
  if (e % 2 != 0) throw ConfigError("sinusoidal positions need an even width, got " + std::to_string(e));
  std::vector<T> table(n * e);
  for (std::size_t p = 0; p < n; ++p) {
    const double pos = static_cast<double>(p + offset);
    for (std::size_t i = 0; i < e / 2; ++i) {
      const double angle = pos / std::pow(10000.0, 2.0 * static_cast<double>(i) / static_cast<double>(e));
      table[p * e + 2 * i] = static_cast<T>(std::sin(angle));
      table[p * e + 2 * i + 1] = static_cast<T>(std::cos(angle));
    }
  }
  return BasicTensor<T>({n, e}, std::move(table));
}

#define REFORMER_INSTANTIATE_NN(T)                                                              \
  template struct LayerNormParams<T>;                                                           \
  template struct AttentionParams<T>;                                                           \
  template struct FfnParams<T>;                                                                 \
  template BasicTensor<T> xavier_uniform<T>(std::size_t, std::size_t, Rng&);                    \
  template BasicTensor<T> scaled_dot_attention(const BasicTensor<T>&, const BasicTensor<T>&,    \
                                               const BasicTensor<T>&, const BasicTensor<T>*,    \
                                               BasicTensor<T>*);                                \
  template BasicTensor<T> multi_head_attention(const BasicTensor<T>&, const BasicTensor<T>&,    \
                                               const AttentionParams<T>&, const BasicTensor<T>*, \
                                               const ForwardContext&, std::optional<AttentionTag>); \
  template BasicTensor<T> ffn(const BasicTensor<T>&, const FfnParams<T>&);                      \
  template BasicTensor<T> structured_dropout(const BasicTensor<T>&, double,                     \
                                             const std::set<std::size_t>&, Rng*, bool);         \
  template BasicTensor<T> sublayer(const BasicTensor<T>&, const LayerNormParams<T>&,            \
                                   const std::function<BasicTensor<T>(const BasicTensor<T>&)>&, \
                                   const DropoutSpec&, const ForwardContext&);                  \
  template BasicTensor<T> sinusoidal_positions<T>(std::size_t, std::size_t, std::size_t);

REFORMER_INSTANTIATE_NN(float)
REFORMER_INSTANTIATE_NN(double)

#undef REFORMER_INSTANTIATE_NN

}  // namespace reformer
