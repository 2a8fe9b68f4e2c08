#pragma once

// Transformer-style building blocks shared by the baseline, the PreNet and
// the joint-representation trunk.

#include <compare>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "reformer/random.hpp"
#include "reformer/tensor.hpp"

namespace reformer {

// Additive mask value for blocked attention positions.
inline constexpr double kBlocked = -1e9;

template <typename T>
struct ParamRef {
  std::string name;
  BasicTensor<T>* tensor;
};

template <typename T>
using ParamRefs = std::vector<ParamRef<T>>;

// Which attention produced a set of recorded weights.
enum class AttentionKind {
  target,         // joint trunk, along T
  source,         // joint trunk, along S
  encoder_self,   // PreNet / Transformer encoder
  decoder_self,   // Transformer decoder
  decoder_cross,  // Transformer decoder over encoder output
};

std::string to_string(AttentionKind kind);

struct AttentionKey {
  int layer = 0;
  AttentionKind kind = AttentionKind::target;
  int head = 0;
  auto operator<=>(const AttentionKey&) const = default;
};

// Post-softmax weights, shape [batch, n_q, n_k] per head.
struct AttentionRecord {
  Shape shape;
  std::vector<double> weights;
};

class AttentionRecorder {
 public:
  void record(const AttentionKey& key, AttentionRecord rec) { records_[key] = std::move(rec); }
  const std::map<AttentionKey, AttentionRecord>& records() const { return records_; }
  void clear() { records_.clear(); }

 private:
  std::map<AttentionKey, AttentionRecord> records_;
};

// Per-call settings threaded through a forward pass.
struct ForwardContext {
  bool training = false;
  double dropout = 0.0;
  Rng* rng = nullptr;
  AttentionRecorder* recorder = nullptr;

  bool dropout_active() const { return training && dropout > 0.0; }
};

struct AttentionTag {
  int layer = 0;
  AttentionKind kind = AttentionKind::target;
};

template <typename T>
struct LayerNormParams {
  BasicTensor<T> gain;
  BasicTensor<T> bias;

  static LayerNormParams init(std::size_t e);
  void collect(const std::string& prefix, ParamRefs<T>& out);
};

template <typename T>
struct AttentionParams {
  BasicTensor<T> w_q, w_k, w_v, w_o;
  int heads = 1;

  static AttentionParams init(std::size_t e, int heads, Rng& rng);
  void collect(const std::string& prefix, ParamRefs<T>& out);
};

template <typename T>
struct FfnParams {
  BasicTensor<T> w1, b1, w2, b2;

  static FfnParams init(std::size_t e, int width, Rng& rng);
  void collect(const std::string& prefix, ParamRefs<T>& out);
};

// uniform(-sqrt(6 / (fan_in + fan_out)), +...)
template <typename T>
BasicTensor<T> xavier_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng);

// softmax(q k^T / sqrt(d) + mask) v with d the last extent of q.  When
// `weights` is non-null it receives the post-softmax attention tensor.
template <typename T>
BasicTensor<T> scaled_dot_attention(const BasicTensor<T>& q, const BasicTensor<T>& k,
                                    const BasicTensor<T>& v, const BasicTensor<T>* mask,
                                    BasicTensor<T>* weights = nullptr);

// Projects, splits into heads of width e/heads, attends per head, merges and
// applies the output projection.  x_q [..., n_q, e], x_kv [..., n_k, e].
template <typename T>
BasicTensor<T> multi_head_attention(const BasicTensor<T>& x_q, const BasicTensor<T>& x_kv,
                                    const AttentionParams<T>& p, const BasicTensor<T>* mask,
                                    const ForwardContext& ctx = {},
                                    std::optional<AttentionTag> tag = std::nullopt);

// max(0, x W1 + b1) W2 + b2
template <typename T>
BasicTensor<T> ffn(const BasicTensor<T>& x, const FfnParams<T>& p);

struct DropoutSpec {
  double rate = 0.0;
  std::set<std::size_t> shared_axes;
};

// Keep-mask sampled over the non-shared axes, broadcast along shared ones,
// scaled by 1/(1 - rate).  Identity when `training` is false or rate is 0.
template <typename T>
BasicTensor<T> structured_dropout(const BasicTensor<T>& x, double rate,
                                  const std::set<std::size_t>& shared_axes, Rng* rng,
                                  bool training);

// block(layer_norm(x)) + x, with dropout on the block output.
template <typename T>
BasicTensor<T> sublayer(const BasicTensor<T>& x, const LayerNormParams<T>& norm,
                        const std::function<BasicTensor<T>(const BasicTensor<T>&)>& block,
                        const DropoutSpec& dropout, const ForwardContext& ctx);

// Rows offset .. offset+n-1 of the sinusoidal table of width e.
template <typename T>
BasicTensor<T> sinusoidal_positions(std::size_t n, std::size_t e, std::size_t offset = 0);

}  // namespace reformer
