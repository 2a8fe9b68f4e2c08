#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "reformer/corpus.hpp"
#include "reformer/models.hpp"

namespace reformer {

// Mean -log p(gold) over positions with a non-PAD gold id.
template <typename T>
BasicTensor<T> cross_entropy_loss(const BasicTensor<T>& logits, std::span<const int> gold,
                                  double label_smoothing = 0.0);

template <typename T>
struct AdamState {
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  std::size_t step = 0;
};

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
};

// Bias-corrected Adam; `grads` aligned with `params`.
template <typename T>
void adam_step(const ParamRefs<T>& params, const std::vector<BasicTensor<T>>& grads,
               AdamState<T>& state, double lr, const AdamOptions& opt = {});

// peak * min(step / warmup, sqrt(warmup / step)) for step >= 1.
double inverse_sqrt_lr(std::size_t step, double peak, std::size_t warmup);

struct TrainOptions {
  std::size_t max_steps = 2000;
  double lr = 7e-4;
  std::size_t warmup = 4000;
  std::size_t batch_tokens = 1024;
  std::size_t batch_sentences = 0;  // 0 = limited by tokens only
  double label_smoothing = 0.0;
  double clip_norm = 0.0;  // 0 = off
  std::size_t log_every = 100;
  double target_accuracy = 0.0;  // stop at the first log with valid accuracy >= this (0 = off)
  std::size_t valid_decode_limit = 100;  // sentences greedily decoded for length_ratio
  std::uint64_t seed = 1;
  bool deterministic = true;  // omits wall_time from records
};

struct MetricsRecord {
  std::size_t step = 0;
  double train_loss = 0;
  double valid_loss = 0;
  double token_accuracy = 0;
  double length_ratio = 0;
  std::optional<double> wall_time;  // seconds since start
};

// One `key=value` line, no trailing newline.
std::string format_record(const MetricsRecord& r);

struct EvalLoss {
  double loss = 0;      // nats per target token, EOS included
  double accuracy = 0;  // teacher-forced next-token argmax accuracy
  std::size_t tokens = 0;
};

template <typename T>
EvalLoss evaluate(const Model<T>& model, const ParallelCorpus& corpus,
                  std::size_t batch_tokens = 4096);

struct TrainResult {
  std::vector<MetricsRecord> history;
  ModelParams<float> best_params;
  double best_valid_loss = 0;
  std::size_t steps = 0;
  bool reached_target = false;
};

// Runs Adam on length-bucketed batches.  Every log step evaluates on `valid`
// and keeps the parameters with the lowest validation loss.  NumericError on
// divergence.
TrainResult train(Model<float>& model, const ParallelCorpus& train_set,
                  const ParallelCorpus& valid_set, const TrainOptions& opt,
                  const std::function<void(const MetricsRecord&)>& on_log = {});

}  // namespace reformer
