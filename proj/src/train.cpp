#include "reformer/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>

#include "reformer/decode.hpp"
#include "reformer/metrics.hpp"
#include "reformer/ops.hpp"

namespace reformer {

template <typename T>
BasicTensor<T> cross_entropy_loss(const BasicTensor<T>& logits, std::span<const int> gold,
                                  double label_smoothing) {
  std::vector<std::uint8_t> counted(gold.size());
  for (std::size_t i = 0; i < gold.size(); ++i) counted[i] = gold[i] != kPad;
  return ops::cross_entropy(logits, gold, std::span<const std::uint8_t>(counted), label_smoothing);
}

template <typename T>
void adam_step(const ParamRefs<T>& params, const std::vector<BasicTensor<T>>& grads,
               AdamState<T>& state, double lr, const AdamOptions& opt) {
  if (grads.size() != params.size()) throw ShapeError("adam: gradient count mismatch");
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.tensor->numel(), T(0));
      state.v.emplace_back(p.tensor->numel(), T(0));
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adam: state does not match parameters");
  ++state.step;
  const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto p = params[k].tensor->mutable_data();
    const auto g = grads[k].data();
    auto& m = state.m[k];
    auto& v = state.v[k];
    if (g.size() != p.size() || m.size() != p.size()) {
      throw ShapeError("adam: shape mismatch for " + params[k].name);
    }
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i];
      const double mi = opt.beta1 * m[i] + (1.0 - opt.beta1) * gi;
      const double vi = opt.beta2 * v[i] + (1.0 - opt.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      p[i] = static_cast<T>(p[i] - lr * (mi / c1) / (std::sqrt(vi / c2) + opt.eps));
    }
  }
}

double inverse_sqrt_lr(std::size_t step, double peak, std::size_t warmup) {
  if (step == 0) return 0.0;
  const double s = static_cast<double>(step);
  if (warmup == 0) return peak / std::sqrt(s);
  const double w = static_cast<double>(warmup);
  return peak * std::min(s / w, std::sqrt(w / s));
}

std::string format_record(const MetricsRecord& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "step=%zu train_loss=%.6f valid_loss=%.6f token_accuracy=%.6f length_ratio=%.6f",
                r.step, r.train_loss, r.valid_loss, r.token_accuracy, r.length_ratio);
  std::string out = buf;
  if (r.wall_time) {
    std::snprintf(buf, sizeof buf, " wall_time=%.3f", *r.wall_time);
    out += buf;
  }
  return out;
}

namespace {

// Rows of one batch sharing (source, target) length, ready for the model.
struct Group {
  IdBatch src;
  IdBatch tgt_in;
  std::vector<int> gold;
};

std::vector<Group> group_rows(const ParallelCorpus& corpus, std::span<const std::size_t> indices) {
  std::map<std::pair<std::size_t, std::size_t>, std::size_t> slot;
  std::vector<Group> groups;
  for (auto i : indices) {
    const auto s = source_ids(corpus.src[i]);
    const auto t_in = target_input(corpus.tgt[i]);
    const auto gold = target_output(corpus.tgt[i]);
    auto [it, fresh] = slot.emplace(std::pair(s.size(), t_in.size()), groups.size());
    if (fresh) groups.push_back({{0, s.size(), {}}, {0, t_in.size(), {}}, {}});
    auto& g = groups[it->second];
    g.src.ids.insert(g.src.ids.end(), s.begin(), s.end());
    g.tgt_in.ids.insert(g.tgt_in.ids.end(), t_in.begin(), t_in.end());
    g.gold.insert(g.gold.end(), gold.begin(), gold.end());
    ++g.src.rows;
    ++g.tgt_in.rows;
  }
  return groups;
}

template <typename T>
BasicTensor<T> flat_logits(const Model<T>& model, const Group& g, const ForwardContext& ctx) {
  auto logits = model.forward(g.src, g.tgt_in, ctx);
  return ops::reshape(logits, {g.gold.size(), static_cast<std::size_t>(model.config().vocab_tgt)});
}

}  // namespace

template <typename T>
EvalLoss evaluate(const Model<T>& model, const ParallelCorpus& corpus, std::size_t batch_tokens) {
  if (corpus.size() == 0) throw ConfigError("evaluation corpus is empty");
  EvalLoss out;
  double total = 0;
  std::size_t correct = 0;
  const std::size_t vocab = static_cast<std::size_t>(model.config().vocab_tgt);
  for (const auto& batch : bucket_by_length(corpus, batch_tokens)) {
    for (const auto& g : group_rows(corpus, batch)) {
      auto logits = flat_logits(model, g, {});
      total += ops::cross_entropy(logits, std::span<const int>(g.gold), {}, 0.0, ops::LossReduction::sum).item();
      const auto d = logits.data();
      for (std::size_t r = 0; r < g.gold.size(); ++r) {
        std::size_t best = 0;
        for (std::size_t v = 1; v < vocab; ++v)
          if (d[r * vocab + v] > d[r * vocab + best]) best = v;
        correct += static_cast<int>(best) == g.gold[r];
      }
      out.tokens += g.gold.size();
    }
  }
  out.loss = total / static_cast<double>(out.tokens);
  out.accuracy = static_cast<double>(correct) / static_cast<double>(out.tokens);
  return out;
}

TrainResult train(Model<float>& model, const ParallelCorpus& train_set,
                  const ParallelCorpus& valid_set, const TrainOptions& opt,
                  const std::function<void(const MetricsRecord&)>& on_log) {
  if (train_set.size() == 0) throw ConfigError("training corpus is empty");
  if (valid_set.size() == 0) throw ConfigError("validation corpus is empty");
  if (opt.log_every == 0) throw ConfigError("log_every must be positive");
  const auto start = std::chrono::steady_clock::now();
  Rng rng(opt.seed);
  const auto batches = bucket_by_length(train_set, opt.batch_tokens, opt.batch_sentences);
  std::vector<std::size_t> order(batches.size());
  std::size_t cursor = order.size();
  auto reshuffle = [&] {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    cursor = 0;
  };

  auto params = model.parameters();
  std::vector<Tensor> handles;
  for (const auto& p : params) handles.push_back(*p.tensor);
  AdamState<float> adam;
  const ForwardContext ctx{true, model.config().dropout, &rng, nullptr};

  std::vector<Sentence> decode_src, decode_ref;
  for (std::size_t i = 0; i < std::min(opt.valid_decode_limit, valid_set.size()); ++i) {
    decode_src.push_back(valid_set.src[i]);
    decode_ref.push_back(valid_set.tgt[i]);
  }

  TrainResult result;
  result.best_valid_loss = INFINITY;
  double loss_sum = 0;
  std::size_t loss_tokens = 0;
  for (std::size_t step = 1; step <= opt.max_steps; ++step) {
    if (cursor == order.size()) reshuffle();
    const auto& batch = batches[order[cursor++]];
    try {
      GradTape<float> tape;
      Tensor total;
      std::size_t tokens = 0;
      for (const auto& g : group_rows(train_set, batch)) {
        auto part = ops::cross_entropy(flat_logits(model, g, ctx), std::span<const int>(g.gold), {},
                                       opt.label_smoothing, ops::LossReduction::sum);
        total = total.defined() ? ops::add(total, part) : part;
        tokens += g.gold.size();
      }
      auto loss = ops::scale(total, 1.0f / static_cast<float>(tokens));
      auto grads = tape.grad(loss, std::span<const Tensor>(handles));
      if (opt.clip_norm > 0) {
        double sq = 0;
        for (const auto& g : grads)
          for (float x : g.data()) sq += static_cast<double>(x) * x;
        const double norm = std::sqrt(sq);
        if (norm > opt.clip_norm) {
          const float f = static_cast<float>(opt.clip_norm / norm);
          for (auto& g : grads) g = ops::scale(g, f);
        }
      }
      adam_step(params, grads, adam, inverse_sqrt_lr(step, opt.lr, opt.warmup));
      loss_sum += static_cast<double>(total.item());
      loss_tokens += tokens;
    } catch (const NumericError& err) {
      throw NumericError("training diverged at step " + std::to_string(step) + ": " + err.what());
    }
    result.steps = step;

    if (step % opt.log_every == 0 || step == opt.max_steps) {
      const auto ev = evaluate(model, valid_set);
      MetricsRecord rec;
      rec.step = step;
      rec.train_loss = loss_sum / static_cast<double>(loss_tokens);
      rec.valid_loss = ev.loss;
      rec.token_accuracy = ev.accuracy;
      if (!decode_src.empty()) {
        std::size_t max_ref = 0;
        for (const auto& r : decode_ref) max_ref = std::max(max_ref, r.size());
        auto hyps = decode_corpus(model, decode_src, 1, 2 * max_ref + 5);
        std::size_t h = 0, r = 0;
        for (std::size_t i = 0; i < hyps.size(); ++i) {
          h += hyps[i].size();
          r += decode_ref[i].size();
        }
        rec.length_ratio = r ? static_cast<double>(h) / static_cast<double>(r) : 0.0;
      }
      if (!opt.deterministic) {
        rec.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      }
      loss_sum = 0;
      loss_tokens = 0;
      result.history.push_back(rec);
      if (on_log) on_log(rec);
      if (ev.loss < result.best_valid_loss) {
        result.best_valid_loss = ev.loss;
        result.best_params = clone_params(model);
      }
      if (opt.target_accuracy > 0 && ev.accuracy >= opt.target_accuracy) {
        result.reached_target = true;
        break;
      }
    }
  }
  return result;
}

template BasicTensor<float> cross_entropy_loss(const BasicTensor<float>&, std::span<const int>, double);
template BasicTensor<double> cross_entropy_loss(const BasicTensor<double>&, std::span<const int>, double);
template void adam_step(const ParamRefs<float>&, const std::vector<BasicTensor<float>>&,
                        AdamState<float>&, double, const AdamOptions&);
template void adam_step(const ParamRefs<double>&, const std::vector<BasicTensor<double>>&,
                        AdamState<double>&, double, const AdamOptions&);
template EvalLoss evaluate(const Model<float>&, const ParallelCorpus&, std::size_t);
template EvalLoss evaluate(const Model<double>&, const ParallelCorpus&, std::size_t);

}  // namespace reformer
