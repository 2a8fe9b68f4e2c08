#include "reformer/decode.hpp"

#include <algorithm>
#include <cmath>

namespace reformer {

template <typename T>
std::vector<double> log_probs(std::span<const T> logits) {
  double mx = -INFINITY;
  for (T x : logits) mx = std::max(mx, static_cast<double>(x));
  double z = 0;
  for (T x : logits) z += std::exp(static_cast<double>(x) - mx);
  const double log_z = mx + std::log(z);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = static_cast<double>(logits[i]) - log_z;
  return out;
}

namespace {

bool proposable(int id) { return id != kPad && id != kBos; }

double penalized(const Hypothesis& h, double alpha) {
  if (alpha == 0.0) return h.score;
  const double len = static_cast<double>(h.tokens.size() + (h.finished ? 1 : 0));
  return h.score / std::pow((5.0 + len) / 6.0, alpha);
}

}  // namespace

template <typename T>
Hypothesis greedy_decode(const Model<T>& model, const Sentence& src, std::size_t max_len) {
  if (max_len < 1) throw ConfigError("max_len must be >= 1");
  auto state = model.begin_decode(src);
  Hypothesis h;
  int token = kBos;
  while (h.tokens.size() < max_len) {
    auto logits = model.decode_step(state, std::span<const int>(&token, 1));
    const auto lp = log_probs(logits.data());
    int best = -1;
    for (int v = 0; v < static_cast<int>(lp.size()); ++v) {
      if (proposable(v) && (best < 0 || lp[static_cast<std::size_t>(v)] > lp[static_cast<std::size_t>(best)])) best = v;
    }
    h.score += lp[static_cast<std::size_t>(best)];
    if (best == kEos) {
      h.finished = true;
      break;
    }
    h.tokens.push_back(best);
    token = best;
  }
  return h;
}

template <typename T>
Hypothesis beam_decode(const Model<T>& model, const Sentence& src, std::size_t beam,
                       std::size_t max_len, double length_penalty) {
  if (beam < 1) throw ConfigError("beam must be >= 1");
  if (max_len < 1) throw ConfigError("max_len must be >= 1");
  struct Live {
    Hypothesis hyp;
    DecodeState<T> state;
    int last = kBos;
  };
  struct Candidate {
    double score;
    std::size_t parent;
    int token;
  };
  std::vector<Live> live{{Hypothesis{}, model.begin_decode(src), kBos}};
  std::vector<Hypothesis> finished;
  auto better = [&](const Hypothesis& a, const Hypothesis& b) {
    return penalized(a, length_penalty) > penalized(b, length_penalty);
  };

  while (!live.empty()) {
    std::vector<Candidate> cands;
    std::vector<DecodeState<T>> stepped;
    for (std::size_t i = 0; i < live.size(); ++i) {
      auto state = live[i].state;
      auto logits = model.decode_step(state, std::span<const int>(&live[i].last, 1));
      const auto lp = log_probs(logits.data());
      for (int v = 0; v < static_cast<int>(lp.size()); ++v) {
        if (proposable(v)) cands.push_back({live[i].hyp.score + lp[static_cast<std::size_t>(v)], i, v});
      }
      stepped.push_back(std::move(state));
    }
    std::stable_sort(cands.begin(), cands.end(),
                     [](const Candidate& a, const Candidate& b) { return a.score > b.score; });

    // EOS only finishes a hypothesis when it ranks among the top `beam`
    // candidates; live slots are then filled with the best continuations.
    std::vector<Live> next;
    for (std::size_t r = 0; r < cands.size() && next.size() < beam; ++r) {
      const auto& c = cands[r];
      Hypothesis h = live[c.parent].hyp;
      h.score = c.score;
      if (c.token == kEos) {
        if (r < beam) {
          h.finished = true;
          finished.push_back(std::move(h));
        }
        continue;
      }
      h.tokens.push_back(c.token);
      if (h.tokens.size() >= max_len) {
        finished.push_back(std::move(h));
        continue;
      }
      next.push_back({std::move(h), stepped[c.parent], c.token});
    }
    live = std::move(next);

    if (!finished.empty() && !live.empty() && length_penalty == 0.0) {
      // Scores only decrease, so no live hypothesis can overtake the best finished one.
      const auto best_done = std::max_element(finished.begin(), finished.end(), [&](auto& a, auto& b) { return better(b, a); });
      double best_live = -INFINITY;
      for (const auto& l : live) best_live = std::max(best_live, l.hyp.score);
      if (best_done->score >= best_live) break;
    }
  }
  if (finished.empty()) throw NumericError("beam search finished without hypotheses");
  return *std::max_element(finished.begin(), finished.end(), [&](auto& a, auto& b) { return better(b, a); });
}

template <typename T>
std::vector<Sentence> decode_corpus(const Model<T>& model, const std::vector<Sentence>& sources,
                                    std::size_t beam, std::size_t max_len,
                                    double length_penalty) {
  std::vector<Sentence> out;
  out.reserve(sources.size());
  for (const auto& s : sources) {
    const auto src = source_ids(s);
    out.push_back(beam == 1 ? greedy_decode(model, src, max_len).tokens
                            : beam_decode(model, src, beam, max_len, length_penalty).tokens);
  }
  return out;
}

#define REFORMER_INSTANTIATE_DECODE(T)                                                      \
  template std::vector<double> log_probs(std::span<const T>);                               \
  template Hypothesis greedy_decode(const Model<T>&, const Sentence&, std::size_t);         \
  template Hypothesis beam_decode(const Model<T>&, const Sentence&, std::size_t, std::size_t, \
                                  double);                                                  \
  template std::vector<Sentence> decode_corpus(const Model<T>&, const std::vector<Sentence>&, \
                                               std::size_t, std::size_t, double);

REFORMER_INSTANTIATE_DECODE(float)
REFORMER_INSTANTIATE_DECODE(double)

#undef REFORMER_INSTANTIATE_DECODE

}  // namespace reformer
