#pragma once

// Greedy and beam search over the incremental decoding path.  Sources are
// model-ready ids (EOS appended, see source_ids).  Returned tokens exclude
// BOS and EOS; PAD and BOS are never proposed.

#include <vector>

#include "reformer/corpus.hpp"
#include "reformer/models.hpp"

namespace reformer {

struct Hypothesis {
  Sentence tokens;
  double score = 0;     // sum of token log-probabilities, EOS included when emitted
  bool finished = false;  // ended with EOS rather than the length cap
};

template <typename T>
Hypothesis greedy_decode(const Model<T>& model, const Sentence& src, std::size_t max_len);

// GNMT length penalty ((5 + |y|) / 6)^alpha divides the score when ranking;
// alpha = 0 ranks by raw log-probability.
template <typename T>
Hypothesis beam_decode(const Model<T>& model, const Sentence& src, std::size_t beam,
                       std::size_t max_len, double length_penalty = 0.0);

// Decodes every source sentence (raw content ids; EOS is appended here).
// beam == 1 uses greedy_decode.
template <typename T>
std::vector<Sentence> decode_corpus(const Model<T>& model, const std::vector<Sentence>& sources,
                                    std::size_t beam, std::size_t max_len,
                                    double length_penalty = 0.0);

// log_softmax over a row of logits, accumulated in double.
template <typename T>
std::vector<double> log_probs(std::span<const T> logits);

}  // namespace reformer
