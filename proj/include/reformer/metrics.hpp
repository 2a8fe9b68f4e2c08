#pragma once

// Corpus-level analysis of decoded hypotheses against references.

#include <map>
#include <string>
#include <vector>

#include "reformer/corpus.hpp"

namespace reformer {

struct AccuracyBucket {
  std::string label;
  std::size_t correct = 0;
  std::size_t total = 0;

  double accuracy() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
};

struct EvalReport {
  std::size_t sentences = 0;
  std::size_t hyp_tokens = 0;
  std::size_t ref_tokens = 0;
  double length_ratio = 0;  // sum |hyp| / sum |ref|
  double accuracy = 0;      // hyp[i] == ref[i] over reference positions
  std::vector<AccuracyBucket> by_position;   // 1-10, 11-20, 21-30, 31-40, 41+
  std::vector<AccuracyBucket> by_frequency;  // equal-width bins of training frequency
  double bleu = 0;                           // corpus BLEU-4, 0..100
};

using TokenCounts = std::map<int, std::size_t>;

TokenCounts count_tokens(const std::vector<Sentence>& corpus);

// Whitespace-token corpus BLEU-4: clipped n-gram precisions pooled over the
// corpus, geometric mean, brevity penalty exp(1 - r/c) when c < r.  Any
// zero precision gives 0.
double corpus_bleu(const std::vector<Sentence>& hyps, const std::vector<Sentence>& refs);

// `train_counts` supplies token frequencies for the frequency buckets; when
// empty the references' own counts are used.
EvalReport eval_metrics(const std::vector<Sentence>& hyps, const std::vector<Sentence>& refs,
                        const TokenCounts& train_counts = {}, std::size_t frequency_bins = 5);

std::string format_report(const EvalReport& report);

}  // namespace reformer
