#include "reformer/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace reformer {

TokenCounts count_tokens(const std::vector<Sentence>& corpus) {
  TokenCounts counts;
  for (const auto& s : corpus)
    for (int id : s) ++counts[id];
  return counts;
}

namespace {

using NGram = std::vector<int>;

std::map<NGram, std::size_t> ngrams(const Sentence& s, std::size_t n) {
  std::map<NGram, std::size_t> out;
  for (std::size_t i = 0; i + n <= s.size(); ++i) ++out[NGram(s.begin() + static_cast<std::ptrdiff_t>(i), s.begin() + static_cast<std::ptrdiff_t>(i + n))];
  return out;
}

std::string fmt(const char* pattern, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, pattern, v);
  return buf;
}

}  // namespace

double corpus_bleu(const std::vector<Sentence>& hyps, const std::vector<Sentence>& refs) {
  if (hyps.size() != refs.size()) throw ConfigError("BLEU needs one hypothesis per reference");
  if (hyps.empty()) throw ConfigError("BLEU of an empty corpus is undefined");
  std::size_t c = 0, r = 0;
  std::size_t match[4] = {0, 0, 0, 0}, total[4] = {0, 0, 0, 0};
  for (std::size_t k = 0; k < hyps.size(); ++k) {
    c += hyps[k].size();
    r += refs[k].size();
    for (std::size_t n = 1; n <= 4; ++n) {
      const auto h = ngrams(hyps[k], n);
      const auto ref = ngrams(refs[k], n);
      for (const auto& [g, count] : h) {
        auto it = ref.find(g);
        match[n - 1] += std::min(count, it == ref.end() ? std::size_t{0} : it->second);
        total[n - 1] += count;
      }
    }
  }
  if (c == 0) return 0.0;
  double log_p = 0;
  for (int n = 0; n < 4; ++n) {
    if (match[n] == 0) return 0.0;
    log_p += std::log(static_cast<double>(match[n]) / static_cast<double>(total[n])) / 4.0;
  }
  const double bp = c < r ? std::exp(1.0 - static_cast<double>(r) / static_cast<double>(c)) : 1.0;
  return 100.0 * bp * std::exp(log_p);
}

EvalReport eval_metrics(const std::vector<Sentence>& hyps, const std::vector<Sentence>& refs,
                        const TokenCounts& train_counts, std::size_t frequency_bins) {
  if (hyps.size() != refs.size()) {
    throw ConfigError("eval: " + std::to_string(hyps.size()) + " hypotheses for " +
                      std::to_string(refs.size()) + " references");
  }
  if (refs.empty()) throw ConfigError("eval: empty hypothesis/reference sets");
  if (frequency_bins == 0) throw ConfigError("eval: need at least one frequency bin");

  EvalReport rep;
  rep.sentences = refs.size();
  for (std::size_t k = 0; k < refs.size(); ++k) {
    rep.hyp_tokens += hyps[k].size();
    rep.ref_tokens += refs[k].size();
  }
  rep.length_ratio = rep.ref_tokens ? static_cast<double>(rep.hyp_tokens) / static_cast<double>(rep.ref_tokens) : 0.0;

  for (const char* label : {"10", "20", "30", "40", "50+"}) rep.by_position.push_back({label});
  const TokenCounts counts = train_counts.empty() ? count_tokens(refs) : train_counts;
  std::size_t max_freq = 0;
  for (const auto& [id, n] : counts) max_freq = std::max(max_freq, n);
  const double width = std::max(1.0, static_cast<double>(max_freq) / static_cast<double>(frequency_bins));
  for (std::size_t b = 0; b < frequency_bins; ++b) {
    std::string label = fmt("%.0f", width * static_cast<double>(b + 1));
    if (b + 1 == frequency_bins) label += "+";
    rep.by_frequency.push_back({label});
  }

  std::size_t correct = 0;
  for (std::size_t k = 0; k < refs.size(); ++k) {
    for (std::size_t i = 0; i < refs[k].size(); ++i) {
      const int gold = refs[k][i];
      const bool ok = i < hyps[k].size() && hyps[k][i] == gold;
      correct += ok;
      auto& pos = rep.by_position[std::min<std::size_t>(i / 10, 4)];
      pos.total++;
      pos.correct += ok;
      auto it = counts.find(gold);
      const double f = it == counts.end() ? 0.0 : static_cast<double>(it->second);
      const auto bin = std::min(frequency_bins - 1, static_cast<std::size_t>(f / width));
      rep.by_frequency[bin].total++;
      rep.by_frequency[bin].correct += ok;
    }
  }
  rep.accuracy = rep.ref_tokens ? static_cast<double>(correct) / static_cast<double>(rep.ref_tokens) : 0.0;
  rep.bleu = corpus_bleu(hyps, refs);
  return rep;
}

std::string format_report(const EvalReport& r) {
  std::string out;
  out += "sentences=" + std::to_string(r.sentences) + "\n";
  out += "length_ratio=" + fmt("%.6f", r.length_ratio) + "\n";
  out += "accuracy=" + fmt("%.6f", r.accuracy) + "\n";
  out += "bleu=" + fmt("%.4f", r.bleu) + "\n";
  for (const auto& b : r.by_position) {
    out += "position_" + b.label + "=" + fmt("%.6f", b.accuracy()) + " (" + std::to_string(b.total) + ")\n";
  }
  for (const auto& b : r.by_frequency) {
    out += "frequency_" + b.label + "=" + fmt("%.6f", b.accuracy()) + " (" + std::to_string(b.total) + ")\n";
  }
  return out;
}

}  // namespace reformer
