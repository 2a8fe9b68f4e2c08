#include "reformer/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>

namespace reformer {

std::string to_string(ToyTask task) {
  switch (task) {
    case ToyTask::copy:
      return "copy";
    case ToyTask::reverse:
      return "reverse";
    case ToyTask::lexmap_reorder:
      return "lexmap-reorder";
  }
  return "?";
}

ToyTask parse_task(const std::string& name) {
  for (auto t : {ToyTask::copy, ToyTask::reverse, ToyTask::lexmap_reorder}) {
    if (to_string(t) == name) return t;
  }
  throw ConfigError("unknown task '" + name + "'; expected one of copy, reverse, lexmap-reorder");
}

namespace {

constexpr std::uint64_t kLexmapSeed = 0x6c65786d6170ULL;

std::vector<int> lexmap_table(int vocab) {
  std::vector<int> table(static_cast<std::size_t>(vocab));
  std::iota(table.begin(), table.end(), 0);
  Rng rng(kLexmapSeed + static_cast<std::uint64_t>(vocab));
  // Fisher-Yates over the content ids only.
  for (int i = vocab - 1; i > kNumSpecial; --i) {
    const int j = kNumSpecial + static_cast<int>(rng.below(static_cast<std::uint64_t>(i - kNumSpecial + 1)));
    std::swap(table[static_cast<std::size_t>(i)], table[static_cast<std::size_t>(j)]);
  }
  return table;
}

}  // namespace

Sentence lexmap_reorder(const Sentence& src, int vocab) {
  const auto table = lexmap_table(vocab);
  Sentence out;
  out.reserve(src.size());
  for (int id : src) {
    if (id < kNumSpecial || id >= vocab) throw ConfigError("lexmap: id " + std::to_string(id) + " is not a content token");
    out.push_back(table[static_cast<std::size_t>(id)]);
  }
  for (std::size_t i = 0; i + 1 < out.size(); i += 2) std::swap(out[i], out[i + 1]);
  return out;
}

ParallelCorpus make_toy_corpus(ToyTask task, int vocab, std::size_t n_pairs, std::size_t min_len,
                               std::size_t max_len, std::uint64_t seed) {
  if (vocab < 8) throw ConfigError("toy corpus vocabulary must be >= 8, got " + std::to_string(vocab));
  if (min_len < 1 || min_len > max_len) {
    throw ConfigError("empty length range [" + std::to_string(min_len) + ", " + std::to_string(max_len) + "]");
  }
  Rng rng(seed);
  const auto table = lexmap_table(vocab);
  ParallelCorpus c;
  c.src.reserve(n_pairs);
  c.tgt.reserve(n_pairs);
  for (std::size_t n = 0; n < n_pairs; ++n) {
    const std::size_t len = min_len + rng.below(max_len - min_len + 1);
    Sentence s(len);
    for (auto& id : s) id = kNumSpecial + static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab - kNumSpecial)));
    Sentence t;
    switch (task) {
      case ToyTask::copy:
        t = s;
        break;
      case ToyTask::reverse:
        t.assign(s.rbegin(), s.rend());
        break;
      case ToyTask::lexmap_reorder:
        t = lexmap_reorder(s, vocab);
        break;
    }
    c.src.push_back(std::move(s));
    c.tgt.push_back(std::move(t));
  }
  return c;
}

Vocab::Vocab() : Vocab(std::vector<std::string>{}) {}

Vocab::Vocab(std::vector<std::string> tokens) {
  const std::vector<std::string> reserved{"<pad>", "<s>", "</s>", "<unk>"};
  if (tokens.size() < reserved.size() || !std::equal(reserved.begin(), reserved.end(), tokens.begin())) {
    tokens.insert(tokens.begin(), reserved.begin(), reserved.end());
  }
  tokens_ = std::move(tokens);
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], static_cast<int>(i)).second) {
      throw ConfigError("duplicate vocabulary entry '" + tokens_[i] + "'");
    }
  }
}

Vocab Vocab::synthetic(int size) {
  std::vector<std::string> tokens;
  for (int i = kNumSpecial; i < size; ++i) tokens.push_back("w" + std::to_string(i));
  return Vocab(std::move(tokens));
}

Vocab Vocab::load(const std::filesystem::path& path) {
  auto lines = read_lines(path);
  if (lines.size() < static_cast<std::size_t>(kNumSpecial) || lines[0] != "<pad>" ||
      lines[1] != "<s>" || lines[2] != "</s>" || lines[3] != "<unk>") {
    throw ConfigError("vocabulary " + path.string() + " must start with <pad>, <s>, </s>, <unk>");
  }
  return Vocab(std::move(lines));
}

void Vocab::save(const std::filesystem::path& path) const { write_lines(path, tokens_); }

int Vocab::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocab::token(int id) const {
  if (id < 0 || id >= size()) throw ConfigError("token id " + std::to_string(id) + " outside vocabulary");
  return tokens_[static_cast<std::size_t>(id)];
}

Sentence Vocab::encode(const std::string& line) const {
  std::istringstream in(line);
  Sentence out;
  for (std::string tok; in >> tok;) out.push_back(id(tok));
  return out;
}

std::string Vocab::decode(const Sentence& ids) const {
  std::string out;
  for (int id : ids) {
    if (!out.empty()) out += ' ';
    out += token(id);
  }
  return out;
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  return lines;
}

void write_lines(const std::filesystem::path& path, const std::vector<std::string>& lines) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& line : lines) out << line << '\n';
}

ParallelCorpus load_corpus(const std::filesystem::path& src_path,
                           const std::filesystem::path& tgt_path, const Vocab& src_vocab,
                           const Vocab& tgt_vocab) {
  auto src = read_lines(src_path);
  auto tgt = read_lines(tgt_path);
  if (src.size() != tgt.size()) {
    throw ConfigError(src_path.string() + " has " + std::to_string(src.size()) + " lines but " +
                      tgt_path.string() + " has " + std::to_string(tgt.size()));
  }
  ParallelCorpus c;
  for (std::size_t i = 0; i < src.size(); ++i) {
    c.src.push_back(src_vocab.encode(src[i]));
    c.tgt.push_back(tgt_vocab.encode(tgt[i]));
  }
  return c;
}

ParallelBatch make_batch(const ParallelCorpus& corpus, std::span<const std::size_t> indices) {
  ParallelBatch b;
  b.rows = indices.size();
  for (auto i : indices) {
    if (corpus.src[i].empty() || corpus.tgt[i].empty()) {
      throw ConfigError("sentence pair " + std::to_string(i) + " is empty");
    }
    b.src_max = std::max(b.src_max, corpus.src[i].size());
    b.tgt_max = std::max(b.tgt_max, corpus.tgt[i].size());
  }
  b.src.assign(b.rows * b.src_max, kPad);
  b.tgt.assign(b.rows * b.tgt_max, kPad);
  for (std::size_t r = 0; r < b.rows; ++r) {
    const auto& s = corpus.src[indices[r]];
    const auto& t = corpus.tgt[indices[r]];
    std::copy(s.begin(), s.end(), b.src.begin() + static_cast<std::ptrdiff_t>(r * b.src_max));
    std::copy(t.begin(), t.end(), b.tgt.begin() + static_cast<std::ptrdiff_t>(r * b.tgt_max));
    b.src_lens.push_back(s.size());
    b.tgt_lens.push_back(t.size());
  }
  return b;
}

std::vector<std::vector<std::size_t>> bucket_by_length(const ParallelCorpus& corpus,
                                                       std::size_t max_tokens,
                                                       std::size_t max_sentences) {
  if (max_tokens == 0) throw ConfigError("batch token budget must be positive");
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::pair(corpus.src[a].size(), corpus.tgt[a].size()) <
           std::pair(corpus.src[b].size(), corpus.tgt[b].size());
  });
  std::vector<std::vector<std::size_t>> batches;
  std::vector<std::size_t> cur;
  std::size_t s_max = 0, t_max = 0;
  for (auto i : order) {
    const std::size_t s = std::max(s_max, corpus.src[i].size());
    const std::size_t t = std::max(t_max, corpus.tgt[i].size());
    const bool full = !cur.empty() && ((cur.size() + 1) * std::max(s, t) > max_tokens ||
                                       (max_sentences && cur.size() == max_sentences));
    if (full) {
      batches.push_back(std::move(cur));
      cur.clear();
      s_max = t_max = 0;
    }
    cur.push_back(i);
    s_max = std::max(s_max, corpus.src[i].size());
    t_max = std::max(t_max, corpus.tgt[i].size());
  }
  if (!cur.empty()) batches.push_back(std::move(cur));
  return batches;
}

Sentence source_ids(const Sentence& src) {
  Sentence out = src;
  out.push_back(kEos);
  return out;
}

Sentence target_input(const Sentence& tgt) {
  Sentence out{kBos};
  out.insert(out.end(), tgt.begin(), tgt.end());
  return out;
}

Sentence target_output(const Sentence& tgt) {
  Sentence out = tgt;
  out.push_back(kEos);
  return out;
}

}  // namespace reformer
