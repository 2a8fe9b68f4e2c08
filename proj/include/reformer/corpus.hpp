#pragma once

// Toy parallel corpora, vocabularies, text I/O and length-bucketed batches.

#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include "reformer/models.hpp"
#include "reformer/random.hpp"

namespace reformer {

using Sentence = std::vector<int>;

struct ParallelCorpus {
  std::vector<Sentence> src;
  std::vector<Sentence> tgt;

  std::size_t size() const { return src.size(); }
};

enum class ToyTask { copy, reverse, lexmap_reorder };

std::string to_string(ToyTask task);
ToyTask parse_task(const std::string& name);

// Content tokens are drawn uniformly from [kNumSpecial, vocab).  The lexmap
// bijection depends on `vocab` only, so corpora with different seeds share it.
ParallelCorpus make_toy_corpus(ToyTask task, int vocab, std::size_t n_pairs, std::size_t min_len,
                               std::size_t max_len, std::uint64_t seed);

// Applies the lexmap-reorder transform to one source sentence.
Sentence lexmap_reorder(const Sentence& src, int vocab);

class Vocab {
 public:
  Vocab();  // the four reserved entries only
  explicit Vocab(std::vector<std::string> tokens);

  // "<pad>", "<s>", "</s>", "<unk>", then w4 .. w(size-1).
  static Vocab synthetic(int size);
  static Vocab load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  int size() const { return static_cast<int>(tokens_.size()); }
  int id(const std::string& token) const;  // kUnk when absent
  const std::string& token(int id) const;

  Sentence encode(const std::string& line) const;
  std::string decode(const Sentence& ids) const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

std::vector<std::string> read_lines(const std::filesystem::path& path);
void write_lines(const std::filesystem::path& path, const std::vector<std::string>& lines);

ParallelCorpus load_corpus(const std::filesystem::path& src_path,
                           const std::filesystem::path& tgt_path, const Vocab& src_vocab,
                           const Vocab& tgt_vocab);

// Padded id matrices; tgt holds the gold outputs without BOS/EOS.
struct ParallelBatch {
  std::size_t rows = 0;
  std::size_t src_max = 0;
  std::size_t tgt_max = 0;
  std::vector<int> src;  // [rows, src_max], PAD beyond src_lens
  std::vector<int> tgt;  // [rows, tgt_max], PAD beyond tgt_lens
  std::vector<std::size_t> src_lens;
  std::vector<std::size_t> tgt_lens;
};

ParallelBatch make_batch(const ParallelCorpus& corpus, std::span<const std::size_t> indices);

// Sorts by (source, target) length and cuts consecutive runs whose padded
// token count stays within max_tokens, with at most max_sentences rows (0 =
// unlimited).  The returned order is by length; shuffle as needed.
std::vector<std::vector<std::size_t>> bucket_by_length(const ParallelCorpus& corpus,
                                                       std::size_t max_tokens,
                                                       std::size_t max_sentences = 0);

// Source with EOS appended; target input with BOS prepended; gold output with
// EOS appended.
Sentence source_ids(const Sentence& src);
Sentence target_input(const Sentence& tgt);
Sentence target_output(const Sentence& tgt);

}  // namespace reformer
