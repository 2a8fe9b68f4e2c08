#pragma once

// Run configuration files and binary checkpoints.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "reformer/corpus.hpp"
#include "reformer/models.hpp"
#include "reformer/train.hpp"

namespace reformer {

struct RunConfig {
  ModelConfig model = ModelConfig::defaults(Variant::reformer_base);
  TrainOptions train;
  std::string train_src, train_tgt;
  std::string valid_src, valid_tgt;
  std::string src_vocab, tgt_vocab;  // empty = synthetic vocabulary of the model's size
  std::string checkpoint = "model.ckpt";
  std::string metrics = "metrics.txt";

  bool operator==(const RunConfig& other) const;
};

// Every key the config format accepts, in serialization order.
const std::vector<std::string>& config_keys();

// Sets one key from its textual value; ConfigError on unknown keys or bad values.
void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value);

// Flat `key = value` lines; `#` starts a comment.  Unmentioned keys keep the
// values already in `base`.
RunConfig parse_config(const std::string& text, RunConfig base = {});
RunConfig load_config(const std::filesystem::path& path);

// Writes every key; parse_config(serialize_config(c)) == c bit for bit.
std::string serialize_config(const RunConfig& cfg);

// The vocabularies named by the config, or synthetic ones of the model's
// sizes.  ConfigError when a file disagrees with the configured size.
Vocab source_vocab(const RunConfig& cfg);
Vocab target_vocab(const RunConfig& cfg);

struct Checkpoint {
  RunConfig config;
  std::vector<std::string> names;
  std::vector<Shape> shapes;
  std::vector<std::vector<float>> data;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

Checkpoint make_checkpoint(const RunConfig& config, Model<float>& model);

// "RFMR", u32 version, u32-prefixed config text, then per parameter a
// u32-prefixed name, u32 rank, u32 extents and f32 data, all little-endian.
std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Builds the model described by the checkpoint and copies its parameters in.
Model<float> model_from_checkpoint(const Checkpoint& ckpt);

}  // namespace reformer
