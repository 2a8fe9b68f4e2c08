#include "reformer/config.hpp"

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace reformer {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string show(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

template <typename N>
N parse_number(const std::string& key, const std::string& text) {
  N v{};
  auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || end != text.data() + text.size()) {
    throw ConfigError("config key '" + key + "': cannot parse '" + text + "'");
  }
  return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError("config key '" + key + "': expected true or false, got '" + text + "'");
}

struct Field {
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
};

template <typename N, typename Sel>
Field number(Sel sel) {
  return {[sel](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<N>) return show(sel(const_cast<RunConfig&>(c)));
            else return std::to_string(sel(const_cast<RunConfig&>(c)));
          },
          [sel](RunConfig& c, const std::string& k, const std::string& v) { sel(c) = parse_number<N>(k, v); }};
}

template <typename Sel>
Field text(Sel sel) {
  return {[sel](const RunConfig& c) { return sel(const_cast<RunConfig&>(c)); },
          [sel](RunConfig& c, const std::string& k, const std::string& v) {
            if (v.find('\n') != std::string::npos) throw ConfigError("config key '" + k + "': newline in value");
            sel(c) = v;
          }};
}

const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = {
      {"variant",
       {[](const RunConfig& c) { return to_string(c.model.variant); },
        [](RunConfig& c, const std::string&, const std::string& v) { c.model.variant = parse_variant(v); }}},
      {"layers", number<int>([](RunConfig& c) -> int& { return c.model.l; })},
      {"prenet_layers", number<int>([](RunConfig& c) -> int& { return c.model.prenet_l; })},
      {"embed", number<int>([](RunConfig& c) -> int& { return c.model.e; })},
      {"width", number<int>([](RunConfig& c) -> int& { return c.model.w; })},
      {"heads", number<int>([](RunConfig& c) -> int& { return c.model.heads; })},
      {"dropout", number<double>([](RunConfig& c) -> double& { return c.model.dropout; })},
      {"src_vocab_size", number<int>([](RunConfig& c) -> int& { return c.model.vocab_src; })},
      {"tgt_vocab_size", number<int>([](RunConfig& c) -> int& { return c.model.vocab_tgt; })},
      {"max_steps", number<std::size_t>([](RunConfig& c) -> std::size_t& { return c.train.max_steps; })},
      {"lr", number<double>([](RunConfig& c) -> double& { return c.train.lr; })},
      {"warmup", number<std::size_t>([](RunConfig& c) -> std::size_t& { return c.train.warmup; })},
      {"batch_tokens", number<std::size_t>([](RunConfig& c) -> std::size_t& { return c.train.batch_tokens; })},
      {"batch_sentences", number<std::size_t>([](RunConfig& c) -> std::size_t& { return c.train.batch_sentences; })},
      {"label_smoothing", number<double>([](RunConfig& c) -> double& { return c.train.label_smoothing; })},
      {"clip_norm", number<double>([](RunConfig& c) -> double& { return c.train.clip_norm; })},
      {"log_every", number<std::size_t>([](RunConfig& c) -> std::size_t& { return c.train.log_every; })},
      {"target_accuracy", number<double>([](RunConfig& c) -> double& { return c.train.target_accuracy; })},
      {"valid_decode_limit", number<std::size_t>([](RunConfig& c) -> std::size_t& { return c.train.valid_decode_limit; })},
      {"seed", number<std::uint64_t>([](RunConfig& c) -> std::uint64_t& { return c.train.seed; })},
      {"deterministic",
       {[](const RunConfig& c) { return std::string(c.train.deterministic ? "true" : "false"); },
        [](RunConfig& c, const std::string& k, const std::string& v) { c.train.deterministic = parse_bool(k, v); }}},
      {"train_src", text([](RunConfig& c) -> std::string& { return c.train_src; })},
      {"train_tgt", text([](RunConfig& c) -> std::string& { return c.train_tgt; })},
      {"valid_src", text([](RunConfig& c) -> std::string& { return c.valid_src; })},
      {"valid_tgt", text([](RunConfig& c) -> std::string& { return c.valid_tgt; })},
      {"src_vocab", text([](RunConfig& c) -> std::string& { return c.src_vocab; })},
      {"tgt_vocab", text([](RunConfig& c) -> std::string& { return c.tgt_vocab; })},
      {"checkpoint", text([](RunConfig& c) -> std::string& { return c.checkpoint; })},
      {"metrics", text([](RunConfig& c) -> std::string& { return c.metrics; })},
  };
  return table;
}

}  // namespace

bool RunConfig::operator==(const RunConfig& other) const {
  return serialize_config(*this) == serialize_config(other);
}

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& [name, f] : fields()) k.push_back(name);
    return k;
  }();
  return keys;
}

void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& [name, f] : fields()) {
    if (name == key) {
      f.set(cfg, key, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

RunConfig parse_config(const std::string& text, RunConfig base) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected `key = value`");
    }
    set_config_value(base, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return base;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string serialize_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& [name, f] : fields()) out += name + " = " + f.get(cfg) + "\n";
  return out;
}

namespace {

Vocab vocab_for(const std::string& path, int size, const char* side) {
  if (path.empty()) return Vocab::synthetic(size);
  auto v = Vocab::load(path);
  if (v.size() != size) {
    throw ConfigError(std::string(side) + " vocabulary " + path + " has " + std::to_string(v.size()) +
                      " entries but the model expects " + std::to_string(size));
  }
  return v;
}

}  // namespace

Vocab source_vocab(const RunConfig& cfg) { return vocab_for(cfg.src_vocab, cfg.model.vocab_src, "source"); }
Vocab target_vocab(const RunConfig& cfg) { return vocab_for(cfg.tgt_vocab, cfg.model.vocab_tgt, "target"); }

Checkpoint make_checkpoint(const RunConfig& config, Model<float>& model) {
  if (!(config.model == model.config())) throw ConfigError("checkpoint: config does not describe the model");
  Checkpoint ck;
  ck.config = config;
  for (const auto& p : model.parameters()) {
    ck.names.push_back(p.name);
    ck.shapes.push_back(p.tensor->shape());
    const auto d = p.tensor->data();
    ck.data.emplace_back(d.begin(), d.end());
  }
  return ck;
}

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_text(std::string& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out += s;
}

class Reader {
 public:
  Reader(const std::string& bytes, std::size_t pos) : bytes_(bytes), pos_(pos) {}

  std::uint32_t u32() {
    need(4, "integer");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::string text() {
    const auto n = u32();
    need(n, "string");
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  float f32() { return std::bit_cast<float>(u32()); }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) throw ConfigError(std::string("checkpoint truncated while reading ") + what);
  }

  const std::string& bytes_;
  std::size_t pos_;
};

}  // namespace

std::string encode_checkpoint(const Checkpoint& ck) {
  std::string out = "RFMR";
  put_u32(out, kCheckpointVersion);
  put_text(out, serialize_config(ck.config));
  for (std::size_t k = 0; k < ck.names.size(); ++k) {
    put_text(out, ck.names[k]);
    put_u32(out, static_cast<std::uint32_t>(ck.shapes[k].size()));
    for (auto d : ck.shapes[k]) put_u32(out, static_cast<std::uint32_t>(d));
    for (float v : ck.data[k]) put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 4 || bytes.compare(0, 4, "RFMR") != 0) throw ConfigError("not a checkpoint (bad magic)");
  Reader r(bytes, 4);
  Checkpoint ck;
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    throw ConfigError("unsupported checkpoint version " + std::to_string(version));
  }
  ck.config = parse_config(r.text());
  while (!r.done()) {
    ck.names.push_back(r.text());
    Shape shape(r.u32());
    for (auto& d : shape) d = r.u32();
    std::vector<float> data(numel(shape));
    for (auto& v : data) v = r.f32();
    ck.shapes.push_back(std::move(shape));
    ck.data.push_back(std::move(data));
  }
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  const auto bytes = encode_checkpoint(ck);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

Model<float> model_from_checkpoint(const Checkpoint& ck) {
  Model<float> model(ck.config.model, 0);
  auto params = model.parameters();
  if (params.size() != ck.names.size()) {
    throw ConfigError("checkpoint has " + std::to_string(ck.names.size()) + " parameters, model expects " +
                      std::to_string(params.size()));
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (params[k].name != ck.names[k] || params[k].tensor->shape() != ck.shapes[k]) {
      throw ConfigError("checkpoint parameter " + ck.names[k] + " " + to_string(ck.shapes[k]) +
                        " does not match " + params[k].name + " " + to_string(params[k].tensor->shape()));
    }
    auto dst = params[k].tensor->mutable_data();
    std::copy(ck.data[k].begin(), ck.data[k].end(), dst.begin());
  }
  return model;
}

}  // namespace reformer
