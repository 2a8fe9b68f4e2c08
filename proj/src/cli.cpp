#include "reformer/cli.hpp"

#include <cblas.h>

#include <CLI11.hpp>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "reformer/config.hpp"
#include "reformer/decode.hpp"
#include "reformer/metrics.hpp"
#include "reformer/scaling.hpp"

namespace reformer {

namespace {

namespace fs = std::filesystem;

// Raised for usage problems found after argument parsing.
struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

void require_file(const std::string& path, const char* what) {
  if (path.empty()) throw UsageError(std::string(what) + " is not set");
  if (!fs::is_regular_file(path)) throw UsageError(std::string(what) + " not found: " + path);
}

void require_writable(const std::string& path, const char* what) {
  if (path.empty()) throw UsageError(std::string(what) + " is not set");
  const auto parent = fs::absolute(path).parent_path();
  if (!fs::is_directory(parent)) throw UsageError(std::string(what) + ": directory does not exist: " + parent.string());
}

std::optional<std::uint64_t> env_seed() {
  const char* s = std::getenv("JOINT_SEED");
  if (!s || !*s) return std::nullopt;
  char* end = nullptr;
  const auto v = std::strtoull(s, &end, 10);
  if (*end) throw UsageError(std::string("JOINT_SEED is not an unsigned integer: ") + s);
  return v;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<Sentence> encode_lines(const Vocab& vocab, const std::vector<std::string>& lines) {
  std::vector<Sentence> out;
  out.reserve(lines.size());
  for (const auto& l : lines) out.push_back(vocab.encode(l));
  return out;
}

// Options shared by commands that build a RunConfig.
struct ConfigArgs {
  std::string path;
  std::string variant;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> sets;
  std::optional<bool> deterministic;

  void add(CLI::App& cmd, bool config_required) {
    auto* c = cmd.add_option("--config", path, "run configuration file");
    if (config_required) c->required();
    cmd.add_option("--variant", variant, "reformer-base, reformer-fast or transformer");
    cmd.add_option("--seed", seed, "random seed; overrides the config, which overrides JOINT_SEED");
    cmd.add_option("--set", sets, "override one config entry, key=value");
    cmd.add_flag("--deterministic,!--no-deterministic", deterministic,
                 "single-threaded, reproducible metrics without wall time");
  }

  RunConfig build() const {
    RunConfig cfg;
    if (auto s = env_seed()) cfg.train.seed = *s;
    if (!path.empty()) {
      require_file(path, "config");
      cfg = parse_config(read_file(path), cfg);
    }
    if (!variant.empty()) {
      const auto v = parse_variant(variant);
      if (v != cfg.model.variant && path.empty()) {
        const auto d = ModelConfig::defaults(v);
        cfg.model.l = d.l;
        cfg.model.prenet_l = d.prenet_l;
      }
      cfg.model.variant = v;
    }
    for (const auto& kv : sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
      set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (seed) cfg.train.seed = *seed;
    if (deterministic) cfg.train.deterministic = *deterministic;
    cfg.model.validate();
    return cfg;
  }
};

struct Corpora {
  ParallelCorpus train, valid;
};

Corpora load_corpora(const RunConfig& cfg) {
  require_file(cfg.train_src, "train_src");
  require_file(cfg.train_tgt, "train_tgt");
  require_file(cfg.valid_src, "valid_src");
  require_file(cfg.valid_tgt, "valid_tgt");
  if (!cfg.src_vocab.empty()) require_file(cfg.src_vocab, "src_vocab");
  if (!cfg.tgt_vocab.empty()) require_file(cfg.tgt_vocab, "tgt_vocab");
  const auto sv = source_vocab(cfg);
  const auto tv = target_vocab(cfg);
  Corpora c{load_corpus(cfg.train_src, cfg.train_tgt, sv, tv), load_corpus(cfg.valid_src, cfg.valid_tgt, sv, tv)};
  if (c.train.size() == 0) throw UsageError("training corpus " + cfg.train_src + " is empty");
  if (c.valid.size() == 0) throw UsageError("validation corpus " + cfg.valid_src + " is empty");
  return c;
}

void apply_threading(const RunConfig& cfg) {
  if (cfg.train.deterministic) openblas_set_num_threads(1);
}

TrainResult train_run(const RunConfig& cfg, const Corpora& data, Model<float>& model,
                      const std::function<void(const MetricsRecord&)>& on_log) {
  apply_threading(cfg);
  return train(model, data.train, data.valid, cfg.train, on_log);
}

int cmd_train(const ConfigArgs& args, std::ostream& out) {
  const auto cfg = args.build();
  const auto data = load_corpora(cfg);
  require_writable(cfg.checkpoint, "checkpoint");
  require_writable(cfg.metrics, "metrics");

  std::ofstream metrics(cfg.metrics, std::ios::binary);
  if (!metrics) throw std::runtime_error("cannot write " + cfg.metrics);
  Model<float> model(cfg.model, cfg.train.seed);
  auto result = train_run(cfg, data, model, [&](const MetricsRecord& r) {
    const auto line = format_record(r);
    metrics << line << '\n';
    metrics.flush();
    out << line << '\n';
  });
  Model<float> best(cfg.model, std::move(result.best_params));
  save_checkpoint(cfg.checkpoint, make_checkpoint(cfg, best));
  out << "steps=" << result.steps << " best_valid_loss=" << result.best_valid_loss
      << " checkpoint=" << cfg.checkpoint << '\n';
  return kExitOk;
}

struct DecodeArgs {
  std::string checkpoint, input, output, src_vocab, tgt_vocab;
  std::size_t beam = 4;
  std::size_t max_len = 0;
  double length_penalty = 0.0;
};

int cmd_decode(const DecodeArgs& a, std::ostream&) {
  require_file(a.checkpoint, "checkpoint");
  require_file(a.input, "input");
  require_writable(a.output, "output");
  if (a.beam < 1) throw UsageError("--beam must be >= 1");
  const auto ck = load_checkpoint(a.checkpoint);
  auto cfg = ck.config;
  if (!a.src_vocab.empty()) cfg.src_vocab = a.src_vocab;
  if (!a.tgt_vocab.empty()) cfg.tgt_vocab = a.tgt_vocab;
  const auto sv = source_vocab(cfg);
  const auto tv = target_vocab(cfg);
  const auto model = model_from_checkpoint(ck);
  apply_threading(cfg);

  std::vector<std::string> lines;
  for (const auto& src : encode_lines(sv, read_lines(a.input))) {
    const std::size_t max_len = a.max_len ? a.max_len : 2 * src.size() + 10;
    const auto ids = source_ids(src);
    const auto h = a.beam == 1 ? greedy_decode(model, ids, max_len)
                               : beam_decode(model, ids, a.beam, max_len, a.length_penalty);
    lines.push_back(tv.decode(h.tokens));
  }
  write_lines(a.output, lines);
  return kExitOk;
}

struct EvalArgs {
  std::string hyps, refs, train_refs, output;
  std::size_t bins = 5;
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  require_file(a.hyps, "hypotheses");
  require_file(a.refs, "references");
  if (!a.train_refs.empty()) require_file(a.train_refs, "training references");
  if (!a.output.empty()) require_writable(a.output, "output");
  // Token strings are interned in first-seen order; metrics only compare ids.
  std::map<std::string, int> ids;
  auto encode = [&](const std::string& path) {
    std::vector<Sentence> out;
    for (const auto& line : read_lines(path)) {
      std::istringstream in(line);
      Sentence s;
      for (std::string tok; in >> tok;) s.push_back(ids.emplace(tok, static_cast<int>(ids.size())).first->second);
      out.push_back(std::move(s));
    }
    return out;
  };
  const auto refs = encode(a.refs);
  const auto hyps = encode(a.hyps);
  const auto counts = a.train_refs.empty() ? TokenCounts{} : count_tokens(encode(a.train_refs));
  const auto report = format_report(eval_metrics(hyps, refs, counts, a.bins));
  if (a.output.empty()) {
    out << report;
  } else {
    std::ofstream f(a.output, std::ios::binary);
    f << report;
  }
  return kExitOk;
}

struct ScaleArgs {
  std::string base;
  std::string probes;
  std::string gradients;
  std::optional<double> eps;
  double beta = 2.0;
  std::string output;
  ConfigArgs config;
};

std::pair<double, double> parse_pair(const std::string& text, const char* what) {
  const auto comma = text.find(',');
  if (comma == std::string::npos) throw UsageError(std::string(what) + " expects two comma-separated numbers");
  try {
    std::size_t i = 0, j = 0;
    const double a = std::stod(text.substr(0, comma), &i);
    const double b = std::stod(text.substr(comma + 1), &j);
    if (i != comma || j != text.size() - comma - 1) throw std::invalid_argument(what);
    return {a, b};
  } catch (const std::exception&) {
    throw UsageError(std::string(what) + ": cannot parse '" + text + "'");
  }
}

int cmd_scale(const ScaleArgs& a, std::ostream& out) {
  if (!a.output.empty()) require_writable(a.output, "output");
  const auto [l, w] = parse_pair(a.base, "--base");
  if (!a.gradients.empty() && !a.probes.empty()) throw UsageError("use either --gradients or --probes");
  double g_l = 0, g_w = 0;
  if (!a.gradients.empty()) {
    std::tie(g_l, g_w) = parse_pair(a.gradients, "--gradients");
  } else if (a.probes == "auto") {
    const int eps = static_cast<int>(a.eps.value_or(1.0));
    if (eps < 1 || eps != a.eps.value_or(1.0)) throw UsageError("--eps must be a positive integer with --probes auto");
    if (l != std::round(l) || w != std::round(w)) throw UsageError("--base must be integral with --probes auto");
    const auto cfg = a.config.build();
    const auto data = load_corpora(cfg);
    std::vector<EvalPoint> pts;
    for (auto [dl, dw] : {std::pair{0, 0}, std::pair{eps, 0}, std::pair{0, eps}}) {
      auto run = cfg;
      run.model.l = static_cast<int>(l) + dl;
      run.model.w = static_cast<int>(w) + dw;
      run.model.validate();
      Model<float> model(run.model, run.train.seed);
      const auto res = train_run(run, data, model, {});
      pts.push_back({static_cast<double>(run.model.l), static_cast<double>(run.model.w), res.best_valid_loss});
      out << "probe l=" << run.model.l << " w=" << run.model.w << " valid_loss=" << res.best_valid_loss << '\n';
    }
    std::tie(g_l, g_w) = finite_diff_gradients(pts[0], pts[1], pts[2], eps);
  } else if (!a.probes.empty()) {
    require_file(a.probes, "probes");
    const auto pts = parse_probes(read_file(a.probes));
    if (pts[0].l != l || pts[0].w != w) throw UsageError("probes file base point does not match --base");
    const double eps = a.eps.value_or(pts[1].l - pts[0].l);
    std::tie(g_l, g_w) = finite_diff_gradients(pts[0], pts[1], pts[2], eps);
  } else {
    throw UsageError("scale needs --probes FILE, --probes auto or --gradients g_l,g_w");
  }
  const auto report = solve_step_size(l, w, g_l, g_w, a.beta);
  out << format_report(report);
  if (!a.output.empty()) {
    std::ofstream f(a.output, std::ios::binary);
    f << format_report_kv(report);
  }
  return kExitOk;
}

int cmd_count_params(const ConfigArgs& args, std::ostream& out) {
  const auto cfg = args.build();
  const auto c = count_parameters(cfg.model);
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", c.simplified);
  out << "variant=" << to_string(cfg.model.variant) << '\n'
      << "simplified=" << buf << " (matrix parameters / e^2)\n"
      << "matrix=" << static_cast<std::size_t>(std::llround(c.simplified * cfg.model.e * cfg.model.e)) << '\n'
      << "full=" << c.full << '\n';
  return kExitOk;
}

struct DumpArgs {
  std::string checkpoint, src, tgt, output;
};

int cmd_dump_attention(const DumpArgs& a, std::ostream&) {
  require_file(a.checkpoint, "checkpoint");
  require_writable(a.output, "output");
  const auto ck = load_checkpoint(a.checkpoint);
  const auto sv = source_vocab(ck.config);
  const auto tv = target_vocab(ck.config);
  const auto model = model_from_checkpoint(ck);
  const auto src = source_ids(sv.encode(a.src));
  const auto tgt = target_input(tv.encode(a.tgt));

  AttentionRecorder rec;
  ForwardContext ctx;
  ctx.recorder = &rec;
  model.forward(std::span<const int>(src), std::span<const int>(tgt), ctx);

  // Target attention: one [T, T] block per source position; source attention:
  // one [S, S] block per target position.
  std::ostringstream o;
  o.setf(std::ios::fixed);
  o.precision(6);
  o << "# src: " << sv.decode(src) << "\n# tgt: " << tv.decode(tgt) << '\n';
  for (const auto& [key, r] : rec.records()) {
    const auto& s = r.shape;
    const char* fixed = key.kind == AttentionKind::target ? "src" : key.kind == AttentionKind::source ? "tgt" : "batch";
    o << "# layer=" << key.layer << " kind=" << to_string(key.kind) << " head=" << key.head << " shape="
      << s[0] << ',' << s[1] << ',' << s[2] << '\n';
    for (std::size_t b = 0; b < s[0]; ++b) {
      for (std::size_t q = 0; q < s[1]; ++q) {
        o << "layer=" << key.layer << " kind=" << to_string(key.kind) << " head=" << key.head << ' ' << fixed
          << '=' << b << " query=" << q << ':';
        for (std::size_t k = 0; k < s[2]; ++k) o << ' ' << r.weights[(b * s[1] + q) * s[2] + k];
        o << '\n';
      }
    }
  }
  std::ofstream f(a.output, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + a.output);
  f << o.str();
  return kExitOk;
}

struct CorpusArgs {
  std::string task = "copy";
  int vocab = 32;
  std::size_t pairs = 2000;
  std::size_t min_len = 1;
  std::size_t max_len = 10;
  std::optional<std::uint64_t> seed;
  std::string src, tgt, vocab_file;
};

int cmd_make_corpus(const CorpusArgs& a, std::ostream& out) {
  require_writable(a.src, "--src");
  require_writable(a.tgt, "--tgt");
  if (!a.vocab_file.empty()) require_writable(a.vocab_file, "--vocab-file");
  std::uint64_t seed = 1;
  if (auto s = env_seed()) seed = *s;
  if (a.seed) seed = *a.seed;
  const auto corpus = make_toy_corpus(parse_task(a.task), a.vocab, a.pairs, a.min_len, a.max_len, seed);
  const auto vocab = Vocab::synthetic(a.vocab);
  std::vector<std::string> src, tgt;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    src.push_back(vocab.decode(corpus.src[i]));
    tgt.push_back(vocab.decode(corpus.tgt[i]));
  }
  write_lines(a.src, src);
  write_lines(a.tgt, tgt);
  if (!a.vocab_file.empty()) vocab.save(a.vocab_file);
  out << "pairs=" << corpus.size() << " task=" << a.task << " seed=" << seed << '\n';
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Joint source-target sequence-to-sequence toolkit", "reformer"};
  app.require_subcommand(1);

  ConfigArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "train a model and write checkpoint + metrics");
  train_args.add(*train_cmd, true);

  DecodeArgs decode_args;
  auto* decode_cmd = app.add_subcommand("decode", "translate a source file");
  decode_cmd->add_option("--checkpoint", decode_args.checkpoint)->required();
  decode_cmd->add_option("--input", decode_args.input, "one source sentence per line")->required();
  decode_cmd->add_option("--output", decode_args.output)->required();
  decode_cmd->add_option("--beam", decode_args.beam, "beam size (1 = greedy)")->capture_default_str();
  decode_cmd->add_option("--max-len", decode_args.max_len, "0 = 2 * source length + 10");
  decode_cmd->add_option("--length-penalty", decode_args.length_penalty)->capture_default_str();
  decode_cmd->add_option("--src-vocab", decode_args.src_vocab);
  decode_cmd->add_option("--tgt-vocab", decode_args.tgt_vocab);

  EvalArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "length ratio, bucketed accuracy and BLEU");
  eval_cmd->add_option("--hyps", eval_args.hyps)->required();
  eval_cmd->add_option("--refs", eval_args.refs)->required();
  eval_cmd->add_option("--train-refs", eval_args.train_refs, "training targets for frequency buckets");
  eval_cmd->add_option("--bins", eval_args.bins)->capture_default_str()->check(CLI::PositiveNumber);
  eval_cmd->add_option("--output", eval_args.output);

  ScaleArgs scale_args;
  auto* scale_cmd = app.add_subcommand("scale", "single-shot depth/width scaling");
  scale_cmd->add_option("--base", scale_args.base, "l,w")->required();
  scale_cmd->add_option("--probes", scale_args.probes, "file of `l w loss` lines, or auto");
  scale_cmd->add_option("--gradients", scale_args.gradients, "g_l,g_w given directly");
  scale_cmd->add_option("--eps", scale_args.eps, "probe offset");
  scale_cmd->add_option("--beta", scale_args.beta, "parameter ratio")->capture_default_str();
  scale_cmd->add_option("--output", scale_args.output, "machine-readable report");
  scale_args.config.add(*scale_cmd, false);

  ConfigArgs count_args;
  auto* count_cmd = app.add_subcommand("count-params", "parameter counts for a configuration");
  count_args.add(*count_cmd, false);

  DumpArgs dump_args;
  auto* dump_cmd = app.add_subcommand("dump-attention", "write attention weights for one sentence pair");
  dump_cmd->add_option("--checkpoint", dump_args.checkpoint)->required();
  dump_cmd->add_option("--src", dump_args.src, "source sentence")->required();
  dump_cmd->add_option("--tgt", dump_args.tgt, "target prefix");
  dump_cmd->add_option("--output", dump_args.output)->required();

  CorpusArgs corpus_args;
  auto* corpus_cmd = app.add_subcommand("make-corpus", "write a synthetic parallel corpus");
  corpus_cmd->add_option("--task", corpus_args.task, "copy, reverse or lexmap-reorder")->capture_default_str();
  corpus_cmd->add_option("--vocab", corpus_args.vocab)->capture_default_str();
  corpus_cmd->add_option("--pairs", corpus_args.pairs)->capture_default_str();
  corpus_cmd->add_option("--min-len", corpus_args.min_len)->capture_default_str();
  corpus_cmd->add_option("--max-len", corpus_args.max_len)->capture_default_str();
  corpus_cmd->add_option("--seed", corpus_args.seed);
  corpus_cmd->add_option("--src", corpus_args.src)->required();
  corpus_cmd->add_option("--tgt", corpus_args.tgt)->required();
  corpus_cmd->add_option("--vocab-file", corpus_args.vocab_file);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitUsage;
  }

  try {
    if (*train_cmd) return cmd_train(train_args, out);
    if (*decode_cmd) return cmd_decode(decode_args, out);
    if (*eval_cmd) return cmd_eval(eval_args, out);
    if (*scale_cmd) return cmd_scale(scale_args, out);
    if (*count_cmd) return cmd_count_params(count_args, out);
    if (*dump_cmd) return cmd_dump_attention(dump_args, out);
    if (*corpus_cmd) return cmd_make_corpus(corpus_args, out);
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace reformer
