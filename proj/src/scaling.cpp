#include "reformer/scaling.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "reformer/tensor.hpp"

namespace reformer {

namespace {

std::string fmt(const char* pattern, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, pattern, v);
  return buf;
}

bool close(double a, double b) { return std::abs(a - b) <= 1e-9 * std::max(1.0, std::abs(b)); }

void check_point(const EvalPoint& p, const char* what) {
  if (!(p.l >= 1 && p.w >= 1)) throw ConfigError(std::string(what) + ": l and w must be >= 1");
  if (!(p.loss > 0) || !std::isfinite(p.loss)) {
    throw ConfigError(std::string(what) + ": loss must be positive and finite");
  }
}

}  // namespace

bool ScalingReport::unchanged() const {
  return l_new == static_cast<int>(std::lround(l)) && w_new == static_cast<int>(std::lround(w));
}

double simplified_params(double l, double w) {
  if (!(l > 0 && w > 0)) throw ConfigError("simplified_params: l and w must be positive");
  return 2.0 * l * (4.0 + 2.0 * w);
}

std::pair<double, double> finite_diff_gradients(const EvalPoint& base, const EvalPoint& probe_l,
                                                const EvalPoint& probe_w, double eps) {
  if (!(eps > 0)) throw ConfigError("finite differences need eps > 0");
  check_point(base, "base");
  check_point(probe_l, "depth probe");
  check_point(probe_w, "width probe");
  if (!close(probe_l.l, base.l + eps) || !close(probe_l.w, base.w)) {
    throw ConfigError("depth probe must sit at (l + eps, w) = (" + fmt("%g", base.l + eps) + ", " +
                      fmt("%g", base.w) + ")");
  }
  if (!close(probe_w.l, base.l) || !close(probe_w.w, base.w + eps)) {
    throw ConfigError("width probe must sit at (l, w + eps) = (" + fmt("%g", base.l) + ", " +
                      fmt("%g", base.w + eps) + ")");
  }
  // Performance is -loss, so a lower probe loss gives a positive gradient.
  return {(base.loss - probe_l.loss) / eps, (base.loss - probe_w.loss) / eps};
}

ScalingReport solve_step_size(double l, double w, double g_l, double g_w, double beta) {
  if (!(l > 0 && w > 0)) throw ConfigError("scaling: l and w must be positive");
  if (!(beta > 0)) throw ConfigError("scaling: beta must be positive");
  if (g_l < 0 || g_w < 0) throw ConfigError("scaling: gradients must be non-negative");
  if (g_l == 0 && g_w == 0) throw ConfigError("scaling: gradients are both zero");

  // 2 (l + a g_l)(c + 2 a g_w) = beta 2 l c, c = 4 + 2w, as A a^2 + B a + C = 0.
  const double c = 4.0 + 2.0 * w;
  const double qa = 2.0 * g_l * g_w;
  const double qb = 2.0 * l * g_w + g_l * c;
  const double qc = l * c * (1.0 - beta);
  const double disc = qb * qb - 4.0 * qa * qc;
  if (disc < 0) throw NumericError("scaling: no real step size reaches beta");
  // -2C / (B + sqrt(disc)) is the larger root and stays exact when A = 0.
  const double alpha = qc == 0 ? 0.0 : -2.0 * qc / (qb + std::sqrt(disc));
  if (alpha < 0) throw NumericError("scaling: beta < 1 cannot be reached by gradient ascent");

  ScalingReport r;
  r.l = l;
  r.w = w;
  r.beta = beta;
  r.g_l = g_l;
  r.g_w = g_w;
  r.alpha = alpha;
  r.l_hat = l + alpha * g_l;
  r.w_hat = w + alpha * g_w;
  r.l_new = static_cast<int>(std::lround(r.l_hat));
  r.w_new = static_cast<int>(std::lround(r.w_hat));
  r.param_ratio = simplified_params(r.l_hat, r.w_hat) / simplified_params(l, w);
  return r;
}

std::vector<EvalPoint> parse_probes(const std::string& text) {
  std::vector<EvalPoint> out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    std::istringstream ls(line);
    EvalPoint p;
    if (!(ls >> p.l)) continue;
    std::string extra;
    if (!(ls >> p.w >> p.loss) || (ls >> extra)) {
      throw ConfigError("probes line " + std::to_string(lineno) + ": expected `l w loss`");
    }
    out.push_back(p);
  }
  if (out.size() != 3) {
    throw ConfigError("probes: expected 3 points (base, depth, width), got " + std::to_string(out.size()));
  }
  return out;
}

std::string format_report(const ScalingReport& r) {
  std::string out;
  if (r.unchanged()) {
    out += "no change\n";
  } else {
    const int dl = r.l_new - static_cast<int>(std::lround(r.l));
    out += (dl >= 0 ? "+" : "") + std::to_string(dl) + " layers, w " +
           std::to_string(static_cast<int>(std::lround(r.w))) + "→" + std::to_string(r.w_new) + "\n";
  }
  out += "gradients: g_l=" + fmt("%.6g", r.g_l) + " g_w=" + fmt("%.6g", r.g_w) + "\n";
  out += "step: alpha=" + fmt("%.6g", r.alpha) + "\n";
  out += "continuous: l=" + fmt("%.6f", r.l_hat) + " w=" + fmt("%.6f", r.w_hat) + "\n";
  out += "rounded: l=" + std::to_string(r.l_new) + " w=" + std::to_string(r.w_new) + "\n";
  out += "param_ratio=" + fmt("%.9f", r.param_ratio) + " (target " + fmt("%g", r.beta) + ")\n";
  return out;
}

std::string format_report_kv(const ScalingReport& r) {
  std::string out;
  auto kv = [&](const char* k, double v) { out += std::string(k) + "=" + fmt("%.17g", v) + "\n"; };
  kv("l", r.l);
  kv("w", r.w);
  kv("beta", r.beta);
  kv("g_l", r.g_l);
  kv("g_w", r.g_w);
  kv("alpha", r.alpha);
  kv("l_hat", r.l_hat);
  kv("w_hat", r.w_hat);
  out += "l_new=" + std::to_string(r.l_new) + "\n";
  out += "w_new=" + std::to_string(r.w_new) + "\n";
  kv("param_ratio", r.param_ratio);
  return out;
}

GridPoint grid_search_oracle(const std::vector<GridPoint>& candidates,
                             const std::function<double(const GridPoint&)>& performance,
                             double beta, const GridPoint& base) {
  if (candidates.empty()) throw ConfigError("grid search: no candidates");
  const double budget = beta * simplified_params(base.l, base.w);
  GridPoint best{};
  double best_perf = -INFINITY, best_params = 0;
  bool have = false;
  for (const auto& c : candidates) {
    const double params = simplified_params(c.l, c.w);
    if (params > budget * (1 + 1e-12)) {
      throw ConfigError("grid search: candidate (" + std::to_string(c.l) + ", " +
                        std::to_string(c.w) + ") exceeds the parameter budget");
    }
    const double perf = performance(c);
    const bool better = !have || perf > best_perf ||
                        (perf == best_perf && (params < best_params || (params == best_params && c.l < best.l)));
    if (better) {
      best = c;
      best_perf = perf;
      best_params = params;
      have = true;
    }
  }
  return best;
}

}  // namespace reformer
