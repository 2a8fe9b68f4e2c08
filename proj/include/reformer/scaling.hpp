#pragma once

// Single-shot depth/width scaling under a parameter budget, and a grid-search
// oracle to check it against.

#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace reformer {

// A trained (l, w) point and its validation loss.
struct EvalPoint {
  double l = 0;
  double w = 0;
  double loss = 0;
};

struct ScalingReport {
  double l = 0, w = 0;      // base
  double beta = 1;
  double g_l = 0, g_w = 0;  // gradients of performance (= -loss)
  double alpha = 0;
  double l_hat = 0, w_hat = 0;
  int l_new = 0, w_new = 0;
  double param_ratio = 1;  // simplified_params(l_hat, w_hat) / simplified_params(l, w)

  bool unchanged() const;
};

// 2 l (4 + 2w): attention plus FFN matrices per trunk, in units of e^2.
double simplified_params(double l, double w);

// Forward differences of performance along l and w.  The probes must sit at
// (l + eps, w) and (l, w + eps).
std::pair<double, double> finite_diff_gradients(const EvalPoint& base, const EvalPoint& probe_l,
                                                const EvalPoint& probe_w, double eps);

// Step alpha along (g_l, g_w) so that the parameter count grows by beta.
ScalingReport solve_step_size(double l, double w, double g_l, double g_w, double beta);

// Reads three `l w loss` lines: base, depth probe, width probe.
std::vector<EvalPoint> parse_probes(const std::string& text);

// Human-readable summary; the first line is the rounded decision.
std::string format_report(const ScalingReport& r);

// Same fields as `key=value` lines.
std::string format_report_kv(const ScalingReport& r);

struct GridPoint {
  int l = 0;
  int w = 0;
  bool operator==(const GridPoint&) const = default;
};

// Best candidate by `performance`; ties go to fewer parameters, then lower l.
// Every candidate must fit within beta * simplified_params(base).
GridPoint grid_search_oracle(const std::vector<GridPoint>& candidates,
                             const std::function<double(const GridPoint&)>& performance,
                             double beta, const GridPoint& base);

}  // namespace reformer
