#include "kgalign/alignment.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <fmt/format.h>
#include <json.hpp>

#include "kgalign/error.hpp"
#include "kgalign/log.hpp"
#include "kgalign/text.hpp"

namespace kgalign {
namespace {

using json = nlohmann::json;

void check_finite(const ScoreMatrix& m) {
  if (m.values.size() != m.rows * m.cols) fail(ErrorCode::kUsageError, "score matrix shape mismatch");
  for (const double v : m.values) {
    if (!std::isfinite(v)) fail(ErrorCode::kNonFiniteMatrix, "score matrix contains a non-finite value");
  }
}

void check_sets(std::span<const CandidateSet> candidates) {
  for (const auto& s : candidates) {
    if (s.candidates.empty()) fail(ErrorCode::kEmptyCandidateSet, fmt::format("source '{}' has no candidates", s.source));
  }
}

ScoreMatrix transpose(const ScoreMatrix& m) {
  ScoreMatrix t(m.cols, m.rows);
  for (std::size_t i = 0; i < m.rows; ++i) {
    for (std::size_t j = 0; j < m.cols; ++j) t.at(j, i) = m.at(i, j);
  }
  return t;
}

double log_sum_exp(const double* x, std::size_t n, std::size_t stride) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < n; ++k) mx = std::max(mx, x[k * stride]);
  double s = 0.0;
  for (std::size_t k = 0; k < n; ++k) s += std::exp(x[k * stride] - mx);
  return mx + std::log(s);
}

AlignmentResult from_assignment(AlignmentMethod method, const CandidateMatrix& cm,
                                const std::vector<std::ptrdiff_t>& assignment) {
  AlignmentResult out;
  out.method = method;
  out.one_to_one = true;
  out.fill = cm.fill;
  std::size_t via_fill = 0;
  for (std::size_t i = 0; i < assignment.size(); ++i) {
    if (assignment[i] < 0) continue;
    const auto j = static_cast<std::size_t>(assignment[i]);
    const bool observed = cm.observed[i * cm.targets.size() + j] != 0;
    if (!observed) ++via_fill;
    out.pairs.push_back({cm.sources[i], cm.targets[j], cm.scores.at(i, j), observed});
  }
  if (via_fill > 0) logger()->warn("{} matched pairs fall outside their source's candidate set", via_fill);
  return out;
}

}  // namespace

std::string_view alignment_method_name(AlignmentMethod m) {
  switch (m) {
    case AlignmentMethod::kGreedy:
      return "greedy";
    case AlignmentMethod::kHungarian:
      return "hungarian";
    case AlignmentMethod::kSinkhorn:
      return "sinkhorn";
  }
  return "greedy";
}

AlignmentMethod parse_alignment_method(std::string_view name) {
  if (name == "greedy") return AlignmentMethod::kGreedy;
  if (name == "hungarian") return AlignmentMethod::kHungarian;
  if (name == "sinkhorn") return AlignmentMethod::kSinkhorn;
  fail(ErrorCode::kConfigError, fmt::format("unknown alignment method '{}'", name));
}

CandidateMatrix build_candidate_matrix(std::span<const CandidateSet> candidates) {
  check_sets(candidates);
  CandidateMatrix cm;
  for (const auto& s : candidates) {
    cm.sources.push_back(s.source);
    for (const auto& c : s.candidates) cm.targets.push_back(c.target);
  }
  std::sort(cm.sources.begin(), cm.sources.end());
  if (std::adjacent_find(cm.sources.begin(), cm.sources.end()) != cm.sources.end()) {
    fail(ErrorCode::kUsageError, "duplicate source among candidate sets");
  }
  std::sort(cm.targets.begin(), cm.targets.end());
  cm.targets.erase(std::unique(cm.targets.begin(), cm.targets.end()), cm.targets.end());

  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  for (const auto& s : candidates) {
    for (const auto& c : s.candidates) {
      if (!std::isfinite(c.score)) fail(ErrorCode::kNonFiniteMatrix, fmt::format("non-finite score for '{}'", s.source));
      lo = std::min(lo, c.score);
      hi = std::max(hi, c.score);
    }
  }
  const double range = hi > lo ? hi - lo : 1.0;
  cm.fill = candidates.empty() ? 0.0 : lo - 3.0 * range;

  const std::size_t n = cm.sources.size();
  const std::size_t m = cm.targets.size();
  cm.scores = ScoreMatrix(n, m, cm.fill);
  cm.observed.assign(n * m, 0);
  for (const auto& s : candidates) {
    const auto i = static_cast<std::size_t>(std::lower_bound(cm.sources.begin(), cm.sources.end(), s.source) -
                                            cm.sources.begin());
    for (const auto& c : s.candidates) {
      const auto j = static_cast<std::size_t>(std::lower_bound(cm.targets.begin(), cm.targets.end(), c.target) -
                                              cm.targets.begin());
      cm.scores.at(i, j) = c.score;
      cm.observed[i * m + j] = 1;
    }
  }
  return cm;
}

std::vector<std::ptrdiff_t> hungarian_assign(const ScoreMatrix& m) {
  check_finite(m);
  if (m.rows == 0 || m.cols == 0) return std::vector<std::ptrdiff_t>(m.rows, -1);
  if (m.rows > m.cols) {
    const auto by_col = hungarian_assign(transpose(m));
    std::vector<std::ptrdiff_t> out(m.rows, -1);
    for (std::size_t j = 0; j < by_col.size(); ++j) {
      if (by_col[j] >= 0) out[static_cast<std::size_t>(by_col[j])] = static_cast<std::ptrdiff_t>(j);
    }
    return out;
  }

  // Shortest augmenting paths with potentials, minimizing the negated score.
  const std::size_t n = m.rows;
  const std::size_t k = m.cols;
  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0);
  std::vector<double> v(k + 1, 0.0);
  std::vector<std::size_t> p(k + 1, 0);
  std::vector<std::size_t> way(k + 1, 0);
  std::vector<double> minv(k + 1);
  std::vector<char> used(k + 1);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), kInf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = kInf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= k; ++j) {
        if (used[j]) continue;
        const double cur = -m.at(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= k; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  std::vector<std::ptrdiff_t> out(n, -1);
  for (std::size_t j = 1; j <= k; ++j) {
    if (p[j] != 0) out[p[j] - 1] = static_cast<std::ptrdiff_t>(j - 1);
  }
  return out;
}

namespace {

// Both marginal residuals of the plan exp((S + f + g) / eps).
double marginal_violation(const ScoreMatrix& m, const std::vector<double>& f, const std::vector<double>& g,
                          double eps, ScoreMatrix& plan) {
  const std::size_t n = m.rows, k = m.cols;
  std::vector<double> cols(k, 0.0);
  double worst = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      const double p = std::exp((m.at(i, j) + f[i] + g[j]) / eps);
      plan.at(i, j) = p;
      row += p;
      cols[j] += p;
    }
    worst = std::max(worst, std::abs(row - 1.0 / n));
  }
  for (std::size_t j = 0; j < k; ++j) worst = std::max(worst, std::abs(cols[j] - 1.0 / k));
  return worst;
}

// Solves A x = rhs in place by Gaussian elimination with partial pivoting.
bool solve_dense(std::vector<double>& A, std::vector<double>& rhs, std::size_t n) {
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < n; ++r) {
      if (std::abs(A[r * n + c]) > std::abs(A[piv * n + c])) piv = r;
    }
    if (A[piv * n + c] == 0.0) return false;
    if (piv != c) {
      for (std::size_t j = 0; j < n; ++j) std::swap(A[c * n + j], A[piv * n + j]);
      std::swap(rhs[c], rhs[piv]);
    }
    for (std::size_t r = c + 1; r < n; ++r) {
      const double factor = A[r * n + c] / A[c * n + c];
      if (factor == 0.0) continue;
      for (std::size_t j = c; j < n; ++j) A[r * n + j] -= factor * A[c * n + j];
      rhs[r] -= factor * rhs[c];
    }
  }
  for (std::size_t c = n; c-- > 0;) {
    double x = rhs[c];
    for (std::size_t j = c + 1; j < n; ++j) x -= A[c * n + j] * rhs[j];
    rhs[c] = x / A[c * n + c];
  }
  return true;
}

// Newton steps on the dual potentials. Near-permutation plans make the
// scaling iteration contract very slowly; Newton converges quadratically
// there. The last column potential is pinned to remove the constant shift.
std::size_t newton_polish(const ScoreMatrix& m, std::vector<double>& f, std::vector<double>& g, double eps,
                          double tolerance, std::size_t max_steps) {
  const std::size_t n = m.rows, k = m.cols, dim = n + k - 1;
  ScoreMatrix plan(n, k);
  double viol = marginal_violation(m, f, g, eps, plan);
  std::size_t steps = 0;
  while (steps < max_steps && viol > tolerance) {
    std::vector<double> A(dim * dim, 0.0), rhs(dim, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      double row = 0.0;
      for (std::size_t j = 0; j < k; ++j) row += plan.at(i, j);
      A[i * dim + i] = row / eps;
      for (std::size_t j = 0; j + 1 < k; ++j) A[i * dim + n + j] = plan.at(i, j) / eps;
      rhs[i] = 1.0 / n - row;
    }
    for (std::size_t j = 0; j + 1 < k; ++j) {
      double col = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        col += plan.at(i, j);
        A[(n + j) * dim + i] = plan.at(i, j) / eps;
      }
      A[(n + j) * dim + n + j] = col / eps;
      rhs[n + j] = 1.0 / k - col;
    }
    if (!solve_dense(A, rhs, dim)) break;

    // Backtrack until the residual shrinks.
    bool improved = false;
    for (double t = 1.0; t > 1e-6; t *= 0.5) {
      auto f2 = f, g2 = g;
      for (std::size_t i = 0; i < n; ++i) f2[i] += t * rhs[i];
      for (std::size_t j = 0; j + 1 < k; ++j) g2[j] += t * rhs[n + j];
      ScoreMatrix trial(n, k);
      const double v = marginal_violation(m, f2, g2, eps, trial);
      if (std::isfinite(v) && v < viol) {
        f = std::move(f2);
        g = std::move(g2);
        plan = std::move(trial);
        viol = v;
        improved = true;
        break;
      }
    }
    ++steps;
    if (!improved) break;
  }
  return steps;
}

// Newton builds a dense (n + k - 1)^2 system, so only small problems get it.
constexpr std::size_t kNewtonMaxSide = 400;

}  // namespace

SinkhornPlan sinkhorn(const ScoreMatrix& m, const SinkhornOptions& options) {
  check_finite(m);
  if (!(options.epsilon > 0.0)) fail(ErrorCode::kConfigError, "sinkhorn epsilon must be positive");
  SinkhornPlan out;
  const std::size_t n = m.rows;
  const std::size_t k = m.cols;
  if (n == 0 || k == 0) {
    out.plan = ScoreMatrix(n, k);
    out.diagnostics.converged = true;
    return out;
  }
  const double eps = options.epsilon;
  const double log_a = -std::log(static_cast<double>(n));
  const double log_b = -std::log(static_cast<double>(k));
  const double a = 1.0 / static_cast<double>(n);
  const double b = 1.0 / static_cast<double>(k);

  std::vector<double> f(n, 0.0);
  std::vector<double> g(k, 0.0);
  ScoreMatrix z(n, k);  // scratch for (S + f + g) / eps terms

  const auto row_violation = [&](double e) {
    double worst = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < k; ++j) s += std::exp((m.at(i, j) + f[i] + g[j]) / e);
      worst = std::max(worst, std::abs(s - a));
    }
    return worst;
  };
  const auto sweep = [&](double e) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < k; ++j) z.at(i, j) = (m.at(i, j) + g[j]) / e;
      f[i] = e * (log_a - log_sum_exp(&z.at(i, 0), k, 1));
    }
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < k; ++j) z.at(i, j) = (m.at(i, j) + f[i]) / e;
    }
    for (std::size_t j = 0; j < k; ++j) g[j] = e * (log_b - log_sum_exp(&z.at(0, j), n, k));
  };

  // Epsilon scaling: solve coarse problems first and warm-start the duals,
  // which cuts the iteration count at small epsilon by orders of magnitude.
  // The warm-up sweeps count against max_iterations.
  auto& diag = out.diagnostics;
  const auto [lo, hi] = std::minmax_element(m.values.begin(), m.values.end());
  std::vector<double> schedule;
  for (double e = std::max(eps, *hi - *lo); e > eps; e *= 0.5) schedule.push_back(e);
  for (const double e : schedule) {
    for (std::size_t it = 0; it < 50 && diag.iterations < options.max_iterations; ++it) {
      sweep(e);
      ++diag.iterations;
      if (row_violation(e) <= std::max(options.tolerance, 1e-6)) break;
    }
  }
  const bool newton = n + k <= kNewtonMaxSide;
  std::size_t final_sweeps = 0;
  while (diag.iterations < options.max_iterations) {
    sweep(eps);
    ++diag.iterations;
    ++final_sweeps;
    if (row_violation(eps) <= options.tolerance) {
      diag.converged = true;
      break;
    }
    // Scaling has stalled; hand over to Newton.
    if (newton && final_sweeps >= 200) break;
  }
  if (!diag.converged && newton) {
    diag.newton_steps = newton_polish(m, f, g, eps, options.tolerance, 100);
    ScoreMatrix scratch(n, k);
    diag.converged = marginal_violation(m, f, g, eps, scratch) <= options.tolerance;
  }

  out.plan = ScoreMatrix(n, k);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) out.plan.at(i, j) = std::exp((m.at(i, j) + f[i] + g[j]) / eps);
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += out.plan.at(i, j);
    worst = std::max(worst, std::abs(s - a));
  }
  for (std::size_t j = 0; j < k; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += out.plan.at(i, j);
    worst = std::max(worst, std::abs(s - b));
  }
  diag.max_marginal_violation = worst;
  if (!diag.converged) {
    logger()->warn("{}: sinkhorn stopped after {} iterations with marginal violation {:.3g}",
                   error_code_name(ErrorCode::kNotConverged), diag.iterations, worst);
  }
  return out;
}

std::vector<std::ptrdiff_t> harden_plan(const ScoreMatrix& plan) {
  std::vector<std::size_t> order(plan.values.size());
  std::iota(order.begin(), order.end(), 0);
  // Flat index order is (row, column) order, so a stable sort breaks ties.
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return plan.values[x] > plan.values[y]; });
  std::vector<std::ptrdiff_t> out(plan.rows, -1);
  std::vector<char> col_used(plan.cols, 0);
  std::size_t left = std::min(plan.rows, plan.cols);
  for (const auto flat : order) {
    if (left == 0) break;
    const auto i = flat / plan.cols;
    const auto j = flat % plan.cols;
    if (out[i] >= 0 || col_used[j]) continue;
    out[i] = static_cast<std::ptrdiff_t>(j);
    col_used[j] = 1;
    --left;
  }
  return out;
}

AlignmentResult decide_greedy(std::span<const CandidateSet> candidates) {
  check_sets(candidates);
  AlignmentResult out;
  out.method = AlignmentMethod::kGreedy;
  for (const auto& s : candidates) {
    const ScoredCandidate* best = &s.candidates.front();
    for (const auto& c : s.candidates) {
      if (c.score > best->score || (c.score == best->score && c.target < best->target)) best = &c;
    }
    out.pairs.push_back({s.source, best->target, best->score, true});
  }
  std::sort(out.pairs.begin(), out.pairs.end(),
            [](const AlignedPair& a, const AlignedPair& b) { return a.source < b.source; });
  return out;
}

AlignmentResult decide_hungarian(std::span<const CandidateSet> candidates) {
  const auto cm = build_candidate_matrix(candidates);
  return from_assignment(AlignmentMethod::kHungarian, cm, hungarian_assign(cm.scores));
}

AlignmentResult decide_sinkhorn(std::span<const CandidateSet> candidates, const SinkhornOptions& options) {
  const auto cm = build_candidate_matrix(candidates);
  const auto plan = sinkhorn(cm.scores, options);
  auto out = from_assignment(AlignmentMethod::kSinkhorn, cm, harden_plan(plan.plan));
  out.sinkhorn = plan.diagnostics;
  out.epsilon = options.epsilon;
  return out;
}

AlignmentResult decide(AlignmentMethod method, std::span<const CandidateSet> candidates,
                       const SinkhornOptions& options) {
  switch (method) {
    case AlignmentMethod::kGreedy:
      return decide_greedy(candidates);
    case AlignmentMethod::kHungarian:
      return decide_hungarian(candidates);
    case AlignmentMethod::kSinkhorn:
      return decide_sinkhorn(candidates, options);
  }
  return decide_greedy(candidates);
}

std::string format_alignment_tsv(const AlignmentResult& result) {
  std::string out;
  for (const auto& p : result.pairs) {
    out += fmt::format("{}\t{}\t{}\n", text::escape_tsv(p.source), text::escape_tsv(p.target), p.score);
  }
  return out;
}

std::vector<AlignedPair> parse_alignment_tsv(std::string_view contents) {
  std::vector<AlignedPair> out;
  std::size_t line_no = 0;
  for (const auto line : text::split(contents, '\n')) {
    ++line_no;
    if (text::trim(line).empty()) continue;
    const auto fields = text::split(line, '\t');
    if (fields.size() != 3) throw MalformedLineError("alignment", line_no, "expected 3 tab-separated fields");
    AlignedPair p{text::unescape_tsv(fields[0]), text::unescape_tsv(fields[1]), 0.0, true};
    try {
      std::size_t used = 0;
      p.score = std::stod(std::string(fields[2]), &used);
      if (used != fields[2].size()) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      throw MalformedLineError("alignment", line_no, "score is not a number");
    }
    out.push_back(std::move(p));
  }
  return out;
}

std::string alignment_metadata_json(const AlignmentResult& result) {
  json j;
  j["method"] = alignment_method_name(result.method);
  j["one_to_one"] = result.one_to_one;
  j["pairs"] = result.pairs.size();
  std::size_t via_fill = 0;
  for (const auto& p : result.pairs) via_fill += p.candidate ? 0 : 1;
  j["pairs_outside_candidates"] = via_fill;
  if (result.method != AlignmentMethod::kGreedy) j["fill_value"] = result.fill;
  if (result.sinkhorn) {
    j["sinkhorn"] = {{"epsilon", result.epsilon},
                     {"iterations", result.sinkhorn->iterations},
                     {"newton_steps", result.sinkhorn->newton_steps},
                     {"converged", result.sinkhorn->converged},
                     {"max_marginal_violation", result.sinkhorn->max_marginal_violation}};
  }
  return j.dump(2) + "\n";
}

}  // namespace kgalign
