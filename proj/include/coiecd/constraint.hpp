#pragma once

// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 COIECD Authors

/**
 * @file constraint.hpp
 * @brief The contextual information-entropy constraint.
 *
 * From the with-context distribution p2 and the without-context entropy H1,
 * the per-token information-entropy shift I(y) - H1 is normalized into the
 * shift distribution p_delta. Bounds u = lambda * max(p_delta) and
 * l' = min(p_delta) / lambda carve the vocabulary into an in-set region and
 * lower/upper violation zones; violations flag potential knowledge conflicts.
 *
 * Because H1 is constant across tokens, p_delta is algebraically the
 * reciprocal-probability normalization of p2: p_delta(y) = (1/p2(y)) / sum_w (1/p2(w)).
 * The literal softmax form is implemented here; the identity is asserted in tests.
 */

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "coiecd/dist.hpp"
#include "coiecd/errors.hpp"

namespace coiecd {

/// Relative tolerance for comparisons against the bounds. Distributions built
/// from exact rational fixtures land bitwise-near the bounds; without a guard
/// the strict/inclusive comparisons would flip on 1-ulp rounding noise. The
/// guard is relative because p_delta entries span hundreds of orders of
/// magnitude once near-zero probabilities are clamped.
inline constexpr double kBoundRtol = 1e-9;

/// x < bound, treating values within the relative guard as equal (bound >= 0).
inline bool strictly_below(double x, double bound) { return x < bound * (1.0 - kBoundRtol); }

/// x <= bound up to the relative guard (bound >= 0).
inline bool within_upper(double x, double bound) { return x <= bound * (1.0 + kBoundRtol); }

/// x >= bound up to the relative guard (bound >= 0).
inline bool within_lower(double x, double bound) { return x >= bound * (1.0 - kBoundRtol); }

/// softmax(I(y) - H1) over the vocabulary, probability domain.
struct ShiftDistribution {
  std::vector<double> values;
  EntropyNats h1;  ///< recorded for traces and diagnostics; cancels in the softmax
};

/// Constraint interval for one step. lower is 0 unless more than one token
/// falls strictly below lower_raw.
struct Bounds {
  double upper = 0.0;      // lambda * max(p_delta)
  double lower = 0.0;      // 0 or lower_raw
  double lower_raw = 0.0;  // min(p_delta) / lambda
  double lambda = 1.0;
};

enum class Verdict : std::uint8_t { InSet, LowerViolation, UpperViolation };

struct VerdictCounts {
  std::size_t in_set = 0;
  std::size_t lower = 0;
  std::size_t upper = 0;

  std::size_t total() const { return in_set + lower + upper; }
};

/**
 * Shift distribution via the literal softmax of the information-entropy shift.
 *
 * @throws NotNormalized when p2 is not normalized.
 */
inline ShiftDistribution shift_distribution(const LogProbs& p2, EntropyNats h1) {
  if (!p2.is_normalized()) {
    throw NotNormalized("shift_distribution: p2 is not normalized (logsumexp = " +
                        std::to_string(p2.log_sum()) + ")");
  }
  // I(y) - H1 = -log p2(y) - H1, normalized by a stable softmax.
  std::vector<double> shift(p2.size());
  for (std::size_t i = 0; i < p2.size(); ++i) shift[i] = -p2[i] - h1.value;
  double m = shift[0];
  for (double s : shift) m = std::max(m, s);
  double z = 0.0;
  for (double& s : shift) {
    s = std::exp(s - m);
    z += s;
  }
  for (double& s : shift) s /= z;
  return ShiftDistribution{std::move(shift), h1};
}

/**
 * Bounds per the constraint definition. The lower bound activates only when
 * more than one token lies strictly below lower_raw; a single violator
 * signals the model's high confidence and the absence of conflict.
 *
 * @throws InvalidParameter when lambda is outside (0,1].
 */
inline Bounds compute_bounds(const ShiftDistribution& pdelta, double lambda) {
  if (!(lambda > 0.0) || lambda > 1.0) {
    throw InvalidParameter("compute_bounds: lambda must be in (0,1], got " +
                           std::to_string(lambda));
  }
  if (pdelta.values.empty()) throw ShapeError("compute_bounds: empty shift distribution");
  double lo = pdelta.values[0];
  double hi = pdelta.values[0];
  for (double v : pdelta.values) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  Bounds b;
  b.lambda = lambda;
  b.upper = lambda * hi;
  b.lower_raw = lo / lambda;
  std::size_t violators = 0;
  for (double v : pdelta.values) {
    if (strictly_below(v, b.lower_raw)) ++violators;
  }
  b.lower = violators > 1 ? b.lower_raw : 0.0;
  return b;
}

/**
 * Per-token verdicts. Membership is inclusive at both bounds. When the
 * constraint set is empty (lower > upper) a token can violate both bounds;
 * LowerViolation takes precedence, which affects diagnostics labels only.
 *
 * @throws ShapeError on an empty shift distribution.
 */
inline std::vector<Verdict> classify(const ShiftDistribution& pdelta, const Bounds& bounds) {
  if (pdelta.values.empty()) throw ShapeError("classify: empty shift distribution");
  std::vector<Verdict> out(pdelta.values.size());
  for (std::size_t i = 0; i < pdelta.values.size(); ++i) {
    const double v = pdelta.values[i];
    if (within_lower(v, bounds.lower) && within_upper(v, bounds.upper)) {
      out[i] = Verdict::InSet;
    } else if (strictly_below(v, bounds.lower)) {
      out[i] = Verdict::LowerViolation;
    } else {
      out[i] = Verdict::UpperViolation;
    }
  }
  return out;
}

inline VerdictCounts count_verdicts(const std::vector<Verdict>& verdicts) {
  VerdictCounts c;
  for (Verdict v : verdicts) {
    switch (v) {
      case Verdict::InSet: ++c.in_set; break;
      case Verdict::LowerViolation: ++c.lower; break;
      case Verdict::UpperViolation: ++c.upper; break;
    }
  }
  return c;
}

/// One step's full constraint evaluation: p_delta, bounds and verdicts.
struct ConstraintReport {
  ShiftDistribution pdelta;
  Bounds bounds;
  std::vector<Verdict> verdicts;
  VerdictCounts counts;
};

inline ConstraintReport constraint_report(const LogProbs& p2, EntropyNats h1, double lambda) {
  ConstraintReport r;
  r.pdelta = shift_distribution(p2, h1);
  r.bounds = compute_bounds(r.pdelta, lambda);
  r.verdicts = classify(r.pdelta, r.bounds);
  r.counts = count_verdicts(r.verdicts);
  return r;
}

}  // namespace coiecd
