#pragma once

// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 COIECD Authors

/**
 * @file dist.hpp
 * @brief Numerically stable log-probability arithmetic and truncation primitives.
 *
 * All distributions live in natural-log space (nats). A LogProbs vector is
 * normalized when logsumexp(values) == 0; factories guarantee this, raw
 * construction does not, and operations that require normalization validate
 * it at a 1e-6 tolerance.
 *
 * Conventions shared by every module:
 * - 0 * ln 0 = 0 in entropy sums.
 * - Probabilities below 1e-300 are clamped before taking logs, so finite
 *   vectors stay finite and -inf never propagates through adapters.
 * - All truncation ties break by ascending token id, making every result
 *   deterministic and reproducible.
 */

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "coiecd/errors.hpp"

namespace coiecd {

using TokenId = std::int32_t;

/// Probabilities smaller than this are clamped before log().
inline constexpr double kProbFloor = 1e-300;

/// Unnormalized per-token scores, as produced by a model adapter.
struct Logits {
  std::vector<double> values;

  std::size_t size() const { return values.size(); }
};

/// Shannon entropy in nats. 0 <= value <= ln(vocab_size).
struct EntropyNats {
  double value = 0.0;
};

namespace detail {

inline double log_sum_exp(std::span<const double> v) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : v) {
    if (x > m) m = x;
  }
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

}  // namespace detail

/**
 * A length-V vector of natural-log probabilities for one decoding step.
 *
 * The raw constructor stores values verbatim (tests and step ops build
 * already-normalized vectors); use log_softmax() or from_probabilities()
 * when normalization must be (re)established.
 */
class LogProbs {
public:
  LogProbs() = default;
  explicit LogProbs(std::vector<double> log_values) : values_(std::move(log_values)) {}

  /// Clamps entries to kProbFloor, takes logs and renormalizes.
  static LogProbs from_probabilities(std::span<const double> probs) {
    std::vector<double> v(probs.size());
    for (std::size_t i = 0; i < probs.size(); ++i) {
      v[i] = std::log(std::max(probs[i], kProbFloor));
    }
    const double lse = detail::log_sum_exp(v);
    for (double& x : v) x -= lse;
    return LogProbs(std::move(v));
  }

  const std::vector<double>& values() const { return values_; }
  std::size_t size() const { return values_.size(); }
  double operator[](std::size_t i) const { return values_[i]; }

  /// log(sum(exp(values))); 0 for a normalized distribution.
  double log_sum() const { return detail::log_sum_exp(values_); }

  bool is_normalized(double tol = 1e-6) const { return std::abs(log_sum()) <= tol; }

  /// Lowest token id among the maxima.
  TokenId argmax() const {
    return static_cast<TokenId>(
        std::max_element(values_.begin(), values_.end()) - values_.begin());
  }

  /// Probability of one token (exp of its log value).
  double prob(TokenId t) const { return std::exp(values_[static_cast<std::size_t>(t)]); }

  std::vector<double> probabilities() const {
    std::vector<double> p(values_.size());
    for (std::size_t i = 0; i < values_.size(); ++i) p[i] = std::exp(values_[i]);
    return p;
  }

private:
  std::vector<double> values_;
};

/**
 * Temperature-scaled log-softmax: values/temperature, shifted by the max and
 * normalized. The output satisfies logsumexp == 0 up to rounding.
 *
 * @throws InvalidLogits on NaN/Inf input, InvalidParameter on temperature <= 0.
 */
inline LogProbs log_softmax(const Logits& logits, double temperature = 1.0) {
  if (!(temperature > 0.0)) {
    throw InvalidParameter("log_softmax: temperature must be > 0, got " +
                           std::to_string(temperature));
  }
  if (logits.values.empty()) throw InvalidLogits("log_softmax: empty logits");
  std::vector<double> v(logits.values.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double x = logits.values[i];
    if (!std::isfinite(x)) {
      throw InvalidLogits("log_softmax: non-finite logit at index " + std::to_string(i));
    }
    v[i] = x / temperature;
  }
  const double lse = detail::log_sum_exp(v);
  for (double& x : v) x -= lse;
  return LogProbs(std::move(v));
}

/**
 * Shannon entropy -sum(p * log p) in nats, with the 0*ln(0)=0 convention.
 *
 * @throws NotNormalized when |logsumexp(p)| > 1e-6.
 */
inline EntropyNats entropy(const LogProbs& p) {
  const double lse = p.log_sum();
  if (!(std::abs(lse) <= 1e-6)) {
    throw NotNormalized("entropy: distribution is not normalized (logsumexp = " +
                        std::to_string(lse) + ")");
  }
  double h = 0.0;
  for (double v : p.values()) {
    if (!std::isfinite(v)) continue;  // p == 0 contributes nothing
    h -= std::exp(v) * v;
  }
  return EntropyNats{std::max(0.0, h)};
}

/**
 * Information content I(y) = -log p(y) in nats.
 *
 * @throws IndexError when the token id is out of range.
 */
inline double information_content(const LogProbs& p, TokenId token) {
  if (token < 0 || static_cast<std::size_t>(token) >= p.size()) {
    throw IndexError("information_content: token " + std::to_string(token) +
                     " out of range for vocab of " + std::to_string(p.size()));
  }
  return -p[static_cast<std::size_t>(token)];
}

namespace detail {

/// Token ids sorted by descending probability, ties by ascending id.
inline std::vector<TokenId> ids_by_descending_prob(const LogProbs& p) {
  std::vector<TokenId> ids(p.size());
  std::iota(ids.begin(), ids.end(), TokenId{0});
  std::sort(ids.begin(), ids.end(), [&](TokenId a, TokenId b) {
    const double pa = p[static_cast<std::size_t>(a)];
    const double pb = p[static_cast<std::size_t>(b)];
    if (pa != pb) return pa > pb;
    return a < b;
  });
  return ids;
}

inline std::vector<TokenId> sorted_set(std::vector<TokenId> ids) {
  std::sort(ids.begin(), ids.end());
  return ids;
}

}  // namespace detail

/**
 * Nucleus truncation: the smallest descending-probability prefix whose
 * cumulative probability reaches top_p. Returned ids are sorted ascending.
 */
inline std::vector<TokenId> truncate_nucleus(const LogProbs& p, double top_p) {
  if (!(top_p > 0.0) || top_p > 1.0) {
    throw InvalidParameter("truncate_nucleus: top_p must be in (0,1], got " +
                           std::to_string(top_p));
  }
  const auto order = detail::ids_by_descending_prob(p);
  std::vector<TokenId> kept;
  double cum = 0.0;
  for (TokenId id : order) {
    kept.push_back(id);
    cum += std::exp(p[static_cast<std::size_t>(id)]);
    if (cum >= top_p) break;
  }
  return detail::sorted_set(std::move(kept));
}

/// The k highest-probability tokens, ties by ascending id, sorted ascending.
inline std::vector<TokenId> truncate_top_k(const LogProbs& p, int k) {
  if (k < 1 || static_cast<std::size_t>(k) > p.size()) {
    throw InvalidParameter("truncate_top_k: k must be in [1, vocab_size], got " +
                           std::to_string(k));
  }
  auto order = detail::ids_by_descending_prob(p);
  order.resize(static_cast<std::size_t>(k));
  return detail::sorted_set(std::move(order));
}

/**
 * Locally typical truncation: tokens ranked by |I(y) - H(p)| ascending (ties
 * by ascending id), smallest prefix whose cumulative probability reaches tau.
 * The set is nonempty but need not contain argmax(p).
 */
inline std::vector<TokenId> truncate_typical(const LogProbs& p, double tau) {
  if (!(tau > 0.0) || tau > 1.0) {
    throw InvalidParameter("truncate_typical: tau must be in (0,1], got " +
                           std::to_string(tau));
  }
  const double h = entropy(p).value;
  std::vector<TokenId> ids(p.size());
  std::iota(ids.begin(), ids.end(), TokenId{0});
  auto shift = [&](TokenId id) {
    const double v = p[static_cast<std::size_t>(id)];
    if (!std::isfinite(v)) return std::numeric_limits<double>::infinity();
    return std::abs(-v - h);
  };
  std::sort(ids.begin(), ids.end(), [&](TokenId a, TokenId b) {
    const double sa = shift(a);
    const double sb = shift(b);
    if (sa != sb) return sa < sb;
    return a < b;
  });
  std::vector<TokenId> kept;
  double cum = 0.0;
  for (TokenId id : ids) {
    kept.push_back(id);
    cum += std::exp(p[static_cast<std::size_t>(id)]);
    if (cum >= tau) break;
  }
  return detail::sorted_set(std::move(kept));
}

}  // namespace coiecd
