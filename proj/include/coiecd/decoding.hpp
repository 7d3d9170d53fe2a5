#pragma once

// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 COIECD Authors

/**
 * @file decoding.hpp
 * @brief Per-step score adjustment and the autoregressive loop for COIECD
 *        and the Regular / CD / CAD / SC baselines.
 *
 * Every strategy consumes a StepPair: the next-token distribution without
 * context (p1) and with context (p2) for the same prefix. The contrastive
 * object g = log p2 - log p1 measures the context's pull on each token.
 *
 * COIECD evaluates the information-entropy constraint on p2 and blends:
 *   in-set tokens:      log p1 + alpha * g   (lean on parametric knowledge)
 *   out-of-set tokens:  log p2 + alpha * g   (amplify the context)
 * and renormalizes. Out-of-set scoring is algebraically identical to CAD's
 * (1+alpha) log p2 - alpha log p1; both routes are kept so tests can check
 * the identity numerically.
 */

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "coiecd/constraint.hpp"
#include "coiecd/dist.hpp"
#include "coiecd/errors.hpp"
#include "coiecd/metrics.hpp"
#include "coiecd/model.hpp"

namespace coiecd::decode {

enum class Method : std::uint8_t { regular, coiecd, cd, cad, sc };

enum class SamplerKind : std::uint8_t { greedy, nucleus, top_k, typical };

struct SamplerConfig {
  SamplerKind kind = SamplerKind::greedy;
  double top_p = 0.9;
  int k = 50;
  double tau = 0.9;
};

/// Which distribution thresholds CD's plausibility head.
enum class PlausibilitySource : std::uint8_t { with_context, without_context };

struct DecoderConfig {
  Method method = Method::regular;
  double alpha = 1.0;    // contextual weight
  double lambda = 0.25;  // constraint scale
  SamplerConfig sampler;
  double temperature = 0.0;  // 0 = greedy argmax
  int max_new_tokens = 16;
  int sc_samples = 40;
  double sc_temperature = 0.5;
  double cd_plausibility = 0.1;
  PlausibilitySource cd_plausibility_source = PlausibilitySource::with_context;
  std::uint64_t rng_seed = 0;

  void validate() const {
    if (!(lambda > 0.0) || lambda > 1.0) {
      throw InvalidParameter("lambda must be in (0,1], got " + std::to_string(lambda));
    }
    if (!(alpha >= 0.0) || alpha > 4.0) {
      throw InvalidParameter("alpha must be in [0,4], got " + std::to_string(alpha));
    }
    if (!(temperature >= 0.0)) {
      throw InvalidParameter("temperature must be >= 0, got " + std::to_string(temperature));
    }
    if (max_new_tokens < 0) {
      throw InvalidParameter("max_new_tokens must be >= 0");
    }
    if (sc_samples < 1) {
      throw InvalidParameter("sc_samples must be >= 1, got " + std::to_string(sc_samples));
    }
    if (!(sc_temperature > 0.0)) {
      throw InvalidParameter("sc_temperature must be > 0, got " + std::to_string(sc_temperature));
    }
    if (!(cd_plausibility > 0.0) || cd_plausibility > 1.0) {
      throw InvalidParameter("cd_plausibility must be in (0,1], got " +
                             std::to_string(cd_plausibility));
    }
    if (!(sampler.top_p > 0.0) || sampler.top_p > 1.0) {
      throw InvalidParameter("sampler top_p must be in (0,1]");
    }
    if (!(sampler.tau > 0.0) || sampler.tau > 1.0) {
      throw InvalidParameter("sampler tau must be in (0,1]");
    }
    if (sampler.kind == SamplerKind::top_k && sampler.k < 1) {
      throw InvalidParameter("sampler k must be >= 1");
    }
  }
};

/// p1 (without context) and p2 (with context) for one step.
struct StepPair {
  LogProbs without_context;  // p1
  LogProbs with_context;     // p2

  std::size_t vocab_size() const { return with_context.size(); }

  void check() const {
    if (without_context.size() != with_context.size()) {
      throw ShapeError("StepPair: p1 has " + std::to_string(without_context.size()) +
                       " entries, p2 has " + std::to_string(with_context.size()));
    }
    if (without_context.size() == 0) throw ShapeError("StepPair: empty distributions");
  }
};

enum class Branch : std::uint8_t { in_set, out_of_set, not_applicable };

/// One emitted token's record.
struct StepTrace {
  TokenId token = -1;
  Branch branch = Branch::not_applicable;
  double h1 = 0.0;               // entropy of p1, nats
  double h2 = 0.0;               // entropy of p2, nats
  double info = 0.0;             // I(token) under p2, nats
  double pdelta_of_token = 0.0;
  double upper = 0.0;
  double lower = 0.0;
  VerdictCounts verdict_counts;
  double log_prob = 0.0;         // log pi(token), pre-temperature
};

struct DecodeTrace {
  std::vector<StepTrace> steps;
};

/// Contrastive object g = log p2 - log p1, elementwise.
inline std::vector<double> contrastive_object(const StepPair& pair) {
  pair.check();
  std::vector<double> g(pair.vocab_size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    g[i] = pair.with_context[i] - pair.without_context[i];
  }
  return g;
}

/// Regular decoding scores: p2 unchanged.
inline LogProbs regular_step(const StepPair& pair) {
  pair.check();
  return pair.with_context;
}

struct CoiecdOptions {
  double lambda = 0.25;
  double alpha = 1.0;
  bool force_empty_constraint = false;  // test hook: route every token out-of-set
};

/**
 * One COIECD step: constraint verdicts from p2, branch-dependent blend with
 * the contrastive object, softmax renormalization. The full ConstraintReport
 * is written to *report when given (trace hook).
 */
inline LogProbs coiecd_step(const StepPair& pair, const CoiecdOptions& opts,
                            ConstraintReport* report = nullptr) {
  pair.check();
  if (!(opts.lambda > 0.0) || opts.lambda > 1.0) {
    throw InvalidParameter("coiecd_step: lambda must be in (0,1]");
  }
  if (!(opts.alpha >= 0.0)) throw InvalidParameter("coiecd_step: alpha must be >= 0");

  const EntropyNats h1 = entropy(pair.without_context);
  ConstraintReport local = constraint_report(pair.with_context, h1, opts.lambda);
  const auto g = contrastive_object(pair);

  Logits scores;
  scores.values.resize(pair.vocab_size());
  for (std::size_t i = 0; i < scores.values.size(); ++i) {
    const bool in_set =
        !opts.force_empty_constraint && local.verdicts[i] == Verdict::InSet;
    const double base = in_set ? pair.without_context[i] : pair.with_context[i];
    scores.values[i] = base + opts.alpha * g[i];
  }
  if (report) *report = std::move(local);
  return log_softmax(scores, 1.0);
}

/// CAD scores: (1+alpha) log p2 - alpha log p1, renormalized.
inline LogProbs cad_step(const StepPair& pair, double alpha) {
  pair.check();
  if (!(alpha >= 0.0)) throw InvalidParameter("cad_step: alpha must be >= 0");
  Logits scores;
  scores.values.resize(pair.vocab_size());
  for (std::size_t i = 0; i < scores.values.size(); ++i) {
    scores.values[i] = (1.0 + alpha) * pair.with_context[i] - alpha * pair.without_context[i];
  }
  return log_softmax(scores, 1.0);
}

/**
 * CD scores: g over the plausibility head of the source distribution,
 * -inf elsewhere, renormalized over the head. The head always contains the
 * source argmax, so it is never empty.
 */
inline LogProbs cd_step(const StepPair& pair, double plausibility,
                        PlausibilitySource source = PlausibilitySource::with_context) {
  pair.check();
  if (!(plausibility > 0.0) || plausibility > 1.0) {
    throw InvalidParameter("cd_step: plausibility must be in (0,1]");
  }
  const LogProbs& src =
      source == PlausibilitySource::with_context ? pair.with_context : pair.without_context;
  double max_p = 0.0;
  for (std::size_t i = 0; i < src.size(); ++i) max_p = std::max(max_p, std::exp(src[i]));
  const double threshold = plausibility * max_p;

  const auto g = contrastive_object(pair);
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  std::vector<double> scores(pair.vocab_size(), kNegInf);
  double m = kNegInf;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (within_lower(std::exp(src[i]), threshold)) {
      scores[i] = g[i];
      m = std::max(m, g[i]);
    }
  }
  double z = 0.0;
  for (double s : scores) {
    if (std::isfinite(s)) z += std::exp(s - m);
  }
  const double lse = m + std::log(z);
  for (double& s : scores) {
    if (std::isfinite(s)) s -= lse;
  }
  return LogProbs(std::move(scores));
}

namespace detail {

/// 53-bit uniform in [0,1), independent of library distribution internals.
inline double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline TokenId sample_from(const LogProbs& pi, const SamplerConfig& sampler, double temperature,
                           std::mt19937_64& rng) {
  if (temperature <= 0.0 || sampler.kind == SamplerKind::greedy) {
    return pi.argmax();
  }
  std::vector<TokenId> kept;
  switch (sampler.kind) {
    case SamplerKind::nucleus: kept = truncate_nucleus(pi, sampler.top_p); break;
    case SamplerKind::top_k:
      kept = truncate_top_k(pi, std::min<int>(sampler.k, static_cast<int>(pi.size())));
      break;
    case SamplerKind::typical: kept = truncate_typical(pi, sampler.tau); break;
    case SamplerKind::greedy: break;  // unreachable
  }
  // Renormalize over the kept set at the requested temperature.
  double m = -std::numeric_limits<double>::infinity();
  for (TokenId id : kept) m = std::max(m, pi[static_cast<std::size_t>(id)] / temperature);
  std::vector<double> w(kept.size());
  double z = 0.0;
  for (std::size_t i = 0; i < kept.size(); ++i) {
    w[i] = std::exp(pi[static_cast<std::size_t>(kept[i])] / temperature - m);
    z += w[i];
  }
  const double u = uniform01(rng) * z;
  double cum = 0.0;
  for (std::size_t i = 0; i < kept.size(); ++i) {
    cum += w[i];
    if (u < cum) return kept[i];
  }
  return kept.back();
}

}  // namespace detail

/// Prompt token sequences for one item, without and with context.
struct PromptPair {
  std::vector<TokenId> without_context;
  std::vector<TokenId> with_context;
};

struct DecodeResult {
  std::vector<TokenId> tokens;  // emitted tokens, EOS excluded
  DecodeTrace trace;            // one record per sampled step, EOS included
};

/**
 * Autoregressive loop: fetch the StepPair for the current prefixes, apply the
 * configured step op, sample, append the token to BOTH prefixes, stop at EOS
 * or max_new_tokens. Greedy runs are bit-reproducible; sampled runs are
 * reproducible for a fixed rng_seed.
 */
inline DecodeResult decode_sequence(model::DualContextModel& lm, const PromptPair& prompts,
                                    const DecoderConfig& config) {
  config.validate();
  DecodeResult result;
  std::vector<TokenId> without = prompts.without_context;
  std::vector<TokenId> with = prompts.with_context;
  std::mt19937_64 rng(config.rng_seed);

  for (int step = 0; step < config.max_new_tokens; ++step) {
    StepPair pair;
    try {
      pair.without_context = log_softmax(lm.next_logits(without), 1.0);
      pair.with_context = log_softmax(lm.next_logits(with), 1.0);
    } catch (const Error& e) {
      throw ModelError("adapter failure at step " + std::to_string(step) + ": " + e.what(),
                       step);
    }
    pair.check();

    const EntropyNats h1 = entropy(pair.without_context);
    const EntropyNats h2 = entropy(pair.with_context);
    // The constraint report doubles as a diagnostic for every method.
    ConstraintReport report = constraint_report(pair.with_context, h1, config.lambda);

    LogProbs pi;
    switch (config.method) {
      case Method::coiecd:
        pi = coiecd_step(pair, CoiecdOptions{config.lambda, config.alpha, false});
        break;
      case Method::cad: pi = cad_step(pair, config.alpha); break;
      case Method::cd:
        pi = cd_step(pair, config.cd_plausibility, config.cd_plausibility_source);
        break;
      case Method::regular:
      case Method::sc: pi = regular_step(pair); break;
    }

    const TokenId token = detail::sample_from(pi, config.sampler, config.temperature, rng);

    StepTrace t;
    t.token = token;
    t.h1 = h1.value;
    t.h2 = h2.value;
    t.info = information_content(pair.with_context, token);
    t.pdelta_of_token = report.pdelta.values[static_cast<std::size_t>(token)];
    t.upper = report.bounds.upper;
    t.lower = report.bounds.lower;
    t.verdict_counts = report.counts;
    t.log_prob = pi[static_cast<std::size_t>(token)];
    t.branch = config.method == Method::coiecd
                   ? (report.verdicts[static_cast<std::size_t>(token)] == Verdict::InSet
                          ? Branch::in_set
                          : Branch::out_of_set)
                   : Branch::not_applicable;
    result.trace.steps.push_back(t);

    if (token == lm.eos_id()) break;
    result.tokens.push_back(token);
    without.push_back(token);
    with.push_back(token);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Self-consistency
// ---------------------------------------------------------------------------

struct ScSample {
  std::string answer_raw;
  std::string answer_normalized;
  double seq_log_prob = 0.0;  // sum of log pi(token) over sampled steps
  std::vector<TokenId> tokens;
};

struct ScResult {
  std::string answer;  // normalized majority answer
  std::vector<ScSample> samples;
};

/**
 * Majority vote over normalized answers; ties break toward the answer whose
 * best sample has the highest summed sequence log-probability, then
 * lexicographically for full determinism.
 */
inline std::string sc_vote(const std::vector<ScSample>& samples) {
  if (samples.empty()) return "";
  std::map<std::string, std::pair<int, double>> tally;  // answer -> (votes, best log prob)
  for (const auto& s : samples) {
    auto [it, fresh] = tally.emplace(s.answer_normalized,
                                     std::make_pair(0, -std::numeric_limits<double>::infinity()));
    it->second.first += 1;
    it->second.second = std::max(it->second.second, s.seq_log_prob);
  }
  const std::string* best = nullptr;
  for (const auto& [answer, rec] : tally) {
    if (!best) {
      best = &answer;
      continue;
    }
    const auto& cur = tally.at(*best);
    if (rec.first > cur.first ||
        (rec.first == cur.first && rec.second > cur.second)) {
      best = &answer;
    }
  }
  return *best;
}

/**
 * SC baseline: sc_samples full-multinomial Regular generations at
 * sc_temperature, seeds rng_seed + sample index, majority vote on normalized
 * answer strings.
 */
inline ScResult sc_generate(model::DualContextModel& lm, const PromptPair& prompts,
                            const DecoderConfig& config) {
  config.validate();
  DecoderConfig sample_cfg = config;
  sample_cfg.method = Method::regular;
  sample_cfg.sampler.kind = SamplerKind::nucleus;
  sample_cfg.sampler.top_p = 1.0;  // full multinomial
  sample_cfg.temperature = config.sc_temperature;

  ScResult result;
  for (int i = 0; i < config.sc_samples; ++i) {
    sample_cfg.rng_seed = config.rng_seed + static_cast<std::uint64_t>(i);
    DecodeResult dec = decode_sequence(lm, prompts, sample_cfg);
    ScSample s;
    s.tokens = dec.tokens;
    s.answer_raw = lm.detokenize(dec.tokens);
    s.answer_normalized = eval::normalize_answer(s.answer_raw);
    for (const auto& st : dec.trace.steps) s.seq_log_prob += st.log_prob;
    result.samples.push_back(std::move(s));
  }
  result.answer = sc_vote(result.samples);
  return result;
}

}  // namespace coiecd::decode
