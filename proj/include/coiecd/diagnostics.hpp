#pragma once

// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 COIECD Authors

/**
 * @file diagnostics.hpp
 * @brief Entropy-stability and constraint-violation analytics over decode
 *        traces. Emits CSV for external plotting; no rendering here.
 */

#include <cmath>
#include <cstddef>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "coiecd/decoding.hpp"
#include "coiecd/errors.hpp"

namespace coiecd::diag {

/**
 * Centered moving average with edge truncation: the window shrinks at the
 * boundaries instead of padding. For window w the span at index i is
 * [i - (w-1)/2, i + w/2] clipped to the series.
 */
inline std::vector<double> smooth_entropy(std::span<const double> series, int window) {
  if (window < 1) throw InvalidParameter("smooth_entropy: window must be >= 1");
  std::vector<double> out(series.size());
  const std::ptrdiff_t left = (window - 1) / 2;
  const std::ptrdiff_t right = window / 2;
  const auto n = static_cast<std::ptrdiff_t>(series.size());
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, i - left);
    const std::ptrdiff_t hi = std::min(n - 1, i + right);
    double sum = 0.0;
    for (std::ptrdiff_t j = lo; j <= hi; ++j) sum += series[static_cast<std::size_t>(j)];
    out[static_cast<std::size_t>(i)] = sum / static_cast<double>(hi - lo + 1);
  }
  return out;
}

/// Population standard deviation of the smoothed series.
inline double entropy_std(std::span<const double> series, int window) {
  if (series.empty()) return 0.0;
  const auto smoothed = smooth_entropy(series, window);
  double mean = 0.0;
  for (double v : smoothed) mean += v;
  mean /= static_cast<double>(smoothed.size());
  double var = 0.0;
  for (double v : smoothed) var += (v - mean) * (v - mean);
  var /= static_cast<double>(smoothed.size());
  return std::sqrt(var);
}

/// Per-step entropy shift H2 - H1 and information-entropy shift I - H1 of
/// the sampled token.
struct ShiftSeries {
  std::vector<double> entropy_shift;
  std::vector<double> info_entropy_shift;
};

inline ShiftSeries shift_series(const decode::DecodeTrace& trace) {
  ShiftSeries s;
  s.entropy_shift.reserve(trace.steps.size());
  s.info_entropy_shift.reserve(trace.steps.size());
  for (const auto& step : trace.steps) {
    s.entropy_shift.push_back(step.h2 - step.h1);
    s.info_entropy_shift.push_back(step.info - step.h1);
  }
  return s;
}

inline std::vector<double> h2_series(const decode::DecodeTrace& trace) {
  std::vector<double> out;
  out.reserve(trace.steps.size());
  for (const auto& step : trace.steps) out.push_back(step.h2);
  return out;
}

/// One labeled generation to analyze.
struct TracedSequence {
  std::string id;
  std::string label;  // e.g. Conf / NonConf; free-form
  decode::DecodeTrace trace;
};

struct SequenceStats {
  std::string id;
  std::string label;
  double std_smoothed_entropy = 0.0;
  double mean_h2 = 0.0;
  double in_set_rate = 0.0;  // mean over steps of verdict fractions
  double lower_rate = 0.0;
  double upper_rate = 0.0;
};

struct CorpusStats {
  std::string label;  // empty = all sequences
  std::size_t sequences = 0;
  double in_set_rate = 0.0;
  double lower_rate = 0.0;
  double upper_rate = 0.0;
  double mean_std_smoothed_entropy = 0.0;
};

struct ViolationSummary {
  std::vector<SequenceStats> sequences;
  std::vector<CorpusStats> corpora;  // one per distinct label plus an overall row
};

/**
 * Per-sequence and corpus-level violation rates. A step's rates are its
 * verdict counts divided by the vocabulary size, so each step's (and hence
 * each sequence's) rates sum to 1; corpus rates average over sequences.
 */
inline ViolationSummary violation_summary(const std::vector<TracedSequence>& traces,
                                          int smoothing_window = 5) {
  ViolationSummary out;
  for (const auto& ts : traces) {
    SequenceStats s;
    s.id = ts.id;
    s.label = ts.label;
    const auto h2 = h2_series(ts.trace);
    s.std_smoothed_entropy = entropy_std(h2, smoothing_window);
    for (double v : h2) s.mean_h2 += v;
    if (!h2.empty()) s.mean_h2 /= static_cast<double>(h2.size());
    for (const auto& step : ts.trace.steps) {
      const double v = static_cast<double>(step.verdict_counts.total());
      if (v <= 0) continue;
      s.in_set_rate += static_cast<double>(step.verdict_counts.in_set) / v;
      s.lower_rate += static_cast<double>(step.verdict_counts.lower) / v;
      s.upper_rate += static_cast<double>(step.verdict_counts.upper) / v;
    }
    if (!ts.trace.steps.empty()) {
      const auto n = static_cast<double>(ts.trace.steps.size());
      s.in_set_rate /= n;
      s.lower_rate /= n;
      s.upper_rate /= n;
    }
    out.sequences.push_back(std::move(s));
  }

  std::map<std::string, std::vector<const SequenceStats*>> by_label;
  for (const auto& s : out.sequences) {
    by_label[s.label].push_back(&s);
    by_label[""].push_back(&s);  // overall row
  }
  for (const auto& [label, seqs] : by_label) {
    CorpusStats c;
    c.label = label;
    c.sequences = seqs.size();
    for (const auto* s : seqs) {
      c.in_set_rate += s->in_set_rate;
      c.lower_rate += s->lower_rate;
      c.upper_rate += s->upper_rate;
      c.mean_std_smoothed_entropy += s->std_smoothed_entropy;
    }
    const auto n = static_cast<double>(seqs.size());
    if (n > 0) {
      c.in_set_rate /= n;
      c.lower_rate /= n;
      c.upper_rate /= n;
      c.mean_std_smoothed_entropy /= n;
    }
    out.corpora.push_back(std::move(c));
  }
  return out;
}

/// CSV export, one row per sequence.
inline void write_diagnostics_csv(const ViolationSummary& summary, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path + " for writing");
  out << "id,label,std_smoothed_entropy,mean_h2,lower_rate,upper_rate\n";
  out.precision(17);
  for (const auto& s : summary.sequences) {
    out << s.id << ',' << s.label << ',' << s.std_smoothed_entropy << ',' << s.mean_h2 << ','
        << s.lower_rate << ',' << s.upper_rate << "\n";
  }
}

}  // namespace coiecd::diag
