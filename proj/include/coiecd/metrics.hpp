#pragma once

// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 COIECD Authors

/**
 * @file metrics.hpp
 * @brief SQuAD-style answer normalization, EM/F1 and boolean accuracy.
 */

#include <algorithm>
#include <cctype>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace coiecd::eval {

/**
 * SQuAD normalization: lowercase, strip punctuation, drop the articles
 * a/an/the, collapse whitespace.
 */
inline std::string normalize_answer(std::string_view text) {
  std::string lowered;
  lowered.reserve(text.size());
  for (char c : text) {
    const auto uc = static_cast<unsigned char>(c);
    if (std::ispunct(uc)) continue;
    lowered.push_back(static_cast<char>(std::tolower(uc)));
  }
  std::istringstream in(lowered);
  std::string word;
  std::string out;
  while (in >> word) {
    if (word == "a" || word == "an" || word == "the") continue;
    if (!out.empty()) out.push_back(' ');
    out += word;
  }
  return out;
}

inline std::vector<std::string> answer_tokens(std::string_view text) {
  std::istringstream in(normalize_answer(text));
  std::vector<std::string> tokens;
  std::string word;
  while (in >> word) tokens.push_back(word);
  return tokens;
}

struct EmF1 {
  int em = 0;      // 1 iff normalized prediction equals some normalized gold
  double f1 = 0.0; // max bag-of-tokens F1 over golds
};

namespace detail {

inline double token_f1(const std::vector<std::string>& pred,
                       const std::vector<std::string>& gold) {
  if (pred.empty() || gold.empty()) {
    // Both empty counts as agreement.
    return pred.empty() && gold.empty() ? 1.0 : 0.0;
  }
  std::map<std::string, int> gold_counts;
  for (const auto& t : gold) ++gold_counts[t];
  int overlap = 0;
  for (const auto& t : pred) {
    auto it = gold_counts.find(t);
    if (it != gold_counts.end() && it->second > 0) {
      --it->second;
      ++overlap;
    }
  }
  if (overlap == 0) return 0.0;
  const double precision = static_cast<double>(overlap) / static_cast<double>(pred.size());
  const double recall = static_cast<double>(overlap) / static_cast<double>(gold.size());
  return 2.0 * precision * recall / (precision + recall);
}

}  // namespace detail

/// EM and F1 of a prediction against one or more reference answers
/// (max over references, SQuAD convention).
inline EmF1 em_f1(std::string_view prediction, const std::vector<std::string>& golds) {
  const std::string norm_pred = normalize_answer(prediction);
  const auto pred_tokens = answer_tokens(prediction);
  EmF1 r;
  for (const auto& gold : golds) {
    if (normalize_answer(gold) == norm_pred) r.em = 1;
    r.f1 = std::max(r.f1, detail::token_f1(pred_tokens, answer_tokens(gold)));
  }
  if (r.em == 1) r.f1 = 1.0;
  return r;
}

/**
 * Binary accuracy: 1 iff the normalized prediction starts with the gold
 * truth-word, after mapping a leading yes/no to true/false.
 */
inline int accuracy_boolean(std::string_view prediction, const std::vector<std::string>& golds) {
  std::string pred = normalize_answer(prediction);
  if (pred.rfind("yes", 0) == 0 && (pred.size() == 3 || pred[3] == ' ')) {
    pred = "true" + pred.substr(3);
  } else if (pred.rfind("no", 0) == 0 && (pred.size() == 2 || pred[2] == ' ')) {
    pred = "false" + pred.substr(2);
  }
  for (const auto& gold : golds) {
    std::string g = normalize_answer(gold);
    if (g == "yes") g = "true";
    if (g == "no") g = "false";
    if (!g.empty() && pred.rfind(g, 0) == 0) return 1;
  }
  return 0;
}

}  // namespace coiecd::eval
