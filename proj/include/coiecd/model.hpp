#pragma once

// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 COIECD Authors

/**
 * @file model.hpp
 * @brief Dual-context model interface, table-based toy LM and prefix cache.
 *
 * Every decoding strategy here needs two next-token distributions for the
 * same generation prefix: one conditioned on the context, one without it.
 * The adapter interface only deals in token sequences; prompt construction
 * is the harness's job.
 *
 * The toy LM is a deterministic n-gram table (order <= 3, longest-suffix
 * backoff to a unigram fallback) loaded from a human-authorable JSON file:
 *
 *   {
 *     "vocab": ["</s>", "<unk>", "question:", ...],
 *     "order": 3,
 *     "transitions": { "2,5,4": [0.0, 0.0, ...], ... },   // key = last token ids
 *     "fallback": [ ... ]                                  // unigram row
 *   }
 *
 * Optional keys: "eos" (token string, default "</s>"), "unk" (default
 * "<unk>"), "name". Every row must have vocab_size entries summing to 1.
 */

#include <cstdint>
#include <fstream>
#include <list>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "coiecd/dist.hpp"
#include "coiecd/errors.hpp"

namespace coiecd::model {

/// Abstraction over a language model queried with and without context.
class DualContextModel {
public:
  virtual ~DualContextModel() = default;

  virtual int vocab_size() const = 0;
  virtual TokenId eos_id() const = 0;
  virtual std::string name() const = 0;

  /// Next-token scores for the given prefix; length must equal vocab_size().
  virtual Logits next_logits(const std::vector<TokenId>& tokens) = 0;

  virtual std::vector<TokenId> tokenize(const std::string& text) = 0;
  virtual std::string detokenize(const std::vector<TokenId>& tokens) = 0;
};

/**
 * Deterministic table-based LM over a whitespace-token vocabulary.
 * Immutable after load; safe for unrestricted concurrent reads.
 */
class ToyTableLM final : public DualContextModel {
public:
  int vocab_size() const override { return static_cast<int>(vocab_.size()); }
  TokenId eos_id() const override { return eos_id_; }
  std::string name() const override { return name_; }

  Logits next_logits(const std::vector<TokenId>& tokens) override {
    for (TokenId t : tokens) {
      if (t < 0 || t >= vocab_size()) {
        throw IndexError("toy model: token id " + std::to_string(t) + " out of range");
      }
    }
    const std::vector<double>* row = &fallback_;
    // Longest matching suffix key wins (order, order-1, ..., 1).
    const std::size_t max_n = std::min(tokens.size(), static_cast<std::size_t>(order_));
    for (std::size_t n = max_n; n >= 1; --n) {
      const std::string key = suffix_key(tokens, n);
      auto it = transitions_.find(key);
      if (it != transitions_.end()) {
        row = &it->second;
        break;
      }
    }
    Logits out;
    out.values.resize(row->size());
    for (std::size_t i = 0; i < row->size(); ++i) {
      out.values[i] = std::log(std::max((*row)[i], kProbFloor));
    }
    return out;
  }

  std::vector<TokenId> tokenize(const std::string& text) override {
    std::istringstream in(text);
    std::vector<TokenId> out;
    std::string word;
    while (in >> word) {
      auto it = token_ids_.find(word);
      if (it != token_ids_.end()) {
        out.push_back(it->second);
      } else if (unk_id_ >= 0) {
        out.push_back(unk_id_);
      } else {
        throw ModelError("toy model: token '" + word + "' not in vocab and no unk token");
      }
    }
    return out;
  }

  std::string detokenize(const std::vector<TokenId>& tokens) override {
    std::string out;
    for (TokenId t : tokens) {
      if (t < 0 || t >= vocab_size()) {
        throw IndexError("toy model: token id " + std::to_string(t) + " out of range");
      }
      if (!out.empty()) out.push_back(' ');
      out += vocab_[static_cast<std::size_t>(t)];
    }
    return out;
  }

  const std::vector<std::string>& vocab() const { return vocab_; }

private:
  friend ToyTableLM load_toy_model(const std::string& path);

  static std::string suffix_key(const std::vector<TokenId>& tokens, std::size_t n) {
    std::string key;
    for (std::size_t i = tokens.size() - n; i < tokens.size(); ++i) {
      if (!key.empty()) key.push_back(',');
      key += std::to_string(tokens[i]);
    }
    return key;
  }

  std::vector<std::string> vocab_;
  std::unordered_map<std::string, TokenId> token_ids_;
  std::unordered_map<std::string, std::vector<double>> transitions_;
  std::vector<double> fallback_;
  int order_ = 1;
  TokenId eos_id_ = 0;
  TokenId unk_id_ = -1;
  std::string name_;
};

/**
 * Loads and fully validates a toy model file.
 *
 * @throws LoadError naming the offending key/row on any schema violation.
 */
inline ToyTableLM load_toy_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("toy model: cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("toy model: invalid JSON in " + path + ": " + e.what());
  }
  for (const char* key : {"vocab", "order", "transitions", "fallback"}) {
    if (!j.contains(key)) throw LoadError("toy model: missing key '" + std::string(key) + "'");
  }

  ToyTableLM m;
  m.vocab_ = j.at("vocab").get<std::vector<std::string>>();
  if (m.vocab_.empty()) throw LoadError("toy model: empty vocab");
  for (std::size_t i = 0; i < m.vocab_.size(); ++i) {
    const std::string& w = m.vocab_[i];
    if (w.empty() || w.find_first_of(" \t\n") != std::string::npos) {
      throw LoadError("toy model: vocab entry " + std::to_string(i) + " is empty or has whitespace");
    }
    if (!m.token_ids_.emplace(w, static_cast<TokenId>(i)).second) {
      throw LoadError("toy model: duplicate vocab entry '" + w + "'");
    }
  }
  const std::size_t vsize = m.vocab_.size();

  m.order_ = j.at("order").get<int>();
  if (m.order_ < 1 || m.order_ > 3) {
    throw LoadError("toy model: order must be in [1,3], got " + std::to_string(m.order_));
  }

  auto check_row = [&](const std::vector<double>& row, const std::string& what) {
    if (row.size() != vsize) {
      throw LoadError("toy model: " + what + " has " + std::to_string(row.size()) +
                      " entries, expected " + std::to_string(vsize));
    }
    double sum = 0.0;
    for (double v : row) {
      if (!(v >= 0.0)) throw LoadError("toy model: " + what + " has a negative or NaN entry");
      sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-9) {
      throw LoadError("toy model: " + what + " sums to " + std::to_string(sum) + ", expected 1");
    }
  };

  for (const auto& [key, value] : j.at("transitions").items()) {
    std::vector<TokenId> ids;
    std::stringstream ss(key);
    std::string part;
    while (std::getline(ss, part, ',')) {
      try {
        ids.push_back(static_cast<TokenId>(std::stol(part)));
      } catch (const std::exception&) {
        throw LoadError("toy model: malformed transition key '" + key + "'");
      }
    }
    if (ids.empty() || ids.size() > static_cast<std::size_t>(m.order_)) {
      throw LoadError("toy model: transition key '" + key + "' length exceeds order");
    }
    for (TokenId t : ids) {
      if (t < 0 || static_cast<std::size_t>(t) >= vsize) {
        throw LoadError("toy model: transition key '" + key + "' has out-of-range id");
      }
    }
    auto row = value.get<std::vector<double>>();
    check_row(row, "transition row '" + key + "'");
    m.transitions_.emplace(key, std::move(row));
  }

  m.fallback_ = j.at("fallback").get<std::vector<double>>();
  check_row(m.fallback_, "fallback row");

  const std::string eos = j.value("eos", std::string("</s>"));
  auto eos_it = m.token_ids_.find(eos);
  if (eos_it == m.token_ids_.end()) {
    throw LoadError("toy model: eos token '" + eos + "' not in vocab");
  }
  m.eos_id_ = eos_it->second;

  const std::string unk = j.value("unk", std::string("<unk>"));
  auto unk_it = m.token_ids_.find(unk);
  m.unk_id_ = unk_it == m.token_ids_.end() ? TokenId{-1} : unk_it->second;

  std::string stem = path;
  if (auto slash = stem.find_last_of('/'); slash != std::string::npos) stem = stem.substr(slash + 1);
  if (auto dot = stem.find_last_of('.'); dot != std::string::npos) stem = stem.substr(0, dot);
  m.name_ = j.value("name", stem);
  return m;
}

/**
 * Bounded LRU map from token sequence to a score vector. Guarded for
 * concurrent use; concurrent writers race benignly (values for the same key
 * are identical by adapter determinism).
 */
class PrefixCache {
public:
  explicit PrefixCache(std::size_t capacity) : capacity_(capacity) {
    if (capacity_ == 0) throw InvalidParameter("PrefixCache: capacity must be positive");
  }

  std::optional<std::vector<double>> get(const std::vector<TokenId>& key) {
    std::lock_guard<std::mutex> lock(mu_);
    auto it = index_.find(key);
    if (it == index_.end()) return std::nullopt;
    order_.splice(order_.begin(), order_, it->second);
    return it->second->second;
  }

  void put(const std::vector<TokenId>& key, std::vector<double> value) {
    std::lock_guard<std::mutex> lock(mu_);
    auto it = index_.find(key);
    if (it != index_.end()) {
      it->second->second = std::move(value);  // last writer wins
      order_.splice(order_.begin(), order_, it->second);
      return;
    }
    order_.emplace_front(key, std::move(value));
    index_[key] = order_.begin();
    if (order_.size() > capacity_) {
      index_.erase(order_.back().first);
      order_.pop_back();
    }
  }

  std::size_t size() const {
    std::lock_guard<std::mutex> lock(mu_);
    return order_.size();
  }

private:
  struct KeyHash {
    std::size_t operator()(const std::vector<TokenId>& key) const {
      std::size_t h = 1469598103934665603ull;  // FNV-1a
      for (TokenId t : key) {
        h ^= static_cast<std::size_t>(static_cast<std::uint32_t>(t));
        h *= 1099511628211ull;
      }
      return h;
    }
  };

  using Entry = std::pair<std::vector<TokenId>, std::vector<double>>;
  std::size_t capacity_;
  mutable std::mutex mu_;
  std::list<Entry> order_;
  std::unordered_map<std::vector<TokenId>, typename std::list<Entry>::iterator, KeyHash> index_;
};

/// Transparent caching wrapper: identical outputs with the cache on or off.
class CachingModel final : public DualContextModel {
public:
  CachingModel(DualContextModel& inner, std::size_t capacity)
      : inner_(inner), cache_(capacity) {}

  int vocab_size() const override { return inner_.vocab_size(); }
  TokenId eos_id() const override { return inner_.eos_id(); }
  std::string name() const override { return inner_.name(); }

  Logits next_logits(const std::vector<TokenId>& tokens) override {
    if (auto hit = cache_.get(tokens)) return Logits{std::move(*hit)};
    Logits fresh = inner_.next_logits(tokens);
    cache_.put(tokens, fresh.values);
    return fresh;
  }

  std::vector<TokenId> tokenize(const std::string& text) override { return inner_.tokenize(text); }
  std::string detokenize(const std::vector<TokenId>& tokens) override {
    return inner_.detokenize(tokens);
  }

private:
  DualContextModel& inner_;
  PrefixCache cache_;
};

}  // namespace coiecd::model
