#pragma once

// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 COIECD Authors

// Shared test utilities: random distribution generators, independent
// brute-force truncation references, and builders for synthetic toy-model
// fixtures. Everything here is test-only and deliberately written without
// reusing the library's code paths where it serves as an oracle.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <unistd.h>
#include <vector>

#include <json.hpp>

#include "coiecd/dist.hpp"

namespace testutil {

using coiecd::LogProbs;
using coiecd::TokenId;

// ---------------------------------------------------------------------------
// Random distributions
// ---------------------------------------------------------------------------

inline LogProbs random_logprobs(std::mt19937_64& rng, std::size_t vocab,
                                double logit_spread = 8.0) {
  std::uniform_real_distribution<double> u(-logit_spread, logit_spread);
  std::vector<double> v(vocab);
  for (double& x : v) x = u(rng);
  const double m = *std::max_element(v.begin(), v.end());
  double z = 0.0;
  for (double x : v) z += std::exp(x - m);
  const double lse = m + std::log(z);
  for (double& x : v) x -= lse;
  return LogProbs(std::move(v));
}

inline std::size_t random_vocab(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(rng() % (hi - lo + 1));
}

// ---------------------------------------------------------------------------
// Brute-force truncation references (independent of the library paths)
// ---------------------------------------------------------------------------

inline std::vector<TokenId> ref_order_by_prob(const LogProbs& p) {
  std::vector<TokenId> ids(p.size());
  std::iota(ids.begin(), ids.end(), 0);
  std::stable_sort(ids.begin(), ids.end(), [&](TokenId a, TokenId b) {
    return p[static_cast<std::size_t>(a)] > p[static_cast<std::size_t>(b)];
  });  // stable sort on a pre-sorted-by-id range keeps id order within ties
  return ids;
}

inline std::vector<TokenId> ref_nucleus(const LogProbs& p, double top_p) {
  auto order = ref_order_by_prob(p);
  std::vector<TokenId> kept;
  double cum = 0.0;
  for (TokenId id : order) {
    kept.push_back(id);
    cum += std::exp(p[static_cast<std::size_t>(id)]);
    if (cum >= top_p) break;
  }
  std::sort(kept.begin(), kept.end());
  return kept;
}

inline std::vector<TokenId> ref_top_k(const LogProbs& p, int k) {
  auto order = ref_order_by_prob(p);
  order.resize(static_cast<std::size_t>(k));
  std::sort(order.begin(), order.end());
  return order;
}

inline std::vector<TokenId> ref_typical(const LogProbs& p, double tau) {
  double h = 0.0;
  for (double v : p.values()) {
    if (std::isfinite(v)) h -= std::exp(v) * v;
  }
  h = std::max(0.0, h);
  std::vector<TokenId> ids(p.size());
  std::iota(ids.begin(), ids.end(), 0);
  std::stable_sort(ids.begin(), ids.end(), [&](TokenId a, TokenId b) {
    return std::abs(-p[static_cast<std::size_t>(a)] - h) <
           std::abs(-p[static_cast<std::size_t>(b)] - h);
  });
  std::vector<TokenId> kept;
  double cum = 0.0;
  for (TokenId id : ids) {
    kept.push_back(id);
    cum += std::exp(p[static_cast<std::size_t>(id)]);
    if (cum >= tau) break;
  }
  std::sort(kept.begin(), kept.end());
  return kept;
}

// ---------------------------------------------------------------------------
// Temp directories
// ---------------------------------------------------------------------------

inline std::string fresh_temp_dir(const std::string& tag) {
  static std::atomic<int> counter{0};
  auto dir = std::filesystem::temp_directory_path() /
             ("coiecd_test_" + tag + "_" + std::to_string(::getpid()) + "_" +
              std::to_string(counter.fetch_add(1)));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir.string();
}

// ---------------------------------------------------------------------------
// Synthetic fixture builders
// ---------------------------------------------------------------------------

/// Accumulates a toy-model JSON file plus a matching dataset.
class WorldBuilder {
public:
  WorldBuilder() {
    for (const char* w : {"</s>", "<unk>", "question:", "context:", "answer:"}) token(w);
  }

  TokenId token(const std::string& word) {
    auto it = ids_.find(word);
    if (it != ids_.end()) return it->second;
    const auto id = static_cast<TokenId>(vocab_.size());
    vocab_.push_back(word);
    ids_.emplace(word, id);
    return id;
  }

  void row(const std::vector<std::string>& key_words,
           const std::vector<std::pair<std::string, double>>& probs) {
    std::string key;
    for (const auto& w : key_words) {
      if (!key.empty()) key.push_back(',');
      key += std::to_string(token(w));
    }
    pending_rows_.emplace_back(key, probs);
  }

  /// p1/p2 rows for an item under the default templates, plus one-token
  /// answers chained to EOS via unigram rows.
  void qa_item(const std::string& id, const std::string& q, const std::string& ctx,
               const std::string& gold, const std::vector<std::pair<std::string, double>>& p1,
               const std::vector<std::pair<std::string, double>>& p2) {
    row({"question:", q, "answer:"}, p1);
    row({"context:", ctx, "answer:"}, p2);
    for (const auto& [tok, _] : p1) row({tok}, {{"</s>", 1.0}});
    for (const auto& [tok, _] : p2) row({tok}, {{"</s>", 1.0}});
    items_.push_back({id, q, ctx, {gold}});
  }

  void item_only(const std::string& id, const std::string& q, const std::string& ctx,
                 const std::vector<std::string>& golds) {
    items_.push_back({id, q, ctx, golds});
  }

  nlohmann::json model_json(const std::string& name) const {
    const std::size_t v = vocab_.size();
    nlohmann::json transitions = nlohmann::json::object();
    for (const auto& [key, probs] : pending_rows_) {
      std::vector<double> full(v, 0.0);
      for (const auto& [word, p] : probs) full[static_cast<std::size_t>(ids_.at(word))] = p;
      transitions[key] = full;
    }
    return {{"name", name},
            {"vocab", vocab_},
            {"order", 3},
            {"transitions", transitions},
            {"fallback", std::vector<double>(v, 1.0 / static_cast<double>(v))}};
  }

  void write(const std::string& dir, const std::string& name = "world") const {
    {
      std::ofstream f(std::filesystem::path(dir) / "model.json");
      f << model_json(name).dump(1) << "\n";
    }
    std::ofstream f(std::filesystem::path(dir) / "qa.jsonl");
    for (const auto& item : items_) {
      f << nlohmann::json{{"id", item.id},
                          {"question", item.question},
                          {"context", item.context},
                          {"answers", item.golds}}
               .dump()
        << "\n";
    }
  }

  struct Item {
    std::string id;
    std::string question;
    std::string context;
    std::vector<std::string> golds;
  };
  const std::vector<Item>& items() const { return items_; }

private:
  std::vector<std::string> vocab_;
  std::map<std::string, TokenId> ids_;
  std::vector<std::pair<std::string, std::vector<std::pair<std::string, double>>>> pending_rows_;
  std::vector<Item> items_;
};

/**
 * The directional benchmark: n_conf conflict items (parametric answer wins
 * under p2, so Regular fails and contrast-based methods recover the context
 * answer), n_hard non-conflict items (confident p2 with a context distractor
 * that flips CAD), and n_easy non-conflict items where every method agrees.
 */
inline WorldBuilder make_benchmark(int n_conf, int n_hard, int n_easy, std::uint64_t seed) {
  WorldBuilder w;
  std::mt19937_64 rng(seed);
  auto uni = [&](double lo, double hi) {
    return lo + (hi - lo) * (static_cast<double>(rng() >> 11) * 0x1.0p-53);
  };
  int n = 0;
  for (int i = 0; i < n_conf; ++i, ++n) {
    const std::string tag = std::to_string(n);
    const std::string q = "q" + tag, ev = "e" + tag, right = "a" + tag, wrong = "b" + tag;
    const double p1w = uni(0.7, 0.9);
    const double p2w = uni(0.52, 0.56);
    w.qa_item("conf-" + tag, q, ev, right, {{wrong, p1w}, {right, 1.0 - p1w}},
              {{wrong, p2w}, {right, 1.0 - p2w}});
  }
  for (int i = 0; i < n_hard; ++i, ++n) {
    const std::string tag = std::to_string(n);
    const std::string q = "q" + tag, ev = "e" + tag, right = "a" + tag, distractor = "b" + tag;
    const double p2r = uni(0.81, 0.82);
    w.qa_item("hard-" + tag, q, ev, right, {{right, 0.96}, {distractor, 0.04}},
              {{right, p2r}, {distractor, 1.0 - p2r}});
  }
  for (int i = 0; i < n_easy; ++i, ++n) {
    const std::string tag = std::to_string(n);
    const std::string q = "q" + tag, ev = "e" + tag, right = "a" + tag, distractor = "b" + tag;
    w.qa_item("easy-" + tag, q, ev, right, {{right, 0.9}, {distractor, 0.1}},
              {{right, 0.9}, {distractor, 0.1}});
  }
  return w;
}

/**
 * Ten items with scripted closed-book generations hitting exact F1 levels:
 * 1.0, 0.0, 2/3, 0.5 (the boundary) and 0.4 — two of each.
 */
inline WorldBuilder make_partition_fixture() {
  WorldBuilder w;
  // Shared pad chains, one pad alphabet per F1 level so items stay independent.
  w.row({"padC"}, {{"</s>", 1.0}});
  w.row({"padD1"}, {{"padD2", 1.0}});
  w.row({"padD2"}, {{"</s>", 1.0}});
  w.row({"padE1"}, {{"padE2", 1.0}});
  w.row({"padE2"}, {{"padE3", 1.0}});
  w.row({"padE3"}, {{"</s>", 1.0}});
  w.row({"wrongtok"}, {{"</s>", 1.0}});
  int n = 0;
  auto add = [&](const std::string& kind, const std::string& first_pad) {
    for (int i = 0; i < 2; ++i, ++n) {
      const std::string q = "q" + std::to_string(n);
      const std::string gold = "g" + std::to_string(n);
      if (kind == "A") {  // f1 = 1.0: emits exactly the gold token
        w.row({"question:", q, "answer:"}, {{gold, 1.0}});
        w.row({gold}, {{"</s>", 1.0}});
      } else if (kind == "B") {  // f1 = 0.0: emits an unrelated token
        w.token(gold);
        w.row({"question:", q, "answer:"}, {{"wrongtok", 1.0}});
      } else {  // gold token followed by pad tokens: f1 = 2/3, 0.5 or 0.4
        w.row({"question:", q, "answer:"}, {{gold, 1.0}});
        w.row({gold}, {{first_pad, 1.0}});
      }
      w.item_only(kind + "-" + std::to_string(n), q, "ctx", {gold});
    }
  };
  add("A", "");
  add("B", "");
  add("C", "padC");
  add("D", "padD1");
  add("E", "padE1");
  return w;
}

}  // namespace testutil
