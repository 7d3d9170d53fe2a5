#pragma once

// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 COIECD Authors

/**
 * @file harness.hpp
 * @brief Experiment runner: prompt templating, posteriori conflict
 *        partitioning, conflict-ratio mixing, scoring and run persistence.
 *
 * Run directory layout:
 *   config.json    resolved configuration (written by the caller's blob)
 *   records.jsonl  one record per (item, method); timing_ms is the only
 *                  nondeterministic field
 *   summary.json   per-method aggregates over Total/Conf/NonConf plus
 *                  per-ratio curves when requested
 *   traces/        optional per-item step traces (JSONL)
 */

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "coiecd/dataset.hpp"
#include "coiecd/decoding.hpp"
#include "coiecd/errors.hpp"
#include "coiecd/metrics.hpp"
#include "coiecd/model.hpp"

namespace coiecd::eval {

// ---------------------------------------------------------------------------
// Prompt templates
// ---------------------------------------------------------------------------

/// Two fixed templates; the hash is recorded in run metadata and keys the
/// partition cache.
struct PromptTemplates {
  std::string with_context = "question: {question} context: {context} answer:";
  std::string question_only = "question: {question} answer:";

  static std::string render(std::string tmpl, const QAItem& item) {
    auto replace_all = [](std::string& s, const std::string& from, const std::string& to) {
      std::size_t pos = 0;
      while ((pos = s.find(from, pos)) != std::string::npos) {
        s.replace(pos, from.size(), to);
        pos += to.size();
      }
    };
    replace_all(tmpl, "{question}", item.question);
    replace_all(tmpl, "{context}", item.context);
    return tmpl;
  }

  std::uint64_t hash() const {
    std::uint64_t h = 1469598103934665603ull;  // FNV-1a
    auto mix = [&h](const std::string& s) {
      for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
      }
      h ^= 0x1f;
      h *= 1099511628211ull;
    };
    mix(with_context);
    mix(question_only);
    return h;
  }

  decode::PromptPair prompts_for(model::DualContextModel& lm, const QAItem& item) const {
    decode::PromptPair p;
    p.without_context = lm.tokenize(render(question_only, item));
    p.with_context = lm.tokenize(render(with_context, item));
    return p;
  }

  /// Closed-book prompts: both sides question-only.
  decode::PromptPair closed_book_prompts(model::DualContextModel& lm, const QAItem& item) const {
    decode::PromptPair p;
    p.without_context = lm.tokenize(render(question_only, item));
    p.with_context = p.without_context;
    return p;
  }
};

// ---------------------------------------------------------------------------
// Scoring
// ---------------------------------------------------------------------------

struct Score {
  int em = 0;
  double f1 = 0.0;
};

/// Task-aware scoring: bag-of-token EM/F1 for extractive items, accuracy for
/// boolean items (reported in both fields).
inline Score score_prediction(const std::string& prediction, const QAItem& item) {
  if (item.task_type == TaskType::boolean_answer) {
    const int acc = accuracy_boolean(prediction, item.gold_answers);
    return Score{acc, static_cast<double>(acc)};
  }
  const EmF1 r = em_f1(prediction, item.gold_answers);
  return Score{r.em, r.f1};
}

// ---------------------------------------------------------------------------
// Posteriori conflict partitioning
// ---------------------------------------------------------------------------

struct ConflictLabel {
  enum class Label : std::uint8_t { Conf, NonConf };
  Label label = Label::Conf;
  double closed_book_f1 = 0.0;
  std::string closed_book_prediction;

  bool is_conf() const { return label == Label::Conf; }
};

inline const char* to_string(ConflictLabel::Label label) {
  return label == ConflictLabel::Label::Conf ? "Conf" : "NonConf";
}

struct PartitionConfig {
  PromptTemplates templates;
  int max_new_tokens = 16;
  std::string cache_path;  // empty disables the on-disk cache
};

namespace detail {

inline ConflictLabel label_from_f1(double f1, std::string prediction) {
  ConflictLabel l;
  l.closed_book_f1 = f1;
  l.closed_book_prediction = std::move(prediction);
  // F1 >= 0.5 proxies "the model already knows this" (boundary inclusive).
  l.label = f1 >= 0.5 ? ConflictLabel::Label::NonConf : ConflictLabel::Label::Conf;
  return l;
}

}  // namespace detail

/**
 * Labels each item Conf/NonConf by decoding WITHOUT context (Regular, greedy)
 * and thresholding closed-book F1 at 0.5. Results are cached on disk keyed by
 * (model name, item id, template hash); a corrupt cache is rebuilt with a
 * warning on stderr.
 */
inline std::map<std::string, ConflictLabel> partition_conflicts(
    model::DualContextModel& lm, const std::vector<QAItem>& items, const PartitionConfig& config) {
  nlohmann::json cache;
  bool cache_valid = false;
  if (!config.cache_path.empty() && std::filesystem::exists(config.cache_path)) {
    try {
      std::ifstream in(config.cache_path);
      in >> cache;
      cache_valid = cache.at("model").get<std::string>() == lm.name() &&
                    cache.at("template_hash").get<std::uint64_t>() == config.templates.hash() &&
                    cache.at("labels").is_object();
    } catch (const std::exception& e) {
      std::cerr << "warning: partition cache " << config.cache_path
                << " is corrupt, rebuilding (" << e.what() << ")\n";
      cache_valid = false;
    }
  }

  std::map<std::string, ConflictLabel> labels;
  bool updated = false;
  for (const auto& item : items) {
    if (cache_valid && cache["labels"].contains(item.id)) {
      const auto& c = cache["labels"][item.id];
      try {
        ConflictLabel l = detail::label_from_f1(c.at("closed_book_f1").get<double>(),
                                                c.value("prediction", std::string{}));
        labels.emplace(item.id, l);
        continue;
      } catch (const std::exception&) {
        // fall through to recompute this item
      }
    }
    decode::DecoderConfig cb;
    cb.method = decode::Method::regular;
    cb.max_new_tokens = config.max_new_tokens;
    const auto prompts = config.templates.closed_book_prompts(lm, item);
    const auto result = decode::decode_sequence(lm, prompts, cb);
    const std::string prediction = lm.detokenize(result.tokens);
    labels.emplace(item.id, detail::label_from_f1(score_prediction(prediction, item).f1,
                                                  prediction));
    updated = true;
  }

  if (!config.cache_path.empty() && (updated || !cache_valid)) {
    nlohmann::json out;
    out["model"] = lm.name();
    out["template_hash"] = config.templates.hash();
    out["labels"] = nlohmann::json::object();
    for (const auto& [id, l] : labels) {
      out["labels"][id] = {{"label", to_string(l.label)},
                           {"closed_book_f1", l.closed_book_f1},
                           {"prediction", l.closed_book_prediction}};
    }
    std::filesystem::path p(config.cache_path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream o(config.cache_path);
    o << out.dump(2) << "\n";
  }
  return labels;
}

// ---------------------------------------------------------------------------
// Conflict-ratio mixing
// ---------------------------------------------------------------------------

namespace detail {

/// Portable deterministic Fisher-Yates (library shuffle is impl-defined).
template <typename T>
void seeded_shuffle(std::vector<T>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace detail

/**
 * Deterministic seeded sample of n items with exactly round(ratio * n) Conf
 * entries.
 *
 * @throws SamplingError with the available counts when a label pool is too
 *         small or an item has no label.
 */
inline std::vector<QAItem> mix_ratio(const std::vector<QAItem>& items,
                                     const std::map<std::string, ConflictLabel>& labels,
                                     double ratio, std::size_t n, std::uint64_t seed) {
  if (!(ratio >= 0.0) || ratio > 1.0) {
    throw InvalidParameter("mix_ratio: ratio must be in [0,1], got " + std::to_string(ratio));
  }
  std::vector<QAItem> conf;
  std::vector<QAItem> nonconf;
  for (const auto& item : items) {
    auto it = labels.find(item.id);
    if (it == labels.end()) {
      throw SamplingError("mix_ratio: item '" + item.id + "' has no conflict label");
    }
    (it->second.is_conf() ? conf : nonconf).push_back(item);
  }
  const std::size_t want_conf = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n)));
  const std::size_t want_nonconf = n - want_conf;
  if (want_conf > conf.size() || want_nonconf > nonconf.size()) {
    throw SamplingError("mix_ratio: need " + std::to_string(want_conf) + " Conf and " +
                        std::to_string(want_nonconf) + " NonConf items, have " +
                        std::to_string(conf.size()) + " and " + std::to_string(nonconf.size()));
  }
  std::mt19937_64 rng(seed);
  detail::seeded_shuffle(conf, rng);
  detail::seeded_shuffle(nonconf, rng);
  std::vector<QAItem> out(conf.begin(), conf.begin() + static_cast<std::ptrdiff_t>(want_conf));
  out.insert(out.end(), nonconf.begin(), nonconf.begin() + static_cast<std::ptrdiff_t>(want_nonconf));
  detail::seeded_shuffle(out, rng);
  return out;
}

// ---------------------------------------------------------------------------
// Experiment runner
// ---------------------------------------------------------------------------

inline const char* to_string(decode::Method m) {
  switch (m) {
    case decode::Method::regular: return "regular";
    case decode::Method::coiecd: return "coiecd";
    case decode::Method::cd: return "cd";
    case decode::Method::cad: return "cad";
    case decode::Method::sc: return "sc";
  }
  return "regular";
}

inline decode::Method method_from_string(const std::string& s) {
  if (s == "regular") return decode::Method::regular;
  if (s == "coiecd") return decode::Method::coiecd;
  if (s == "cd") return decode::Method::cd;
  if (s == "cad") return decode::Method::cad;
  if (s == "sc") return decode::Method::sc;
  throw InvalidParameter("unknown method '" + s + "'");
}

inline const char* to_string(decode::SamplerKind k) {
  switch (k) {
    case decode::SamplerKind::greedy: return "greedy";
    case decode::SamplerKind::nucleus: return "nucleus";
    case decode::SamplerKind::top_k: return "top-k";
    case decode::SamplerKind::typical: return "typical";
  }
  return "greedy";
}

inline nlohmann::json decoder_config_json(const decode::DecoderConfig& c) {
  return {{"method", to_string(c.method)},
          {"alpha", c.alpha},
          {"lambda", c.lambda},
          {"sampler", to_string(c.sampler.kind)},
          {"top_p", c.sampler.top_p},
          {"top_k", c.sampler.k},
          {"typical_tau", c.sampler.tau},
          {"temperature", c.temperature},
          {"max_new_tokens", c.max_new_tokens},
          {"sc_samples", c.sc_samples},
          {"sc_temperature", c.sc_temperature},
          {"cd_plausibility", c.cd_plausibility},
          {"cd_plausibility_source",
           c.cd_plausibility_source == decode::PlausibilitySource::with_context
               ? "with_context"
               : "without_context"},
          {"rng_seed", c.rng_seed}};
}

struct RunRecord {
  std::string item_id;
  std::string method;
  std::string prediction;
  int em = 0;
  double f1 = 0.0;
  std::optional<std::string> conflict;
  std::optional<std::string> trace_ref;
  double timing_ms = 0.0;
  std::string error;  // nonempty marks a failed item
  nlohmann::json config_snapshot;
  decode::DecodeTrace trace;
};

struct MethodRun {
  std::string name;  // label used in records and summaries
  decode::DecoderConfig config;
};

struct RunOptions {
  PromptTemplates templates;
  int workers = 1;
  bool write_traces = false;
  std::vector<double> ratios;  // conflict-ratio curve points, optional
  std::size_t mix_size = 0;    // 0 = auto (largest feasible for all ratios)
  std::uint64_t mix_seed = 0;
  nlohmann::json run_config;   // persisted verbatim as config.json
};

struct Aggregate {
  std::size_t count = 0;
  double em_sum = 0.0;
  double f1_sum = 0.0;

  double em() const { return count == 0 ? 0.0 : em_sum / static_cast<double>(count); }
  double f1() const { return count == 0 ? 0.0 : f1_sum / static_cast<double>(count); }
};

struct MethodSummary {
  Aggregate total;
  Aggregate conf;
  Aggregate nonconf;
  std::size_t errors = 0;
};

struct Summary {
  std::map<std::string, MethodSummary> methods;
  std::vector<RunRecord> records;
  nlohmann::json json;
  bool had_failures = false;
};

namespace detail {

inline std::string sanitize_filename(const std::string& s) {
  std::string out;
  for (char c : s) {
    const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') ||
                    c == '-' || c == '_' || c == '.';
    out.push_back(ok ? c : '_');
  }
  return out;
}

inline nlohmann::json trace_json(const decode::DecodeTrace& trace) {
  nlohmann::json steps = nlohmann::json::array();
  for (const auto& s : trace.steps) {
    steps.push_back({{"token", s.token},
                     {"branch", s.branch == decode::Branch::in_set
                                    ? "in_set"
                                    : s.branch == decode::Branch::out_of_set ? "out_of_set" : "n/a"},
                     {"h1", s.h1},
                     {"h2", s.h2},
                     {"info", s.info},
                     {"pdelta_of_token", s.pdelta_of_token},
                     {"upper", s.upper},
                     {"lower", s.lower},
                     {"in_set_count", s.verdict_counts.in_set},
                     {"lower_count", s.verdict_counts.lower},
                     {"upper_count", s.verdict_counts.upper},
                     {"log_prob", s.log_prob}});
  }
  return steps;
}

inline nlohmann::json record_json(const RunRecord& r) {
  nlohmann::json j = {{"item_id", r.item_id}, {"method", r.method},
                      {"prediction", r.prediction}, {"em", r.em},
                      {"f1", r.f1},
                      {"conflict", r.conflict ? nlohmann::json(*r.conflict) : nlohmann::json()},
                      {"trace", r.trace_ref ? nlohmann::json(*r.trace_ref) : nlohmann::json()},
                      {"timing_ms", r.timing_ms},
                      {"config", r.config_snapshot}};
  if (!r.error.empty()) j["error"] = r.error;
  return j;
}

}  // namespace detail

/**
 * Decodes every (item, method) pair, scores it and persists the run.
 * Items are dispatched to `workers` threads; records are written by a single
 * writer in (method, item) order so reruns are byte-identical apart from
 * timing_ms. Per-item failures become error records and set had_failures.
 */
inline Summary run_experiment(model::DualContextModel& lm, const std::vector<QAItem>& items,
                              const std::map<std::string, ConflictLabel>& labels,
                              const std::vector<MethodRun>& methods, const std::string& out_dir,
                              const RunOptions& options) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  if (options.write_traces) fs::create_directories(fs::path(out_dir) / "traces");

  Summary summary;
  for (const auto& m : methods) {
    std::vector<RunRecord> records(items.size());
    std::atomic<std::size_t> next{0};
    auto work = [&]() {
      while (true) {
        const std::size_t idx = next.fetch_add(1);
        if (idx >= items.size()) break;
        const QAItem& item = items[idx];
        RunRecord& rec = records[idx];
        rec.item_id = item.id;
        rec.method = m.name;
        decode::DecoderConfig cfg = m.config;
        cfg.rng_seed = m.config.rng_seed + idx;  // stable per-item seed
        rec.config_snapshot = decoder_config_json(cfg);
        const auto t0 = std::chrono::steady_clock::now();
        try {
          const auto prompts = options.templates.prompts_for(lm, item);
          std::string prediction;
          if (cfg.method == decode::Method::sc) {
            auto sc = decode::sc_generate(lm, prompts, cfg);
            prediction = sc.answer;
          } else {
            auto result = decode::decode_sequence(lm, prompts, cfg);
            prediction = lm.detokenize(result.tokens);
            rec.trace = std::move(result.trace);
          }
          rec.prediction = prediction;
          const Score s = score_prediction(prediction, item);
          rec.em = s.em;
          rec.f1 = s.f1;
        } catch (const std::exception& e) {
          rec.error = e.what();
        }
        rec.timing_ms = std::chrono::duration<double, std::milli>(
                            std::chrono::steady_clock::now() - t0)
                            .count();
        auto lit = labels.find(item.id);
        if (lit != labels.end()) rec.conflict = to_string(lit->second.label);
      }
    };
    const int n_workers = std::max(1, options.workers);
    if (n_workers == 1) {
      work();
    } else {
      std::vector<std::thread> pool;
      for (int w = 0; w < n_workers; ++w) pool.emplace_back(work);
      for (auto& t : pool) t.join();
    }

    MethodSummary& ms = summary.methods[m.name];
    for (std::size_t idx = 0; idx < records.size(); ++idx) {
      RunRecord& rec = records[idx];
      if (options.write_traces && rec.error.empty() &&
          m.config.method != decode::Method::sc) {
        const std::string fname =
            detail::sanitize_filename(m.name + "__" + rec.item_id) + ".jsonl";
        std::ofstream tf(fs::path(out_dir) / "traces" / fname);
        for (const auto& step : detail::trace_json(rec.trace)) tf << step.dump() << "\n";
        rec.trace_ref = "traces/" + fname;
      }
      if (!rec.error.empty()) {
        ++ms.errors;
        summary.had_failures = true;
        continue;
      }
      const bool labeled = rec.conflict.has_value();
      Aggregate& bucket = labeled && *rec.conflict == "Conf" ? ms.conf : ms.nonconf;
      if (labeled) {
        bucket.count += 1;
        bucket.em_sum += rec.em;
        bucket.f1_sum += rec.f1;
      } else {
        ms.total.count += 1;
        ms.total.em_sum += rec.em;
        ms.total.f1_sum += rec.f1;
      }
    }
    // Total over labeled items is the exact weighted combination of the
    // partitions; unlabeled items were accumulated directly above.
    ms.total.count += ms.conf.count + ms.nonconf.count;
    ms.total.em_sum += ms.conf.em_sum + ms.nonconf.em_sum;
    ms.total.f1_sum += ms.conf.f1_sum + ms.nonconf.f1_sum;

    for (auto& rec : records) summary.records.push_back(std::move(rec));
  }

  // Ratio curves reuse the per-item scores: a mixed subset's aggregate is the
  // mean over its item ids (decoding is independent of the mix).
  nlohmann::json ratio_curves = nlohmann::json::array();
  if (!options.ratios.empty()) {
    std::size_t conf_n = 0;
    std::size_t nonconf_n = 0;
    for (const auto& item : items) {
      auto it = labels.find(item.id);
      if (it == labels.end()) {
        throw SamplingError("ratio curves require conflict labels for every item");
      }
      (it->second.is_conf() ? conf_n : nonconf_n) += 1;
    }
    std::size_t n = options.mix_size;
    if (n == 0) {
      n = items.size();
      auto feasible = [&](std::size_t size) {
        for (double r : options.ratios) {
          const auto k = static_cast<std::size_t>(std::llround(r * static_cast<double>(size)));
          if (k > conf_n || size - k > nonconf_n) return false;
        }
        return size > 0;
      };
      while (n > 0 && !feasible(n)) --n;
      if (n == 0) throw SamplingError("no feasible mix size for the requested ratios");
    }
    std::map<std::string, std::map<std::string, Score>> scores_by_method;
    for (const auto& rec : summary.records) {
      if (rec.error.empty()) scores_by_method[rec.method][rec.item_id] = Score{rec.em, rec.f1};
    }
    for (double r : options.ratios) {
      const auto mixed = mix_ratio(items, labels, r, n, options.mix_seed);
      nlohmann::json point = {{"ratio", r}, {"size", n}};
      nlohmann::json em = nlohmann::json::object();
      nlohmann::json f1 = nlohmann::json::object();
      for (const auto& m : methods) {
        double em_sum = 0.0;
        double f1_sum = 0.0;
        for (const auto& item : mixed) {
          const auto& s = scores_by_method[m.name].at(item.id);
          em_sum += s.em;
          f1_sum += s.f1;
        }
        em[m.name] = em_sum / static_cast<double>(mixed.size());
        f1[m.name] = f1_sum / static_cast<double>(mixed.size());
      }
      point["em"] = em;
      point["f1"] = f1;
      ratio_curves.push_back(point);
    }
  }

  // Persist records.
  {
    std::ofstream rf(fs::path(out_dir) / "records.jsonl");
    for (const auto& rec : summary.records) rf << detail::record_json(rec).dump() << "\n";
  }
  // Persist config.
  if (!options.run_config.is_null()) {
    std::ofstream cf(fs::path(out_dir) / "config.json");
    cf << options.run_config.dump(2) << "\n";
  }
  // Persist summary.
  nlohmann::json js;
  js["dataset_size"] = items.size();
  js["methods"] = nlohmann::json::object();
  for (const auto& [name, ms] : summary.methods) {
    auto agg = [](const Aggregate& a) {
      return nlohmann::json{{"count", a.count}, {"em", a.em()}, {"f1", a.f1()}};
    };
    js["methods"][name] = {{"total", agg(ms.total)},
                           {"conf", agg(ms.conf)},
                           {"nonconf", agg(ms.nonconf)},
                           {"errors", ms.errors}};
  }
  if (!ratio_curves.empty()) js["ratio_curves"] = ratio_curves;
  {
    std::ofstream sf(fs::path(out_dir) / "summary.json");
    sf << js.dump(2) << "\n";
  }
  summary.json = std::move(js);
  return summary;
}

}  // namespace coiecd::eval
