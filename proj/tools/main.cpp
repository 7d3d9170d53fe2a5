// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 COIECD Authors

/**
 * coiecd — adaptive constrained decoding over paired with/without-context
 * distributions, with an evaluation harness for context-specific QA.
 *
 * Subcommands:
 *   run             decode a dataset with one or more methods, score EM/F1
 *   partition       label items Conf/NonConf via closed-book decoding
 *   sweep           lambda x alpha grid for the coiecd method
 *   trace           dump per-step decode traces and diagnostics CSV
 *   validate-model  probe a model spec before long runs
 *
 * Exit codes: 0 success, 1 partial item failures or probe failure,
 * 2 configuration errors.
 */

#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "coiecd/dataset.hpp"
#include "coiecd/decoding.hpp"
#include "coiecd/diagnostics.hpp"
#include "coiecd/errors.hpp"
#include "coiecd/harness.hpp"
#include "coiecd/http_model.hpp"
#include "coiecd/model.hpp"

namespace fs = std::filesystem;
using namespace coiecd;

namespace {

struct RunConfig {
  std::string model_spec;
  std::string dataset;
  std::string format = "jsonl";
  std::string out_dir;
  std::vector<std::string> methods{"coiecd"};
  decode::DecoderConfig decoder;
  eval::PromptTemplates templates;
  std::uint64_t seed = 0;
  int workers = 1;
  std::vector<double> ratios;
  std::size_t mix_size = 0;
  bool skip_partition = false;
  bool write_traces = false;
  std::size_t prefix_cache = 0;  // 0 disables the prefix cache
  std::string cache_dir;
};

nlohmann::json run_config_json(const RunConfig& c) {
  return {{"model", c.model_spec},
          {"dataset", c.dataset},
          {"format", c.format},
          {"methods", c.methods},
          {"decoder", eval::decoder_config_json(c.decoder)},
          {"templates",
           {{"with_context", c.templates.with_context},
            {"question_only", c.templates.question_only},
            {"hash", c.templates.hash()}}},
          {"seed", c.seed},
          {"workers", c.workers},
          {"ratios", c.ratios},
          {"mix_size", c.mix_size},
          {"skip_partition", c.skip_partition},
          {"traces", c.write_traces},
          {"prefix_cache", c.prefix_cache},
          {"cache_dir", c.cache_dir}};
}

void decoder_from_json(const nlohmann::json& j, decode::DecoderConfig& d) {
  d.method = eval::method_from_string(j.at("method").get<std::string>());
  d.alpha = j.at("alpha").get<double>();
  d.lambda = j.at("lambda").get<double>();
  const std::string sampler = j.at("sampler").get<std::string>();
  if (sampler == "greedy") d.sampler.kind = decode::SamplerKind::greedy;
  else if (sampler == "nucleus") d.sampler.kind = decode::SamplerKind::nucleus;
  else if (sampler == "top-k") d.sampler.kind = decode::SamplerKind::top_k;
  else if (sampler == "typical") d.sampler.kind = decode::SamplerKind::typical;
  else throw InvalidParameter("unknown sampler '" + sampler + "'");
  d.sampler.top_p = j.at("top_p").get<double>();
  d.sampler.k = j.at("top_k").get<int>();
  d.sampler.tau = j.at("typical_tau").get<double>();
  d.temperature = j.at("temperature").get<double>();
  d.max_new_tokens = j.at("max_new_tokens").get<int>();
  d.sc_samples = j.at("sc_samples").get<int>();
  d.sc_temperature = j.at("sc_temperature").get<double>();
  d.cd_plausibility = j.at("cd_plausibility").get<double>();
  d.cd_plausibility_source = j.at("cd_plausibility_source").get<std::string>() == "without_context"
                                 ? decode::PlausibilitySource::without_context
                                 : decode::PlausibilitySource::with_context;
  d.rng_seed = j.at("rng_seed").get<std::uint64_t>();
}

RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  c.model_spec = j.at("model").get<std::string>();
  c.dataset = j.at("dataset").get<std::string>();
  c.format = j.value("format", std::string("jsonl"));
  c.methods = j.at("methods").get<std::vector<std::string>>();
  decoder_from_json(j.at("decoder"), c.decoder);
  c.templates.with_context = j.at("templates").at("with_context").get<std::string>();
  c.templates.question_only = j.at("templates").at("question_only").get<std::string>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.workers = j.value("workers", 1);
  c.ratios = j.value("ratios", std::vector<double>{});
  c.mix_size = j.value("mix_size", std::size_t{0});
  c.skip_partition = j.value("skip_partition", false);
  c.write_traces = j.value("traces", false);
  c.prefix_cache = j.value("prefix_cache", std::size_t{0});
  c.cache_dir = j.value("cache_dir", std::string{});
  return c;
}

struct LoadedModel {
  std::unique_ptr<model::DualContextModel> owner;
  std::unique_ptr<model::CachingModel> cached;

  model::DualContextModel& get() { return cached ? *cached : *owner; }
};

LoadedModel load_model(const std::string& spec, std::size_t prefix_cache, int workers) {
  LoadedModel m;
  if (spec.rfind("toy:", 0) == 0) {
    m.owner = std::make_unique<model::ToyTableLM>(model::load_toy_model(spec.substr(4)));
  } else if (spec.rfind("http://", 0) == 0 || spec.rfind("https://", 0) == 0 ||
             spec.rfind("http:", 0) == 0) {
    std::string url = spec;
    if (spec.rfind("http://", 0) != 0 && spec.rfind("https://", 0) != 0) {
      url = spec.substr(5);
      if (url.find("://") == std::string::npos) url = "http://" + url;
    }
    model::HttpOptions opts;
    opts.pool_size = std::max(1, workers);
    m.owner = std::make_unique<model::HttpModel>(url, opts);
  } else {
    throw InvalidParameter("model spec must be toy:<path> or http:<url>, got '" + spec + "'");
  }
  if (prefix_cache > 0) {
    m.cached = std::make_unique<model::CachingModel>(*m.owner, prefix_cache);
  }
  return m;
}

eval::DatasetFormat format_from_string(const std::string& s) {
  if (s == "jsonl") return eval::DatasetFormat::jsonl;
  if (s == "squad") return eval::DatasetFormat::squad;
  throw InvalidParameter("dataset format must be jsonl or squad, got '" + s + "'");
}

std::string partition_cache_path(const RunConfig& cfg, model::DualContextModel& lm) {
  const std::string dir = cfg.cache_dir.empty() ? cfg.out_dir : cfg.cache_dir;
  if (dir.empty()) return {};
  const std::string name = eval::detail::sanitize_filename(lm.name());
  return (fs::path(dir) / ("partition_" + name + ".json")).string();
}

std::map<std::string, eval::ConflictLabel> maybe_partition(const RunConfig& cfg,
                                                           model::DualContextModel& lm,
                                                           const std::vector<eval::QAItem>& items) {
  if (cfg.skip_partition) return {};
  eval::PartitionConfig pc;
  pc.templates = cfg.templates;
  pc.max_new_tokens = cfg.decoder.max_new_tokens;
  pc.cache_path = partition_cache_path(cfg, lm);
  std::cerr << "partitioning " << items.size() << " items (closed-book)...\n";
  return eval::partition_conflicts(lm, items, pc);
}

int cmd_run(RunConfig cfg) {
  cfg.decoder.rng_seed = cfg.seed;
  cfg.decoder.validate();
  auto lm = load_model(cfg.model_spec, cfg.prefix_cache, cfg.workers);
  auto items = eval::load_dataset(cfg.dataset, format_from_string(cfg.format));
  auto labels = maybe_partition(cfg, lm.get(), items);

  std::vector<eval::MethodRun> runs;
  for (const auto& name : cfg.methods) {
    decode::DecoderConfig d = cfg.decoder;
    d.method = eval::method_from_string(name);
    runs.push_back({name, d});
  }

  eval::RunOptions opts;
  opts.templates = cfg.templates;
  opts.workers = cfg.workers;
  opts.write_traces = cfg.write_traces;
  opts.ratios = cfg.ratios;
  opts.mix_size = cfg.mix_size;
  opts.mix_seed = cfg.seed;
  opts.run_config = run_config_json(cfg);

  std::cerr << "decoding " << items.size() << " items with " << runs.size() << " method(s)...\n";
  const auto summary = eval::run_experiment(lm.get(), items, labels, runs, cfg.out_dir, opts);

  for (const auto& [name, ms] : summary.methods) {
    std::cout << "method=" << name << " items=" << ms.total.count
              << " em=" << ms.total.em() << " f1=" << ms.total.f1();
    if (ms.conf.count + ms.nonconf.count > 0) {
      std::cout << " conf_em=" << ms.conf.em() << " nonconf_em=" << ms.nonconf.em();
    }
    if (ms.errors > 0) std::cout << " errors=" << ms.errors;
    std::cout << "\n";
  }
  return summary.had_failures ? 1 : 0;
}

int cmd_partition(RunConfig cfg) {
  auto lm = load_model(cfg.model_spec, cfg.prefix_cache, cfg.workers);
  auto items = eval::load_dataset(cfg.dataset, format_from_string(cfg.format));
  eval::PartitionConfig pc;
  pc.templates = cfg.templates;
  pc.max_new_tokens = cfg.decoder.max_new_tokens;
  pc.cache_path = partition_cache_path(cfg, lm.get());
  const auto labels = eval::partition_conflicts(lm.get(), items, pc);

  fs::create_directories(cfg.out_dir);
  nlohmann::json out;
  out["model"] = lm.get().name();
  out["template_hash"] = cfg.templates.hash();
  out["labels"] = nlohmann::json::object();
  std::size_t conf = 0;
  for (const auto& [id, l] : labels) {
    out["labels"][id] = {{"label", eval::to_string(l.label)},
                         {"closed_book_f1", l.closed_book_f1},
                         {"prediction", l.closed_book_prediction}};
    if (l.is_conf()) ++conf;
  }
  std::ofstream f(fs::path(cfg.out_dir) / "partition.json");
  f << out.dump(2) << "\n";
  std::cout << "items=" << labels.size() << " conf=" << conf
            << " nonconf=" << labels.size() - conf << "\n";
  return 0;
}

int cmd_sweep(RunConfig cfg, const std::vector<double>& lambdas, const std::vector<double>& alphas) {
  cfg.decoder.rng_seed = cfg.seed;
  auto lm = load_model(cfg.model_spec, cfg.prefix_cache, cfg.workers);
  auto items = eval::load_dataset(cfg.dataset, format_from_string(cfg.format));

  fs::create_directories(cfg.out_dir);
  nlohmann::json grid = nlohmann::json::array();
  bool failures = false;
  for (double lambda : lambdas) {
    for (double alpha : alphas) {
      decode::DecoderConfig d = cfg.decoder;
      d.method = decode::Method::coiecd;
      d.lambda = lambda;
      d.alpha = alpha;
      d.validate();
      std::ostringstream dir_name;
      dir_name << "l" << lambda << "_a" << alpha;
      eval::RunOptions opts;
      opts.templates = cfg.templates;
      opts.workers = cfg.workers;
      RunConfig combo = cfg;
      combo.decoder = d;
      opts.run_config = run_config_json(combo);
      const auto summary =
          eval::run_experiment(lm.get(), items, {}, {{"coiecd", d}},
                               (fs::path(cfg.out_dir) / dir_name.str()).string(), opts);
      const auto& ms = summary.methods.at("coiecd");
      failures = failures || summary.had_failures;
      grid.push_back({{"lambda", lambda},
                      {"alpha", alpha},
                      {"em", ms.total.em()},
                      {"f1", ms.total.f1()}});
      std::cout << "lambda=" << lambda << " alpha=" << alpha << " em=" << ms.total.em()
                << " f1=" << ms.total.f1() << "\n";
    }
  }
  nlohmann::json out = {{"lambda_values", lambdas}, {"alpha_values", alphas}, {"grid", grid}};
  std::ofstream f(fs::path(cfg.out_dir) / "sweep.json");
  f << out.dump(2) << "\n";
  return failures ? 1 : 0;
}

int cmd_trace(RunConfig cfg, const std::string& method) {
  cfg.decoder.rng_seed = cfg.seed;
  cfg.decoder.method = eval::method_from_string(method);
  cfg.decoder.validate();
  auto lm = load_model(cfg.model_spec, cfg.prefix_cache, cfg.workers);
  auto items = eval::load_dataset(cfg.dataset, format_from_string(cfg.format));
  auto labels = maybe_partition(cfg, lm.get(), items);

  eval::RunOptions opts;
  opts.templates = cfg.templates;
  opts.workers = cfg.workers;
  opts.write_traces = true;
  opts.run_config = run_config_json(cfg);
  const auto summary =
      eval::run_experiment(lm.get(), items, labels, {{method, cfg.decoder}}, cfg.out_dir, opts);

  std::vector<diag::TracedSequence> traced;
  for (const auto& rec : summary.records) {
    if (!rec.error.empty()) continue;
    traced.push_back({rec.item_id, rec.conflict.value_or("all"), rec.trace});
  }
  const auto vs = diag::violation_summary(traced);
  diag::write_diagnostics_csv(vs, (fs::path(cfg.out_dir) / "diagnostics.csv").string());
  for (const auto& c : vs.corpora) {
    std::cout << "label=" << (c.label.empty() ? "overall" : c.label)
              << " sequences=" << c.sequences << " in_set=" << c.in_set_rate
              << " lower=" << c.lower_rate << " upper=" << c.upper_rate
              << " entropy_std=" << c.mean_std_smoothed_entropy << "\n";
  }
  return summary.had_failures ? 1 : 0;
}

int cmd_validate(const RunConfig& cfg) {
  // Bad specs and malformed model files propagate as configuration errors;
  // only reachability/protocol problems report as probe failures.
  try {
    auto lm = load_model(cfg.model_spec, 0, 1);
    auto& m = lm.get();
    std::cout << "name=" << m.name() << " vocab_size=" << m.vocab_size()
              << " eos_id=" << m.eos_id() << "\n";
    const Logits probe = m.next_logits({m.eos_id()});
    if (probe.values.size() != static_cast<std::size_t>(m.vocab_size())) {
      std::cerr << "error: logits length " << probe.values.size() << " != vocab_size "
                << m.vocab_size() << "\n";
      return 1;
    }
    log_softmax(probe, 1.0);  // rejects non-finite scores
    std::cout << "logits round trip ok\n";
    return 0;
  } catch (const TransportError& e) {
    std::cerr << "validation failed: " << e.what() << "\n";
    return 1;
  } catch (const ProtocolError& e) {
    std::cerr << "validation failed: " << e.what() << "\n";
    return 1;
  } catch (const ServerError& e) {
    std::cerr << "validation failed: " << e.what() << "\n";
    return 1;
  }
}

void add_common_flags(CLI::App* cmd, RunConfig& cfg, bool need_dataset) {
  cmd->add_option("--model", cfg.model_spec, "Model spec: toy:<path> or http:<url>")->required();
  auto* ds = cmd->add_option("--dataset", cfg.dataset, "Dataset path (JSONL or SQuAD JSON)");
  if (need_dataset) ds->required();
  cmd->add_option("--format", cfg.format, "Dataset format: jsonl|squad")->default_val("jsonl");
  cmd->add_option("--seed", cfg.seed, "RNG seed");
  cmd->add_option("--workers", cfg.workers, "Worker thread count")->default_val(1);
  cmd->add_option("--max-new-tokens", cfg.decoder.max_new_tokens, "Generation cap")
      ->default_val(16);
  cmd->add_option("--prefix-cache", cfg.prefix_cache, "Prefix cache capacity (0 = off)");
  cmd->add_option("--cache-dir", cfg.cache_dir, "Directory for the partition cache");
  cmd->add_option("--template-context", cfg.templates.with_context, "With-context prompt template");
  cmd->add_option("--template-question", cfg.templates.question_only,
                  "Question-only prompt template");
}

void add_decoder_flags(CLI::App* cmd, RunConfig& cfg) {
  cmd->add_option("--lambda", cfg.decoder.lambda, "Constraint scale, in (0,1]")->default_val(0.25);
  cmd->add_option("--alpha", cfg.decoder.alpha, "Contextual weight, in [0,4]")->default_val(1.0);
  cmd->add_option("--temperature", cfg.decoder.temperature, "Sampling temperature (0 = greedy)");
  cmd->add_option("--sc-samples", cfg.decoder.sc_samples, "Self-consistency sample count")
      ->default_val(40);
  cmd->add_option("--sc-temperature", cfg.decoder.sc_temperature, "Self-consistency temperature")
      ->default_val(0.5);
  cmd->add_option("--cd-plausibility", cfg.decoder.cd_plausibility, "CD head threshold, in (0,1]")
      ->default_val(0.1);
  std::map<std::string, decode::PlausibilitySource> sources{
      {"with_context", decode::PlausibilitySource::with_context},
      {"without_context", decode::PlausibilitySource::without_context}};
  cmd->add_option("--cd-plausibility-source", cfg.decoder.cd_plausibility_source,
                  "Distribution thresholding CD's head")
      ->transform(CLI::CheckedTransformer(sources, CLI::ignore_case));
}

/// Mutually exclusive sampler flags; greedy when none given.
struct SamplerFlags {
  double nucleus_p = -1.0;
  int top_k = -1;
  double typical_tau = -1.0;

  void add_to(CLI::App* cmd) {
    auto* n = cmd->add_option("--nucleus", nucleus_p, "Nucleus sampling with this top-p");
    auto* k = cmd->add_option("--top-k", top_k, "Top-k sampling with this k");
    auto* t = cmd->add_option("--typical", typical_tau, "Typical sampling with this tau");
    n->excludes(k)->excludes(t);
    k->excludes(n)->excludes(t);
    t->excludes(n)->excludes(k);
  }

  void apply(decode::DecoderConfig& d) const {
    if (nucleus_p >= 0.0) {
      d.sampler.kind = decode::SamplerKind::nucleus;
      d.sampler.top_p = nucleus_p;
    } else if (top_k >= 0) {
      d.sampler.kind = decode::SamplerKind::top_k;
      d.sampler.k = top_k;
    } else if (typical_tau >= 0.0) {
      d.sampler.kind = decode::SamplerKind::typical;
      d.sampler.tau = typical_tau;
    }
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adaptive constrained decoding and QA evaluation harness"};
  app.require_subcommand(1);

  RunConfig cfg;
  SamplerFlags sampler;
  std::string from_config;
  std::string trace_method = "coiecd";
  std::vector<double> sweep_lambdas{0.1, 0.25, 0.5, 1.0};
  std::vector<double> sweep_alphas{0.0, 0.5, 1.0, 1.5, 2.0};

  auto* run = app.add_subcommand("run", "Decode a dataset and score it");
  run->add_option("--out", cfg.out_dir, "Run directory")->required();
  run->add_option("--from-config", from_config,
                  "Rerun from a previous run's config.json (other flags ignored)");
  if (true) {  // flags shared with the config-file path are applied after parse
    add_common_flags(run, cfg, /*need_dataset=*/false);
    add_decoder_flags(run, cfg);
    sampler.add_to(run);
    run->add_option("--method", cfg.methods, "Decoding method(s)")
        ->delimiter(',')
        ->default_val(std::vector<std::string>{"coiecd"});
    run->add_option("--ratios", cfg.ratios, "Conflict-ratio curve points in [0,1]")->delimiter(',');
    run->add_option("--mix-size", cfg.mix_size, "Items per ratio point (0 = auto)");
    run->add_flag("--skip-partition", cfg.skip_partition, "Skip closed-book partitioning");
    run->add_flag("--traces", cfg.write_traces, "Write per-item trace JSONL");
    run->get_option("--model")->required(false);
    run->get_option("--dataset")->required(false);
  }

  RunConfig pcfg;
  auto* partition = app.add_subcommand("partition", "Label items Conf/NonConf (closed book)");
  partition->add_option("--out", pcfg.out_dir, "Output directory")->required();
  add_common_flags(partition, pcfg, /*need_dataset=*/true);

  RunConfig scfg;
  auto* sweep = app.add_subcommand("sweep", "Grid over lambda and alpha for coiecd");
  sweep->add_option("--out", scfg.out_dir, "Output directory")->required();
  add_common_flags(sweep, scfg, /*need_dataset=*/true);
  sweep->add_option("--lambda", sweep_lambdas, "Lambda grid values")->delimiter(',');
  sweep->add_option("--alpha", sweep_alphas, "Alpha grid values")->delimiter(',');

  RunConfig tcfg;
  SamplerFlags tsampler;
  auto* trace = app.add_subcommand("trace", "Dump decode traces and diagnostics CSV");
  trace->add_option("--out", tcfg.out_dir, "Output directory")->required();
  add_common_flags(trace, tcfg, /*need_dataset=*/true);
  add_decoder_flags(trace, tcfg);
  tsampler.add_to(trace);
  trace->add_option("--method", trace_method, "Decoding method")->default_val("coiecd");
  trace->add_flag("--skip-partition", tcfg.skip_partition, "Skip closed-book partitioning");

  RunConfig vcfg;
  auto* validate = app.add_subcommand("validate-model", "Probe a model spec");
  validate->add_option("--model", vcfg.model_spec, "Model spec: toy:<path> or http:<url>")
      ->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;  // parse/usage problems are configuration errors
  }

  try {
    if (run->parsed()) {
      if (!from_config.empty()) {
        std::ifstream in(from_config);
        if (!in) throw InvalidParameter("cannot open config " + from_config);
        nlohmann::json j;
        in >> j;
        std::string out_dir = cfg.out_dir;
        cfg = run_config_from_json(j);
        cfg.out_dir = out_dir;
      } else {
        if (cfg.model_spec.empty() || cfg.dataset.empty()) {
          throw InvalidParameter("--model and --dataset are required without --from-config");
        }
        sampler.apply(cfg.decoder);
      }
      return cmd_run(cfg);
    }
    if (partition->parsed()) return cmd_partition(pcfg);
    if (sweep->parsed()) return cmd_sweep(scfg, sweep_lambdas, sweep_alphas);
    if (trace->parsed()) {
      tsampler.apply(tcfg.decoder);
      return cmd_trace(tcfg, trace_method);
    }
    if (validate->parsed()) return cmd_validate(vcfg);
  } catch (const InvalidParameter& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const LoadError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const IngestError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
