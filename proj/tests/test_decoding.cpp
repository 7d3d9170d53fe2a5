// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 COIECD Authors

#include <doctest.h>

#include <cmath>
#include <functional>
#include <random>

#include "coiecd/decoding.hpp"
#include "coiecd/model.hpp"
#include "helpers.hpp"

using namespace coiecd;
using namespace coiecd::decode;

namespace {

LogProbs from_probs(std::initializer_list<double> probs) {
  return LogProbs::from_probabilities(std::vector<double>(probs));
}

StepPair pair_of(std::initializer_list<double> p1, std::initializer_list<double> p2) {
  return StepPair{from_probs(p1), from_probs(p2)};
}

StepPair random_pair(std::mt19937_64& rng, std::size_t v) {
  return StepPair{testutil::random_logprobs(rng, v), testutil::random_logprobs(rng, v)};
}

double max_log_diff(const LogProbs& a, const LogProbs& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

/// Minimal in-memory adapter driven by a logits function.
class ScriptedModel final : public model::DualContextModel {
public:
  ScriptedModel(int vocab, TokenId eos, std::function<Logits(const std::vector<TokenId>&)> fn)
      : vocab_(vocab), eos_(eos), fn_(std::move(fn)) {}

  int vocab_size() const override { return vocab_; }
  TokenId eos_id() const override { return eos_; }
  std::string name() const override { return "scripted"; }
  Logits next_logits(const std::vector<TokenId>& tokens) override { return fn_(tokens); }
  std::vector<TokenId> tokenize(const std::string& text) override {
    std::istringstream in(text);
    std::vector<TokenId> out;
    for (TokenId t; in >> t;) out.push_back(t);
    return out;
  }
  std::string detokenize(const std::vector<TokenId>& tokens) override {
    std::string out;
    for (TokenId t : tokens) {
      if (!out.empty()) out.push_back(' ');
      out += std::to_string(t);
    }
    return out;
  }

private:
  int vocab_;
  TokenId eos_;
  std::function<Logits(const std::vector<TokenId>&)> fn_;
};

Logits one_hot_logits(int vocab, TokenId hot) {
  Logits l;
  l.values.assign(static_cast<std::size_t>(vocab), 0.0);
  l.values[static_cast<std::size_t>(hot)] = 30.0;
  return l;
}

}  // namespace

TEST_CASE("contrastive_object") {
  SUBCASE("identical pair gives zero") {
    const auto g = contrastive_object(pair_of({0.7, 0.3}, {0.7, 0.3}));
    for (double x : g) CHECK(x == doctest::Approx(0.0).epsilon(1e-12));
  }
  SUBCASE("hand-computed difference") {
    const auto g = contrastive_object(pair_of({0.8, 0.2}, {0.2, 0.8}));
    CHECK(g[0] == doctest::Approx(std::log(0.25)).epsilon(1e-9));
    CHECK(g[1] == doctest::Approx(std::log(4.0)).epsilon(1e-9));
  }
  SUBCASE("one-hot p2 against uniform p1 under the clamp convention") {
    const auto g = contrastive_object(pair_of({0.25, 0.25, 0.25, 0.25}, {0.0, 1.0, 0.0, 0.0}));
    CHECK(g[1] == doctest::Approx(std::log(4.0)).epsilon(1e-6));
    for (std::size_t i : {0u, 2u, 3u}) CHECK(g[i] < -600.0);  // clamped, large negative
  }
  SUBCASE("shape mismatch") {
    StepPair bad{from_probs({0.5, 0.5}), from_probs({0.5, 0.3, 0.2})};
    CHECK_THROWS_AS(contrastive_object(bad), ShapeError);
  }
}

TEST_CASE("regular_step returns p2 unchanged") {
  const auto pair = pair_of({0.8, 0.2}, {0.2, 0.8});
  const auto out = regular_step(pair);
  CHECK(out[0] == pair.with_context[0]);
  CHECK(out[1] == pair.with_context[1]);
  const auto uniform = regular_step(pair_of({0.5, 0.5}, {0.5, 0.5}));
  CHECK(std::exp(uniform[0]) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("coiecd_step worked example, full hand evaluation") {
  const auto pair = pair_of({0.8, 0.2}, {0.2, 0.8});
  ConstraintReport report;
  const auto pi = coiecd_step(pair, CoiecdOptions{0.25, 1.0, false}, &report);

  CHECK(report.pdelta.values[0] == doctest::Approx(0.8).epsilon(1e-9));
  CHECK(report.pdelta.values[1] == doctest::Approx(0.2).epsilon(1e-9));
  CHECK(report.bounds.upper == doctest::Approx(0.2).epsilon(1e-9));
  CHECK(report.bounds.lower_raw == doctest::Approx(0.8).epsilon(1e-9));
  CHECK(report.bounds.lower == 0.0);
  CHECK(report.verdicts[0] == Verdict::UpperViolation);
  CHECK(report.verdicts[1] == Verdict::InSet);

  CHECK(std::exp(pi[0]) == doctest::Approx(0.058824).epsilon(1e-6));
  CHECK(std::exp(pi[1]) == doctest::Approx(0.941176).epsilon(1e-6));
  CHECK(pi.argmax() == 1);  // the context-supported answer
}

TEST_CASE("coiecd_step degenerate and boundary reductions") {
  std::mt19937_64 rng(55);
  SUBCASE("p1 == p2 collapses to p2 for the whole hyperparameter grid") {
    for (int trial = 0; trial < 100; ++trial) {
      const auto p = testutil::random_logprobs(rng, testutil::random_vocab(rng, 2, 256));
      const StepPair pair{p, p};
      for (double lambda : {0.1, 0.25, 0.5, 1.0}) {
        for (double alpha : {0.5, 1.0, 2.0}) {
          const auto pi = coiecd_step(pair, CoiecdOptions{lambda, alpha, false});
          CHECK(max_log_diff(pi, p) < 1e-12);
        }
      }
    }
  }
  SUBCASE("lambda = 1 with alpha = 1 equals regular") {
    for (int trial = 0; trial < 200; ++trial) {
      const auto pair = random_pair(rng, testutil::random_vocab(rng, 2, 256));
      const auto pi = coiecd_step(pair, CoiecdOptions{1.0, 1.0, false});
      CHECK(max_log_diff(pi, regular_step(pair)) < 1e-9);
    }
  }
  SUBCASE("parameter validation") {
    const auto pair = pair_of({0.5, 0.5}, {0.5, 0.5});
    CHECK_THROWS_AS(coiecd_step(pair, CoiecdOptions{0.0, 1.0, false}), InvalidParameter);
    CHECK_THROWS_AS(coiecd_step(pair, CoiecdOptions{0.25, -1.0, false}), InvalidParameter);
  }
}

TEST_CASE("forced-empty constraint reduces coiecd to cad") {
  std::mt19937_64 rng(56);
  for (int trial = 0; trial < 250; ++trial) {
    const auto pair = random_pair(rng, testutil::random_vocab(rng, 2, 256));
    for (double alpha : {0.5, 1.0, 1.5, 2.0}) {
      const auto forced = coiecd_step(pair, CoiecdOptions{0.25, alpha, true});
      const auto cad = cad_step(pair, alpha);
      CHECK(max_log_diff(forced, cad) < 1e-9);
      // Out-of-set branch identity, unnormalized scores.
      for (std::size_t i = 0; i < pair.vocab_size(); ++i) {
        const double lhs = pair.with_context[i] +
                           alpha * (pair.with_context[i] - pair.without_context[i]);
        const double rhs =
            (1.0 + alpha) * pair.with_context[i] - alpha * pair.without_context[i];
        CHECK(std::abs(lhs - rhs) <= 1e-12);
      }
    }
  }
}

TEST_CASE("cad_step") {
  SUBCASE("identical pair returns p2") {
    const auto pair = pair_of({0.3, 0.7}, {0.3, 0.7});
    CHECK(max_log_diff(cad_step(pair, 1.0), pair.with_context) < 1e-12);
  }
  SUBCASE("hand evaluation") {
    const auto pi = cad_step(pair_of({0.8, 0.2}, {0.2, 0.8}), 1.0);
    CHECK(std::exp(pi[0]) == doctest::Approx(0.015385).epsilon(1e-5));
    CHECK(std::exp(pi[1]) == doctest::Approx(0.984615).epsilon(1e-6));
  }
  SUBCASE("alpha = 0 is regular") {
    const auto pair = pair_of({0.8, 0.2}, {0.2, 0.8});
    CHECK(max_log_diff(cad_step(pair, 0.0), regular_step(pair)) < 1e-12);
  }
  SUBCASE("negative alpha rejected") {
    CHECK_THROWS_AS(cad_step(pair_of({0.5, 0.5}, {0.5, 0.5}), -0.5), InvalidParameter);
  }
}

TEST_CASE("cd_step") {
  SUBCASE("hand evaluation with both tokens in the head") {
    const auto pi = cd_step(pair_of({0.8, 0.2}, {0.2, 0.8}), 0.1);
    CHECK(std::exp(pi[0]) == doctest::Approx(0.25 / 4.25).epsilon(1e-9));
    CHECK(std::exp(pi[1]) == doctest::Approx(4.0 / 4.25).epsilon(1e-9));
    CHECK(pi.argmax() == 1);
  }
  SUBCASE("uniform identical pair: all scores equal, argmax ties to token 0") {
    const auto pi = cd_step(pair_of({0.25, 0.25, 0.25, 0.25}, {0.25, 0.25, 0.25, 0.25}), 0.1);
    CHECK(pi.argmax() == 0);
  }
  SUBCASE("head shrinks to the argmax when the runner-up misses the threshold") {
    const auto pi = cd_step(pair_of({0.5, 0.5}, {0.98, 0.02}), 0.1);
    CHECK(std::exp(pi[0]) == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(std::isinf(pi[1]));
    CHECK(pi[1] < 0);
  }
  SUBCASE("head distribution can come from p1 instead") {
    // p1 concentrates on token 0, so token 1 falls out of the head even
    // though p2 favors it.
    const auto pair = pair_of({0.98, 0.02}, {0.2, 0.8});
    const auto pi = cd_step(pair, 0.1, PlausibilitySource::without_context);
    CHECK(std::exp(pi[0]) == doctest::Approx(1.0).epsilon(1e-9));
  }
  SUBCASE("plausibility range") {
    CHECK_THROWS_AS(cd_step(pair_of({0.5, 0.5}, {0.5, 0.5}), 0.0), InvalidParameter);
    CHECK_THROWS_AS(cd_step(pair_of({0.5, 0.5}, {0.5, 0.5}), 1.5), InvalidParameter);
  }
}

TEST_CASE("decode_sequence on scripted models") {
  SUBCASE("immediate EOS gives an empty answer and a one-step trace") {
    ScriptedModel lm(4, 0, [](const std::vector<TokenId>&) { return one_hot_logits(4, 0); });
    DecoderConfig cfg;
    const auto result = decode_sequence(lm, PromptPair{{1}, {1}}, cfg);
    CHECK(result.tokens.empty());
    CHECK(result.trace.steps.size() == 1);
    CHECK(result.trace.steps[0].token == 0);
  }
  SUBCASE("max_new_tokens = 0 gives empty output and trace") {
    ScriptedModel lm(4, 0, [](const std::vector<TokenId>&) { return one_hot_logits(4, 1); });
    DecoderConfig cfg;
    cfg.max_new_tokens = 0;
    const auto result = decode_sequence(lm, PromptPair{{1}, {1}}, cfg);
    CHECK(result.tokens.empty());
    CHECK(result.trace.steps.empty());
  }
  SUBCASE("both prefixes receive each emitted token") {
    std::vector<std::vector<TokenId>> seen;
    ScriptedModel lm(4, 0, [&](const std::vector<TokenId>& tokens) {
      seen.push_back(tokens);
      return one_hot_logits(4, tokens.size() >= 3 ? 0 : 2);
    });
    DecoderConfig cfg;
    const auto result = decode_sequence(lm, PromptPair{{1}, {3}}, cfg);
    REQUIRE(result.tokens == std::vector<TokenId>{2, 2});
    REQUIRE(seen.size() == 6);
    CHECK(seen[2] == std::vector<TokenId>{1, 2});
    CHECK(seen[3] == std::vector<TokenId>{3, 2});
    CHECK(seen[4] == std::vector<TokenId>{1, 2, 2});
    CHECK(seen[5] == std::vector<TokenId>{3, 2, 2});
  }
  SUBCASE("adapter failure surfaces as ModelError with the step index") {
    int calls = 0;
    ScriptedModel lm(4, 0, [&](const std::vector<TokenId>&) -> Logits {
      if (++calls > 4) throw InvalidLogits("backend exploded");
      return one_hot_logits(4, 2);
    });
    DecoderConfig cfg;
    try {
      decode_sequence(lm, PromptPair{{1}, {1}}, cfg);
      FAIL("expected ModelError");
    } catch (const ModelError& e) {
      CHECK(e.step() == 2);
    }
  }
}

TEST_CASE("decode_sequence on the conflict fixture") {
  auto lm = model::load_toy_model(std::string(COIECD_DEMO_DIR) + "/conflict.json");
  // With-context prompt "question: host-2022 context: ev-qatar answer:".
  PromptPair prompts;
  prompts.without_context = lm.tokenize("question: host-2022 answer:");
  prompts.with_context = lm.tokenize("question: host-2022 context: ev-qatar answer:");

  auto decode_with = [&](Method m) {
    DecoderConfig cfg;
    cfg.method = m;
    return lm.detokenize(decode_sequence(lm, prompts, cfg).tokens);
  };
  CHECK(decode_with(Method::coiecd) == "qatar");   // context answer
  CHECK(decode_with(Method::regular) == "russia"); // parametric answer
  CHECK(decode_with(Method::cad) == "qatar");      // context answer

  SUBCASE("greedy decode is bit-reproducible") {
    DecoderConfig cfg;
    cfg.method = Method::coiecd;
    const auto a = decode_sequence(lm, prompts, cfg);
    const auto b = decode_sequence(lm, prompts, cfg);
    REQUIRE(a.tokens == b.tokens);
    REQUIRE(a.trace.steps.size() == b.trace.steps.size());
    for (std::size_t i = 0; i < a.trace.steps.size(); ++i) {
      CHECK(a.trace.steps[i].h1 == b.trace.steps[i].h1);
      CHECK(a.trace.steps[i].h2 == b.trace.steps[i].h2);
      CHECK(a.trace.steps[i].pdelta_of_token == b.trace.steps[i].pdelta_of_token);
      CHECK(a.trace.steps[i].log_prob == b.trace.steps[i].log_prob);
    }
  }
  SUBCASE("coiecd trace marks the conflict-step branch") {
    DecoderConfig cfg;
    cfg.method = Method::coiecd;
    const auto result = decode_sequence(lm, prompts, cfg);
    REQUIRE(!result.trace.steps.empty());
    CHECK(result.trace.steps[0].branch == Branch::out_of_set);
  }
  SUBCASE("sampling is reproducible for a fixed seed") {
    DecoderConfig cfg;
    cfg.method = Method::regular;
    cfg.sampler.kind = SamplerKind::nucleus;
    cfg.sampler.top_p = 1.0;
    cfg.temperature = 1.0;
    cfg.rng_seed = 1234;
    const auto a = decode_sequence(lm, prompts, cfg);
    const auto b = decode_sequence(lm, prompts, cfg);
    CHECK(a.tokens == b.tokens);
  }
}

TEST_CASE("sc_vote") {
  auto sample = [](const std::string& answer, double lp) {
    ScSample s;
    s.answer_normalized = answer;
    s.seq_log_prob = lp;
    return s;
  };
  SUBCASE("unanimous") {
    CHECK(sc_vote({sample("a", -1.0), sample("a", -2.0), sample("a", -3.0)}) == "a");
  }
  SUBCASE("majority") {
    CHECK(sc_vote({sample("a", -5.0), sample("a", -5.0), sample("b", -0.1)}) == "a");
  }
  SUBCASE("tie breaks toward the higher sequence log-probability") {
    CHECK(sc_vote({sample("a", -1.0), sample("b", -2.0)}) == "a");
    CHECK(sc_vote({sample("a", -2.0), sample("b", -1.0)}) == "b");
  }
  SUBCASE("empty input") { CHECK(sc_vote({}) == ""); }
}

TEST_CASE("sc_generate on a deterministic model returns the unanimous answer") {
  // One-hot rows: every sample is identical regardless of temperature.
  ScriptedModel lm(5, 0, [](const std::vector<TokenId>& tokens) {
    return one_hot_logits(5, tokens.size() >= 2 ? 0 : 3);
  });
  DecoderConfig cfg;
  cfg.method = Method::sc;
  cfg.sc_samples = 7;
  cfg.rng_seed = 99;
  const auto result = sc_generate(lm, PromptPair{{1}, {1}}, cfg);
  CHECK(result.samples.size() == 7);
  CHECK(result.answer == "3");
  for (const auto& s : result.samples) CHECK(s.answer_normalized == "3");
}
