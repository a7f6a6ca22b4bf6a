#include <cmath>

#include "doctest.h"
#include "helpers.hpp"
#include "rlvr/grpo.hpp"
#include "rlvr/token_metrics.hpp"

using namespace rlvr;

namespace {

ResponseRecord response_with(const std::vector<double>& entropies, double reward,
                             const std::vector<TokenId>& tokens = {}) {
  ResponseRecord r;
  const auto n = entropies.size();
  for (std::size_t t = 0; t < n; ++t) {
    TokenRecord tok;
    tok.token = tokens.empty() ? 0 : tokens[t];
    tok.position = static_cast<int>(t);
    tok.rel_position = n > 1 ? static_cast<double>(t) / static_cast<double>(n - 1) : 0.0;
    tok.entropy = entropies[t];
    r.tokens.push_back(tok);
  }
  r.reward = reward;
  return r;
}

// Tiny task for exhaustive enumeration: modulus 1 and no reasoning words
// leave V = 5 (0, +, <mod1>, <ans>, <eos>).
TaskSpec tiny_spec(int max_len) {
  TaskSpec s;
  s.modulus = 1;
  s.reasoning_tokens = 0;
  s.max_response_length = max_len;
  return s;
}

}  // namespace

TEST_SUITE("token_metrics") {

TEST_CASE("probability shift examples") {
  const auto before = testing::from_probs({0.30, 0.50, 0.20});
  const auto after = testing::from_probs({0.42, 0.40, 0.18});
  CHECK(probability_shift(before, after, 0) == doctest::Approx(0.12).epsilon(1e-12));
  CHECK(probability_shift(before, before, 1) == 0.0);
  CHECK_THROWS_AS(probability_shift(before, testing::from_probs({0.5, 0.5}), 0), ContractViolation);

  std::vector<ShiftRecord> none;
  CHECK(fraction_below(none, 0.06) == 1.0);
  std::vector<ShiftRecord> some(4);
  some[0].delta = 0.01;
  some[1].delta = -0.07;
  some[2].delta = 0.06;
  some[3].delta = -0.059;
  CHECK(fraction_below(some, 0.06) == 0.5);
}

TEST_CASE("learning rate 0 shifts nothing") {
  Task task{TaskSpec{}};
  Policy policy = testing::random_policy(task, 51, 1.0);
  std::vector<Instance> list;
  for (std::uint64_t i = 0; i < 4; ++i) list.push_back(task.instance(51, i));
  const auto batch = collect_batch(policy, task, list, 4, SamplingConfig{}, 51, 0);
  TrainerConfig cfg;
  cfg.batch_groups = 4;
  cfg.mini_batch_groups = 2;
  cfg.group_size = 4;
  cfg.optimizer.learning_rate = 0.0;
  Optimizer opt(cfg.optimizer, policy.params.vocab_size(), policy.params.dim());
  const auto stats = train_step(batch, policy, opt, cfg, ActiveShapers{}, nullptr, 1e-300);
  CHECK_FALSE(stats.shifts.empty());
  for (const auto& s : stats.shifts) CHECK(s.delta == 0.0);
  CHECK(stats.small_shift_fraction == 1.0);
}

TEST_CASE("best alternative") {
  const auto d = testing::from_probs({0.1, 0.4, 0.2, 0.2, 0.1});
  CHECK(best_alternative(d, 0) == 1);
  CHECK(best_alternative(d, 1) == 2);  // tie between 2 and 3 goes to the lower id
  CHECK_THROWS_AS(best_alternative(d, 7), ContractViolation);
}

TEST_CASE("an answer-deciding substitution has impact exactly 1") {
  Task task(tiny_spec(5));
  Policy policy = testing::random_policy(task, 52, 0.0);
  const auto& v = task.vocabulary();
  const auto inst = task.instance(52, 0);
  const TokenId truth = inst.truth.at(0);
  // head that emits <eos> with certainty after "<ans> truth"
  const auto code = policy.feature_map.encode_prompt(inst.prompt);
  const auto h = policy.feature_map.features(code, std::vector<TokenId>{v.delimiter(), truth});
  for (std::size_t j = 0; j < h.size(); ++j) policy.params.weights(static_cast<std::size_t>(v.eos()), j) = 1000.0 * h[j];

  const std::vector<TokenId> response{v.delimiter(), truth, v.eos()};
  Rng rng = substream(52, {1});
  for (int k : {1, 3, 8, kExhaustive}) {
    const auto r = intervene(policy, task, inst, response, 1, k, rng);
    CHECK(r.substitute != r.original);
    CHECK(r.original_accuracy == 1.0);
    CHECK(r.substitute_accuracy == 0.0);
    CHECK(r.impact == 1.0);
    CHECK(r.k == k);
  }
  CHECK_THROWS_AS(intervene(policy, task, inst, response, 3, 1, rng), ContractViolation);
  CHECK_THROWS_AS(intervene(policy, task, inst, response, -1, 1, rng), ContractViolation);
  CHECK_THROWS_AS(intervene(policy, task, inst, response, 0, -2, rng), ContractViolation);
}

TEST_CASE("exhaustive intervention equals an odometer enumeration oracle") {
  for (int max_len : {3, 4, 5}) {
    Task task(tiny_spec(max_len));
    REQUIRE(task.vocabulary().size() == 5);
    const Policy policy = testing::random_policy(task, 53 + static_cast<std::uint64_t>(max_len), 1.5);
    const auto w = testing::to_grid(policy.params.weights);
    const auto& v = task.vocabulary();
    const auto inst = task.instance(53, 0);
    const auto code = policy.feature_map.encode_prompt(inst.prompt);
    const int delim = v.delimiter(), eos = v.eos(), truth = inst.truth.at(0);

    const auto next = [&](const std::vector<int>& prefix) {
      const std::vector<TokenId> ids(prefix.begin(), prefix.end());
      return oracle::softmax(oracle::matvec(w, policy.feature_map.features(code, ids)), 1.0);
    };
    // verdict written out independently of the library verifier
    const auto correct = [&](const std::vector<int>& seq) {
      std::vector<int> body;
      for (int t : seq) {
        if (t == eos) break;
        body.push_back(t);
      }
      int delims = 0;
      std::size_t at = 0;
      for (std::size_t i = 0; i < body.size(); ++i)
        if (body[i] == delim) {
          ++delims;
          at = i;
        }
      return delims == 1 && body.size() == at + 2 && body[at + 1] == truth;
    };

    Rng rng = substream(53, {static_cast<std::uint64_t>(max_len)});
    for (int trial = 0; trial < 6; ++trial) {
      // arbitrary response over the vocabulary, ending at <eos> or the cap
      std::vector<TokenId> response;
      while (static_cast<int>(response.size()) < max_len) {
        response.push_back(static_cast<TokenId>(uniform01(rng) * 5));
        if (response.back() == eos) break;
      }
      for (int pos = 0; pos < static_cast<int>(response.size()); ++pos) {
        const auto r = intervene(policy, task, inst, response, pos, kExhaustive, rng);
        std::vector<int> base(response.begin(), response.begin() + pos);
        auto with = [&](int token) {
          auto p = base;
          p.push_back(token);
          if (token == eos) return correct(p) ? 1.0 : 0.0;
          return oracle::enumerate_expected_accuracy(5, static_cast<std::size_t>(max_len) - p.size(), eos, p, next,
                                                     correct);
        };
        const auto probs = next(base);
        int alt = -1;
        for (int t = 0; t < 5; ++t)
          if (t != response[static_cast<std::size_t>(pos)] && (alt < 0 || probs[t] > probs[alt])) alt = t;
        CHECK(r.substitute == alt);
        CHECK(std::abs(r.original_accuracy - with(response[static_cast<std::size_t>(pos)])) < 1e-12);
        CHECK(std::abs(r.substitute_accuracy - with(alt)) < 1e-12);
        CHECK(std::abs(r.impact) <= 1.0);
      }
    }
  }
}

TEST_CASE("sampled intervention converges to the exhaustive value") {
  Task task(tiny_spec(4));
  const Policy policy = testing::random_policy(task, 54, 1.0);
  const auto& v = task.vocabulary();
  const auto inst = task.instance(54, 0);
  const std::vector<TokenId> response{v.delimiter(), inst.truth.at(0), v.eos()};
  Rng rng = substream(54, {1});
  const auto exact = intervene(policy, task, inst, response, 0, kExhaustive, rng);
  const auto sampled = intervene(policy, task, inst, response, 0, 20000, rng);
  CHECK(std::abs(sampled.original_accuracy - exact.original_accuracy) < 0.02);
  CHECK(std::abs(sampled.substitute_accuracy - exact.substitute_accuracy) < 0.02);
}

TEST_CASE("enumeration refuses oversized trees") {
  Task task{TaskSpec{}};
  const Policy policy = testing::random_policy(task, 55, 1.0);
  const auto inst = task.instance(55, 0);
  const auto code = policy.feature_map.encode_prompt(inst.prompt);
  CHECK_THROWS_AS(expected_accuracy(policy, task, inst, code, std::vector<TokenId>{}), ContractViolation);
}

TEST_CASE("stage detector examples") {
  const StageDetectorConfig cfg{25, 1e-3, 10};
  SUBCASE("linear decline stays rising") {
    std::vector<double> s;
    for (int t = 0; t < 300; ++t) s.push_back(2.0 - 0.01 * t);
    const auto st = detect_stage(s, cfg);
    CHECK(st.label == Stage::kRising);
    CHECK_FALSE(st.transition_step.has_value());
    CHECK(st.smoothed.size() == 300 - 25 + 1);
  }
  SUBCASE("constant series plateaus at W + P") {
    const auto st = detect_stage(std::vector<double>(100, 0.7), cfg);
    CHECK(st.label == Stage::kPlateau);
    REQUIRE(st.transition_step.has_value());
    CHECK(*st.transition_step == 25 + 10);
  }
  SUBCASE("a knee at step 150 is found within the detection lag") {
    std::vector<double> s;
    for (int t = 0; t < 300; ++t) s.push_back(t < 150 ? 3.0 - 0.015 * t : 3.0 - 0.015 * 150);
    const auto st = detect_stage(s, cfg);
    REQUIRE(st.transition_step.has_value());
    CHECK(*st.transition_step >= 150);
    CHECK(*st.transition_step <= 150 + 25 + 10);
  }
  SUBCASE("the label latches") {
    StageDetector det(cfg);
    for (int t = 0; t < 40; ++t) det.observe(1.0);
    REQUIRE(det.stage() == Stage::kPlateau);
    const auto at = det.state().transition_step;
    for (int t = 0; t < 100; ++t) CHECK(det.observe(1.0 - 0.05 * t) == Stage::kPlateau);
    CHECK(det.state().transition_step == at);
  }
  CHECK_THROWS_AS(detect_stage(std::vector<double>(10, 1.0), cfg), ContractViolation);
}

TEST_CASE("property: stage labels change at most once, rising to plateau") {
  Rng rng = substream(56, {1});
  for (int trial = 0; trial < 50; ++trial) {
    StageDetector det({5 + trial % 20, 1e-3 * (1 + trial % 4), 1 + trial % 12});
    Stage prev = Stage::kRising;
    int changes = 0;
    double h = 2.0;
    for (int t = 0; t < 400; ++t) {
      h += (t < 100 ? -0.01 : 0.0) + 0.002 * (uniform01(rng) - 0.5);
      const Stage s = det.observe(h);
      if (s != prev) {
        ++changes;
        CHECK(s == Stage::kPlateau);
      }
      prev = s;
    }
    CHECK(changes <= 1);
  }
}

TEST_CASE("positional profile examples") {
  SUBCASE("equal entropies fill every occupied bin with that value") {
    std::vector<ResponseRecord> rs{response_with(std::vector<double>(21, 0.4), 1.0)};
    for (const auto& b : positional_entropy_profile(rs, 20)) {
      REQUIRE(b.mean.has_value());
      CHECK(*b.mean == doctest::Approx(0.4).epsilon(1e-15));
    }
  }
  SUBCASE("two bins split a single response") {
    std::vector<ResponseRecord> rs{response_with({1.0, 2.0, 3.0, 4.0, 5.0}, 1.0)};
    const auto p = positional_entropy_profile(rs, 2);
    // l = 0, .25 | .5, .75, 1
    CHECK(*p[0].mean == doctest::Approx(1.5));
    CHECK(*p[1].mean == doctest::Approx(4.0));
    CHECK(p[0].count == 2);
    CHECK(p[1].count == 3);
  }
  SUBCASE("U-shaped fixture") {
    std::vector<ResponseRecord> rs;
    double last_sum = 0.0, last_n = 0.0;
    for (int r = 0; r < 5; ++r) {
      std::vector<double> h;
      const int n = 101 + r * 20;
      for (int t = 0; t < n; ++t) {
        const double l = static_cast<double>(t) / (n - 1);
        h.push_back(l < 0.1 || l > 0.9 ? 1.0 : 0.2);
        if (t * 10 >= 9 * (n - 1)) {  // last of 10 bins, counted in integers
          last_sum += h.back();
          last_n += 1.0;
        }
      }
      rs.push_back(response_with(h, -1.0));
    }
    const auto p = positional_entropy_profile(rs, 10);
    CHECK(*p.front().mean == doctest::Approx(1.0).epsilon(1e-12));
    // l = 0.9 itself sits in the last bin at the low value
    CHECK(*p.back().mean == doctest::Approx(last_sum / last_n).epsilon(1e-12));
    CHECK(*p.back().mean > 0.9);
    for (std::size_t b = 1; b + 1 < p.size(); ++b) CHECK(*p[b].mean == doctest::Approx(0.2).epsilon(1e-12));
  }
  SUBCASE("empty bins are absent") {
    std::vector<ResponseRecord> rs{response_with({0.3}, 1.0)};
    const auto p = positional_entropy_profile(rs, 4);
    CHECK(p[0].mean.has_value());
    for (std::size_t b = 1; b < 4; ++b) CHECK_FALSE(p[b].mean.has_value());
  }
  CHECK_THROWS_AS(positional_entropy_profile(std::span<const ResponseRecord>{}, 1), ContractViolation);
}

TEST_CASE("property: profile conserves the global mean entropy") {
  Rng rng = substream(57, {1});
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<ResponseRecord> rs;
    double sum = 0.0;
    std::size_t n = 0;
    for (int r = 0; r < 1 + trial % 9; ++r) {
      std::vector<double> h(1 + static_cast<std::size_t>(uniform01(rng) * 16));
      for (double& x : h) {
        x = 3.0 * uniform01(rng);
        sum += x;
        ++n;
      }
      rs.push_back(response_with(h, 1.0));
    }
    const auto p = positional_entropy_profile(rs, 2 + trial % 25);
    double weighted = 0.0;
    std::size_t count = 0;
    for (const auto& b : p)
      if (b.mean) {
        weighted += *b.mean * static_cast<double>(b.count);
        count += b.count;
      }
    CHECK(count == n);
    CHECK(std::abs(weighted / static_cast<double>(count) - sum / static_cast<double>(n)) < 1e-9);
  }
}

TEST_CASE("positive/negative entropy split") {
  std::vector<ResponseRecord> rs{response_with({0.1, 0.3}, 1.0), response_with({0.5}, 1.0),
                                 response_with({1.0, 2.0, 0.0}, -1.0)};
  const auto s = entropy_split_pos_neg(rs);
  CHECK(*s.positive == doctest::Approx(0.9 / 3.0).epsilon(1e-14));
  CHECK(*s.negative == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(s.positive_tokens == 3);
  CHECK(s.negative_tokens == 3);

  std::vector<ResponseRecord> pos_only{rs[0], rs[1]};
  CHECK_FALSE(entropy_split_pos_neg(pos_only).negative.has_value());

  std::vector<ResponseRecord> mirror{response_with({0.2, 0.9}, 1.0), response_with({0.2, 0.9}, -1.0)};
  const auto m = entropy_split_pos_neg(mirror);
  CHECK(*m.positive == *m.negative);

  std::vector<RolloutGroup> groups(2);
  groups[0].responses = {rs[0], rs[2]};
  groups[1].responses = {rs[1]};
  const auto g = entropy_split_pos_neg(groups);
  CHECK(*g.positive == doctest::Approx(*s.positive).epsilon(1e-14));
  CHECK(*g.negative == doctest::Approx(*s.negative).epsilon(1e-14));
}

TEST_CASE("entropy-drop examples") {
  SUBCASE("the single dropping type is the one returned") {
    TokenEntropyHistory hist(5);
    for (int step = 0; step < 8; ++step) {
      hist.begin_step(step);
      for (TokenId t = 0; t < 5; ++t) hist.observe(t, t == 3 && step >= 4 ? 0.5 : 1.0, true);
    }
    const auto top = top_entropy_drop_tokens(hist, 0.2, {4, 4});
    REQUIRE(top.size() == 1);
    CHECK(top[0].token == 3);
    CHECK(top[0].drop == doctest::Approx(0.5).epsilon(1e-15));
  }
  SUBCASE("constant types tie and are ordered by id") {
    TokenEntropyHistory hist(5);
    for (int step = 0; step < 4; ++step) {
      hist.begin_step(step);
      for (TokenId t = 4; t >= 0; --t) hist.observe(t, 0.8, step % 2 == 0);
    }
    const auto all = top_entropy_drop_tokens(hist, 1.0);
    REQUIRE(all.size() == 5);
    for (std::size_t i = 0; i < 5; ++i) {
      CHECK(all[i].token == static_cast<TokenId>(i));
      CHECK(all[i].drop == 0.0);
    }
    CHECK(top_entropy_drop_tokens(hist, 0.2).size() == 1);
  }
  SUBCASE("provenance counts step columns by reward side") {
    TokenEntropyHistory hist(3);
    std::vector<ResponseRecord> s0{response_with({1.0, 1.0}, 1.0, {0, 1}), response_with({1.0}, -1.0, {1})};
    std::vector<ResponseRecord> s1{response_with({0.5}, -1.0, {0}), response_with({0.5}, -1.0, {2})};
    std::vector<ResponseRecord> s2{response_with({0.2, 0.2}, 1.0, {0, 2})};
    hist.add_responses(0, s0);
    hist.add_responses(1, s1);
    hist.add_responses(2, s2);
    const auto p0 = hist.provenance(0);
    CHECK(p0.positive_only == 2);
    CHECK(p0.negative_only == 1);
    CHECK(p0.both == 0);
    CHECK(hist.provenance(1).both == 1);
    CHECK(hist.step_label(2) == 2);
    CHECK_FALSE(hist.mean(1, 1).has_value());
  }
  TokenEntropyHistory one(3);
  one.begin_step(0);
  CHECK_THROWS_AS(top_entropy_drop_tokens(one, 0.5), ContractViolation);
  TokenEntropyHistory empty(3);
  CHECK_THROWS_AS(empty.observe(0, 1.0, true), ContractViolation);
}

TEST_CASE("property: entropy-drop ranking matches an independent sort") {
  Rng rng = substream(58, {1});
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t vocab = 3 + static_cast<std::size_t>(uniform01(rng) * 20);
    const std::size_t steps = 2 + static_cast<std::size_t>(uniform01(rng) * 30);
    const std::size_t early = 1 + static_cast<std::size_t>(uniform01(rng) * static_cast<double>(steps / 2));
    const std::size_t late = 1 + static_cast<std::size_t>(uniform01(rng) * static_cast<double>(steps / 2));
    TokenEntropyHistory hist(vocab);
    std::vector<oracle::Observation> obs;
    for (std::size_t c = 0; c < steps; ++c) {
      hist.begin_step(static_cast<std::int64_t>(10 * c));
      const int count = static_cast<int>(uniform01(rng) * 40);
      for (int i = 0; i < count; ++i) {
        const int tok = static_cast<int>(uniform01(rng) * static_cast<double>(vocab));
        // coarse values make exact ties common
        const double h = std::floor(uniform01(rng) * 4.0) / 4.0;
        hist.observe(tok, h, uniform01(rng) < 0.5);
        obs.push_back({c, tok, h});
      }
    }
    const auto expected = oracle::ranked_drops(obs, steps, early, late);
    const double fraction = 0.1 + 0.9 * uniform01(rng);
    const auto got = top_entropy_drop_tokens(hist, fraction, {early, late});
    const auto keep = expected.empty()
                          ? std::size_t{0}
                          : std::max<std::size_t>(1, static_cast<std::size_t>(
                                                         std::ceil(fraction * static_cast<double>(expected.size()) - 1e-9)));
    REQUIRE(got.size() == keep);
    for (std::size_t i = 0; i < got.size(); ++i) {
      CHECK(got[i].token == expected[i].first);
      CHECK(got[i].drop == doctest::Approx(expected[i].second).epsilon(1e-12).scale(1.0));
    }
  }
}

}  // TEST_SUITE
