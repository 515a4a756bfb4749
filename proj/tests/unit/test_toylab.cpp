#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "doctest.h"
#include "eopd/probdist.hpp"
#include "eopd/rng.hpp"
#include "eopd/toylab.hpp"

using namespace eopd;
using namespace eopd::toy;

TEST_CASE("toy config validation") {
  ToyConfig c;
  CHECK_NOTHROW(c.validate());
  c.student_top = 81;
  CHECK_THROWS(c.validate());
  c = {};
  c.temperature = 0.0;
  CHECK_THROWS(c.validate());
  c = {};
  c.vocab = 4;
  c.student_top = 4;
  CHECK_THROWS(c.validate());  // five modes do not fit
}

TEST_CASE("toy teacher construction") {
  ToyConfig a;
  a.temperature = 0.3;
  ToyConfig b = a;
  b.temperature = 1.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng r1(seed), r2(seed), r3(seed);
    const auto z = make_toy_logits(a, r1);
    const auto ta = make_toy_teacher(a, r2);
    const auto tb = make_toy_teacher(b, r3);
    CHECK(entropy(ta) < entropy(tb));
    double s = 0;
    for (double p : ta.probs()) s += p;
    CHECK(std::fabs(s - 1.0) < 1e-12);
    const auto direct = softmax_temp(z, 0.3);
    CHECK(std::equal(direct.probs().begin(), direct.probs().end(), ta.probs().begin()));

    std::set<TokenId> modes;
    double base_max = -1e9;
    for (TokenId i = 0; i < z.size(); ++i) {
      if (std::find(a.mode_values.begin(), a.mode_values.end(), z[i]) != a.mode_values.end())
        modes.insert(i);
      else
        base_max = std::max(base_max, z[i]);
    }
    CHECK(modes.size() == 5);
    if (base_max < 1.7) {
      const auto v = top_k(ta, 5);
      CHECK(std::set<TokenId>(v.indices.begin(), v.indices.end()) == modes);
    }
  }
}

TEST_CASE("restricted student distribution") {
  Rng rng(2);
  std::vector<double> s(12);
  for (double& v : s) v = rng.normal();
  const auto full = restricted_student_dist(s, 12);
  const auto soft = softmax_temp(s, 1.0);
  CHECK(full.mass == doctest::Approx(1.0).epsilon(1e-14));
  for (std::size_t i = 0; i < 12; ++i)
    CHECK(full.renorm_probs[i] == doctest::Approx(soft[full.indices[i]]).epsilon(1e-14));

  const std::vector<double> flat(20, 0.0);
  const auto tied = restricted_student_dist(flat, 10);
  for (std::size_t i = 0; i < 10; ++i) CHECK(tied.indices[i] == i);
  CHECK(tied.mass < 1.0);
}

TEST_CASE("jaccard distance endpoints") {
  CHECK(jaccard_distance({1, 2, 3}, {3, 2, 1}) == 0.0);
  CHECK(jaccard_distance({1, 2}, {3, 4}) == 1.0);
  CHECK(jaccard_distance({1, 2, 3}, {2, 3, 4}) == doctest::Approx(0.5));
  CHECK(jaccard_distance({}, {}) == 0.0);
}

TEST_CASE("zero reward leaves the logits unchanged") {
  ToyConfig cfg;
  Rng init(5);
  std::vector<double> s(cfg.vocab);
  for (double& v : s) v = init.normal();
  const auto view = restricted_student_dist(s, cfg.student_top);
  std::vector<double> p(cfg.vocab, 0.0);
  for (std::size_t i = 0; i < view.size(); ++i) p[view.indices[i]] = view.renorm_probs[i];
  const Categorical teacher(p);
  ToyState state = make_toy_state(s);
  Rng rng(6);
  for (int i = 0; i < 20; ++i) {
    const auto rec = toy_step(state, teacher, cfg, rng);
    CHECK(std::fabs(rec.reward) < 1e-12);
  }
  for (std::size_t i = 0; i < s.size(); ++i) CHECK(std::fabs(state.student_logits[i] - s[i]) < 1e-10);
}

TEST_CASE("one-hot teacher inside the top set is learned") {
  ToyConfig cfg;
  cfg.lr = 0.5;
  Rng init(7);
  std::vector<double> s(cfg.vocab);
  for (double& v : s) v = init.normal();
  const auto view = restricted_student_dist(s, cfg.student_top);
  const TokenId target = view.indices[6];
  std::vector<double> p(cfg.vocab, 0.0);
  p[target] = 1.0;
  ToyState state = make_toy_state(s);
  Rng rng(8);
  std::vector<StepRecord> recs;
  for (int i = 0; i < 300; ++i) recs.push_back(toy_step(state, Categorical(p), cfg, rng));
  CHECK(recs.back().top1_index == target);
  const std::size_t settled = recs[150].top1_changes;
  CHECK(recs.back().top1_changes == settled);
  for (std::size_t i = 1; i < recs.size(); ++i) {
    CHECK(recs[i].top1_changes >= recs[i - 1].top1_changes);
    CHECK(recs[i].change_rate >= 0.0);
    CHECK(recs[i].change_rate <= 1.0);
  }
}

TEST_CASE("first step records no change and only the sampled logit moves") {
  ToyConfig cfg;
  Rng rng(9);
  const auto teacher = make_toy_teacher(cfg, rng);
  std::vector<double> s(cfg.vocab);
  for (double& v : s) v = rng.normal();
  ToyState state = make_toy_state(s);
  const auto rec = toy_step(state, teacher, cfg, rng);
  CHECK(rec.step == 0);
  CHECK(rec.change_rate == 0.0);
  CHECK(rec.top1_changes == 0);
  const auto view = restricted_student_dist(s, cfg.student_top);
  double p_s = 0;
  for (std::size_t i = 0; i < view.size(); ++i)
    if (view.indices[i] == rec.sampled) p_s = view.renorm_probs[i];
  CHECK(p_s > 0.0);
  CHECK(rec.reward == doctest::Approx(log_prob(teacher, rec.sampled) - std::log(p_s)));
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i == rec.sampled)
      CHECK(state.student_logits[i] == doctest::Approx(s[i] + cfg.lr * rec.reward));
    else
      CHECK(state.student_logits[i] == s[i]);
  }
}

TEST_CASE("run_toy determinism and empty runs") {
  ToyConfig cfg;
  cfg.steps = 50;
  const auto a = run_toy(cfg);
  const auto b = run_toy(cfg);
  REQUIRE(a.traces.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    REQUIRE(a.traces[i].steps.size() == 50);
    for (std::size_t j = 0; j < 50; ++j) {
      CHECK(a.traces[i].steps[j].reward == b.traces[i].steps[j].reward);
      CHECK(a.traces[i].steps[j].sampled == b.traces[i].steps[j].sampled);
    }
  }
  cfg.steps = 0;
  const auto e = run_toy(cfg);
  for (auto c : e.summary.top1_change_counts) CHECK(c == 0);
  CHECK(e.summary.mean_change_rate.empty());
  CHECK(e.summary.mean_change_rate_smoothed.empty());
}

TEST_CASE("summary statistics") {
  ToyConfig cfg;
  cfg.steps = 120;
  const auto run = run_toy(cfg);
  double m = 0;
  for (auto c : run.summary.top1_change_counts) m += c;
  m /= 3;
  double v = 0;
  for (auto c : run.summary.top1_change_counts) v += (c - m) * (c - m);
  CHECK(run.summary.top1_mean == doctest::Approx(m));
  CHECK(run.summary.top1_std == doctest::Approx(std::sqrt(v / 2)));
  for (std::size_t t = 0; t < 120; ++t) {
    double s = 0;
    for (const auto& tr : run.traces) s += tr.steps[t].change_rate;
    CHECK(run.summary.mean_change_rate[t] == doctest::Approx(s / 3));
  }
}

TEST_CASE("trailing smoothing") {
  const auto s = smooth({1, 2, 3, 4, 5}, 2);
  CHECK(s == std::vector<double>{1, 1.5, 2.5, 3.5, 4.5});
  CHECK(smooth({}, 3).empty());
}

TEST_CASE("scenario separation at defaults") {
  ToyConfig a;
  a.temperature = 0.3;
  ToyConfig b;
  b.temperature = 1.0;
  const auto ra = run_toy(a);
  const auto rb = run_toy(b);
  CHECK(rb.summary.top1_mean >= 5 * ra.summary.top1_mean);
  CHECK(ra.summary.mean_change_rate_smoothed.back() < 0.05);
  for (std::size_t t = a.warmup; t < a.steps; ++t)
    CHECK(rb.summary.mean_change_rate_smoothed[t] > ra.summary.mean_change_rate_smoothed[t]);
}
