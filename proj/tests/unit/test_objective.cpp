#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "eopd/divergence.hpp"
#include "eopd/objective.hpp"
#include "eopd/probdist.hpp"
#include "eopd/rng.hpp"

using namespace eopd;

namespace {

std::vector<double> normal_logits(Rng& rng, std::size_t n, double scale = 1.0) {
  std::vector<double> z(n);
  for (double& v : z) v = scale * rng.normal();
  return z;
}

TeacherQuery query_for(const Categorical& teacher, TokenId x, std::size_t k) {
  return TeacherQuery{log_prob(teacher, x), entropy(teacher), top_k(teacher, k)};
}

std::vector<double> central_diff(const std::function<double(std::span<const double>)>& f,
                                 std::vector<double> z, double h = 1e-6) {
  std::vector<double> g(z.size());
  for (std::size_t j = 0; j < z.size(); ++j) {
    const double orig = z[j];
    z[j] = orig + h;
    const double up = f(z);
    z[j] = orig - h;
    const double down = f(z);
    z[j] = orig;
    g[j] = (up - down) / (2 * h);
  }
  return g;
}

double rel_error(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0, scale = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::fabs(a[i] - b[i]));
    scale = std::max({scale, std::fabs(a[i]), std::fabs(b[i])});
  }
  return scale < 1e-9 ? diff : diff / scale;
}

// A random instance whose ratio keeps a margin from the clip boundaries so the
// loss is smooth within the finite-difference stencil.
TokenLossInput random_instance(Rng& rng, std::size_t n, std::vector<double>& logits,
                               TeacherQuery& tq, Variant variant) {
  logits = normal_logits(rng, n);
  const auto teacher = softmax_temp(normal_logits(rng, n, 2.0), 1.0);
  const auto student = softmax_temp(logits, 1.0);
  const TokenId x = sample(student, rng);
  tq = query_for(teacher, x, 1 + rng.below(n));
  TokenLossInput in;
  in.student_logits = logits;
  double log_r;
  do {
    log_r = 0.6 * (rng.uniform() - 0.5);
  } while (std::fabs(std::exp(log_r) - 0.8) < 0.01 || std::fabs(std::exp(log_r) - 1.2) < 0.01);
  in.behavior_logp = log_prob(student, x) - log_r;
  in.token = x;
  in.teacher = &tq;
  in.variant = variant;
  in.params.tau = 0.0;
  in.student_entropy = entropy(student);
  return in;
}

}  // namespace

TEST_CASE("variant names round-trip") {
  for (Variant v : {Variant::kOpd, Variant::kEopd, Variant::kFullFkl, Variant::kRandomFkl,
                    Variant::kEntropyBonus, Variant::kAdvShaping, Variant::kKd}) {
    CHECK(parse_variant(variant_name(v)) == v);
  }
  CHECK(parse_variant("eopd") == Variant::kEopd);
  CHECK_THROWS_AS(parse_variant("GRPO"), std::invalid_argument);
}

TEST_CASE("loss parameter validation") {
  LossParams p;
  CHECK_NOTHROW(p.validate());
  p.kappa = 1.0;
  CHECK_THROWS_AS(p.validate(), std::invalid_argument);
  p = {};
  p.clip_eps = 1.0;
  CHECK_THROWS_AS(p.validate(), std::invalid_argument);
  p = {};
  p.beta = -0.1;
  CHECK_THROWS_AS(p.validate(), std::invalid_argument);
  p = {};
  p.fkl_fraction = 1.5;
  CHECK_THROWS_AS(p.validate(), std::invalid_argument);
}

TEST_CASE("clipped surrogate at ratio one") {
  const std::vector<double> z{0.3, -0.2, 1.1};
  const auto pi = softmax_temp(z, 1.0);
  const TeacherQuery tq{-2.0, 1.0, top_k(pi, 2)};
  TokenLossInput in;
  in.student_logits = z;
  in.token = 1;
  in.behavior_logp = log_prob(pi, 1);
  in.teacher = &tq;
  const auto out = clipped_rkl_loss(in);
  const double adv = -2.0 - in.behavior_logp;
  CHECK(out.ratio == 1.0);
  CHECK(out.loss == -adv);
  CHECK_FALSE(out.clipped);
  for (std::size_t j = 0; j < 3; ++j)
    CHECK(out.grad[j] == doctest::Approx(-adv * ((j == 1) - pi[j])).epsilon(1e-14));
}

TEST_CASE("clipped surrogate with zero advantage") {
  const std::vector<double> z{0.3, -0.2, 1.1};
  const auto pi = softmax_temp(z, 1.0);
  const TeacherQuery tq{log_prob(pi, 2), entropy(pi), top_k(pi, 2)};
  TokenLossInput in;
  in.student_logits = z;
  in.token = 2;
  in.behavior_logp = log_prob(pi, 2);
  in.teacher = &tq;
  const auto out = clipped_rkl_loss(in);
  CHECK(out.loss == 0.0);
  for (double g : out.grad) CHECK(g == 0.0);
}

TEST_CASE("clipped surrogate above the band") {
  // ratio 1.5, eps 0.2, advantage 1.
  const std::vector<double> z{0.0, 0.0};
  const double logp = std::log(0.5);
  const TeacherQuery tq{logp - std::log(1.5) + 1.0, 0.69, top_k(Categorical({0.5, 0.5}), 1)};
  TokenLossInput in;
  in.student_logits = z;
  in.token = 0;
  in.behavior_logp = logp - std::log(1.5);
  in.teacher = &tq;
  const auto out = clipped_rkl_loss(in);
  CHECK(out.ratio == doctest::Approx(1.5).epsilon(1e-14));
  CHECK(out.loss == doctest::Approx(-1.2).epsilon(1e-14));
  CHECK(out.clipped);
  for (double g : out.grad) CHECK(g == 0.0);
}

TEST_CASE("clipped surrogate rejects an impossible behavior log-prob") {
  const std::vector<double> z{0.0, 0.0};
  const TeacherQuery tq{-1.0, 0.69, top_k(Categorical({0.5, 0.5}), 1)};
  TokenLossInput in;
  in.student_logits = z;
  in.behavior_logp = -std::numeric_limits<double>::infinity();
  in.teacher = &tq;
  CHECK_THROWS_AS(clipped_rkl_loss(in), std::invalid_argument);
}

TEST_CASE("forward-KL gate is strict") {
  const std::vector<double> z{0.3, -0.2, 1.1};
  const auto pi = softmax_temp(z, 1.0);
  TeacherQuery tq{-1.0, 0.8, top_k(Categorical({0.5, 0.3, 0.2}), 2)};
  TokenLossInput in;
  in.student_logits = z;
  in.behavior_logp = log_prob(pi, 0);
  in.teacher = &tq;
  in.params.tau = 0.8;
  auto out = fkl_term_loss(in);
  CHECK_FALSE(out.gate_active);
  CHECK(out.loss == 0.0);
  for (double g : out.grad) CHECK(g == 0.0);
  tq.entropy = std::nextafter(0.8, 1.0);
  out = fkl_term_loss(in);
  CHECK(out.gate_active);
  CHECK(out.loss == doctest::Approx(truncated_forward_kl(tq.topk, pi)).epsilon(1e-15));
}

TEST_CASE("forward-KL fixed point") {
  // Student equals the renormalized top-2 teacher and has no mass outside it.
  const std::vector<double> z{std::log(0.625), std::log(0.375), -1e4};
  TeacherQuery tq{-1.0, 1.0, top_k(Categorical({0.5, 0.3, 0.2}), 2)};
  TokenLossInput in;
  in.student_logits = z;
  in.teacher = &tq;
  in.params.tau = 0.8;
  const auto out = fkl_term_loss(in);
  CHECK(out.gate_active);
  for (double g : out.grad) CHECK(std::fabs(g) < 1e-15);
}

TEST_CASE("forward-KL term matches finite differences on V=3, k=2") {
  const std::vector<double> z{0.4, -0.7, 0.1};
  TeacherQuery tq{-1.0, 1.0, top_k(Categorical({0.5, 0.3, 0.2}), 2)};
  TokenLossInput in;
  in.student_logits = z;
  in.teacher = &tq;
  const auto out = fkl_term_loss(in);
  const auto fd = central_diff(
      [&](std::span<const double> w) {
        TokenLossInput c = in;
        c.student_logits = w;
        return fkl_term_loss(c).loss;
      },
      z);
  CHECK(rel_error(out.grad, fd) < 1e-6);
}

TEST_CASE("EOPD reductions and linearity") {
  Rng rng(3);
  std::vector<double> logits;
  TeacherQuery tq;
  TokenLossInput in = random_instance(rng, 5, logits, tq, Variant::kEopd);

  in.params.tau = tq.entropy;  // gate closed
  const auto closed = eopd_token_loss(in);
  const auto opd = clipped_rkl_loss(in);
  CHECK(closed.loss == opd.loss);
  CHECK(closed.grad == opd.grad);
  CHECK_FALSE(closed.gate_active);

  in.params.tau = 0.0;
  const auto open = eopd_token_loss(in);
  const auto fkl = fkl_term_loss(in);
  CHECK(open.gate_active);
  CHECK(std::fabs(open.loss - (opd.loss + fkl.loss)) < 1e-12);
  for (std::size_t j = 0; j < 5; ++j)
    CHECK(std::fabs(open.grad[j] - (opd.grad[j] + fkl.grad[j])) < 1e-12);

  TokenLossInput full = in;
  full.variant = Variant::kFullFkl;
  const auto f = token_loss(full);
  CHECK(f.loss == open.loss);
  CHECK(f.grad == open.grad);
}

TEST_CASE("entropy bonus") {
  Rng rng(4);
  std::vector<double> logits;
  TeacherQuery tq;
  TokenLossInput in = random_instance(rng, 6, logits, tq, Variant::kEntropyBonus);
  in.params.beta = 0.0;
  const auto off = entropy_bonus_loss(in);
  const auto opd = clipped_rkl_loss(in);
  CHECK(off.loss == opd.loss);
  CHECK(off.grad == opd.grad);

  in.params.beta = -0.5;
  CHECK_THROWS_AS(entropy_bonus_loss(in), std::invalid_argument);

  // Uniform policy: the bonus gradient vanishes.
  const std::vector<double> flat(6, 0.3);
  in.student_logits = flat;
  in.params.beta = 0.0;
  const auto base = entropy_bonus_loss(in);
  in.params.beta = 0.5;
  const auto bonus = entropy_bonus_loss(in);
  for (std::size_t j = 0; j < 6; ++j) CHECK(std::fabs(bonus.grad[j] - base.grad[j]) < 1e-15);
  CHECK(bonus.loss == doctest::Approx(base.loss - 0.5 * std::log(6.0)).epsilon(1e-14));

  in.student_logits = logits;
  in.params.beta = 0.01;
  const auto out = entropy_bonus_loss(in);
  const auto fd = central_diff(
      [&](std::span<const double> w) {
        TokenLossInput c = in;
        c.student_logits = w;
        return entropy_bonus_loss(c).loss;
      },
      logits);
  CHECK(rel_error(out.grad, fd) < 1e-6);
}

TEST_CASE("advantage shaping") {
  CHECK(advantage_shaping(0.0, 3.0, 0.1, 2.0) == 0.0);
  CHECK(advantage_shaping(-1.0, 100.0, 0.1, 2.0) == doctest::Approx(-0.5).epsilon(1e-15));
  CHECK(advantage_shaping(1.0, 2.0, 0.1, 2.0) == doctest::Approx(1.2).epsilon(1e-15));
  CHECK_THROWS_AS(advantage_shaping(1.0, 2.0, 0.1, 1.0), std::invalid_argument);

  Rng rng(6);
  for (int i = 0; i < 10000; ++i) {
    const double adv = 10 * rng.normal();
    const double h = 5 * rng.uniform();
    const double alpha = rng.uniform();
    const double kappa = 1.0 + 1e-6 + 4 * rng.uniform();
    const double shaped = advantage_shaping(adv, h, alpha, kappa);
    if (adv != 0.0) CHECK((shaped > 0) == (adv > 0));
  }
}

TEST_CASE("advantage shaping feeds the surrogate") {
  Rng rng(8);
  std::vector<double> logits;
  TeacherQuery tq;
  TokenLossInput in = random_instance(rng, 5, logits, tq, Variant::kAdvShaping);
  const double adv = tq.token_logp - in.behavior_logp;
  const double shaped =
      advantage_shaping(adv, in.student_entropy, in.params.alpha, in.params.kappa);
  // Rebuild an OPD input whose raw advantage equals the shaped one.
  TeacherQuery tq2 = tq;
  tq2.token_logp = in.behavior_logp + shaped;
  TokenLossInput opd = in;
  opd.teacher = &tq2;
  opd.variant = Variant::kOpd;
  const auto a = token_loss(in);
  const auto b = token_loss(opd);
  CHECK(a.loss == doctest::Approx(b.loss).epsilon(1e-13));
  for (std::size_t j = 0; j < 5; ++j) CHECK(a.grad[j] == doctest::Approx(b.grad[j]).epsilon(1e-12));
}

TEST_CASE("KD loss reductions") {
  // One-hot student on the token: cross-entropy vanishes.
  const std::vector<double> z{-1e4, 50.0, -1e4};
  const auto teacher = Categorical({0.2, 0.7, 0.1});
  const TeacherQuery tq = query_for(teacher, 1, 2);
  const auto ce = kd_offpolicy_loss(z, tq, 1, 1.0, 0.0);
  CHECK(std::fabs(ce.loss) < 1e-12);
  for (double g : ce.grad) CHECK(std::fabs(g) < 1e-12);

  Rng rng(10);
  const auto w = normal_logits(rng, 3);
  const auto kl = kd_offpolicy_loss(w, tq, 1, 0.0, 1.0);
  TokenLossInput in;
  in.student_logits = w;
  in.teacher = &tq;
  in.params.tau = -1.0;
  const auto fkl = fkl_term_loss(in);
  CHECK(kl.loss == fkl.loss);
  CHECK(kl.grad == fkl.grad);
}

TEST_CASE("analytic gradients match finite differences on random instances") {
  Rng rng(12);
  struct Case {
    const char* name;
    Variant variant;
  };
  for (const Case& c : {Case{"clipped", Variant::kOpd}, Case{"fkl", Variant::kFullFkl},
                        Case{"eopd", Variant::kEopd}, Case{"bonus", Variant::kEntropyBonus},
                        Case{"kd", Variant::kKd}}) {
    CAPTURE(c.name);
    for (int trial = 0; trial < 100; ++trial) {
      std::vector<double> logits;
      TeacherQuery tq;
      const std::size_t n = 2 + rng.below(15);
      TokenLossInput in = random_instance(rng, n, logits, tq, c.variant);
      in.params.beta = 0.05;
      const auto loss_at = [&](std::span<const double> w) {
        TokenLossInput x = in;
        x.student_logits = w;
        if (c.variant == Variant::kKd)
          return kd_offpolicy_loss(w, tq, in.token, 0.5, 0.5).loss;
        if (c.variant == Variant::kFullFkl) return fkl_term_loss(x).loss;
        return token_loss(x).loss;
      };
      std::vector<double> grad;
      if (c.variant == Variant::kKd) {
        grad = kd_offpolicy_loss(logits, tq, in.token, 0.5, 0.5).grad;
      } else if (c.variant == Variant::kFullFkl) {
        grad = fkl_term_loss(in).grad;
      } else {
        grad = token_loss(in).grad;
      }
      CHECK(rel_error(grad, central_diff(loss_at, logits)) < 1e-5);
    }
  }
}

TEST_CASE("clip inactivity inside the band") {
  Rng rng(14);
  for (int trial = 0; trial < 1000; ++trial) {
    const double eps = 0.05 + 0.9 * rng.uniform();
    const double r = (1 - eps) + 2 * eps * rng.uniform();
    const double adv = 4 * rng.normal();
    const std::vector<double> z{0.0, 0.0, 0.0};
    const double logp = std::log(1.0 / 3);
    const TeacherQuery tq{logp - std::log(r) + adv, 1.0, top_k(Categorical({0.5, 0.3, 0.2}), 2)};
    TokenLossInput in;
    in.student_logits = z;
    in.behavior_logp = logp - std::log(r);
    in.teacher = &tq;
    in.params.clip_eps = eps;
    const auto out = clipped_rkl_loss(in);
    CHECK(out.loss == -out.ratio * (tq.token_logp - in.behavior_logp));
    CHECK_FALSE(out.clipped);
  }
}

TEST_CASE("raising tau never opens more gates") {
  Rng rng(15);
  std::vector<TeacherQuery> queries;
  for (int i = 0; i < 200; ++i) {
    const auto t = softmax_temp(normal_logits(rng, 8, 2.0), 1.0);
    queries.push_back(query_for(t, 0, 4));
  }
  const std::vector<double> z(8, 0.0);
  std::size_t prev = queries.size() + 1;
  for (double tau = 0.0; tau < 2.5; tau += 0.1) {
    std::size_t active = 0;
    for (const auto& q : queries) {
      TokenLossInput in;
      in.student_logits = z;
      in.behavior_logp = std::log(1.0 / 8);
      in.teacher = &q;
      in.variant = Variant::kEopd;
      in.params.tau = tau;
      active += token_loss(in).gate_active;
    }
    CHECK(active <= prev);
    prev = active;
  }
}

TEST_CASE("random placement uses the recorded gate") {
  Rng rng(16);
  std::vector<double> logits;
  TeacherQuery tq;
  TokenLossInput in = random_instance(rng, 6, logits, tq, Variant::kRandomFkl);
  in.random_gate = false;
  const auto off = token_loss(in);
  CHECK_FALSE(off.gate_active);
  CHECK(off.grad == clipped_rkl_loss(in).grad);
  in.random_gate = true;
  in.params.tau = 1e9;
  const auto on = token_loss(in);
  CHECK(on.gate_active);
  TokenLossInput full = in;
  full.variant = Variant::kFullFkl;
  CHECK(on.grad == token_loss(full).grad);
}
