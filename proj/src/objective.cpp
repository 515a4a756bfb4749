#include "eopd/objective.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <stdexcept>
#include <string>

#include "eopd/divergence.hpp"

namespace eopd {

namespace {

struct VariantEntry {
  Variant variant;
  std::string_view name;
};

constexpr std::array<VariantEntry, 7> kVariants{{
    {Variant::kOpd, "OPD"},
    {Variant::kEopd, "EOPD"},
    {Variant::kFullFkl, "FULL_FKL"},
    {Variant::kRandomFkl, "RANDOM_FKL"},
    {Variant::kEntropyBonus, "ENTROPY_BONUS"},
    {Variant::kAdvShaping, "ADV_SHAPING"},
    {Variant::kKd, "KD"},
}};

// The surrogate for an arbitrary (possibly shaped) advantage.
TokenLossOutput clipped_surrogate(std::span<const double> logits,
                                  double behavior_logp, TokenId token,
                                  double adv, double eps) {
  if (!std::isfinite(behavior_logp))
    throw std::invalid_argument(
        "clipped_rkl_loss: behavior log-probability must be finite");
  const Categorical probs = softmax_temp(logits, 1.0);
  const double ratio = std::exp(log_prob(probs, token) - behavior_logp);

  TokenLossOutput out;
  out.ratio = ratio;
  out.grad.assign(logits.size(), 0.0);
  const double unclipped = -ratio * adv;
  const double clipped = -std::clamp(ratio, 1.0 - eps, 1.0 + eps) * adv;
  if (unclipped >= clipped) {
    out.loss = unclipped;
    const double scale = -adv * ratio;
    for (std::size_t j = 0; j < logits.size(); ++j) {
      out.grad[j] = scale * ((j == token ? 1.0 : 0.0) - probs[j]);
    }
  } else {
    // The clipped branch is flat in theta.
    out.loss = clipped;
    out.clipped = true;
  }
  return out;
}

TokenLossOutput fkl_open_gate(std::span<const double> logits,
                              const TeacherQuery& teacher, double weight) {
  const Categorical probs = softmax_temp(logits, 1.0);
  TokenLossOutput out;
  out.gate_active = true;
  out.loss = weight * truncated_forward_kl(teacher.topk, probs);
  out.grad.resize(logits.size());
  for (std::size_t j = 0; j < logits.size(); ++j) out.grad[j] = weight * probs[j];
  for (std::size_t i = 0; i < teacher.topk.size(); ++i) {
    out.grad[teacher.topk.indices[i]] -= weight * teacher.topk.renorm_probs[i];
  }
  return out;
}

TokenLossOutput fkl_closed_gate(std::size_t vocab) {
  TokenLossOutput out;
  out.grad.assign(vocab, 0.0);
  return out;
}

// Adds the forward-KL term onto the surrogate output in place.
TokenLossOutput combine(TokenLossOutput surrogate, const TokenLossOutput& fkl) {
  surrogate.loss += fkl.loss;
  for (std::size_t j = 0; j < surrogate.grad.size(); ++j)
    surrogate.grad[j] += fkl.grad[j];
  surrogate.gate_active = fkl.gate_active;
  return surrogate;
}

const TeacherQuery& require_teacher(const TokenLossInput& in) {
  if (in.teacher == nullptr)
    throw std::invalid_argument("token loss: missing teacher query");
  return *in.teacher;
}

double advantage_of(const TokenLossInput& in) {
  return mc_reverse_kl_reward(require_teacher(in).token_logp, in.behavior_logp);
}

}  // namespace

std::string_view variant_name(Variant v) {
  for (const auto& e : kVariants) {
    if (e.variant == v) return e.name;
  }
  return "UNKNOWN";
}

Variant parse_variant(std::string_view name) {
  std::string upper(name);
  for (char& c : upper) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  for (const auto& e : kVariants) {
    if (e.name == upper) return e.variant;
  }
  throw std::invalid_argument("unknown variant '" + std::string(name) + "'");
}

void LossParams::validate() const {
  if (!(clip_eps > 0.0 && clip_eps < 1.0))
    throw std::invalid_argument("clip_eps must lie in (0, 1)");
  if (!(tau >= 0.0)) throw std::invalid_argument("tau must be >= 0");
  if (!(fkl_weight >= 0.0)) throw std::invalid_argument("fkl_weight must be >= 0");
  if (!(beta >= 0.0)) throw std::invalid_argument("beta must be >= 0");
  if (!(alpha >= 0.0)) throw std::invalid_argument("alpha must be >= 0");
  if (!(kappa > 1.0)) throw std::invalid_argument("kappa must be > 1");
  if (!(fkl_fraction >= 0.0 && fkl_fraction <= 1.0))
    throw std::invalid_argument("fkl_fraction must lie in [0, 1]");
  if (!(ce_weight >= 0.0) || !(kl_weight >= 0.0))
    throw std::invalid_argument("KD weights must be >= 0");
}

TokenLossOutput clipped_rkl_loss(const TokenLossInput& in) {
  return clipped_surrogate(in.student_logits, in.behavior_logp, in.token,
                           advantage_of(in), in.params.clip_eps);
}

TokenLossOutput fkl_term_loss(const TokenLossInput& in) {
  const TeacherQuery& teacher = require_teacher(in);
  if (teacher.entropy > in.params.tau)
    return fkl_open_gate(in.student_logits, teacher, in.params.fkl_weight);
  return fkl_closed_gate(in.student_logits.size());
}

TokenLossOutput eopd_token_loss(const TokenLossInput& in) {
  return combine(clipped_rkl_loss(in), fkl_term_loss(in));
}

TokenLossOutput entropy_bonus_loss(const TokenLossInput& in) {
  const double beta = in.params.beta;
  if (!(beta >= 0.0))
    throw std::invalid_argument("entropy_bonus_loss: beta must be >= 0");
  TokenLossOutput out = clipped_rkl_loss(in);
  if (beta == 0.0) return out;
  const Categorical probs = softmax_temp(in.student_logits, 1.0);
  const double h = entropy(probs);
  out.loss -= beta * h;
  for (std::size_t j = 0; j < probs.size(); ++j) {
    const double p = probs[j];
    if (p > 0.0) out.grad[j] += beta * p * (std::log(p) + h);
  }
  return out;
}

double advantage_shaping(double adv, double student_entropy, double alpha,
                         double kappa) {
  if (!(kappa > 1.0))
    throw std::invalid_argument("advantage_shaping: kappa must be > 1");
  return adv + std::min(alpha * student_entropy, std::abs(adv) / kappa);
}

TokenLossOutput kd_offpolicy_loss(std::span<const double> student_logits,
                                  const TeacherQuery& teacher, TokenId token,
                                  double w_ce, double w_kl) {
  const Categorical probs = softmax_temp(student_logits, 1.0);
  TokenLossOutput out;
  out.gate_active = w_kl > 0.0;
  out.loss = w_ce * -log_prob(probs, token) +
             w_kl * truncated_forward_kl(teacher.topk, probs);
  out.grad.resize(probs.size());
  for (std::size_t j = 0; j < probs.size(); ++j) {
    out.grad[j] = w_ce * (probs[j] - (j == token ? 1.0 : 0.0)) + w_kl * probs[j];
  }
  for (std::size_t i = 0; i < teacher.topk.size(); ++i) {
    out.grad[teacher.topk.indices[i]] -= w_kl * teacher.topk.renorm_probs[i];
  }
  return out;
}

TokenLossOutput token_loss(const TokenLossInput& in) {
  switch (in.variant) {
    case Variant::kOpd:
      return clipped_rkl_loss(in);
    case Variant::kEopd:
      return eopd_token_loss(in);
    case Variant::kFullFkl:
      return combine(clipped_rkl_loss(in),
                     fkl_open_gate(in.student_logits, require_teacher(in),
                                   in.params.fkl_weight));
    case Variant::kRandomFkl:
      return combine(clipped_rkl_loss(in),
                     in.random_gate
                         ? fkl_open_gate(in.student_logits, require_teacher(in),
                                         in.params.fkl_weight)
                         : fkl_closed_gate(in.student_logits.size()));
    case Variant::kEntropyBonus:
      return entropy_bonus_loss(in);
    case Variant::kAdvShaping: {
      const double shaped = advantage_shaping(
          advantage_of(in), in.student_entropy, in.params.alpha, in.params.kappa);
      return clipped_surrogate(in.student_logits, in.behavior_logp, in.token,
                               shaped, in.params.clip_eps);
    }
    case Variant::kKd:
      return kd_offpolicy_loss(in.student_logits, require_teacher(in), in.token,
                               in.params.ce_weight, in.params.kl_weight);
  }
  throw std::invalid_argument("token_loss: unknown variant");
}

}  // namespace eopd
