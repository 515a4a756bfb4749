#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "eopd/probdist.hpp"
#include "eopd/teacher_query.hpp"

namespace eopd {

enum class Variant {
  kOpd,           // clipped reverse-KL surrogate only
  kEopd,          // + forward KL when teacher entropy exceeds tau
  kFullFkl,       // + forward KL at every token
  kRandomFkl,     // + forward KL at a random fraction of tokens
  kEntropyBonus,  // - beta * student entropy
  kAdvShaping,    // advantage + min(alpha H, |A| / kappa)
  kKd,            // off-policy cross-entropy + forward KL on teacher samples
};

std::string_view variant_name(Variant v);
// Accepts the names produced by variant_name (case-insensitive);
// throws std::invalid_argument otherwise.
Variant parse_variant(std::string_view name);

struct LossParams {
  double clip_eps = 0.2;
  double tau = 0.8;
  double fkl_weight = 1.0;
  double beta = 0.01;   // entropy bonus
  double alpha = 0.1;   // advantage shaping
  double kappa = 2.0;   // advantage shaping
  double fkl_fraction = 0.2;
  double ce_weight = 0.5;  // KD
  double kl_weight = 0.5;  // KD

  // Throws std::invalid_argument when a field is out of its domain.
  void validate() const;
};

struct TokenLossInput {
  std::span<const double> student_logits;
  double behavior_logp = 0.0;
  TokenId token = 0;
  const TeacherQuery* teacher = nullptr;
  Variant variant = Variant::kOpd;
  LossParams params;
  // Behavior-policy entropy recorded at rollout time (advantage shaping).
  double student_entropy = 0.0;
  // Bernoulli(fkl_fraction) draw recorded at rollout time (random placement).
  bool random_gate = false;
};

struct TokenLossOutput {
  double loss = 0.0;
  std::vector<double> grad;  // d loss / d student_logits
  bool gate_active = false;
  bool clipped = false;
  double ratio = 1.0;  // pi_theta(x) / pi_old(x); 1 when not computed
};

// max(-r A, -clip(r, 1-eps, 1+eps) A) with A from the recorded log-probs.
TokenLossOutput clipped_rkl_loss(const TokenLossInput& in);

// Top-k forward KL, active only when the teacher entropy is strictly above
// tau. Scaled by params.fkl_weight.
TokenLossOutput fkl_term_loss(const TokenLossInput& in);

// clipped_rkl_loss + fkl_term_loss.
TokenLossOutput eopd_token_loss(const TokenLossInput& in);

// clipped_rkl_loss - beta * H(pi_theta).
TokenLossOutput entropy_bonus_loss(const TokenLossInput& in);

// adv + min(alpha * entropy, |adv| / kappa). The entropy is a constant.
double advantage_shaping(double adv, double student_entropy, double alpha,
                         double kappa);

// Off-policy distillation on a teacher-sampled token:
// w_ce * (-log pi_theta(token)) + w_kl * truncated forward KL.
TokenLossOutput kd_offpolicy_loss(std::span<const double> student_logits,
                                  const TeacherQuery& teacher, TokenId token,
                                  double w_ce, double w_kl);

// Dispatches on in.variant.
TokenLossOutput token_loss(const TokenLossInput& in);

}  // namespace eopd
