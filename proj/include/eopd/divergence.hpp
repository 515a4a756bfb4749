#pragma once

#include "eopd/probdist.hpp"

namespace eopd {

// KL(teacher || student) = sum_x p_te(x) (log p_te(x) - log p_st(x)).
// Student zeros on the teacher's support use the probability floor.
double forward_kl(const Categorical& teacher, const Categorical& student);

// KL(student || teacher).
double reverse_kl(const Categorical& student, const Categorical& teacher);

// Forward KL restricted to the teacher's top-k set, using the renormalized
// teacher probabilities (including their own log term). Equals
// KL(p~ || student restricted to S, renormalized) - log student(S), so it is
// never negative.
double truncated_forward_kl(const TopKView& teacher_topk,
                            const Categorical& student);

// Per-token advantage: log pi_te(x) - log pi_old(x). Its negation is a
// single-sample estimate of the reverse KL under the behavior policy.
inline double mc_reverse_kl_reward(double teacher_logp, double behavior_logp) {
  return teacher_logp - behavior_logp;
}

}  // namespace eopd
