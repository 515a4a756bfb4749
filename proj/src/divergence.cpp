#include "eopd/divergence.hpp"

#include <cmath>
#include <stdexcept>

namespace eopd {

namespace {

double kl(const Categorical& p, const Categorical& q) {
  if (p.size() != q.size())
    throw std::invalid_argument("kl: vocabulary size mismatch");
  double total = 0.0;
  for (std::size_t x = 0; x < p.size(); ++x) {
    if (p[x] > 0.0) total += p[x] * (std::log(p[x]) - floored_log(q[x]));
  }
  return total;
}

}  // namespace

double forward_kl(const Categorical& teacher, const Categorical& student) {
  return kl(teacher, student);
}

double reverse_kl(const Categorical& student, const Categorical& teacher) {
  return kl(student, teacher);
}

double truncated_forward_kl(const TopKView& teacher_topk,
                            const Categorical& student) {
  double total = 0.0;
  for (std::size_t i = 0; i < teacher_topk.size(); ++i) {
    const TokenId x = teacher_topk.indices[i];
    if (x >= student.size())
      throw std::invalid_argument("truncated_forward_kl: index out of range");
    const double p = teacher_topk.renorm_probs[i];
    if (p > 0.0) total += p * (std::log(p) - floored_log(student[x]));
  }
  return total;
}

}  // namespace eopd
