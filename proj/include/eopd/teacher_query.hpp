#pragma once

#include "eopd/probdist.hpp"

namespace eopd {

// What the teacher reports for one generated token: the sampled token's
// log-probability, the entropy of the full conditional, and its top-k view.
struct TeacherQuery {
  double token_logp = 0.0;
  double entropy = 0.0;
  TopKView topk;

  bool operator==(const TeacherQuery&) const = default;
};

}  // namespace eopd
