#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "eopd/synthenv.hpp"

namespace eopd::analysis {

// Bin edges are half-open [lo, hi) except the last bin, which is closed.
struct Histogram {
  std::vector<double> edges;
  std::vector<std::size_t> counts;
  std::vector<double> fractions;
  std::size_t total = 0;
};

// An underflow bin [0, 1e-3) followed by `bins` log-spaced bins over
// [1e-3, ln V].
std::vector<double> default_entropy_edges(std::size_t vocab, std::size_t bins = 40);

// Values past the last edge (rounding above ln V) land in the last bin;
// values below the first edge in the first.
std::size_t bin_index(std::span<const double> edges, double value);
Histogram histogram(std::span<const double> values, std::span<const double> edges);

// `n_rollouts` trajectories from `model`, prompts taken round-robin from the
// pool, seeds derived from `seed`.
RolloutBuffer generate_rollouts(const PolicyFn& model, const TabularTeacher& teacher,
                                const EnvConfig& env, std::size_t n_rollouts,
                                std::size_t top_k, std::uint64_t seed);

PolicyFn policy_of(const StudentTable& student);
PolicyFn policy_of(const TabularTeacher& teacher);

// Histogram of the generating model's entropy at each generated token.
Histogram entropy_histogram(const RolloutBuffer& buffer, std::span<const double> edges);
Histogram entropy_histogram(const PolicyFn& model, const TabularTeacher& teacher,
                            const EnvConfig& env, std::size_t n_rollouts,
                            std::span<const double> edges, std::uint64_t seed);

struct Retention {
  double student_fraction = 0.0;
  double teacher_fraction = 0.0;
  std::optional<double> ratio;  // absent when the teacher fraction is zero
};

// Fraction of generated tokens whose generating-model entropy is >= the
// threshold, each model on its own rollouts (same seeds).
Retention high_entropy_retention(const PolicyFn& student, const TabularTeacher& teacher,
                                 const EnvConfig& env, double threshold,
                                 std::size_t n_rollouts, std::uint64_t seed);

// Mean truncated forward KL over positions with teacher entropy >= tau.
// Absent when no position qualifies.
std::optional<double> fkl_at_high_entropy(const StudentTable& student,
                                          const RolloutBuffer& buffer, double tau);

inline constexpr std::size_t kTopkEntryBytes = 8 + 4;  // f64 prob + u32 index

struct TopkRow {
  std::size_t k = 0;
  double mean_mass = 0.0;
  std::size_t bytes_per_token = 0;
};

// Mean teacher top-k mass over the buffer's visited positions.
std::vector<TopkRow> topk_tradeoff(const TabularTeacher& teacher,
                                   const RolloutBuffer& visited,
                                   std::span<const std::size_t> k_values);

// Final-student diagnostics on fresh rollouts: forward KL at high teacher
// entropy and high-entropy retention against the teacher.
struct StudentEval {
  std::optional<double> fkl_high_entropy;
  Retention retention;
};
StudentEval evaluate_student(const StudentTable& student, const TabularTeacher& teacher,
                             const EnvConfig& env, std::size_t top_k, double tau,
                             double retention_threshold, std::size_t n_rollouts,
                             std::uint64_t seed);

void write_histogram_csv(std::ostream& os,
                         const std::vector<std::pair<std::string, Histogram>>& hists);
void write_topk_csv(std::ostream& os, const std::vector<TopkRow>& rows);

}  // namespace eopd::analysis
