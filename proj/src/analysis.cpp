#include "eopd/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <stdexcept>

#include <fmt/format.h>

#include "eopd/divergence.hpp"

namespace eopd::analysis {

std::vector<double> default_entropy_edges(std::size_t vocab, std::size_t bins) {
  const double lo = 1e-3;
  const double hi = std::log(static_cast<double>(vocab));
  if (!(hi > lo) || bins == 0)
    throw std::invalid_argument("default_entropy_edges: vocabulary too small");
  std::vector<double> edges{0.0};
  const double step = std::log(hi / lo) / static_cast<double>(bins);
  for (std::size_t i = 0; i < bins; ++i)
    edges.push_back(lo * std::exp(step * static_cast<double>(i)));
  edges.push_back(hi);
  return edges;
}

std::size_t bin_index(std::span<const double> edges, double value) {
  if (edges.size() < 2) throw std::invalid_argument("histogram: need >= 2 edges");
  const auto it = std::upper_bound(edges.begin(), edges.end(), value);
  if (it == edges.begin()) return 0;
  const auto idx = static_cast<std::size_t>(it - edges.begin()) - 1;
  return std::min(idx, edges.size() - 2);
}

Histogram histogram(std::span<const double> values, std::span<const double> edges) {
  for (std::size_t i = 1; i < edges.size(); ++i) {
    if (!(edges[i] > edges[i - 1]))
      throw std::invalid_argument("histogram: edges must increase strictly");
  }
  Histogram h;
  h.edges.assign(edges.begin(), edges.end());
  h.counts.assign(edges.size() - 1, 0);
  for (double v : values) ++h.counts[bin_index(edges, v)];
  h.total = values.size();
  h.fractions.resize(h.counts.size(), 0.0);
  if (h.total > 0) {
    for (std::size_t i = 0; i < h.counts.size(); ++i)
      h.fractions[i] = static_cast<double>(h.counts[i]) / static_cast<double>(h.total);
  }
  return h;
}

RolloutBuffer generate_rollouts(const PolicyFn& model, const TabularTeacher& teacher,
                                const EnvConfig& env, std::size_t n_rollouts,
                                std::size_t top_k, std::uint64_t seed) {
  const auto prompts = make_prompt_pool(env);
  const RolloutOptions opts{top_k, 0.0};
  RolloutBuffer buffer;
  buffer.trajectories.reserve(n_rollouts);
  for (std::size_t i = 0; i < n_rollouts; ++i) {
    const std::size_t p = i % prompts.size();
    buffer.trajectories.push_back(rollout_policy(model, teacher, p, prompts[p], env,
                                                 opts, derive_seed(seed, i)));
  }
  return buffer;
}

PolicyFn policy_of(const StudentTable& student) {
  return [&student](StateId s) { return student.dist(s); };
}

PolicyFn policy_of(const TabularTeacher& teacher) {
  return [&teacher](StateId s) { return teacher.dist(s); };
}

Histogram entropy_histogram(const RolloutBuffer& buffer, std::span<const double> edges) {
  std::vector<double> values;
  values.reserve(buffer.token_count());
  for (const Trajectory& t : buffer.trajectories) {
    for (const TokenRecord& r : t.tokens) values.push_back(r.student_entropy);
  }
  return histogram(values, edges);
}

Histogram entropy_histogram(const PolicyFn& model, const TabularTeacher& teacher,
                            const EnvConfig& env, std::size_t n_rollouts,
                            std::span<const double> edges, std::uint64_t seed) {
  return entropy_histogram(generate_rollouts(model, teacher, env, n_rollouts, 1, seed),
                           edges);
}

namespace {

double fraction_at_least(const RolloutBuffer& buffer, double threshold) {
  const std::size_t n = buffer.token_count();
  if (n == 0) return 0.0;
  std::size_t hits = 0;
  for (const Trajectory& t : buffer.trajectories) {
    for (const TokenRecord& r : t.tokens) hits += r.student_entropy >= threshold ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

}  // namespace

Retention high_entropy_retention(const PolicyFn& student, const TabularTeacher& teacher,
                                 const EnvConfig& env, double threshold,
                                 std::size_t n_rollouts, std::uint64_t seed) {
  if (!(threshold >= 0.0))
    throw std::invalid_argument("high_entropy_retention: threshold must be >= 0");
  Retention r;
  r.student_fraction = fraction_at_least(
      generate_rollouts(student, teacher, env, n_rollouts, 1, seed), threshold);
  r.teacher_fraction = fraction_at_least(
      generate_rollouts(policy_of(teacher), teacher, env, n_rollouts, 1, seed),
      threshold);
  if (r.teacher_fraction > 0.0) r.ratio = r.student_fraction / r.teacher_fraction;
  return r;
}

std::optional<double> fkl_at_high_entropy(const StudentTable& student,
                                          const RolloutBuffer& buffer, double tau) {
  double total = 0.0;
  std::size_t count = 0;
  for (const Trajectory& t : buffer.trajectories) {
    for (const TokenRecord& r : t.tokens) {
      if (r.teacher.entropy < tau) continue;
      total += truncated_forward_kl(r.teacher.topk, student.dist(r.context));
      ++count;
    }
  }
  if (count == 0) return std::nullopt;
  return total / static_cast<double>(count);
}

std::vector<TopkRow> topk_tradeoff(const TabularTeacher& teacher,
                                   const RolloutBuffer& visited,
                                   std::span<const std::size_t> k_values) {
  if (!std::is_sorted(k_values.begin(), k_values.end()))
    throw std::invalid_argument("topk_tradeoff: k values must be ascending");
  std::vector<TopkRow> rows;
  const std::size_t n = visited.token_count();
  for (std::size_t k : k_values) {
    TopkRow row{k, 0.0, k * kTopkEntryBytes};
    for (const Trajectory& t : visited.trajectories) {
      for (const TokenRecord& r : t.tokens)
        row.mean_mass += top_k(teacher.dist(r.context), k).mass;
    }
    if (n > 0) row.mean_mass /= static_cast<double>(n);
    rows.push_back(row);
  }
  return rows;
}

StudentEval evaluate_student(const StudentTable& student, const TabularTeacher& teacher,
                             const EnvConfig& env, std::size_t top_k, double tau,
                             double retention_threshold, std::size_t n_rollouts,
                             std::uint64_t seed) {
  StudentEval ev;
  const RolloutBuffer own =
      generate_rollouts(policy_of(student), teacher, env, n_rollouts, top_k, seed);
  ev.fkl_high_entropy = fkl_at_high_entropy(student, own, tau);
  ev.retention = high_entropy_retention(policy_of(student), teacher, env,
                                        retention_threshold, n_rollouts, seed);
  return ev;
}

void write_histogram_csv(std::ostream& os,
                         const std::vector<std::pair<std::string, Histogram>>& hists) {
  os << "model,bin,lo,hi,count,fraction\n";
  for (const auto& [label, h] : hists) {
    for (std::size_t i = 0; i < h.counts.size(); ++i) {
      os << fmt::format("{},{},{},{},{},{}\n", label, i, h.edges[i], h.edges[i + 1],
                        h.counts[i], h.fractions[i]);
    }
  }
}

void write_topk_csv(std::ostream& os, const std::vector<TopkRow>& rows) {
  os << "k,mean_mass,bytes_per_token\n";
  for (const TopkRow& r : rows)
    os << fmt::format("{},{},{}\n", r.k, r.mean_mass, r.bytes_per_token);
}

}  // namespace eopd::analysis
