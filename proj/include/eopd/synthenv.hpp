#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <vector>

#include "eopd/probdist.hpp"
#include "eopd/rng.hpp"
#include "eopd/teacher_query.hpp"

namespace eopd {

using StateId = std::size_t;

// A Markov "language": the next-token distribution depends on the last
// `context_order` tokens. Each state's teacher row is drawn like the toy
// teacher, at either the low or the high temperature.
struct EnvConfig {
  std::size_t vocab = 32;
  std::size_t context_order = 2;
  std::size_t rollout_len = 64;
  std::size_t prompt_pool = 64;
  double p_high = 0.3;
  double low_temp = 0.05;
  double high_temp = 1.0;
  std::vector<double> mode_values{1.7, 1.9, 2.1, 2.3, 2.5};
  std::uint64_t seed = 0;

  static constexpr std::size_t kMaxStates = 1'000'000;

  // Throws ConfigError.
  void validate() const;
  std::size_t num_states() const;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Maps the last `context_order` tokens to a state id (base-V digits, oldest
// token most significant). Shorter contexts are not allowed.
StateId context_state(std::span<const TokenId> context, std::size_t vocab,
                      std::size_t context_order);

// Fixed per-state teacher distributions. Immutable after construction.
class TabularTeacher {
 public:
  TabularTeacher(std::size_t vocab, std::size_t context_order,
                 std::vector<Categorical> dists, std::vector<bool> high);

  std::size_t vocab() const { return vocab_; }
  std::size_t context_order() const { return context_order_; }
  std::size_t num_states() const { return dists_.size(); }
  const Categorical& dist(StateId s) const { return dists_.at(s); }
  double entropy(StateId s) const { return entropies_.at(s); }
  // Whether the state was drawn at the high temperature.
  bool high_temperature(StateId s) const { return high_.at(s); }

  TeacherQuery query(StateId s, TokenId x, std::size_t k) const;

  // FNV-1a over the probability bit patterns.
  std::uint64_t checksum() const;

 private:
  std::size_t vocab_;
  std::size_t context_order_;
  std::vector<Categorical> dists_;
  std::vector<double> entropies_;
  std::vector<bool> high_;
};

TabularTeacher build_teacher(const EnvConfig& cfg, Rng& rng);
// Seeds the teacher from cfg.seed.
TabularTeacher build_teacher(const EnvConfig& cfg);

// Learnable per-state logit rows sharing the teacher's state indexing.
class StudentTable {
 public:
  StudentTable(std::size_t num_states, std::size_t vocab);
  // Rows drawn i.i.d. N(0, init_std^2).
  static StudentTable random(std::size_t num_states, std::size_t vocab,
                             double init_std, Rng& rng);

  std::size_t num_states() const { return num_states_; }
  std::size_t vocab() const { return vocab_; }
  std::span<const double> row(StateId s) const {
    return {logits_.data() + s * vocab_, vocab_};
  }
  std::span<double> row(StateId s) { return {logits_.data() + s * vocab_, vocab_}; }
  Categorical dist(StateId s) const { return softmax_temp(row(s), 1.0); }
  std::span<const double> data() const { return logits_; }
  std::span<double> data() { return logits_; }

  bool operator==(const StudentTable&) const = default;

 private:
  std::size_t num_states_;
  std::size_t vocab_;
  std::vector<double> logits_;
};

// Prompts are length-m seed contexts drawn from a per-run pool.
std::vector<std::vector<TokenId>> make_prompt_pool(const EnvConfig& cfg);

struct TokenRecord {
  StateId context = 0;
  TokenId token = 0;
  // Log-probability and entropy of the policy that generated the token.
  double behavior_logp = 0.0;
  double student_entropy = 0.0;
  TeacherQuery teacher;
  bool random_gate = false;  // Bernoulli(fkl_fraction), drawn at rollout

  bool operator==(const TokenRecord&) const = default;
};

struct Trajectory {
  std::size_t prompt_id = 0;
  std::uint64_t rng_seed = 0;
  std::vector<TokenId> prompt;
  std::vector<TokenRecord> tokens;

  std::size_t size() const { return tokens.size(); }
  bool operator==(const Trajectory&) const = default;
};

struct RolloutBuffer {
  std::vector<Trajectory> trajectories;
  std::size_t token_count() const;
};

struct RolloutOptions {
  std::size_t top_k = 16;
  double fkl_fraction = 0.2;
};

using PolicyFn = std::function<Categorical(StateId)>;

// Autoregressively samples cfg.rollout_len tokens from `policy`, recording
// its log-prob and entropy plus the teacher query at every position.
Trajectory rollout_policy(const PolicyFn& policy, const TabularTeacher& teacher,
                          std::size_t prompt_id, std::span<const TokenId> prompt,
                          const EnvConfig& cfg, const RolloutOptions& opts,
                          std::uint64_t rng_seed);

Trajectory rollout(const StudentTable& snapshot, const TabularTeacher& teacher,
                   std::size_t prompt_id, std::span<const TokenId> prompt,
                   const EnvConfig& cfg, const RolloutOptions& opts,
                   std::uint64_t rng_seed);

// Off-policy data: the teacher generates and the behavior fields hold
// teacher log-probabilities and entropies.
Trajectory teacher_rollout(const TabularTeacher& teacher, std::size_t prompt_id,
                           std::span<const TokenId> prompt, const EnvConfig& cfg,
                           const RolloutOptions& opts, std::uint64_t rng_seed);

// One JSON object per trajectory per line.
void write_buffer(std::ostream& os, const RolloutBuffer& buffer);
// Throws std::runtime_error with the offending line number.
RolloutBuffer read_buffer(std::istream& is);

}  // namespace eopd
