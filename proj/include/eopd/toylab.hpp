#pragma once

#include <cstdint>
#include <vector>

#include "eopd/probdist.hpp"
#include "eopd/rng.hpp"

namespace eopd::toy {

// A single categorical teacher with planted modes and a capacity-limited
// student that only samples from its own top `student_top` indices.
struct ToyConfig {
  std::size_t vocab = 80;
  std::vector<double> mode_values{1.7, 1.9, 2.1, 2.3, 2.5};
  double temperature = 0.3;
  std::size_t student_top = 10;
  double lr = 0.5;
  std::size_t steps = 300;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  // Trailing window used for smoothed change-rate curves.
  std::size_t smooth_window = 20;
  // Steps excluded from the "B stays above A" comparison.
  std::size_t warmup = 60;

  void validate() const;
};

// Standard-normal logits with the mode values written over distinct
// rng-chosen entries (mode_values[i] goes to the i-th chosen index).
std::vector<double> make_toy_logits(const ToyConfig& cfg, Rng& rng);

// softmax(make_toy_logits(cfg, rng) / cfg.temperature).
Categorical make_toy_teacher(const ToyConfig& cfg, Rng& rng);

// Renormalized top-`top` view of softmax(student_logits).
TopKView restricted_student_dist(std::span<const double> student_logits,
                                 std::size_t top);

// 1 - |A n B| / |A u B|; zero when both are empty.
double jaccard_distance(std::vector<TokenId> a, std::vector<TokenId> b);

struct StepRecord {
  std::size_t step = 0;
  double change_rate = 0.0;  // Jaccard distance of consecutive top sets
  TokenId top1_index = 0;
  std::size_t top1_changes = 0;  // cumulative
  TokenId sampled = 0;
  double reward = 0.0;
};

// Mutable state carried between toy steps.
struct ToyState {
  std::vector<double> student_logits;
  std::vector<TokenId> prev_top;  // empty before the first step
  TokenId prev_top1 = 0;
  std::size_t top1_changes = 0;
  std::size_t step = 0;
};

ToyState make_toy_state(std::vector<double> student_logits);

// One update: sample x from the restricted student, reward
// r = log P_te(x) - log P_S(x), s_x += lr * r, then compare the new top set
// and top-1 against the previous step's.
StepRecord toy_step(ToyState& state, const Categorical& teacher,
                    const ToyConfig& cfg, Rng& rng);

struct ToyTrace {
  std::uint64_t seed = 0;
  double teacher_entropy = 0.0;
  std::vector<StepRecord> steps;
  std::size_t top1_change_count() const {
    return steps.empty() ? 0 : steps.back().top1_changes;
  }
};

struct ToySummary {
  double temperature = 0.0;
  std::vector<std::size_t> top1_change_counts;  // per seed
  double top1_mean = 0.0;
  double top1_std = 0.0;  // sample standard deviation (n - 1)
  std::vector<double> mean_change_rate;           // across seeds, per step
  std::vector<double> mean_change_rate_smoothed;  // trailing window
};

struct ToyRun {
  std::vector<ToyTrace> traces;
  ToySummary summary;
};

// Trailing moving average with a window of up to `window` samples.
std::vector<double> smooth(const std::vector<double>& xs, std::size_t window);

ToyTrace run_toy_seed(const ToyConfig& cfg, std::uint64_t seed);
ToyRun run_toy(const ToyConfig& cfg);

}  // namespace eopd::toy
