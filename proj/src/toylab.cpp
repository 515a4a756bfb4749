#include "eopd/toylab.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace eopd::toy {

void ToyConfig::validate() const {
  if (vocab == 0) throw std::invalid_argument("toy: vocab must be positive");
  if (student_top == 0 || student_top > vocab)
    throw std::invalid_argument("toy: student_top must lie in [1, vocab]");
  if (!(temperature > 0.0))
    throw std::invalid_argument("toy: temperature must be positive");
  if (mode_values.size() > vocab)
    throw std::invalid_argument("toy: more modes than vocabulary entries");
  if (seeds.empty()) throw std::invalid_argument("toy: at least one seed");
  if (smooth_window == 0)
    throw std::invalid_argument("toy: smooth_window must be positive");
}

std::vector<double> make_toy_logits(const ToyConfig& cfg, Rng& rng) {
  std::vector<double> z(cfg.vocab);
  for (double& v : z) v = rng.normal();
  // Partial Fisher-Yates picks distinct indices for the modes.
  std::vector<std::size_t> pool(cfg.vocab);
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  for (std::size_t i = 0; i < cfg.mode_values.size(); ++i) {
    const std::size_t j = i + rng.below(cfg.vocab - i);
    std::swap(pool[i], pool[j]);
    z[pool[i]] = cfg.mode_values[i];
  }
  return z;
}

Categorical make_toy_teacher(const ToyConfig& cfg, Rng& rng) {
  return softmax_temp(make_toy_logits(cfg, rng), cfg.temperature);
}

TopKView restricted_student_dist(std::span<const double> student_logits,
                                 std::size_t top) {
  return top_k(softmax_temp(student_logits, 1.0), top);
}

double jaccard_distance(std::vector<TokenId> a, std::vector<TokenId> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  std::vector<TokenId> common;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(),
                        std::back_inserter(common));
  const std::size_t unions = a.size() + b.size() - common.size();
  if (unions == 0) return 0.0;
  return 1.0 - static_cast<double>(common.size()) / static_cast<double>(unions);
}

ToyState make_toy_state(std::vector<double> student_logits) {
  ToyState state;
  state.student_logits = std::move(student_logits);
  return state;
}

StepRecord toy_step(ToyState& state, const Categorical& teacher,
                    const ToyConfig& cfg, Rng& rng) {
  const TopKView restricted =
      restricted_student_dist(state.student_logits, cfg.student_top);
  const TokenId x = sample(restricted, rng);
  const auto slot = static_cast<std::size_t>(
      std::find(restricted.indices.begin(), restricted.indices.end(), x) -
      restricted.indices.begin());
  const double reward =
      log_prob(teacher, x) - floored_log(restricted.renorm_probs[slot]);
  state.student_logits[x] += cfg.lr * reward;

  const Categorical updated = softmax_temp(state.student_logits, 1.0);
  const TopKView now = top_k(updated, cfg.student_top);
  const TokenId top1 = now.indices.front();

  StepRecord rec;
  rec.step = state.step;
  rec.sampled = x;
  rec.reward = reward;
  rec.top1_index = top1;
  if (state.step > 0) {
    rec.change_rate = jaccard_distance(state.prev_top, now.indices);
    if (top1 != state.prev_top1) ++state.top1_changes;
  }
  rec.top1_changes = state.top1_changes;
  state.prev_top = now.indices;
  state.prev_top1 = top1;
  ++state.step;
  return rec;
}

std::vector<double> smooth(const std::vector<double>& xs, std::size_t window) {
  std::vector<double> out(xs.size());
  double running = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    running += xs[i];
    if (i >= window) running -= xs[i - window];
    out[i] = running / static_cast<double>(std::min(i + 1, window));
  }
  return out;
}

ToyTrace run_toy_seed(const ToyConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  const Categorical teacher = make_toy_teacher(cfg, rng);
  std::vector<double> student(cfg.vocab);
  for (double& s : student) s = rng.normal();

  ToyTrace trace;
  trace.seed = seed;
  trace.teacher_entropy = entropy(teacher);
  trace.steps.reserve(cfg.steps);
  ToyState state = make_toy_state(std::move(student));
  for (std::size_t t = 0; t < cfg.steps; ++t) {
    trace.steps.push_back(toy_step(state, teacher, cfg, rng));
  }
  return trace;
}

ToyRun run_toy(const ToyConfig& cfg) {
  cfg.validate();
  ToyRun run;
  for (std::uint64_t seed : cfg.seeds) run.traces.push_back(run_toy_seed(cfg, seed));

  ToySummary& s = run.summary;
  s.temperature = cfg.temperature;
  const double n = static_cast<double>(run.traces.size());
  for (const ToyTrace& t : run.traces) {
    s.top1_change_counts.push_back(t.top1_change_count());
    s.top1_mean += static_cast<double>(t.top1_change_count()) / n;
  }
  if (run.traces.size() > 1) {
    double ss = 0.0;
    for (std::size_t c : s.top1_change_counts) {
      const double d = static_cast<double>(c) - s.top1_mean;
      ss += d * d;
    }
    s.top1_std = std::sqrt(ss / (n - 1.0));
  }
  s.mean_change_rate.assign(cfg.steps, 0.0);
  for (const ToyTrace& t : run.traces) {
    for (std::size_t i = 0; i < cfg.steps; ++i)
      s.mean_change_rate[i] += t.steps[i].change_rate / n;
  }
  s.mean_change_rate_smoothed = smooth(s.mean_change_rate, cfg.smooth_window);
  return run;
}

}  // namespace eopd::toy
