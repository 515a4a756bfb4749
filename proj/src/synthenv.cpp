#include "eopd/synthenv.hpp"

#include <bit>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <string>

#include "json.hpp"

namespace eopd {

using nlohmann::json;

void EnvConfig::validate() const {
  if (vocab == 0) throw ConfigError("env: vocab must be positive");
  if (rollout_len == 0) throw ConfigError("env: rollout_len must be >= 1");
  if (prompt_pool == 0) throw ConfigError("env: prompt_pool must be >= 1");
  if (mode_values.size() > vocab)
    throw ConfigError("env: more planted modes than vocabulary entries");
  if (!(p_high >= 0.0 && p_high <= 1.0))
    throw ConfigError("env: p_high must lie in [0, 1]");
  if (!(low_temp > 0.0) || !(high_temp > 0.0))
    throw ConfigError("env: temperatures must be positive");
  num_states();
}

std::size_t EnvConfig::num_states() const {
  std::size_t n = 1;
  for (std::size_t i = 0; i < context_order; ++i) {
    if (n > kMaxStates / vocab)
      throw ConfigError("env: vocab^context_order exceeds the state limit of " +
                        std::to_string(kMaxStates));
    n *= vocab;
  }
  return n;
}

StateId context_state(std::span<const TokenId> context, std::size_t vocab,
                      std::size_t context_order) {
  if (context.size() < context_order)
    throw std::invalid_argument("context_state: context shorter than order");
  StateId s = 0;
  for (TokenId t : context.last(context_order)) {
    if (t >= vocab) throw std::invalid_argument("context_state: token out of range");
    s = s * vocab + t;
  }
  return s;
}

TabularTeacher::TabularTeacher(std::size_t vocab, std::size_t context_order,
                               std::vector<Categorical> dists,
                               std::vector<bool> high)
    : vocab_(vocab),
      context_order_(context_order),
      dists_(std::move(dists)),
      high_(std::move(high)) {
  entropies_.reserve(dists_.size());
  for (const Categorical& d : dists_) entropies_.push_back(eopd::entropy(d));
}

TeacherQuery TabularTeacher::query(StateId s, TokenId x, std::size_t k) const {
  const Categorical& d = dist(s);
  return TeacherQuery{log_prob(d, x), entropies_[s], top_k(d, k)};
}

std::uint64_t TabularTeacher::checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const Categorical& d : dists_) {
    for (double p : d.probs()) {
      auto bits = std::bit_cast<std::uint64_t>(p);
      for (int i = 0; i < 8; ++i) {
        h ^= (bits >> (8 * i)) & 0xffU;
        h *= 0x100000001b3ULL;
      }
    }
  }
  return h;
}

TabularTeacher build_teacher(const EnvConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t states = cfg.num_states();
  std::vector<Categorical> dists;
  std::vector<bool> high;
  dists.reserve(states);
  high.reserve(states);
  std::vector<double> z(cfg.vocab);
  std::vector<std::size_t> pool(cfg.vocab);
  for (std::size_t s = 0; s < states; ++s) {
    // The temperature draw comes first so that z is shared across p_high.
    const bool is_high = rng.uniform() < cfg.p_high;
    for (double& v : z) v = rng.normal();
    std::iota(pool.begin(), pool.end(), std::size_t{0});
    for (std::size_t i = 0; i < cfg.mode_values.size(); ++i) {
      const std::size_t j = i + rng.below(cfg.vocab - i);
      std::swap(pool[i], pool[j]);
      z[pool[i]] = cfg.mode_values[i];
    }
    dists.push_back(softmax_temp(z, is_high ? cfg.high_temp : cfg.low_temp));
    high.push_back(is_high);
  }
  return TabularTeacher(cfg.vocab, cfg.context_order, std::move(dists),
                        std::move(high));
}

TabularTeacher build_teacher(const EnvConfig& cfg) {
  Rng rng(derive_seed(cfg.seed, 0x7eac4e2ULL));
  return build_teacher(cfg, rng);
}

StudentTable::StudentTable(std::size_t num_states, std::size_t vocab)
    : num_states_(num_states), vocab_(vocab), logits_(num_states * vocab, 0.0) {}

StudentTable StudentTable::random(std::size_t num_states, std::size_t vocab,
                                  double init_std, Rng& rng) {
  StudentTable t(num_states, vocab);
  for (double& v : t.logits_) v = init_std * rng.normal();
  return t;
}

std::vector<std::vector<TokenId>> make_prompt_pool(const EnvConfig& cfg) {
  Rng rng(derive_seed(cfg.seed, 0x9a0a9f7ULL));
  std::vector<std::vector<TokenId>> pool(cfg.prompt_pool);
  for (auto& prompt : pool) {
    prompt.resize(cfg.context_order);
    for (TokenId& t : prompt) t = rng.below(cfg.vocab);
  }
  return pool;
}

std::size_t RolloutBuffer::token_count() const {
  std::size_t n = 0;
  for (const Trajectory& t : trajectories) n += t.size();
  return n;
}

Trajectory rollout_policy(const PolicyFn& policy, const TabularTeacher& teacher,
                          std::size_t prompt_id, std::span<const TokenId> prompt,
                          const EnvConfig& cfg, const RolloutOptions& opts,
                          std::uint64_t rng_seed) {
  Rng rng(rng_seed);
  Trajectory traj;
  traj.prompt_id = prompt_id;
  traj.rng_seed = rng_seed;
  traj.prompt.assign(prompt.begin(), prompt.end());
  traj.tokens.reserve(cfg.rollout_len);

  std::vector<TokenId> context(prompt.begin(), prompt.end());
  for (std::size_t t = 0; t < cfg.rollout_len; ++t) {
    TokenRecord rec;
    rec.context = context_state(context, cfg.vocab, cfg.context_order);
    const Categorical behavior = policy(rec.context);
    rec.token = sample(behavior, rng);
    rec.random_gate = rng.bernoulli(opts.fkl_fraction);
    rec.behavior_logp = log_prob(behavior, rec.token);
    rec.student_entropy = entropy(behavior);
    rec.teacher = teacher.query(rec.context, rec.token, opts.top_k);
    context.push_back(rec.token);
    traj.tokens.push_back(std::move(rec));
  }
  return traj;
}

Trajectory rollout(const StudentTable& snapshot, const TabularTeacher& teacher,
                   std::size_t prompt_id, std::span<const TokenId> prompt,
                   const EnvConfig& cfg, const RolloutOptions& opts,
                   std::uint64_t rng_seed) {
  return rollout_policy([&snapshot](StateId s) { return snapshot.dist(s); },
                        teacher, prompt_id, prompt, cfg, opts, rng_seed);
}

Trajectory teacher_rollout(const TabularTeacher& teacher, std::size_t prompt_id,
                           std::span<const TokenId> prompt, const EnvConfig& cfg,
                           const RolloutOptions& opts, std::uint64_t rng_seed) {
  return rollout_policy([&teacher](StateId s) { return teacher.dist(s); },
                        teacher, prompt_id, prompt, cfg, opts, rng_seed);
}

namespace {

json record_to_json(const TokenRecord& r) {
  return json{{"ctx", r.context},
              {"x", r.token},
              {"behavior_logp", r.behavior_logp},
              {"behavior_entropy", r.student_entropy},
              {"teacher_logp", r.teacher.token_logp},
              {"teacher_entropy", r.teacher.entropy},
              {"topk_indices", r.teacher.topk.indices},
              {"topk_probs", r.teacher.topk.renorm_probs},
              {"topk_mass", r.teacher.topk.mass},
              {"random_gate", r.random_gate}};
}

TokenRecord record_from_json(const json& j) {
  TokenRecord r;
  r.context = j.at("ctx").get<StateId>();
  r.token = j.at("x").get<TokenId>();
  r.behavior_logp = j.at("behavior_logp").get<double>();
  r.student_entropy = j.at("behavior_entropy").get<double>();
  r.teacher.token_logp = j.at("teacher_logp").get<double>();
  r.teacher.entropy = j.at("teacher_entropy").get<double>();
  r.teacher.topk.indices = j.at("topk_indices").get<std::vector<TokenId>>();
  r.teacher.topk.renorm_probs = j.at("topk_probs").get<std::vector<double>>();
  r.teacher.topk.mass = j.at("topk_mass").get<double>();
  r.random_gate = j.at("random_gate").get<bool>();
  if (r.teacher.topk.indices.size() != r.teacher.topk.renorm_probs.size())
    throw std::runtime_error("topk_indices and topk_probs differ in length");
  return r;
}

}  // namespace

void write_buffer(std::ostream& os, const RolloutBuffer& buffer) {
  for (const Trajectory& t : buffer.trajectories) {
    json records = json::array();
    for (const TokenRecord& r : t.tokens) records.push_back(record_to_json(r));
    json line{{"prompt_id", t.prompt_id},
              {"rng_seed", t.rng_seed},
              {"prompt", t.prompt},
              {"tokens", std::move(records)}};
    os << line.dump() << '\n';
  }
}

RolloutBuffer read_buffer(std::istream& is) {
  RolloutBuffer buffer;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      Trajectory t;
      t.prompt_id = j.at("prompt_id").get<std::size_t>();
      t.rng_seed = j.at("rng_seed").get<std::uint64_t>();
      t.prompt = j.at("prompt").get<std::vector<TokenId>>();
      for (const json& r : j.at("tokens")) t.tokens.push_back(record_from_json(r));
      buffer.trajectories.push_back(std::move(t));
    } catch (const std::exception& e) {
      throw std::runtime_error("buffer line " + std::to_string(line_no) + ": " +
                               e.what());
    }
  }
  return buffer;
}

}  // namespace eopd
