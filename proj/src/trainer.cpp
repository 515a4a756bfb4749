#include "eopd/trainer.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <istream>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "eopd/divergence.hpp"
#include "json.hpp"

namespace eopd {

void TrainConfig::validate() const {
  env.validate();
  loss.validate();
  if (batch_size == 0 || minibatch_size == 0)
    throw ConfigError("batch_size and minibatch_size must be positive");
  if (batch_size % minibatch_size != 0)
    throw ConfigError("batch_size must be divisible by minibatch_size");
  if (batch_size > env.prompt_pool)
    throw ConfigError("batch_size exceeds prompt_pool");
  if (top_k == 0 || top_k > env.vocab)
    throw ConfigError("top_k must lie in [1, vocab]");
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0))
    throw ConfigError("momentum must lie in [0, 1)");
  if (!(init_std >= 0.0)) throw ConfigError("init_std must be >= 0");
}

StudentTable initial_student(const TrainConfig& cfg) {
  Rng rng(derive_seed(cfg.seed, 0x5757ULL));
  return StudentTable::random(cfg.env.num_states(), cfg.env.vocab, cfg.init_std,
                              rng);
}

namespace {

struct MinibatchEval {
  double loss_sum = 0.0;
  std::size_t tokens = 0;
  std::size_t gate_active = 0;
  std::size_t clipped = 0;
  std::vector<double> ratios;
};

std::string dump_record(const TokenRecord& r, std::size_t traj,
                        std::size_t pos, const TokenLossOutput& out) {
  std::ostringstream os;
  os << "trajectory=" << traj << " position=" << pos << " context=" << r.context
     << " token=" << r.token << "\n"
     << "behavior_logp=" << fmt::format("{}", r.behavior_logp)
     << " behavior_entropy=" << fmt::format("{}", r.student_entropy) << "\n"
     << "teacher_logp=" << fmt::format("{}", r.teacher.token_logp)
     << " teacher_entropy=" << fmt::format("{}", r.teacher.entropy)
     << " topk_mass=" << fmt::format("{}", r.teacher.topk.mass) << "\n"
     << "loss=" << fmt::format("{}", out.loss)
     << " ratio=" << fmt::format("{}", out.ratio) << "\ngrad=";
  for (double g : out.grad) os << fmt::format("{} ", g);
  os << "\n";
  return os.str();
}

// Sums per-token losses (and gradients, when `grad` is given) in a fixed
// trajectory-then-position order.
MinibatchEval evaluate_minibatch(const StudentTable& student,
                                 const RolloutBuffer& buffer,
                                 std::span<const std::size_t> trajectories,
                                 const TrainConfig& cfg, StudentTable* grad) {
  MinibatchEval ev;
  for (std::size_t ti : trajectories) {
    const Trajectory& traj = buffer.trajectories.at(ti);
    for (std::size_t pos = 0; pos < traj.size(); ++pos) {
      const TokenRecord& rec = traj.tokens[pos];
      TokenLossInput in{student.row(rec.context), rec.behavior_logp, rec.token,
                        &rec.teacher, cfg.variant, cfg.loss,
                        rec.student_entropy, rec.random_gate};
      const auto logits = student.row(rec.context);
      if (!std::all_of(logits.begin(), logits.end(), [](double v) { return std::isfinite(v); })) {
        TokenLossOutput blank;
        blank.loss = std::numeric_limits<double>::quiet_NaN();
        throw NanAbort("non-finite student logits", dump_record(rec, ti, pos, blank));
      }
      const TokenLossOutput out = token_loss(in);
      bool finite = std::isfinite(out.loss);
      for (double g : out.grad) finite = finite && std::isfinite(g);
      if (!finite) {
        throw NanAbort("non-finite loss or gradient",
                       dump_record(rec, ti, pos, out));
      }
      ev.loss_sum += out.loss;
      ++ev.tokens;
      ev.gate_active += out.gate_active ? 1 : 0;
      ev.clipped += out.clipped ? 1 : 0;
      ev.ratios.push_back(out.ratio);
      if (grad != nullptr) {
        auto row = grad->row(rec.context);
        for (std::size_t j = 0; j < row.size(); ++j) row[j] += out.grad[j];
      }
    }
  }
  return ev;
}

std::vector<std::size_t> sample_prompts(std::size_t pool, std::size_t count,
                                        Rng& rng) {
  std::vector<std::size_t> ids(pool);
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  for (std::size_t i = 0; i < count; ++i) {
    std::swap(ids[i], ids[i + rng.below(pool - i)]);
  }
  ids.resize(count);
  return ids;
}

void shuffle(std::vector<std::size_t>& xs, Rng& rng) {
  for (std::size_t i = xs.size(); i > 1; --i) {
    std::swap(xs[i - 1], xs[rng.below(i)]);
  }
}

void fill_diagnostics(MetricsRow& row, const StudentTable& student,
                      const TabularTeacher& teacher, const RolloutBuffer& buffer,
                      const TrainConfig& cfg) {
  std::map<StateId, std::size_t> visits;
  std::size_t high_tokens = 0;
  double entropy_sum = 0.0;
  for (const Trajectory& t : buffer.trajectories) {
    for (const TokenRecord& r : t.tokens) {
      ++visits[r.context];
      if (r.teacher.entropy > cfg.loss.tau) ++high_tokens;
      entropy_sum += r.student_entropy;
    }
  }
  const auto n = static_cast<double>(buffer.token_count());
  double rkl = 0.0;
  double fkl_high = 0.0;
  std::size_t high_visits = 0;
  for (const auto& [state, count] : visits) {
    const Categorical st = student.dist(state);
    rkl += static_cast<double>(count) * reverse_kl(st, teacher.dist(state));
    if (teacher.entropy(state) >= cfg.diag_tau) {
      fkl_high += static_cast<double>(count) * forward_kl(teacher.dist(state), st);
      high_visits += count;
    }
  }
  row.mean_reverse_kl = rkl / n;
  if (high_visits > 0) row.mean_fkl_high = fkl_high / static_cast<double>(high_visits);
  row.high_entropy_ratio = static_cast<double>(high_tokens) / n;
  row.student_entropy = entropy_sum / n;
}

}  // namespace

double minibatch_loss(const StudentTable& student, const RolloutBuffer& buffer,
                      std::span<const std::size_t> trajectories,
                      const TrainConfig& cfg, StudentTable* grad) {
  StudentTable sums(student.num_states(), student.vocab());
  const MinibatchEval ev = evaluate_minibatch(student, buffer, trajectories, cfg,
                                              grad != nullptr ? &sums : nullptr);
  if (ev.tokens == 0) return 0.0;
  const auto n = static_cast<double>(ev.tokens);
  if (grad != nullptr) {
    auto out = grad->data();
    auto in = sums.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += in[i] / n;
  }
  return ev.loss_sum / n;
}

TrainResult train(const TrainConfig& cfg, const TabularTeacher& teacher,
                  const TrainHooks& hooks) {
  cfg.validate();
  if (teacher.vocab() != cfg.env.vocab || teacher.num_states() != cfg.env.num_states())
    throw ConfigError("teacher does not match the environment configuration");

  TrainResult result{TrainReport{cfg.seed, cfg.variant, {}}, initial_student(cfg)};
  StudentTable& student = result.student;
  StudentTable grad(student.num_states(), student.vocab());
  StudentTable velocity(student.num_states(), student.vocab());
  const auto prompts = make_prompt_pool(cfg.env);
  const RolloutOptions opts{cfg.top_k, cfg.loss.fkl_fraction};
  const bool off_policy = cfg.variant == Variant::kKd;

  for (std::size_t iter = 0; iter < cfg.iterations; ++iter) {
    const auto started = std::chrono::steady_clock::now();
    const StudentTable snapshot = student;

    Rng batch_rng(derive_seed(cfg.seed, iter, 1));
    const auto batch = sample_prompts(prompts.size(), cfg.batch_size, batch_rng);
    RolloutBuffer buffer;
    buffer.trajectories.reserve(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const std::uint64_t traj_seed = derive_seed(cfg.seed, iter, 1000 + i);
      const auto& prompt = prompts[batch[i]];
      buffer.trajectories.push_back(
          off_policy
              ? teacher_rollout(teacher, batch[i], prompt, cfg.env, opts, traj_seed)
              : rollout(snapshot, teacher, batch[i], prompt, cfg.env, opts, traj_seed));
    }
    if (hooks.on_rollouts) hooks.on_rollouts(iter, buffer);

    std::vector<std::size_t> order(buffer.trajectories.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng mb_rng(derive_seed(cfg.seed, iter, 2));
    shuffle(order, mb_rng);

    MetricsRow row;
    row.iteration = iter;
    double loss_sum = 0.0;
    std::size_t gate_active = 0;
    std::size_t clipped = 0;
    for (std::size_t step = 0; step < cfg.steps_per_iteration(); ++step) {
      const std::span<const std::size_t> members(
          order.data() + step * cfg.minibatch_size, cfg.minibatch_size);
      std::fill(grad.data().begin(), grad.data().end(), 0.0);
      MinibatchEval ev = evaluate_minibatch(student, buffer, members, cfg, &grad);
      if (ev.tokens == 0) continue;

      if (step == 0) {
        for (double r : ev.ratios)
          row.first_step_max_ratio_dev = std::max(row.first_step_max_ratio_dev,
                                                  std::abs(r - 1.0));
      }
      const double scale = cfg.lr / static_cast<double>(ev.tokens);
      auto theta = student.data();
      auto g = grad.data();
      if (cfg.momentum > 0.0) {
        auto v = velocity.data();
        for (std::size_t i = 0; i < theta.size(); ++i) {
          v[i] = cfg.momentum * v[i] + g[i];
          theta[i] -= scale * v[i];
        }
      } else {
        for (std::size_t i = 0; i < theta.size(); ++i) theta[i] -= scale * g[i];
      }
      for (std::size_t i = 0; i < theta.size(); ++i) {
        if (!std::isfinite(theta[i])) {
          throw NanAbort(
              "non-finite student logits after a gradient step",
              fmt::format("iteration={} step={} state={} token={}\nlogit={} grad_sum={} "
                          "lr={} tokens={}\n",
                          iter, step, i / student.vocab(), i % student.vocab(), theta[i],
                          g[i], cfg.lr, ev.tokens));
        }
      }
      ++row.grad_steps;
      loss_sum += ev.loss_sum;
      row.tokens += ev.tokens;
      gate_active += ev.gate_active;
      clipped += ev.clipped;

      if (hooks.on_step) {
        StepInfo info;
        info.iteration = iter;
        info.step = step;
        info.trajectories.assign(members.begin(), members.end());
        info.ratios = std::move(ev.ratios);
        info.gate_active = ev.gate_active;
        info.tokens = ev.tokens;
        hooks.on_step(info);
      }
    }
    if (row.tokens > 0) {
      const auto n = static_cast<double>(row.tokens);
      row.mean_loss = loss_sum / n;
      row.gate_fraction = static_cast<double>(gate_active) / n;
      row.clipped_fraction = static_cast<double>(clipped) / n;
    }
    fill_diagnostics(row, student, teacher, buffer, cfg);
    row.wall_seconds = std::chrono::duration<double>(
                           std::chrono::steady_clock::now() - started)
                           .count();
    spdlog::debug("{} seed={} iter={} loss={:.5f} rkl={:.5f} gate={:.3f} H={:.3f}",
                  variant_name(cfg.variant), cfg.seed, iter, row.mean_loss,
                  row.mean_reverse_kl, row.gate_fraction, row.student_entropy);
    result.report.rows.push_back(row);
  }
  return result;
}

TrainResult train(const TrainConfig& cfg, const TrainHooks& hooks) {
  cfg.validate();
  const TabularTeacher teacher = build_teacher(cfg.env);
  return train(cfg, teacher, hooks);
}

TrainConfig apply_axis(TrainConfig base, const std::string& axis,
                       const std::string& value) {
  if (axis != "tau" && axis != "k" && axis != "variant" && axis != "fkl_fraction")
    throw std::invalid_argument("unknown sweep axis '" + axis +
                                "' (expected tau, k, variant or fkl_fraction)");
  if (axis == "variant") {
    base.variant = parse_variant(value);
    return base;
  }
  std::size_t used = 0;
  try {
    if (axis == "k") {
      base.top_k = std::stoul(value, &used);
    } else {
      const double v = std::stod(value, &used);
      (axis == "tau" ? base.loss.tau : base.loss.fkl_fraction) = v;
    }
  } catch (const std::logic_error&) {
    used = 0;
  }
  if (used == 0 || used != value.size())
    throw std::invalid_argument("bad value '" + value + "' for axis " + axis);
  return base;
}

std::vector<SweepEntry> sweep(const TrainConfig& base, const std::string& axis,
                              const std::vector<std::string>& values) {
  std::vector<TrainConfig> configs;
  for (const std::string& v : values) configs.push_back(apply_axis(base, axis, v));
  const TabularTeacher teacher = build_teacher(base.env);
  std::vector<SweepEntry> entries;
  for (std::size_t i = 0; i < values.size(); ++i) {
    spdlog::info("sweep {}={}", axis, values[i]);
    entries.push_back({values[i], configs[i], train(configs[i], teacher)});
  }
  return entries;
}

namespace {

std::string opt_field(const std::optional<double>& v) {
  return v ? fmt::format("{}", *v) : std::string();
}

}  // namespace

void write_report_csv(std::ostream& os, const std::vector<TrainReport>& reports) {
  os << "variant,seed,iteration,mean_loss,mean_reverse_kl,mean_fkl_high,"
        "gate_fraction,high_entropy_ratio,student_entropy,clipped_fraction,"
        "first_step_max_ratio_dev,grad_steps,tokens\n";
  for (const TrainReport& rep : reports) {
    for (const MetricsRow& r : rep.rows) {
      os << fmt::format("{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                        variant_name(rep.variant), rep.seed, r.iteration,
                        r.mean_loss, r.mean_reverse_kl, opt_field(r.mean_fkl_high),
                        r.gate_fraction, r.high_entropy_ratio, r.student_entropy,
                        r.clipped_fraction, r.first_step_max_ratio_dev,
                        r.grad_steps, r.tokens);
    }
  }
}

std::string report_json(const std::vector<TrainReport>& reports) {
  using nlohmann::ordered_json;
  ordered_json out = ordered_json::array();
  for (const TrainReport& rep : reports) {
    ordered_json rows = ordered_json::array();
    for (const MetricsRow& r : rep.rows) {
      rows.push_back({{"iteration", r.iteration},
                      {"mean_loss", r.mean_loss},
                      {"mean_reverse_kl", r.mean_reverse_kl},
                      {"mean_fkl_high", r.mean_fkl_high
                                            ? ordered_json(*r.mean_fkl_high)
                                            : ordered_json(nullptr)},
                      {"gate_fraction", r.gate_fraction},
                      {"high_entropy_ratio", r.high_entropy_ratio},
                      {"student_entropy", r.student_entropy},
                      {"clipped_fraction", r.clipped_fraction},
                      {"first_step_max_ratio_dev", r.first_step_max_ratio_dev},
                      {"grad_steps", r.grad_steps},
                      {"tokens", r.tokens}});
    }
    out.push_back({{"variant", variant_name(rep.variant)},
                   {"seed", rep.seed},
                   {"rows", std::move(rows)}});
  }
  return out.dump(2) + "\n";
}

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
  std::array<char, 4> b{};
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffU);
  os.write(b.data(), b.size());
}

std::uint32_t get_u32(std::istream& is) {
  std::array<unsigned char, 4> b{};
  if (!is.read(reinterpret_cast<char*>(b.data()), b.size()))
    throw std::runtime_error("student file: truncated header");
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

}  // namespace

void save_student(std::ostream& os, const StudentTable& student,
                  std::size_t context_order) {
  os.write("EOPD", 4);
  put_u32(os, kStudentFormatVersion);
  put_u32(os, static_cast<std::uint32_t>(student.vocab()));
  put_u32(os, static_cast<std::uint32_t>(context_order));
  std::array<char, 8> b{};
  for (double v : student.data()) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((bits >> (8 * i)) & 0xffU);
    os.write(b.data(), b.size());
  }
}

LoadedStudent load_student(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), magic.size()) ||
      std::string_view(magic.data(), 4) != "EOPD")
    throw std::runtime_error("student file: bad magic");
  const std::uint32_t version = get_u32(is);
  if (version != kStudentFormatVersion)
    throw std::runtime_error("student file: unsupported version " +
                             std::to_string(version));
  const std::uint32_t vocab = get_u32(is);
  const std::uint32_t order = get_u32(is);
  EnvConfig shape;
  shape.vocab = vocab;
  shape.context_order = order;
  shape.mode_values.clear();
  if (vocab == 0) throw std::runtime_error("student file: zero vocabulary");
  std::size_t states = 0;
  try {
    states = shape.num_states();
  } catch (const ConfigError& e) {
    throw std::runtime_error(std::string("student file: ") + e.what());
  }
  LoadedStudent out{StudentTable(states, vocab), order};
  std::array<unsigned char, 8> b{};
  for (double& v : out.student.data()) {
    if (!is.read(reinterpret_cast<char*>(b.data()), b.size()))
      throw std::runtime_error("student file: truncated logits");
    std::uint64_t bits = 0;
    for (int i = 7; i >= 0; --i) bits = (bits << 8) | b[i];
    v = std::bit_cast<double>(bits);
    if (!std::isfinite(v)) throw std::runtime_error("student file: non-finite logit");
  }
  if (is.peek() != std::char_traits<char>::eof())
    throw std::runtime_error("student file: trailing bytes");
  return out;
}

}  // namespace eopd
