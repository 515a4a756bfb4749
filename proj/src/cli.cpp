#include "eopd/cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <system_error>

#include <fmt/format.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "eopd/analysis.hpp"
#include "eopd/config.hpp"
#include "eopd/plot.hpp"
#include "eopd/toylab.hpp"
#include "eopd/trainer.hpp"
#include "json.hpp"

namespace eopd::cli {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

constexpr const char* kVersion = EOPD_VERSION;
constexpr const char* kManifestName = "manifest.json";

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Files produced by a run, held in memory until commit().
class Outputs {
 public:
  explicit Outputs(fs::path dir) : dir_(std::move(dir)) {}

  void add(const std::string& name, std::string content) {
    files_[name] = std::move(content);
  }

  // Each file goes to a temporary name first and is renamed into place once
  // every file has been written.
  void commit() const {
    std::error_code ec;
    fs::create_directories(dir_, ec);
    if (ec) throw IoError("cannot create " + dir_.string() + ": " + ec.message());
    std::vector<fs::path> temps;
    const auto cleanup = [&temps] {
      std::error_code ignored;
      for (const auto& t : temps) fs::remove(t, ignored);
    };
    for (const auto& [name, content] : files_) {
      const fs::path tmp = dir_ / ("." + name + ".tmp");
      std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
      if (os) temps.push_back(tmp);
      os.write(content.data(), static_cast<std::streamsize>(content.size()));
      os.close();
      if (!os) {
        cleanup();
        throw IoError("cannot write " + tmp.string());
      }
    }
    std::size_t i = 0;
    for (const auto& [name, content] : files_) {
      fs::rename(temps[i++], dir_ / name, ec);
      if (ec) {
        cleanup();
        throw IoError("cannot rename into " + (dir_ / name).string() + ": " +
                      ec.message());
      }
    }
  }

 private:
  fs::path dir_;
  std::map<std::string, std::string> files_;
};

struct LoadedConfig {
  config::KeyValues kv;
  std::optional<json> manifest;
};

LoadedConfig load_config(const std::string& path, const std::string& command) {
  if (path.empty()) return {config::KeyValues::from_map({}, "<defaults>"), {}};
  std::ifstream is(path);
  if (!is) throw config::ConfigParseError(path + ": cannot open config file");
  std::stringstream ss;
  ss << is.rdbuf();
  const std::string text = ss.str();
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '{') {
    json manifest;
    try {
      manifest = json::parse(text);
    } catch (const json::parse_error& e) {
      throw config::ConfigParseError(path + ": malformed manifest: " + e.what());
    }
    if (manifest.value("command", "") != command)
      throw config::ConfigParseError(path + ": manifest is for command '" +
                                     manifest.value("command", "") + "', not '" +
                                     command + "'");
    std::map<std::string, std::string> values;
    for (const auto& [k, v] : manifest.at("config").items()) {
      if (!v.is_string())
        throw config::ConfigParseError(path + ": manifest value for '" + k +
                                       "' must be a string");
      values[k] = v.get<std::string>();
    }
    return {config::KeyValues::from_map(values, path), manifest};
  }
  std::istringstream body(text);
  return {config::KeyValues::parse(body, path), {}};
}

std::string manifest_text(const std::string& command, const config::Reader& reader,
                          const std::map<std::string, json>& extra) {
  ordered_json m;
  m["tool"] = "eopd";
  m["code_version"] = kVersion;
  m["command"] = command;
  m["config"] = reader.resolved();
  for (const auto& [k, v] : extra) m[k] = v;
  return m.dump(2) + "\n";
}

std::string sanitize(const std::string& s) {
  std::string out;
  for (char c : s) {
    const bool ok = (std::isalnum(static_cast<unsigned char>(c)) != 0) || c == '_' ||
                    c == '-' || c == '.';
    out.push_back(ok ? c : '_');
  }
  return out.empty() ? "x" : out;
}

std::string fmt_opt(const std::optional<double>& v) {
  return v ? fmt::format("{}", *v) : std::string();
}

// ---- schemas --------------------------------------------------------------

toy::ToyConfig read_toy(config::Reader& r) {
  toy::ToyConfig c;
  c.vocab = r.get_size("vocab", c.vocab);
  c.mode_values = r.get_doubles("mode_values", c.mode_values);
  c.student_top = r.get_size("student_top", c.student_top);
  c.lr = r.get_double("lr", c.lr);
  c.steps = r.get_size("steps", c.steps);
  c.seeds = r.get_u64s("seeds", c.seeds);
  c.smooth_window = r.get_size("smooth_window", c.smooth_window);
  c.warmup = r.get_size("warmup", c.warmup);
  return c;
}

EnvConfig read_env(config::Reader& r) {
  EnvConfig e;
  e.vocab = r.get_size("vocab", e.vocab);
  e.context_order = r.get_size("context_order", e.context_order);
  e.rollout_len = r.get_size("rollout_len", e.rollout_len);
  e.prompt_pool = r.get_size("prompt_pool", e.prompt_pool);
  e.p_high = r.get_double("p_high", e.p_high);
  e.low_temp = r.get_double("low_temp", e.low_temp);
  e.high_temp = r.get_double("high_temp", e.high_temp);
  e.mode_values = r.get_doubles("mode_values", e.mode_values);
  e.seed = r.get_u64("env_seed", e.seed);
  return e;
}

TrainConfig read_train(config::Reader& r) {
  TrainConfig c;
  c.variant = parse_variant(r.get_string("variant", std::string(variant_name(c.variant))));
  c.iterations = r.get_size("iterations", c.iterations);
  c.batch_size = r.get_size("batch_size", c.batch_size);
  c.minibatch_size = r.get_size("minibatch_size", c.minibatch_size);
  c.lr = r.get_double("lr", c.lr);
  c.momentum = r.get_double("momentum", c.momentum);
  c.loss.clip_eps = r.get_double("clip_eps", c.loss.clip_eps);
  c.loss.tau = r.get_double("tau", c.loss.tau);
  c.loss.fkl_weight = r.get_double("fkl_weight", c.loss.fkl_weight);
  c.loss.beta = r.get_double("beta", c.loss.beta);
  c.loss.alpha = r.get_double("alpha", c.loss.alpha);
  c.loss.kappa = r.get_double("kappa", c.loss.kappa);
  c.loss.fkl_fraction = r.get_double("fkl_fraction", c.loss.fkl_fraction);
  c.loss.ce_weight = r.get_double("ce_weight", c.loss.ce_weight);
  c.loss.kl_weight = r.get_double("kl_weight", c.loss.kl_weight);
  c.top_k = r.get_size("top_k", c.top_k);
  c.init_std = r.get_double("init_std", c.init_std);
  c.diag_tau = r.get_double("diag_tau", c.diag_tau);
  c.env = read_env(r);
  return c;
}

// Settings shared by train and sweep that are not part of TrainConfig.
struct RunSettings {
  std::string run_id;
  std::vector<std::uint64_t> seeds;
  std::size_t eval_rollouts = 64;
  double retention_threshold = 1.0;
  bool save_buffer = false;
  bool plot = false;
};

RunSettings read_run(config::Reader& r, const std::optional<std::uint64_t>& seed) {
  RunSettings s;
  s.run_id = sanitize(r.get_string("run_id", "run"));
  if (seed) {
    r.get_u64s("seeds", {});
    s.seeds = {*seed};
  } else {
    s.seeds = r.get_u64s("seeds", {0});
  }
  s.eval_rollouts = r.get_size("eval_rollouts", s.eval_rollouts);
  s.retention_threshold = r.get_double("retention_threshold", s.retention_threshold);
  s.save_buffer = r.get_bool("save_buffer", s.save_buffer);
  s.plot = r.get_bool("plot", s.plot);
  if (s.seeds.empty()) r.fail("seeds", "at least one seed is required");
  return s;
}

// The seeds list is rewritten so that the manifest records the override.
config::Reader make_reader(config::KeyValues kv, const std::optional<std::uint64_t>& seed) {
  if (seed) kv.set("seeds", fmt::format("{}", *seed));
  return config::Reader(std::move(kv));
}

// ---- toy ------------------------------------------------------------------

int cmd_toy(const Invocation& inv) {
  LoadedConfig loaded = load_config(inv.config_path, "toy");
  config::Reader r = make_reader(std::move(loaded.kv), inv.seed);
  toy::ToyConfig base = read_toy(r);
  const std::vector<double> temps = r.get_doubles("temperatures", {0.3, 1.0});
  const bool plot = r.get_bool("plot", false);
  r.finish();
  if (temps.empty()) r.fail("temperatures", "at least one temperature is required");

  std::string traces =
      "temperature,seed,step,change_rate,top1_index,top1_changes,sampled,reward\n";
  std::string curves = "temperature,step,mean_change_rate,mean_change_rate_smoothed\n";
  ordered_json summary = ordered_json::array();
  std::vector<plot::Series> series;
  for (double t : temps) {
    toy::ToyConfig cfg = base;
    cfg.temperature = t;
    cfg.validate();
    spdlog::info("toy T={} over {} seeds", t, cfg.seeds.size());
    const toy::ToyRun run = toy::run_toy(cfg);
    for (const toy::ToyTrace& tr : run.traces) {
      for (const toy::StepRecord& s : tr.steps) {
        traces += fmt::format("{},{},{},{},{},{},{},{}\n", t, tr.seed, s.step,
                              s.change_rate, s.top1_index, s.top1_changes, s.sampled,
                              s.reward);
      }
    }
    const toy::ToySummary& sm = run.summary;
    plot::Series line{fmt::format("T={}", t), {}, sm.mean_change_rate_smoothed};
    for (std::size_t i = 0; i < sm.mean_change_rate.size(); ++i) {
      curves += fmt::format("{},{},{},{}\n", t, i, sm.mean_change_rate[i],
                            sm.mean_change_rate_smoothed[i]);
      line.x.push_back(static_cast<double>(i));
    }
    series.push_back(std::move(line));
    ordered_json teacher_entropy = ordered_json::array();
    for (const toy::ToyTrace& tr : run.traces) teacher_entropy.push_back(tr.teacher_entropy);
    summary.push_back(
        {{"temperature", t},
         {"seeds", cfg.seeds},
         {"teacher_entropy", teacher_entropy},
         {"top1_change_counts", sm.top1_change_counts},
         {"top1_change_mean", sm.top1_mean},
         {"top1_change_std", sm.top1_std},
         {"final_change_rate_smoothed",
          sm.mean_change_rate_smoothed.empty()
              ? ordered_json(nullptr)
              : ordered_json(sm.mean_change_rate_smoothed.back())},
         {"mean_change_rate", sm.mean_change_rate},
         {"mean_change_rate_smoothed", sm.mean_change_rate_smoothed}});
  }

  Outputs out(inv.out_dir);
  out.add("toy_traces.csv", std::move(traces));
  out.add("toy_curves.csv", std::move(curves));
  out.add("toy_summary.json", summary.dump(2) + "\n");
  if (plot) {
    out.add("toy_change_rate.svg",
            plot::line_chart("Top-10 change rate (smoothed)", "step", "Jaccard distance",
                             series));
  }
  out.add(kManifestName, manifest_text("toy", r, {}));
  out.commit();
  return kOk;
}

// ---- train / sweep --------------------------------------------------------

struct SeedRun {
  TrainConfig config;
  TrainResult result;
  analysis::StudentEval eval;
  RolloutBuffer last_buffer;
};

SeedRun train_and_evaluate(const TrainConfig& cfg, const TabularTeacher& teacher,
                           const RunSettings& settings) {
  RolloutBuffer last_buffer;
  TrainHooks hooks;
  if (settings.save_buffer) {
    hooks.on_rollouts = [&last_buffer](std::size_t, const RolloutBuffer& b) {
      last_buffer = b;
    };
  }
  spdlog::info("train {} seed={} iterations={}", variant_name(cfg.variant), cfg.seed,
               cfg.iterations);
  TrainResult result = train(cfg, teacher, hooks);
  analysis::StudentEval eval = analysis::evaluate_student(
      result.student, teacher, cfg.env, cfg.top_k, cfg.diag_tau,
      settings.retention_threshold, settings.eval_rollouts, derive_seed(cfg.seed, 0xe7a1ULL));
  return SeedRun{cfg, std::move(result), std::move(eval), std::move(last_buffer)};
}

std::string eval_csv_header() {
  return "variant,seed,final_reverse_kl,final_fkl_high,eval_fkl_high_entropy,"
         "student_high_fraction,teacher_high_fraction,retention_ratio\n";
}

std::string eval_csv_row(const SeedRun& run) {
  const auto& rows = run.result.report.rows;
  const auto& ret = run.eval.retention;
  return fmt::format("{},{},{},{},{},{},{},{}\n", variant_name(run.config.variant),
                     run.config.seed,
                     rows.empty() ? std::string() : fmt::format("{}", rows.back().mean_reverse_kl),
                     rows.empty() ? std::string() : fmt_opt(rows.back().mean_fkl_high),
                     fmt_opt(run.eval.fkl_high_entropy), ret.student_fraction,
                     ret.teacher_fraction, fmt_opt(ret.ratio));
}

void add_seed_files(Outputs& out, const std::string& prefix, const SeedRun& run,
                    const RunSettings& settings) {
  std::ostringstream bin;
  save_student(bin, run.result.student, run.config.env.context_order);
  out.add(fmt::format("{}__student_seed{}.bin", prefix, run.config.seed), bin.str());
  if (settings.save_buffer) {
    std::ostringstream buf;
    write_buffer(buf, run.last_buffer);
    out.add(fmt::format("{}__buffer_seed{}.jsonl", prefix, run.config.seed), buf.str());
  }
}

std::string training_plot(const std::vector<TrainReport>& reports) {
  std::vector<plot::Series> series;
  for (const TrainReport& rep : reports) {
    plot::Series s{fmt::format("{} seed {}", variant_name(rep.variant), rep.seed), {}, {}};
    for (const MetricsRow& row : rep.rows) {
      s.x.push_back(static_cast<double>(row.iteration));
      s.y.push_back(row.student_entropy);
    }
    series.push_back(std::move(s));
  }
  return plot::line_chart("Student entropy during training", "iteration",
                          "mean entropy (nats)", series);
}

int cmd_train(const Invocation& inv) {
  LoadedConfig loaded = load_config(inv.config_path, "train");
  config::Reader r = make_reader(std::move(loaded.kv), inv.seed);
  TrainConfig base = read_train(r);
  const RunSettings settings = read_run(r, inv.seed);
  r.finish();
  base.validate();

  const TabularTeacher teacher = build_teacher(base.env);
  Outputs out(inv.out_dir);
  std::vector<TrainReport> reports;
  std::string eval = eval_csv_header();
  for (std::uint64_t seed : settings.seeds) {
    TrainConfig cfg = base;
    cfg.seed = seed;
    const SeedRun run = train_and_evaluate(cfg, teacher, settings);
    eval += eval_csv_row(run);
    add_seed_files(out, settings.run_id, run, settings);
    reports.push_back(run.result.report);
  }
  std::ostringstream csv;
  write_report_csv(csv, reports);
  out.add(settings.run_id + "__train.csv", csv.str());
  out.add(settings.run_id + "__train.json", report_json(reports));
  out.add(settings.run_id + "__eval.csv", std::move(eval));
  if (settings.plot) out.add(settings.run_id + "__train.svg", training_plot(reports));
  out.add(kManifestName, manifest_text("train", r, {}));
  out.commit();
  return kOk;
}

int cmd_sweep(const Invocation& inv) {
  LoadedConfig loaded = load_config(inv.config_path, "sweep");
  std::string axis = inv.axis;
  std::vector<std::string> values = inv.values;
  if (loaded.manifest) {
    if (axis.empty()) axis = loaded.manifest->value("axis", "");
    if (values.empty() && loaded.manifest->contains("values"))
      values = loaded.manifest->at("values").get<std::vector<std::string>>();
  }
  if (axis.empty()) throw std::invalid_argument("sweep requires --axis");
  if (values.empty()) throw std::invalid_argument("sweep requires --values");

  config::Reader r = make_reader(std::move(loaded.kv), inv.seed);
  TrainConfig base = read_train(r);
  const RunSettings settings = read_run(r, inv.seed);
  r.finish();
  base.validate();
  for (const std::string& v : values) apply_axis(base, axis, v).validate();

  const TabularTeacher teacher = build_teacher(base.env);
  Outputs out(inv.out_dir);
  std::string combined =
      "axis,value,variant,seed,final_mean_loss,final_reverse_kl,final_fkl_high,"
      "final_gate_fraction,final_student_entropy,eval_fkl_high_entropy,"
      "student_high_fraction,teacher_high_fraction,retention_ratio\n";
  std::vector<plot::Series> bars(1);
  bars[0].label = "eval forward KL at high entropy (mean over seeds)";
  for (const std::string& value : values) {
    std::vector<TrainReport> reports;
    std::string eval = eval_csv_header();
    const std::string prefix =
        fmt::format("{}__{}_{}", settings.run_id, axis, sanitize(value));
    double fkl_sum = 0.0;
    std::size_t fkl_n = 0;
    for (std::uint64_t seed : settings.seeds) {
      TrainConfig cfg = apply_axis(base, axis, value);
      cfg.seed = seed;
      const SeedRun run = train_and_evaluate(cfg, teacher, settings);
      const MetricsRow last =
          run.result.report.rows.empty() ? MetricsRow{} : run.result.report.rows.back();
      const auto& ret = run.eval.retention;
      combined += fmt::format(
          "{},{},{},{},{},{},{},{},{},{},{},{},{}\n", axis, value,
          variant_name(cfg.variant), seed, last.mean_loss, last.mean_reverse_kl,
          fmt_opt(last.mean_fkl_high), last.gate_fraction, last.student_entropy,
          fmt_opt(run.eval.fkl_high_entropy), ret.student_fraction, ret.teacher_fraction,
          fmt_opt(ret.ratio));
      if (run.eval.fkl_high_entropy) {
        fkl_sum += *run.eval.fkl_high_entropy;
        ++fkl_n;
      }
      eval += eval_csv_row(run);
      add_seed_files(out, prefix, run, settings);
      reports.push_back(run.result.report);
    }
    bars[0].y.push_back(fkl_n > 0 ? fkl_sum / static_cast<double>(fkl_n) : 0.0);
    std::ostringstream csv;
    write_report_csv(csv, reports);
    out.add(prefix + "__train.csv", csv.str());
    out.add(prefix + "__eval.csv", std::move(eval));
  }
  out.add(settings.run_id + "__sweep.csv", std::move(combined));
  if (settings.plot) {
    out.add(settings.run_id + "__sweep.svg",
            plot::bar_chart("Sweep over " + axis, values, bars));
  }
  out.add(kManifestName, manifest_text("sweep", r, {{"axis", axis}, {"values", values}}));
  out.commit();
  return kOk;
}

// ---- analyze --------------------------------------------------------------

bool is_student_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  char magic[4] = {};
  is.read(magic, 4);
  return is.gcount() == 4 && std::string_view(magic, 4) == "EOPD";
}

StudentTable load_student_for(const std::string& path, const EnvConfig& env) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  std::optional<LoadedStudent> loaded;
  try {
    loaded.emplace(load_student(is));
  } catch (const std::runtime_error& e) {
    throw IoError(path + ": " + e.what());
  }
  if (loaded->student.vocab() != env.vocab || loaded->context_order != env.context_order)
    throw ConfigError(fmt::format(
        "{}: model has V={} m={} but the configuration says V={} m={}", path,
        loaded->student.vocab(), loaded->context_order, env.vocab, env.context_order));
  return std::move(loaded->student);
}

RolloutBuffer load_buffer_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path);
  try {
    return read_buffer(is);
  } catch (const std::runtime_error& e) {
    throw IoError(path + ": " + e.what());
  }
}

int cmd_analyze(const Invocation& inv) {
  LoadedConfig loaded = load_config(inv.config_path, "analyze");
  std::string input = inv.input;
  std::string which = inv.analysis;
  std::string model = inv.model;
  if (loaded.manifest) {
    if (input.empty()) input = loaded.manifest->value("input", "");
    if (which.empty()) which = loaded.manifest->value("analysis", "");
    if (model.empty()) model = loaded.manifest->value("model", "");
  }
  if (which.empty()) which = "all";
  if (input.empty()) throw std::invalid_argument("analyze requires an input file");
  const bool all = which == "all";
  if (!all && which != "entropy_histogram" && which != "retention" &&
      which != "fkl_high_entropy" && which != "topk_tradeoff")
    throw std::invalid_argument("unknown analysis '" + which + "'");

  config::Reader r = make_reader(std::move(loaded.kv), inv.seed);
  const EnvConfig env = read_env(r);
  const std::string run_id = sanitize(r.get_string("run_id", "run"));
  const std::size_t top_k = r.get_size("top_k", 16);
  const double tau = r.get_double("tau", 0.8);
  const double threshold = r.get_double("retention_threshold", 1.0);
  const std::size_t n_rollouts = r.get_size("eval_rollouts", 64);
  const std::size_t bins = r.get_size("hist_bins", 40);
  std::vector<std::uint64_t> k_values_u = r.get_u64s("k_values", {1, 2, 4, 8, 16, 32});
  const std::uint64_t seed = r.get_u64s("seeds", {0}).at(0);
  const bool plot = r.get_bool("plot", false);
  r.finish();
  env.validate();
  std::vector<std::size_t> k_values(k_values_u.begin(), k_values_u.end());
  for (std::size_t k : k_values) {
    if (k == 0 || k > env.vocab) r.fail("k_values", "each k must lie in [1, vocab]");
  }
  if (top_k == 0 || top_k > env.vocab) r.fail("top_k", "must lie in [1, vocab]");

  const bool model_input = is_student_file(input);
  const TabularTeacher teacher = build_teacher(env);
  std::optional<StudentTable> student;
  std::optional<RolloutBuffer> buffer;
  if (model_input) {
    student = load_student_for(input, env);
  } else {
    buffer = load_buffer_file(input);
    if (!model.empty()) student = load_student_for(model, env);
  }
  const auto edges = analysis::default_entropy_edges(env.vocab, bins);
  const RolloutBuffer teacher_rollouts = analysis::generate_rollouts(
      analysis::policy_of(teacher), teacher, env, n_rollouts, top_k, seed);

  Outputs out(inv.out_dir);
  const auto file = [&run_id](const std::string& a) { return run_id + "__" + a; };

  if (all || which == "entropy_histogram") {
    std::vector<std::pair<std::string, analysis::Histogram>> hists;
    if (model_input) {
      hists.emplace_back("student", analysis::entropy_histogram(
                                        analysis::generate_rollouts(
                                            analysis::policy_of(*student), teacher, env,
                                            n_rollouts, top_k, seed),
                                        edges));
    } else {
      hists.emplace_back("buffer", analysis::entropy_histogram(*buffer, edges));
    }
    hists.emplace_back("teacher", analysis::entropy_histogram(teacher_rollouts, edges));
    std::ostringstream csv;
    analysis::write_histogram_csv(csv, hists);
    out.add(file("entropy_histogram.csv"), csv.str());
    if (plot) {
      std::vector<std::string> labels;
      for (std::size_t i = 0; i + 1 < edges.size(); ++i)
        labels.push_back(fmt::format("[{:.3g},{:.3g})", edges[i], edges[i + 1]));
      std::vector<plot::Series> series;
      for (const auto& [label, h] : hists) series.push_back({label, {}, h.fractions});
      out.add(file("entropy_histogram.svg"),
              plot::bar_chart("Token entropy histogram", labels, series));
    }
  }

  if (all || which == "retention") {
    analysis::Retention ret;
    if (model_input) {
      ret = analysis::high_entropy_retention(analysis::policy_of(*student), teacher, env,
                                             threshold, n_rollouts, seed);
    } else {
      std::size_t hits = 0;
      for (const Trajectory& t : buffer->trajectories)
        for (const TokenRecord& rec : t.tokens) hits += rec.student_entropy >= threshold;
      const std::size_t n = buffer->token_count();
      ret.student_fraction = n ? static_cast<double>(hits) / static_cast<double>(n) : 0.0;
      std::size_t th = 0;
      for (const Trajectory& t : teacher_rollouts.trajectories)
        for (const TokenRecord& rec : t.tokens) th += rec.student_entropy >= threshold;
      ret.teacher_fraction =
          static_cast<double>(th) / static_cast<double>(teacher_rollouts.token_count());
      if (ret.teacher_fraction > 0.0) ret.ratio = ret.student_fraction / ret.teacher_fraction;
    }
    out.add(file("retention.csv"),
            fmt::format("threshold,student_fraction,teacher_fraction,ratio\n{},{},{},{}\n",
                        threshold, ret.student_fraction, ret.teacher_fraction,
                        fmt_opt(ret.ratio)));
  }

  if (all || which == "fkl_high_entropy") {
    if (!student) {
      if (!all)
        throw std::invalid_argument(
            "fkl_high_entropy on a rollout buffer needs --model");
    } else {
      const RolloutBuffer positions =
          buffer ? *buffer
                 : analysis::generate_rollouts(analysis::policy_of(*student), teacher, env,
                                               n_rollouts, top_k, seed);
      std::size_t qualifying = 0;
      for (const Trajectory& t : positions.trajectories)
        for (const TokenRecord& rec : t.tokens) qualifying += rec.teacher.entropy >= tau;
      out.add(file("fkl_high_entropy.csv"),
              fmt::format("tau,positions,mean_truncated_fkl\n{},{},{}\n", tau, qualifying,
                          fmt_opt(analysis::fkl_at_high_entropy(*student, positions, tau))));
    }
  }

  if (all || which == "topk_tradeoff") {
    const auto rows =
        analysis::topk_tradeoff(teacher, buffer ? *buffer : teacher_rollouts, k_values);
    std::ostringstream csv;
    analysis::write_topk_csv(csv, rows);
    out.add(file("topk_tradeoff.csv"), csv.str());
    if (plot) {
      plot::Series mass{"mean top-k mass", {}, {}};
      for (const auto& row : rows) {
        mass.x.push_back(static_cast<double>(row.k));
        mass.y.push_back(row.mean_mass);
      }
      out.add(file("topk_tradeoff.svg"),
              plot::line_chart("Top-k cumulative mass", "k", "mass", {mass}));
    }
  }

  std::map<std::string, json> extra{{"input", input}, {"analysis", which}};
  if (!model.empty()) extra["model"] = model;
  out.add(kManifestName, manifest_text("analyze", r, extra));
  out.commit();
  return kOk;
}

}  // namespace

void init_logging() {
  auto logger = spdlog::get("eopd");
  if (!logger) logger = spdlog::stderr_color_mt("eopd");
  spdlog::set_default_logger(logger);
  spdlog::set_pattern("[%l] %v");
  const char* level = std::getenv("EOPD_LOG");
  const std::string value = level != nullptr ? level : "info";
  if (value == "error") {
    spdlog::set_level(spdlog::level::err);
  } else if (value == "debug") {
    spdlog::set_level(spdlog::level::debug);
  } else {
    spdlog::set_level(spdlog::level::info);
  }
}

int execute(const Invocation& inv) {
  if (inv.out_dir.empty()) {
    spdlog::error("--out is required");
    return kUsage;
  }
  try {
    if (inv.command == "toy") return cmd_toy(inv);
    if (inv.command == "train") return cmd_train(inv);
    if (inv.command == "sweep") return cmd_sweep(inv);
    if (inv.command == "analyze") return cmd_analyze(inv);
    spdlog::error("unknown command '{}'", inv.command);
    return kUsage;
  } catch (const NanAbort& e) {
    const fs::path diag = fs::path(inv.out_dir) / "nan_diagnostic.txt";
    std::error_code ec;
    fs::create_directories(inv.out_dir, ec);
    std::ofstream os(diag);
    os << e.what() << "\n" << e.diagnostic();
    spdlog::error("{}; diagnostic written to {}", e.what(), diag.string());
    return kNanAbort;
  } catch (const IoError& e) {
    spdlog::error("{}", e.what());
    return kIoError;
  } catch (const config::ConfigParseError& e) {
    spdlog::error("{}", e.what());
    return kConfigError;
  } catch (const ConfigError& e) {
    spdlog::error("configuration: {}", e.what());
    return kConfigError;
  } catch (const std::invalid_argument& e) {
    spdlog::error("{}", e.what());
    return kConfigError;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kIoError;
  }
}

int run(int argc, const char* const* argv) {
  CLI::App app{"Entropy-aware on-policy distillation laboratory"};
  app.require_subcommand(1);
  Invocation inv;
  std::uint64_t seed = 0;
  std::string values;

  const auto common = [&](CLI::App* sub) {
    sub->add_option("--config", inv.config_path, "config file or run manifest");
    sub->add_option("--out", inv.out_dir, "output directory")->required();
    sub->add_option("--seed", seed, "override the config's seed list");
  };
  CLI::App* toy_cmd = app.add_subcommand("toy", "single-categorical instability study");
  CLI::App* train_cmd = app.add_subcommand("train", "train a student in the synthetic env");
  CLI::App* sweep_cmd = app.add_subcommand("sweep", "train across values of one axis");
  CLI::App* analyze_cmd = app.add_subcommand("analyze", "diagnostics for a model or buffer");
  for (CLI::App* sub : {toy_cmd, train_cmd, sweep_cmd, analyze_cmd}) common(sub);
  sweep_cmd->add_option("--axis", inv.axis, "tau | k | variant | fkl_fraction");
  sweep_cmd->add_option("--values", values, "comma-separated values");
  analyze_cmd->add_option("input", inv.input, "student model (.bin) or rollout buffer");
  analyze_cmd->add_option("analysis", inv.analysis,
                          "entropy_histogram | retention | fkl_high_entropy | "
                          "topk_tradeoff | all");
  analyze_cmd->add_option("--model", inv.model, "student model for a buffer input");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  }
  for (CLI::App* sub : {toy_cmd, train_cmd, sweep_cmd, analyze_cmd}) {
    if (sub->parsed()) {
      inv.command = sub->get_name();
      if (sub->count("--seed") > 0) inv.seed = seed;
    }
  }
  inv.values = config::split_list(values);
  return execute(inv);
}

}  // namespace eopd::cli
