#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "eopd/objective.hpp"
#include "eopd/synthenv.hpp"

namespace eopd {

struct TrainConfig {
  Variant variant = Variant::kEopd;
  std::size_t batch_size = 32;
  std::size_t minibatch_size = 8;
  std::size_t iterations = 1500;
  double lr = 20.0;
  double momentum = 0.0;  // 0 disables the velocity buffer
  LossParams loss;
  std::size_t top_k = 16;
  double init_std = 0.01;
  // Teacher-entropy cut for the forward-KL diagnostic column.
  double diag_tau = 0.8;
  std::uint64_t seed = 0;
  EnvConfig env;

  // Throws ConfigError / std::invalid_argument.
  void validate() const;
  std::size_t steps_per_iteration() const { return batch_size / minibatch_size; }
};

struct MetricsRow {
  std::size_t iteration = 0;
  double mean_loss = 0.0;        // per token, over the iteration
  double mean_reverse_kl = 0.0;  // exact, visit-weighted over buffer states
  std::optional<double> mean_fkl_high;  // exact forward KL at H_te >= diag_tau
  double gate_fraction = 0.0;       // tokens whose forward-KL term fired
  double high_entropy_ratio = 0.0;  // tokens with H_te > tau
  double student_entropy = 0.0;     // behavior entropy at rollout
  double clipped_fraction = 0.0;
  double first_step_max_ratio_dev = 0.0;  // max |r - 1| before any update
  std::size_t grad_steps = 0;
  std::size_t tokens = 0;
  // Not exported: it would break byte-identical replays.
  double wall_seconds = 0.0;
};

struct TrainReport {
  std::uint64_t seed = 0;
  Variant variant = Variant::kEopd;
  std::vector<MetricsRow> rows;
};

struct TrainResult {
  TrainReport report;
  StudentTable student;
};

struct StepInfo {
  std::size_t iteration = 0;
  std::size_t step = 0;
  std::vector<std::size_t> trajectories;  // indices into the buffer
  std::vector<double> ratios;             // per token, in evaluation order
  std::size_t gate_active = 0;
  std::size_t tokens = 0;
};

// Optional observers, called synchronously.
struct TrainHooks {
  std::function<void(std::size_t, const RolloutBuffer&)> on_rollouts;
  std::function<void(const StepInfo&)> on_step;
};

// Thrown when a loss or gradient turns non-finite; `diagnostic` dumps the
// offending token record.
class NanAbort : public std::runtime_error {
 public:
  NanAbort(const std::string& what, std::string diagnostic)
      : std::runtime_error(what), diagnostic_(std::move(diagnostic)) {}
  const std::string& diagnostic() const { return diagnostic_; }

 private:
  std::string diagnostic_;
};

StudentTable initial_student(const TrainConfig& cfg);

TrainResult train(const TrainConfig& cfg, const TabularTeacher& teacher,
                  const TrainHooks& hooks = {});
// Builds the teacher from cfg.env.
TrainResult train(const TrainConfig& cfg, const TrainHooks& hooks = {});

// Per-token minibatch loss with the 1 / sum|x| normalization, and its
// gradient accumulated into `grad` (a table-shaped buffer).
double minibatch_loss(const StudentTable& student, const RolloutBuffer& buffer,
                      std::span<const std::size_t> trajectories,
                      const TrainConfig& cfg, StudentTable* grad);

struct SweepEntry {
  std::string value;
  TrainConfig config;
  TrainResult result;
};

// Axis is one of: tau, k, variant, fkl_fraction.
TrainConfig apply_axis(TrainConfig base, const std::string& axis,
                       const std::string& value);
std::vector<SweepEntry> sweep(const TrainConfig& base, const std::string& axis,
                              const std::vector<std::string>& values);

void write_report_csv(std::ostream& os, const std::vector<TrainReport>& reports);
std::string report_json(const std::vector<TrainReport>& reports);

// Little-endian table: "EOPD", u32 version, u32 V, u32 m, then
// V^m rows of V float64 logits.
inline constexpr std::uint32_t kStudentFormatVersion = 1;
void save_student(std::ostream& os, const StudentTable& student,
                  std::size_t context_order);
struct LoadedStudent {
  StudentTable student;
  std::size_t context_order = 0;
};
// Throws std::runtime_error on a malformed file.
LoadedStudent load_student(std::istream& is);

}  // namespace eopd
