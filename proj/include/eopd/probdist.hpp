#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "eopd/rng.hpp"

namespace eopd {

using TokenId = std::size_t;

// Probabilities below this are clamped before taking logs.
inline constexpr double kProbFloor = 1e-300;

// Real-valued logits over a finite vocabulary. All entries are finite.
class LogitVector {
 public:
  LogitVector() = default;
  explicit LogitVector(std::vector<double> values);

  std::size_t size() const { return values_.size(); }
  std::span<const double> values() const { return values_; }
  double operator[](std::size_t i) const { return values_[i]; }

 private:
  std::vector<double> values_;
};

// Normalized probability vector. Entries are nonnegative and sum to one
// within 1e-12.
class Categorical {
 public:
  Categorical() = default;
  // Validates nonnegativity and normalization; throws std::invalid_argument.
  explicit Categorical(std::vector<double> probs);

  std::size_t size() const { return probs_.size(); }
  std::span<const double> probs() const { return probs_; }
  double operator[](std::size_t i) const { return probs_[i]; }
  // Lowest index among the maximal entries.
  TokenId argmax() const;

 private:
  struct Trusted {};
  Categorical(std::vector<double> probs, Trusted) : probs_(std::move(probs)) {}
  friend Categorical softmax_temp(std::span<const double>, double);

  std::vector<double> probs_;
};

// The k most probable tokens of a source distribution, ordered by
// descending probability (ties: lowest index first), with the selected
// probabilities renormalized by their pre-renormalization mass.
struct TopKView {
  std::vector<TokenId> indices;
  std::vector<double> renorm_probs;
  double mass = 0.0;

  std::size_t size() const { return indices.size(); }
  bool operator==(const TopKView&) const = default;
};

// probs[x] = exp(z[x]/T) / sum_y exp(z[y]/T), max-subtracted.
Categorical softmax_temp(std::span<const double> logits, double temperature);
inline Categorical softmax_temp(const LogitVector& logits, double temperature) {
  return softmax_temp(logits.values(), temperature);
}

// Shannon entropy in nats with 0 log 0 = 0.
double entropy(const Categorical& dist);

TopKView top_k(const Categorical& dist, std::size_t k);

// Inverse-CDF draw.
TokenId sample(const Categorical& dist, Rng& rng);
// Draw from the renormalized top-k view; returns a source token id.
TokenId sample(const TopKView& view, Rng& rng);

// log probs[x], floored at log(kProbFloor).
double log_prob(const Categorical& dist, TokenId x);

inline double floored_log(double p) {
  return std::log(p < kProbFloor ? kProbFloor : p);
}

}  // namespace eopd
