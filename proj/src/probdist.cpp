#include "eopd/probdist.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace eopd {

LogitVector::LogitVector(std::vector<double> values)
    : values_(std::move(values)) {
  if (values_.empty()) throw std::invalid_argument("LogitVector: empty");
  for (double v : values_) {
    if (!std::isfinite(v))
      throw std::invalid_argument("LogitVector: non-finite entry");
  }
}

Categorical::Categorical(std::vector<double> probs) : probs_(std::move(probs)) {
  if (probs_.empty()) throw std::invalid_argument("Categorical: empty");
  double total = 0.0;
  for (double p : probs_) {
    if (!(p >= 0.0) || !std::isfinite(p))
      throw std::invalid_argument("Categorical: negative or non-finite entry");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-12)
    throw std::invalid_argument("Categorical: probabilities sum to " +
                                std::to_string(total));
}

TokenId Categorical::argmax() const {
  return static_cast<TokenId>(
      std::max_element(probs_.begin(), probs_.end()) - probs_.begin());
}

Categorical softmax_temp(std::span<const double> logits, double temperature) {
  if (!(temperature > 0.0))
    throw std::invalid_argument("softmax_temp: temperature must be positive");
  if (logits.empty()) throw std::invalid_argument("softmax_temp: empty logits");
  double top = logits[0];
  for (double z : logits) {
    if (!std::isfinite(z))
      throw std::invalid_argument("softmax_temp: non-finite logit");
    top = std::max(top, z);
  }
  std::vector<double> probs(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    probs[i] = std::exp((logits[i] - top) / temperature);
    total += probs[i];
  }
  for (double& p : probs) p /= total;
  return Categorical(std::move(probs), Categorical::Trusted{});
}

double entropy(const Categorical& dist) {
  double h = 0.0;
  for (double p : dist.probs()) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

TopKView top_k(const Categorical& dist, std::size_t k) {
  if (k == 0 || k > dist.size())
    throw std::invalid_argument("top_k: k must lie in [1, V]");
  std::vector<TokenId> order(dist.size());
  std::iota(order.begin(), order.end(), TokenId{0});
  const auto before = [&dist](TokenId a, TokenId b) {
    return dist[a] > dist[b] || (dist[a] == dist[b] && a < b);
  };
  std::partial_sort(order.begin(), order.begin() + static_cast<long>(k),
                    order.end(), before);
  order.resize(k);

  TopKView view;
  view.indices = std::move(order);
  for (TokenId i : view.indices) view.mass += dist[i];
  view.renorm_probs.reserve(k);
  for (TokenId i : view.indices) view.renorm_probs.push_back(dist[i] / view.mass);
  return view;
}

namespace {

template <typename Probs>
std::size_t inverse_cdf(const Probs& probs, double u) {
  double cumulative = 0.0;
  std::size_t last_positive = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] <= 0.0) continue;
    cumulative += probs[i];
    last_positive = i;
    if (u < cumulative) return i;
  }
  // Rounding left the cumulative sum just below u.
  return last_positive;
}

}  // namespace

TokenId sample(const Categorical& dist, Rng& rng) {
  return inverse_cdf(dist.probs(), rng.uniform());
}

TokenId sample(const TopKView& view, Rng& rng) {
  return view.indices[inverse_cdf(view.renorm_probs, rng.uniform())];
}

double log_prob(const Categorical& dist, TokenId x) {
  if (x >= dist.size())
    throw std::invalid_argument("log_prob: token id out of range");
  return floored_log(dist[x]);
}

}  // namespace eopd
