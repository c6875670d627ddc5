#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mcvi/elbo.hpp"
#include "mcvi/error.hpp"
#include "mcvi/linalg.hpp"
#include "mcvi/model.hpp"

namespace mcvi {

struct TrainConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps_adam = 1e-8;
  std::size_t batch_size = 64;  // capped at the sample count
  std::size_t epochs = 500;
  std::size_t mc_samples = 1;
  std::uint64_t seed = 0;
  std::size_t log_every = 0;  // 0 disables progress logging
  // Draws per sample for the final full-data bound used in model selection.
  std::size_t final_mc_samples = 16;

  void validate() const {
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
      throw DataError("train: learning_rate must be finite and >= 0");
    if (!(beta1 > 0.0 && beta1 < 1.0)) throw DataError("train: beta1 must lie in (0, 1)");
    if (!(beta2 > 0.0 && beta2 < 1.0)) throw DataError("train: beta2 must lie in (0, 1)");
    if (!(eps_adam > 0.0)) throw DataError("train: eps_adam must be > 0");
    if (batch_size < 1) throw DataError("train: batch_size must be >= 1");
    if (epochs < 1) throw DataError("train: epochs must be >= 1");
    if (mc_samples < 1 || final_mc_samples < 1) throw DataError("train: mc_samples must be >= 1");
  }
};

struct FitReport {
  Vector train_nlb;       // one entry per executed epoch
  Vector validation_nlb;  // empty unless a validation set was supplied
  double final_nlb = 0.0;
  double final_nlb_stderr = 0.0;
  double wall_seconds = 0.0;
  std::size_t epochs_run = 0;
};

class FitDiverged : public NumericalError {
 public:
  FitDiverged(const std::string& what, std::size_t last_finite_epoch, FitReport partial)
      : NumericalError(what), last_finite_epoch_(last_finite_epoch), partial_(std::move(partial)) {}
  std::size_t last_finite_epoch() const noexcept { return last_finite_epoch_; }
  const FitReport& partial_report() const noexcept { return partial_; }

 private:
  std::size_t last_finite_epoch_;
  FitReport partial_;
};

// First and second moment estimates, shaped like the model.
struct AdamState {
  GradientSet m;
  GradientSet v;
  std::size_t step = 0;

  static AdamState for_model(const MultiChannelModel& model) {
    return {GradientSet::zeros_like(model), GradientSet::zeros_like(model), 0};
  }
};

// One Adam update on a flat tensor, ascending along `grad`. t is 1-based.
inline void adam_step(std::span<double> params, std::span<const double> grad,
                      std::span<double> m, std::span<double> v, std::size_t t,
                      const TrainConfig& cfg) {
  if (params.size() != grad.size() || params.size() != m.size() || params.size() != v.size()) {
    throw ShapeError("adam_step: tensor sizes disagree (" + std::to_string(params.size()) + ", " +
                     std::to_string(grad.size()) + ", " + std::to_string(m.size()) + ", " +
                     std::to_string(v.size()) + ")");
  }
  if (t < 1) throw DataError("adam_step: step index must be >= 1");
  const double td = static_cast<double>(t);
  const double bc1 = 1.0 - std::pow(cfg.beta1, td);
  const double bc2 = 1.0 - std::pow(cfg.beta2, td);
  for (std::size_t k = 0; k < params.size(); ++k) {
    m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * grad[k];
    v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * grad[k] * grad[k];
    const double m_hat = m[k] / bc1;
    const double v_hat = v[k] / bc2;
    params[k] += cfg.learning_rate * m_hat / (std::sqrt(v_hat) + cfg.eps_adam);
  }
}

// Applies one Adam step to every tensor of the model.
inline void adam_step(MultiChannelModel& model, GradientSet& grads, AdamState& state,
                      const TrainConfig& cfg) {
  ++state.step;
  std::vector<std::span<double>> p, g, m, v;
  auto collect = [](std::vector<std::span<double>>& out) {
    return [&out](const std::string&, std::span<double> t) { out.push_back(t); };
  };
  for_each_tensor(model, collect(p));
  for_each_tensor(grads, collect(g));
  for_each_tensor(state.m, collect(m));
  for_each_tensor(state.v, collect(v));
  if (p.size() != g.size() || p.size() != m.size() || p.size() != v.size())
    throw ShapeError("adam_step: gradient set does not mirror the model");
  for (std::size_t k = 0; k < p.size(); ++k) adam_step(p[k], g[k], m[k], v[k], state.step, cfg);
}

// Copies the given rows of every channel.
inline std::vector<Matrix> gather_rows(std::span<const Matrix> channels,
                                       std::span<const std::size_t> rows) {
  std::vector<Matrix> out;
  out.reserve(channels.size());
  for (const auto& ch : channels) {
    Matrix b(rows.size(), ch.cols());
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const auto src = ch.row(rows[r]);
      std::copy(src.begin(), src.end(), b.row(r).begin());
    }
    out.push_back(std::move(b));
  }
  return out;
}

// Minibatch partition of [0, n) used in one epoch: shuffled, disjoint, covering.
inline std::vector<std::vector<std::size_t>> epoch_batches(Rng& rng, std::size_t n,
                                                           std::size_t batch_size) {
  std::vector<std::size_t> order(n);
  for (std::size_t k = 0; k < n; ++k) order[k] = k;
  rng.shuffle(order);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

// Seed of the final full-data bound evaluation of a fit.
inline std::uint64_t final_bound_seed(const TrainConfig& cfg) {
  return derive_seed(cfg.seed, fnv1a("final-bound"));
}

using EpochCallback = std::function<void(std::size_t epoch, double train_nlb)>;

// Stochastic gradient ascent on the bound with Adam, for a fixed epoch budget.
inline FitReport fit(MultiChannelModel& model, std::span<const Matrix> data,
                     const TrainConfig& cfg,
                     std::optional<std::span<const Matrix>> validation = std::nullopt,
                     const EpochCallback& on_epoch = {}) {
  cfg.validate();
  model.validate();
  check_batch(model, data);
  if (validation) check_batch(model, *validation);
  const auto started = std::chrono::steady_clock::now();

  const std::size_t n = data[0].rows();
  const std::size_t batch_size = std::min(cfg.batch_size, n);
  Rng shuffle_rng(derive_seed(cfg.seed, fnv1a("shuffle")));
  AdamState state = AdamState::for_model(model);
  FitReport report;
  std::size_t step = 0;

  auto diverged = [&](const std::string& why, std::size_t epoch) {
    report.epochs_run = report.train_nlb.size();
    report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    throw FitDiverged("fit diverged at epoch " + std::to_string(epoch + 1) + ": " + why +
                          " (last finite epoch " + std::to_string(report.train_nlb.size()) + ")",
                      report.train_nlb.size(), report);
  };

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double nlb_weighted = 0.0;
    for (const auto& rows : epoch_batches(shuffle_rng, n, batch_size)) {
      const auto batch = gather_rows(data, rows);
      ++step;
      ElboWithGradients eg;
      try {
        eg = elbo_gradients(model, batch, derive_seed(cfg.seed, fnv1a("step"), step),
                            cfg.mc_samples);
      } catch (const NumericalError& e) {
        diverged(e.what(), epoch);
      }
      if (!std::isfinite(eg.elbo.total)) diverged("non-finite bound", epoch);
      if (!eg.gradients.all_finite()) diverged("non-finite gradient", epoch);
      adam_step(model, eg.gradients, state, cfg);
      nlb_weighted -= eg.elbo.total * static_cast<double>(rows.size());
    }
    bool finite = true;
    for_each_tensor(model, [&](const std::string&, std::span<double> t) {
      for (double v : t) finite = finite && std::isfinite(v);
    });
    if (!finite) diverged("non-finite parameters", epoch);

    const double train_nlb = nlb_weighted / static_cast<double>(n);
    report.train_nlb.push_back(train_nlb);
    if (validation) {
      const auto vb = elbo_batch(model, *validation, derive_seed(cfg.seed, fnv1a("validation"), epoch),
                                 cfg.mc_samples);
      report.validation_nlb.push_back(-vb.total);
    }
    if (on_epoch && cfg.log_every > 0 && (epoch + 1) % cfg.log_every == 0) on_epoch(epoch + 1, train_nlb);
  }

  ElboBreakdown final_bound;
  try {
    final_bound = elbo_batch(model, data, final_bound_seed(cfg), cfg.final_mc_samples);
  } catch (const NumericalError& e) {
    diverged(e.what(), cfg.epochs - 1);
  }
  if (!std::isfinite(final_bound.total)) diverged("non-finite final bound", cfg.epochs - 1);
  report.final_nlb = -final_bound.total;
  report.final_nlb_stderr = final_bound.mc_stderr;
  report.epochs_run = report.train_nlb.size();
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return report;
}

}  // namespace mcvi
