#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "mcvi/error.hpp"
#include "mcvi/linalg.hpp"
#include "mcvi/model.hpp"

namespace mcvi {

// Monte-Carlo evidence lower bound of the multi-channel model.
//
// For every encoding channel c and sample s, K latent draws are taken from
// q(z | x_c) and each draw must explain every channel i through decoder i:
//
//   L = 1/C sum_c [ sum_i E_q(z|x_c) ln p(x_i | z) - KL(q(z|x_c) || N(0, I)) ]
//
// averaged over the samples of the batch. The noise for encoder c is drawn
// from a stream keyed by (seed, channel name), so the estimator is a pure
// function of (model, batch, seed) and reordering channels leaves it
// unchanged.
//
// Reduction order (part of the contract, relied on for exact comparisons):
//   recon_terms(c, i) = [sum over s, then k of ln p(x_i^s | z^{s,c,k})] / (S K)
//   kl_terms[c]       = [sum over s of KL_s] / S
//   total             = [sum_c (sum_i recon_terms(c, i) - kl_terms[c])] / C
struct ElboBreakdown {
  double total = 0.0;
  Matrix recon_terms;  // C x C, row = encoder c, column = decoder i
  Vector kl_terms;     // C
  // Standard error of `total` due to Monte-Carlo noise only (0 when K = 1).
  double mc_stderr = 0.0;
  std::size_t samples = 0;
  std::size_t mc_samples = 0;
};

struct GradientSet {
  std::vector<GenerativeParams> theta;
  std::vector<VariationalParams> phi;

  static GradientSet zeros_like(const MultiChannelModel& m) {
    GradientSet g;
    for (std::size_t c = 0; c < m.channel_count(); ++c) {
      const auto& t = m.theta[c];
      const auto& p = m.phi[c];
      g.theta.push_back({Matrix(t.g_mu.rows(), t.g_mu.cols()), Vector(t.g_logvar.size(), 0.0)});
      g.phi.push_back({Matrix(p.v_mu.rows(), p.v_mu.cols()),
                       Matrix(p.v_logvar.rows(), p.v_logvar.cols()),
                       Vector(p.v_logvar_bias.size(), 0.0)});
    }
    return g;
  }

  bool all_finite() {
    bool ok = true;
    for_each_tensor(*this, [&](const std::string&, std::span<double> t) {
      for (double v : t) ok = ok && std::isfinite(v);
    });
    return ok;
  }
};

// Test hook: individual terms of the bound can be switched off.
struct ElboOptions {
  bool reconstruction = true;
  bool kl = true;
};

inline double kl_standard_normal(std::span<const double> mu, std::span<const double> sigma) {
  if (mu.size() != sigma.size()) throw ShapeError("kl_standard_normal: mu/sigma length mismatch");
  double acc = 0.0;
  for (std::size_t k = 0; k < mu.size(); ++k) {
    const double s = std::max(sigma[k], kSigmaFloor);
    const double s2 = s * s;
    acc += 0.5 * (mu[k] * mu[k] + s2 - 1.0 - std::log(s2));
  }
  return acc;
}

namespace detail {

inline double half_log_two_pi() { return 0.5 * std::log(2.0 * std::numbers::pi); }

// Unchecked kernel; log_variance[j] must equal std::log(variance[j]).
inline double diag_loglik(std::span<const double> x, std::span<const double> mean,
                          std::span<const double> variance, std::span<const double> log_variance) {
  const double c = half_log_two_pi();
  double acc = 0.0;
  for (std::size_t j = 0; j < x.size(); ++j) {
    const double diff = x[j] - mean[j];
    acc += -c - 0.5 * log_variance[j] - diff * diff / (2.0 * variance[j]);
  }
  return acc;
}

}  // namespace detail

inline double gaussian_diag_loglik(std::span<const double> x, std::span<const double> mean,
                                   std::span<const double> variance) {
  if (x.size() != mean.size() || x.size() != variance.size()) {
    throw ShapeError("gaussian_diag_loglik: lengths " + std::to_string(x.size()) + ", " +
                     std::to_string(mean.size()) + ", " + std::to_string(variance.size()));
  }
  Vector log_var(variance.size());
  for (std::size_t j = 0; j < variance.size(); ++j) {
    if (!(variance[j] > 0.0)) {
      throw NumericalError("gaussian_diag_loglik: non-positive variance at index " +
                           std::to_string(j));
    }
    log_var[j] = std::log(variance[j]);
  }
  return detail::diag_loglik(x, mean, variance, log_var);
}

inline void check_batch(const MultiChannelModel& model, std::span<const Matrix> batch) {
  if (batch.size() != model.channel_count()) {
    throw ShapeError("batch has " + std::to_string(batch.size()) + " channels, model has " +
                     std::to_string(model.channel_count()));
  }
  const std::size_t n = batch.empty() ? 0 : batch[0].rows();
  if (n == 0) throw ShapeError("batch is empty");
  for (std::size_t c = 0; c < batch.size(); ++c) {
    if (batch[c].rows() != n) {
      throw ShapeError("ragged batch: channel '" + model.channels[c].name + "' has " +
                       std::to_string(batch[c].rows()) + " samples, expected " +
                       std::to_string(n));
    }
    if (batch[c].cols() != model.channels[c].dim) {
      throw ShapeError("channel '" + model.channels[c].name + "' has width " +
                       std::to_string(batch[c].cols()) + ", model expects " +
                       std::to_string(model.channels[c].dim));
    }
  }
}

inline std::uint64_t encoder_stream_seed(std::uint64_t seed, const ChannelSpec& channel) {
  return derive_seed(seed, fnv1a(channel.name));
}

namespace detail {

inline void decoder_variances(const MultiChannelModel& model, std::vector<Vector>& variance,
                              std::vector<Vector>& log_variance) {
  const std::size_t C = model.channel_count();
  variance.assign(C, {});
  log_variance.assign(C, {});
  for (std::size_t i = 0; i < C; ++i) {
    const auto& glv = model.theta[i].g_logvar;
    variance[i].resize(glv.size());
    log_variance[i].resize(glv.size());
    for (std::size_t j = 0; j < glv.size(); ++j) {
      variance[i][j] = std::exp(glv[j]);
      if (!(variance[i][j] > 0.0) || !std::isfinite(variance[i][j])) {
        throw NumericalError("elbo: decoder variance of channel '" + model.channels[i].name +
                             "' left the representable range");
      }
      log_variance[i][j] = std::log(variance[i][j]);
    }
  }
}

inline void check_elbo_inputs(const MultiChannelModel& model, std::span<const Matrix> batch,
                              std::size_t mc_samples) {
  model.validate();
  check_batch(model, batch);
  if (mc_samples < 1) throw DataError("elbo: mc_samples must be >= 1");
}

// Collects the per-term sums into a breakdown using the documented order.
inline ElboBreakdown assemble(std::size_t C, std::size_t S, std::size_t K,
                              const std::vector<double>& recon_sum, const Vector& kl_sum,
                              double mc_var_sum) {
  ElboBreakdown out;
  out.samples = S;
  out.mc_samples = K;
  out.recon_terms = Matrix(C, C);
  out.kl_terms.assign(C, 0.0);
  const double sk = static_cast<double>(S) * static_cast<double>(K);
  double acc = 0.0;
  for (std::size_t c = 0; c < C; ++c) {
    double inner = 0.0;
    for (std::size_t i = 0; i < C; ++i) {
      out.recon_terms(c, i) = recon_sum[c * C + i] / sk;
      inner += out.recon_terms(c, i);
    }
    out.kl_terms[c] = kl_sum[c] / static_cast<double>(S);
    inner -= out.kl_terms[c];
    acc += inner;
  }
  out.total = acc / static_cast<double>(C);
  out.mc_stderr = std::sqrt(mc_var_sum) / (static_cast<double>(C) * static_cast<double>(S));
  return out;
}

// Sample variance of the K per-draw reconstruction totals, divided by K.
inline double draw_variance_of_mean(std::span<const double> draw_ll) {
  const std::size_t K = draw_ll.size();
  if (K < 2) return 0.0;
  double mean = 0.0;
  for (double v : draw_ll) mean += v;
  mean /= static_cast<double>(K);
  double var = 0.0;
  for (double v : draw_ll) var += (v - mean) * (v - mean);
  return var / static_cast<double>(K - 1) / static_cast<double>(K);
}

// Straight-line evaluation: every draw is decoded feature by feature.
inline ElboBreakdown evaluate_elbo(const MultiChannelModel& model, std::span<const Matrix> batch,
                                   std::uint64_t seed, std::size_t mc_samples,
                                   const ElboOptions& opts) {
  check_elbo_inputs(model, batch, mc_samples);
  const std::size_t C = model.channel_count();
  const std::size_t S = batch[0].rows();
  const std::size_t K = mc_samples;
  const std::size_t l = model.latent_dim;

  std::vector<Vector> variance, log_variance;
  decoder_variances(model, variance, log_variance);

  std::vector<double> recon_sum(C * C, 0.0);
  Vector kl_sum(C, 0.0);
  double mc_var_sum = 0.0;

  Vector mu(l), sigma(l), z(l), draw_ll(K);
  std::size_t max_d = 0;
  for (const auto& ch : model.channels) max_d = std::max(max_d, ch.dim);
  Vector mean(max_d);

  for (std::size_t c = 0; c < C; ++c) {
    const auto& enc = model.phi[c];
    Rng rng(encoder_stream_seed(seed, model.channels[c]));
    for (std::size_t s = 0; s < S; ++s) {
      const auto x_c = batch[c].row(s);
      for (std::size_t k = 0; k < l; ++k) {
        mu[k] = dot(enc.v_mu.row(k), x_c);
        const double logvar = dot(enc.v_logvar.row(k), x_c) + enc.v_logvar_bias[k];
        sigma[k] = std::max(std::exp(0.5 * logvar), kSigmaFloor);
      }
      for (std::size_t draw = 0; draw < K; ++draw) {
        for (std::size_t k = 0; k < l; ++k) z[k] = mu[k] + sigma[k] * rng.normal();
        if (!opts.reconstruction) continue;
        double ll_draw = 0.0;
        for (std::size_t i = 0; i < C; ++i) {
          const auto& dec = model.theta[i];
          const std::size_t d = model.channels[i].dim;
          for (std::size_t j = 0; j < d; ++j) mean[j] = dot(dec.g_mu.row(j), z);
          const double ll = diag_loglik(batch[i].row(s), std::span<const double>(mean.data(), d),
                                        variance[i], log_variance[i]);
          recon_sum[c * C + i] += ll;
          ll_draw += ll;
        }
        draw_ll[draw] = ll_draw;
      }
      if (opts.reconstruction) mc_var_sum += draw_variance_of_mean(draw_ll);
      if (opts.kl) kl_sum[c] += kl_standard_normal(mu, sigma);
    }
  }
  return assemble(C, S, K, recon_sum, kl_sum, mc_var_sum);
}

// Value and gradients, using that the decoders are linear: for a fixed
// sample, sum_j ln N(x_ij; g_j z, v_ij) = k_i + b_iᵀ z - 1/2 zᵀ A_i z with
//   A_i = G_iᵀ Psi_i⁻¹ G_i,  b_i = G_iᵀ Psi_i⁻¹ x_i,
//   k_i = sum_j -1/2 ln(2 pi v_ij) - x_ij² / (2 v_ij).
// Decoder gradients are assembled from P_i = sum_s x_i^s (sum_{c,k} w z)ᵀ and
// M = sum w z zᵀ. Same noise stream and draw order as evaluate_elbo.
inline ElboBreakdown elbo_and_gradients(const MultiChannelModel& model, std::span<const Matrix> batch,
                                        std::uint64_t seed, std::size_t mc_samples,
                                        const ElboOptions& opts, GradientSet& grads) {
  check_elbo_inputs(model, batch, mc_samples);
  const std::size_t C = model.channel_count();
  const std::size_t S = batch[0].rows();
  const std::size_t K = mc_samples;
  const std::size_t l = model.latent_dim;

  std::vector<Vector> variance, log_variance;
  decoder_variances(model, variance, log_variance);

  std::vector<Matrix> a(C, Matrix(l, l));  // A_i
  Matrix a_total(l, l);
  for (std::size_t i = 0; i < C; ++i) {
    const auto& g = model.theta[i].g_mu;
    for (std::size_t j = 0; j < g.rows(); ++j) {
      const auto gr = g.row(j);
      const double inv = 1.0 / variance[i][j];
      for (std::size_t p = 0; p < l; ++p)
        for (std::size_t q = 0; q < l; ++q) a[i](p, q) += gr[p] * gr[q] * inv;
    }
    for (std::size_t e = 0; e < l * l; ++e) a_total.values()[e] += a[i].values()[e];
  }

  const double w_rec = 1.0 / (static_cast<double>(C) * static_cast<double>(S) * static_cast<double>(K));
  const double w_kl = 1.0 / (static_cast<double>(C) * static_cast<double>(S));

  std::vector<double> recon_sum(C * C, 0.0);
  Vector kl_sum(C, 0.0);
  double mc_var_sum = 0.0;

  std::vector<Matrix> p_acc;  // P_i, d_i x l
  for (std::size_t i = 0; i < C; ++i) p_acc.emplace_back(model.channels[i].dim, l);
  std::vector<Vector> x_sq(C);  // sum_s x_ij²
  for (std::size_t i = 0; i < C; ++i) x_sq[i].assign(model.channels[i].dim, 0.0);
  Matrix m_acc(l, l);

  std::vector<Rng> rngs;
  for (std::size_t c = 0; c < C; ++c) rngs.emplace_back(encoder_stream_seed(seed, model.channels[c]));

  // The noise for encoder c must be consumed in (s, draw, k) order, matching
  // evaluate_elbo; each encoder owns its own stream so interleaving over c is safe.
  std::vector<Vector> b(C, Vector(l)), az(C, Vector(l));
  Vector k_const(C), z(l), eps(l), dz(l), dmu(l), dlogvar(l), t_sum(l), draw_ll(K), mu_c(l), sig_c(l);
  for (std::size_t s = 0; s < S; ++s) {
    if (opts.reconstruction) {
      const double half_log_2pi = half_log_two_pi();
      for (std::size_t i = 0; i < C; ++i) {
        const auto x = batch[i].row(s);
        const auto& g = model.theta[i].g_mu;
        std::fill(b[i].begin(), b[i].end(), 0.0);
        double kc = 0.0;
        for (std::size_t j = 0; j < x.size(); ++j) {
          const double wx = x[j] / variance[i][j];
          const auto gr = g.row(j);
          for (std::size_t p = 0; p < l; ++p) b[i][p] += gr[p] * wx;
          kc += -half_log_2pi - 0.5 * log_variance[i][j] - x[j] * x[j] / (2.0 * variance[i][j]);
          x_sq[i][j] += x[j] * x[j];
        }
        k_const[i] = kc;
      }
    }
    std::fill(t_sum.begin(), t_sum.end(), 0.0);

    for (std::size_t c = 0; c < C; ++c) {
      const auto& enc = model.phi[c];
      const auto x_c = batch[c].row(s);
      Rng& rng = rngs[c];
      for (std::size_t k = 0; k < l; ++k) {
        mu_c[k] = dot(enc.v_mu.row(k), x_c);
        const double logvar = dot(enc.v_logvar.row(k), x_c) + enc.v_logvar_bias[k];
        sig_c[k] = std::max(std::exp(0.5 * logvar), kSigmaFloor);
      }
      std::fill(dmu.begin(), dmu.end(), 0.0);
      std::fill(dlogvar.begin(), dlogvar.end(), 0.0);

      for (std::size_t draw = 0; draw < K; ++draw) {
        for (std::size_t k = 0; k < l; ++k) {
          eps[k] = rng.normal();
          z[k] = mu_c[k] + sig_c[k] * eps[k];
        }
        if (!opts.reconstruction) continue;
        double ll_draw = 0.0;
        std::fill(dz.begin(), dz.end(), 0.0);
        for (std::size_t i = 0; i < C; ++i) {
          double lin = 0.0, quad = 0.0;
          for (std::size_t p = 0; p < l; ++p) {
            double ap = 0.0;
            for (std::size_t q = 0; q < l; ++q) ap += a[i](p, q) * z[q];
            lin += b[i][p] * z[p];
            quad += z[p] * ap;
            dz[p] += b[i][p] - ap;
          }
          const double ll = k_const[i] + lin - 0.5 * quad;
          recon_sum[c * C + i] += ll;
          ll_draw += ll;
        }
        draw_ll[draw] = ll_draw;
        for (std::size_t p = 0; p < l; ++p) {
          t_sum[p] += w_rec * z[p];
          for (std::size_t q = 0; q < l; ++q) m_acc(p, q) += w_rec * z[p] * z[q];
          dmu[p] += w_rec * dz[p];
          if (sig_c[p] > kSigmaFloor) dlogvar[p] += w_rec * dz[p] * 0.5 * sig_c[p] * eps[p];
        }
      }
      if (opts.reconstruction) mc_var_sum += draw_variance_of_mean(draw_ll);

      if (opts.kl) {
        kl_sum[c] += kl_standard_normal(mu_c, sig_c);
        for (std::size_t k = 0; k < l; ++k) {
          dmu[k] -= w_kl * mu_c[k];
          if (sig_c[k] > kSigmaFloor) dlogvar[k] -= w_kl * 0.5 * (sig_c[k] * sig_c[k] - 1.0);
        }
      }

      auto& gp = grads.phi[c];
      for (std::size_t k = 0; k < l; ++k) {
        auto row_mu = gp.v_mu.row(k);
        auto row_lv = gp.v_logvar.row(k);
        for (std::size_t j = 0; j < x_c.size(); ++j) {
          row_mu[j] += dmu[k] * x_c[j];
          row_lv[j] += dlogvar[k] * x_c[j];
        }
        gp.v_logvar_bias[k] += dlogvar[k];
      }
    }

    if (opts.reconstruction) {
      for (std::size_t i = 0; i < C; ++i) {
        const auto x = batch[i].row(s);
        for (std::size_t j = 0; j < x.size(); ++j) {
          auto pr = p_acc[i].row(j);
          for (std::size_t p = 0; p < l; ++p) pr[p] += x[j] * t_sum[p];
        }
      }
    }
  }

  if (opts.reconstruction) {
    // Total decoder weight sum_{s,c,k} w_rec equals 1.
    const double weight_per_sample = w_rec * static_cast<double>(C) * static_cast<double>(K);
    for (std::size_t i = 0; i < C; ++i) {
      const auto& g = model.theta[i].g_mu;
      auto& gd = grads.theta[i];
      for (std::size_t j = 0; j < g.rows(); ++j) {
        const auto gr = g.row(j);
        const auto pr = p_acc[i].row(j);
        const double inv = 1.0 / variance[i][j];
        double g_p = 0.0, g_m_g = 0.0;
        for (std::size_t p = 0; p < l; ++p) {
          double mg = 0.0;
          for (std::size_t q = 0; q < l; ++q) mg += m_acc(p, q) * gr[q];
          gd.g_mu(j, p) += inv * (pr[p] - mg);
          g_p += gr[p] * pr[p];
          g_m_g += gr[p] * mg;
        }
        const double sq_resid = weight_per_sample * x_sq[i][j] - 2.0 * g_p + g_m_g;
        gd.g_logvar[j] += -0.5 + 0.5 * sq_resid * inv;
      }
    }
  }
  return assemble(C, S, K, recon_sum, kl_sum, mc_var_sum);
}

}  // namespace detail

inline ElboBreakdown elbo_batch(const MultiChannelModel& model, std::span<const Matrix> batch,
                                std::uint64_t seed, std::size_t mc_samples = 1,
                                const ElboOptions& opts = {}) {
  return detail::evaluate_elbo(model, batch, seed, mc_samples, opts);
}

struct ElboWithGradients {
  ElboBreakdown elbo;
  GradientSet gradients;  // d total / d parameter
};

// Exact gradients of the same stochastic estimate returned by elbo_batch
// (same noise; the returned value agrees with elbo_batch up to rounding).
inline ElboWithGradients elbo_gradients(const MultiChannelModel& model,
                                        std::span<const Matrix> batch, std::uint64_t seed,
                                        std::size_t mc_samples = 1, const ElboOptions& opts = {}) {
  ElboWithGradients out{{}, GradientSet::zeros_like(model)};
  out.elbo = detail::elbo_and_gradients(model, batch, seed, mc_samples, opts, out.gradients);
  return out;
}

}  // namespace mcvi
