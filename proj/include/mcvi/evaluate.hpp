#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "mcvi/elbo.hpp"
#include "mcvi/error.hpp"
#include "mcvi/linalg.hpp"
#include "mcvi/model.hpp"
#include "mcvi/optim.hpp"
#include "mcvi/synthetic.hpp"

namespace mcvi {

// ---------------------------------------------------------------------------
// Exact evidence and posterior of the Gaussian-linear model
// ---------------------------------------------------------------------------

// Decoder side of a Gaussian-linear model: x_c | z ~ N(G_c z, diag(noise_c)).
struct LinearGaussianModel {
  std::size_t latent_dim = 0;
  std::vector<Matrix> loadings;      // d_c x l
  std::vector<Vector> noise_variance;  // d_c
};

inline LinearGaussianModel linear_view(const MultiChannelModel& m) {
  LinearGaussianModel out{m.latent_dim, {}, {}};
  for (const auto& g : m.theta) {
    out.loadings.push_back(g.g_mu);
    Vector var(g.g_logvar.size());
    for (std::size_t j = 0; j < var.size(); ++j) var[j] = std::exp(g.g_logvar[j]);
    out.noise_variance.push_back(std::move(var));
  }
  return out;
}

inline LinearGaussianModel ground_truth_model(const SyntheticDataset& ds) {
  LinearGaussianModel out{ds.spec.latent_dim, ds.loadings, {}};
  for (const auto& g : ds.loadings) out.noise_variance.emplace_back(g.rows(), 1.0 / ds.spec.snr);
  return out;
}

// Joint Gaussian over the concatenated channels: x ~ N(0, G Gᵀ + Psi), with
// Psi diagonal. Densities and posteriors go through the l x l matrix
// A = I + Gᵀ Psi⁻¹ G (Woodbury identity and determinant lemma).
class EvidenceOracle {
 public:
  explicit EvidenceOracle(const LinearGaussianModel& m) : latent_dim_(m.latent_dim) {
    if (m.loadings.size() != m.noise_variance.size() || m.loadings.empty())
      throw ShapeError("EvidenceOracle: loadings/noise lists disagree");
    std::size_t total = 0;
    for (std::size_t c = 0; c < m.loadings.size(); ++c) {
      if (m.loadings[c].cols() != latent_dim_ || m.loadings[c].rows() != m.noise_variance[c].size())
        throw ShapeError("EvidenceOracle: channel " + std::to_string(c) + " has inconsistent shapes");
      dims_.push_back(m.loadings[c].rows());
      total += m.loadings[c].rows();
    }
    g_ = Matrix(total, latent_dim_);
    noise_.resize(total);
    std::size_t row = 0;
    for (std::size_t c = 0; c < m.loadings.size(); ++c) {
      for (std::size_t j = 0; j < dims_[c]; ++j, ++row) {
        const double v = m.noise_variance[c][j];
        if (!(v > 0.0) || !std::isfinite(v)) {
          throw NumericalError("EvidenceOracle: covariance is not positive definite (noise variance " +
                               std::to_string(v) + " in channel " + std::to_string(c) + ")");
        }
        noise_[row] = v;
        const auto src = m.loadings[c].row(j);
        std::copy(src.begin(), src.end(), g_.row(row).begin());
      }
    }
    Matrix a = Matrix::identity(latent_dim_);
    for (std::size_t r = 0; r < total; ++r) {
      const auto gr = g_.row(r);
      for (std::size_t p = 0; p < latent_dim_; ++p)
        for (std::size_t q = 0; q < latent_dim_; ++q) a(p, q) += gr[p] * gr[q] / noise_[r];
    }
    precision_ = a;
    precision_chol_ = cholesky(a);
    posterior_cov_ = cholesky_solve(precision_chol_, Matrix::identity(latent_dim_));
    log_det_ = cholesky_log_det(precision_chol_);
    for (double v : noise_) log_det_ += std::log(v);
  }

  std::size_t total_dim() const noexcept { return noise_.size(); }
  std::size_t latent_dim() const noexcept { return latent_dim_; }
  const Matrix& stacked_loadings() const noexcept { return g_; }
  const Vector& noise() const noexcept { return noise_; }
  // Posterior precision I + Gᵀ Psi⁻¹ G and its inverse (shared by all samples).
  const Matrix& posterior_precision() const noexcept { return precision_; }
  const Matrix& posterior_covariance() const noexcept { return posterior_cov_; }
  double log_det_covariance() const noexcept { return log_det_; }

  // Dense D x D covariance; for diagnostics on small problems.
  Matrix covariance() const {
    Matrix cov = matmul_transposed(g_, g_);
    for (std::size_t r = 0; r < noise_.size(); ++r) cov(r, r) += noise_[r];
    return cov;
  }

  Vector concatenate(std::span<const Matrix> channels, std::size_t s) const {
    check(channels);
    Vector x;
    x.reserve(total_dim());
    for (const auto& ch : channels) {
      const auto r = ch.row(s);
      x.insert(x.end(), r.begin(), r.end());
    }
    return x;
  }

  double log_density(std::span<const double> x) const {
    if (x.size() != total_dim()) throw ShapeError("log_density: wrong observation length");
    const Vector b = projected(x);
    double quad = 0.0;
    for (std::size_t r = 0; r < x.size(); ++r) quad += x[r] * x[r] / noise_[r];
    Matrix bm(latent_dim_, 1, b);
    const Matrix sol = cholesky_solve(precision_chol_, bm);
    for (std::size_t k = 0; k < latent_dim_; ++k) quad -= b[k] * sol(k, 0);
    return -0.5 * (static_cast<double>(x.size()) * std::log(2.0 * std::numbers::pi) + log_det_ + quad);
  }

  // mean = A⁻¹ Gᵀ Psi⁻¹ x, marginal variances = diag(A⁻¹).
  LatentGaussian posterior(std::span<const double> x) const {
    if (x.size() != total_dim()) throw ShapeError("posterior: wrong observation length");
    Matrix bm(latent_dim_, 1, projected(x));
    const Matrix mean = cholesky_solve(precision_chol_, bm);
    LatentGaussian q{Matrix(1, latent_dim_), Matrix(1, latent_dim_)};
    for (std::size_t k = 0; k < latent_dim_; ++k) {
      q.mu(0, k) = mean(k, 0);
      q.sigma(0, k) = std::sqrt(posterior_cov_(k, k));
    }
    return q;
  }

  void check(std::span<const Matrix> channels) const {
    if (channels.size() != dims_.size())
      throw ShapeError("EvidenceOracle: expected " + std::to_string(dims_.size()) + " channels");
    for (std::size_t c = 0; c < channels.size(); ++c) {
      if (channels[c].cols() != dims_[c] || channels[c].rows() != channels[0].rows())
        throw ShapeError("EvidenceOracle: channel " + std::to_string(c) + " has shape " +
                         shape_str(channels[c].rows(), channels[c].cols()));
    }
  }

 private:
  Vector projected(std::span<const double> x) const {
    Vector b(latent_dim_, 0.0);
    for (std::size_t r = 0; r < x.size(); ++r) {
      const double w = x[r] / noise_[r];
      const auto gr = g_.row(r);
      for (std::size_t k = 0; k < latent_dim_; ++k) b[k] += gr[k] * w;
    }
    return b;
  }

  std::size_t latent_dim_;
  std::vector<std::size_t> dims_;
  Matrix g_;
  Vector noise_;
  Matrix precision_;
  Matrix precision_chol_;
  Matrix posterior_cov_;
  double log_det_ = 0.0;
};

// Average over samples of ln N(x_s; 0, G Gᵀ + Psi).
inline double exact_log_evidence(const LinearGaussianModel& m, std::span<const Matrix> channels) {
  const EvidenceOracle oracle(m);
  oracle.check(channels);
  const std::size_t n = channels[0].rows();
  if (n == 0) throw ShapeError("exact_log_evidence: no samples");
  double acc = 0.0;
  for (std::size_t s = 0; s < n; ++s) acc += oracle.log_density(oracle.concatenate(channels, s));
  return acc / static_cast<double>(n);
}

inline LatentGaussian exact_posterior(const LinearGaussianModel& m, std::span<const double> x) {
  return EvidenceOracle(m).posterior(x);
}

// ---------------------------------------------------------------------------
// Posterior matching diagnostics
// ---------------------------------------------------------------------------

// Orthogonal Q minimizing ||fitted - reference Q||_F (polar factor of
// referenceᵀ fitted). Latent spaces are identifiable only up to rotation.
inline Matrix procrustes_rotation(const Matrix& reference, const Matrix& fitted) {
  const Matrix m = matmul(transpose(reference), fitted);
  const auto eig = symmetric_eigen(matmul(transpose(m), m));
  const std::size_t l = m.cols();
  const double floor = 1e-12 * std::max(eig.values.front(), 1e-300);
  Matrix inv_sqrt(l, l);
  for (std::size_t k = 0; k < l; ++k) {
    const double w = 1.0 / std::sqrt(std::max(eig.values[k], floor));
    for (std::size_t i = 0; i < l; ++i)
      for (std::size_t j = 0; j < l; ++j) inv_sqrt(i, j) += eig.vectors(i, k) * w * eig.vectors(j, k);
  }
  return matmul(m, inv_sqrt);
}

inline double kl_diag_gaussians(std::span<const double> mu_q, std::span<const double> var_q,
                                std::span<const double> mu_p, std::span<const double> var_p) {
  double acc = 0.0;
  for (std::size_t k = 0; k < mu_q.size(); ++k) {
    const double diff = mu_q[k] - mu_p[k];
    acc += 0.5 * (std::log(var_p[k] / var_q[k]) + (var_q[k] + diff * diff) / var_p[k] - 1.0);
  }
  return acc;
}

// Average over channels c and samples of KL(q(z | x_c) || marginals of the
// exact posterior of `reference`). With align = true the reference latent
// frame is first rotated onto the model's by Procrustes on the stacked
// loadings; use align = false when the reference is the model itself.
inline double average_posterior_kl(const MultiChannelModel& model, std::span<const Matrix> channels,
                                   const LinearGaussianModel& reference, bool align) {
  check_batch(model, channels);
  if (reference.latent_dim != model.latent_dim)
    throw ShapeError("average_posterior_kl: latent dimensions differ");
  const EvidenceOracle oracle(reference);
  oracle.check(channels);
  const std::size_t l = model.latent_dim;
  Matrix rot = Matrix::identity(l);
  if (align) rot = procrustes_rotation(oracle.stacked_loadings(), EvidenceOracle(linear_view(model)).stacked_loadings());
  // Reference posterior in the model frame: mean Qᵀ m, covariance Qᵀ P Q.
  const Matrix cov = matmul(transpose(rot), matmul(oracle.posterior_covariance(), rot));
  Vector var_p(l);
  for (std::size_t k = 0; k < l; ++k) var_p[k] = cov(k, k);

  const std::size_t n = channels[0].rows();
  std::vector<LatentGaussian> qs;
  for (std::size_t c = 0; c < model.channel_count(); ++c) qs.push_back(encode(model, c, channels[c]));
  double acc = 0.0;
  Vector mu_p(l), mu_q(l), var_q(l);
  for (std::size_t s = 0; s < n; ++s) {
    const auto post = oracle.posterior(oracle.concatenate(channels, s));
    for (std::size_t k = 0; k < l; ++k) {
      double v = 0.0;
      for (std::size_t i = 0; i < l; ++i) v += rot(i, k) * post.mu(0, i);
      mu_p[k] = v;
    }
    for (const auto& q : qs) {
      for (std::size_t k = 0; k < l; ++k) {
        mu_q[k] = q.mu(s, k);
        var_q[k] = q.sigma(s, k) * q.sigma(s, k);
      }
      acc += kl_diag_gaussians(mu_q, var_q, mu_p, var_p);
    }
  }
  return acc / (static_cast<double>(n) * static_cast<double>(model.channel_count()));
}

// ---------------------------------------------------------------------------
// Reconstruction
// ---------------------------------------------------------------------------

enum class ReconMode { multi, single };

inline double mse(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError("mse: shape " + shape_str(a.rows(), a.cols()) + " vs " +
                     shape_str(b.rows(), b.cols()));
  }
  if (a.size() == 0) throw ShapeError("mse: empty matrices");
  double acc = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double d = a.values()[k] - b.values()[k];
    acc += d * d;
  }
  return acc / static_cast<double>(a.size());
}

// multi:  x̂_i = mean over every encoder c of E_q(z|x_c)[G_i z]
// single: x̂_i = E_q(z|x_i)[G_i z]
// mc_samples = 0 uses the posterior mean (exact, the decoder mean is linear
// in z); otherwise decoded means of reparameterized draws are averaged.
inline std::vector<Matrix> reconstruct(const MultiChannelModel& model, std::span<const Matrix> channels,
                                       ReconMode mode, std::size_t mc_samples = 0,
                                       std::uint64_t seed = 0) {
  check_batch(model, channels);
  const std::size_t C = model.channel_count();
  const std::size_t n = channels[0].rows();
  std::vector<LatentGaussian> qs;
  for (std::size_t c = 0; c < C; ++c) qs.push_back(encode(model, c, channels[c]));

  auto expected_decode = [&](std::size_t c, std::size_t i) {
    if (mc_samples == 0) return decode(model, i, qs[c].mu).mean;
    Rng rng(derive_seed(seed, c, i));
    Matrix acc(n, model.channels[i].dim);
    for (std::size_t k = 0; k < mc_samples; ++k) {
      const Matrix m = decode(model, i, reparameterized_sample(rng, qs[c])).mean;
      for (std::size_t e = 0; e < acc.size(); ++e) acc.values()[e] += m.values()[e];
    }
    for (double& v : acc.values()) v /= static_cast<double>(mc_samples);
    return acc;
  };

  std::vector<Matrix> out;
  for (std::size_t i = 0; i < C; ++i) {
    if (mode == ReconMode::single) {
      out.push_back(expected_decode(i, i));
      continue;
    }
    Matrix acc(n, model.channels[i].dim);
    for (std::size_t c = 0; c < C; ++c) {
      const Matrix m = expected_decode(c, i);
      for (std::size_t e = 0; e < acc.size(); ++e) acc.values()[e] += m.values()[e];
    }
    for (double& v : acc.values()) v /= static_cast<double>(C);
    out.push_back(std::move(acc));
  }
  return out;
}

struct ReconReport {
  std::string target;  // "observed" or "signal"
  Vector mse_multi;
  Vector mse_single;
  std::vector<std::optional<double>> ratio;  // multi / single, unset when single == 0
};

inline ReconReport reconstruction_report(const MultiChannelModel& model, std::span<const Matrix> inputs,
                                         std::span<const Matrix> targets, std::string target_name) {
  if (targets.size() != inputs.size()) throw ShapeError("reconstruction_report: target count mismatch");
  const auto multi = reconstruct(model, inputs, ReconMode::multi);
  const auto single = reconstruct(model, inputs, ReconMode::single);
  ReconReport r;
  r.target = std::move(target_name);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    r.mse_multi.push_back(mse(multi[i], targets[i]));
    r.mse_single.push_back(mse(single[i], targets[i]));
    if (r.mse_single.back() > 0.0)
      r.ratio.emplace_back(r.mse_multi.back() / r.mse_single.back());
    else
      r.ratio.emplace_back(std::nullopt);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Latent features and linear discriminant analysis
// ---------------------------------------------------------------------------

enum class LatentCombine { average, concatenate };

// Per-channel posterior means, averaged over channels or laid side by side.
inline Matrix latent_features(const MultiChannelModel& model, std::span<const Matrix> channels,
                              LatentCombine how = LatentCombine::average) {
  check_batch(model, channels);
  const std::size_t C = model.channel_count();
  const std::size_t l = model.latent_dim;
  const std::size_t n = channels[0].rows();
  Matrix out(n, how == LatentCombine::average ? l : C * l);
  for (std::size_t c = 0; c < C; ++c) {
    const auto q = encode(model, c, channels[c]);
    for (std::size_t s = 0; s < n; ++s) {
      for (std::size_t k = 0; k < l; ++k) {
        if (how == LatentCombine::average)
          out(s, k) += q.mu(s, k) / static_cast<double>(C);
        else
          out(s, c * l + k) = q.mu(s, k);
      }
    }
  }
  return out;
}

// Pooled-covariance LDA with class priors estimated from the training rows.
class LdaClassifier {
 public:
  LdaClassifier(const Matrix& x, std::span<const int> labels) {
    if (x.rows() != labels.size()) throw ShapeError("LDA: label count does not match rows");
    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t s = 0; s < labels.size(); ++s) by_class[labels[s]].push_back(s);
    if (by_class.size() < 2) throw DataError("LDA: need at least two classes");
    const std::size_t p = x.cols();
    const std::size_t n = x.rows();
    Matrix pooled(p, p);
    for (const auto& [label, rows] : by_class) {
      Vector mean(p, 0.0);
      for (std::size_t r : rows)
        for (std::size_t k = 0; k < p; ++k) mean[k] += x(r, k);
      for (double& v : mean) v /= static_cast<double>(rows.size());
      for (std::size_t r : rows)
        for (std::size_t a = 0; a < p; ++a)
          for (std::size_t b = 0; b < p; ++b) pooled(a, b) += (x(r, a) - mean[a]) * (x(r, b) - mean[b]);
      classes_.push_back(label);
      means_.push_back(std::move(mean));
      log_priors_.push_back(std::log(static_cast<double>(rows.size()) / static_cast<double>(n)));
    }
    const double dof = static_cast<double>(n > by_class.size() ? n - by_class.size() : 1);
    for (double& v : pooled.values()) v /= dof;
    Matrix chol;
    try {
      chol = cholesky(pooled);
      // Treat numerically singular covariances like exactly singular ones.
      double lo = INFINITY, hi = 0.0;
      for (std::size_t k = 0; k < p; ++k) {
        lo = std::min(lo, chol(k, k));
        hi = std::max(hi, chol(k, k));
      }
      if (lo < 1e-7 * hi) throw NumericalError("LDA: ill-conditioned pooled covariance");
    } catch (const NumericalError&) {
      double trace = 0.0;
      for (std::size_t k = 0; k < p; ++k) trace += pooled(k, k);
      const double ridge = 1e-6 * std::max(trace, 1e-300) / static_cast<double>(p);
      for (std::size_t k = 0; k < p; ++k) pooled(k, k) += ridge;
      chol = cholesky(pooled);
      regularized_ = true;
    }
    for (const auto& mean : means_) {
      Matrix w = cholesky_solve(chol, Matrix(p, 1, mean));
      Vector wv(w.values().begin(), w.values().end());
      offsets_.push_back(-0.5 * dot(wv, mean));
      weights_.push_back(std::move(wv));
    }
  }

  int predict(std::span<const double> x) const {
    std::size_t best = 0;
    double best_score = -INFINITY;
    for (std::size_t k = 0; k < classes_.size(); ++k) {
      const double score = dot(weights_[k], x) + offsets_[k] + log_priors_[k];
      if (score > best_score) {
        best_score = score;
        best = k;
      }
    }
    return classes_[best];
  }

  bool regularized() const noexcept { return regularized_; }

 private:
  std::vector<int> classes_;
  std::vector<Vector> means_;
  std::vector<Vector> weights_;
  Vector offsets_;
  Vector log_priors_;
  bool regularized_ = false;
};

struct LdaResult {
  double mean_accuracy = 0.0;
  double stderr_accuracy = 0.0;
  std::size_t repeats = 0;
  bool regularized = false;  // some fold needed the ridge fallback
};

// Repeated stratified half/half splits; each repeat trains on one half,
// tests on the other, then swaps, and scores the mean of both directions.
inline LdaResult lda_split_half(const Matrix& features, std::span<const int> labels,
                                std::uint64_t seed, std::size_t repeats) {
  if (features.rows() != labels.size()) throw ShapeError("lda_split_half: label count mismatch");
  if (repeats < 1) throw DataError("lda_split_half: repeats must be >= 1");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t s = 0; s < labels.size(); ++s) by_class[labels[s]].push_back(s);
  if (by_class.size() < 2) throw DataError("lda_split_half: need at least two classes");
  for (const auto& [label, rows] : by_class) {
    if (rows.size() / 2 < features.cols() + 1) {
      throw DataError("lda_split_half: class " + std::to_string(label) + " has too few samples (" +
                      std::to_string(rows.size()) + ") for " + std::to_string(features.cols()) +
                      " features");
    }
  }
  auto subset = [&](const std::vector<std::size_t>& rows) {
    Matrix x(rows.size(), features.cols());
    std::vector<int> y(rows.size());
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const auto src = features.row(rows[r]);
      std::copy(src.begin(), src.end(), x.row(r).begin());
      y[r] = labels[rows[r]];
    }
    return std::pair{std::move(x), std::move(y)};
  };
  auto accuracy = [&](const std::vector<std::size_t>& train, const std::vector<std::size_t>& test,
                      bool& reg) {
    const auto [xt, yt] = subset(train);
    const LdaClassifier lda(xt, yt);
    reg = reg || lda.regularized();
    std::size_t hits = 0;
    for (std::size_t r : test) hits += lda.predict(features.row(r)) == labels[r] ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(test.size());
  };

  Rng rng(seed);
  LdaResult res;
  res.repeats = repeats;
  Vector acc(repeats);
  for (std::size_t rep = 0; rep < repeats; ++rep) {
    std::vector<std::size_t> half_a, half_b;
    for (auto [label, rows] : by_class) {
      rng.shuffle(rows);
      const std::size_t cut = rows.size() / 2;
      half_a.insert(half_a.end(), rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(cut));
      half_b.insert(half_b.end(), rows.begin() + static_cast<std::ptrdiff_t>(cut), rows.end());
    }
    acc[rep] = 0.5 * (accuracy(half_a, half_b, res.regularized) + accuracy(half_b, half_a, res.regularized));
  }
  for (double a : acc) res.mean_accuracy += a;
  res.mean_accuracy /= static_cast<double>(repeats);
  if (repeats > 1) {
    double var = 0.0;
    for (double a : acc) var += (a - res.mean_accuracy) * (a - res.mean_accuracy);
    var /= static_cast<double>(repeats - 1);
    res.stderr_accuracy = std::sqrt(var / static_cast<double>(repeats));
  }
  return res;
}

// ---------------------------------------------------------------------------
// Model-selection sweep
// ---------------------------------------------------------------------------

// Index of the elbow: argmax over k of the second forward difference
// nlb[k] - 2 nlb[k+1] + nlb[k+2], shifted to the middle point. A suggestion
// only; needs at least three values.
inline std::optional<std::size_t> detect_elbow(std::span<const double> nlb) {
  if (nlb.size() < 3) return std::nullopt;
  std::size_t best = 0;
  double best_val = -INFINITY;
  for (std::size_t k = 0; k + 2 < nlb.size(); ++k) {
    const double d2 = nlb[k] - 2.0 * nlb[k + 1] + nlb[k + 2];
    if (d2 > best_val) {
      best_val = d2;
      best = k;
    }
  }
  return best + 1;
}

struct SweepCell {
  std::size_t latent_dim = 0;
  std::size_t replication = 0;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  double final_nlb = 0.0;
  double final_nlb_stderr = 0.0;
  std::size_t epochs_run = 0;
  std::optional<double> lda_accuracy;
};

struct SweepReport {
  std::vector<std::size_t> dims;
  Vector nlb_mean;    // over successful replications, NaN if none succeeded
  Vector nlb_stderr;  // standard error over replications
  std::optional<std::size_t> elbow_dim;
  std::vector<std::optional<double>> lda_accuracy;  // mean over replications
  std::vector<SweepCell> cells;                     // sorted by (dim, replication)
};

struct SweepOptions {
  std::size_t replications = 5;
  double init_scale = 0.1;
  std::size_t threads = 1;
  std::vector<ChannelSpec> channels;  // names/dims; defaults to ch0.. when empty
  std::optional<std::vector<int>> labels;
  std::size_t lda_repeats = 20;
  LatentCombine combine = LatentCombine::average;
};

inline std::uint64_t sweep_cell_seed(std::uint64_t base, std::size_t dim, std::size_t replication) {
  return derive_seed(base, fnv1a("sweep-cell"), dim, replication);
}

// Fits one model per (latent dim, replication) and tabulates the final bound.
inline SweepReport sweep_latent_dims(std::span<const Matrix> data, std::span<const std::size_t> dims,
                                     const TrainConfig& cfg, const SweepOptions& opts = {}) {
  if (dims.empty()) throw DataError("sweep: no latent dimensions given");
  if (opts.replications < 1) throw DataError("sweep: replications must be >= 1");
  if (data.empty()) throw DataError("sweep: no channels");
  cfg.validate();
  std::vector<ChannelSpec> specs = opts.channels;
  if (specs.empty()) {
    std::vector<std::size_t> widths;
    for (const auto& m : data) widths.push_back(m.cols());
    specs = default_channel_specs(widths);
  }

  std::vector<SweepCell> cells;
  for (std::size_t dim : dims) {
    if (dim < 1) throw DataError("sweep: latent dimensions must be >= 1");
    for (std::size_t rep = 1; rep <= opts.replications; ++rep)
    {
      SweepCell cell;
      cell.latent_dim = dim;
      cell.replication = rep;
      cell.seed = sweep_cell_seed(cfg.seed, dim, rep);
      cells.push_back(std::move(cell));
    }
  }

  auto run_cell = [&](SweepCell& cell) {
    try {
      TrainConfig c = cfg;
      c.seed = cell.seed;
      Rng init_rng(derive_seed(cell.seed, fnv1a("init")));
      MultiChannelModel model = init_model(init_rng, cell.latent_dim, specs, opts.init_scale);
      const FitReport rep = fit(model, data, c);
      cell.final_nlb = rep.final_nlb;
      cell.final_nlb_stderr = rep.final_nlb_stderr;
      cell.epochs_run = rep.epochs_run;
      cell.ok = true;
      if (opts.labels) {
        const Matrix feats = latent_features(model, data, opts.combine);
        cell.lda_accuracy = lda_split_half(feats, *opts.labels, derive_seed(cell.seed, fnv1a("lda")),
                                           opts.lda_repeats).mean_accuracy;
      }
    } catch (const std::exception& e) {
      cell.ok = false;
      cell.error = e.what();
    }
  };

  const std::size_t workers = std::max<std::size_t>(1, std::min(opts.threads, cells.size()));
  if (workers == 1) {
    for (auto& cell : cells) run_cell(cell);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t k = next++; k < cells.size(); k = next++) run_cell(cells[k]);
      });
    }
    for (auto& t : pool) t.join();
  }

  std::stable_sort(cells.begin(), cells.end(), [](const SweepCell& a, const SweepCell& b) {
    return a.latent_dim != b.latent_dim ? a.latent_dim < b.latent_dim : a.replication < b.replication;
  });

  SweepReport report;
  report.dims.assign(dims.begin(), dims.end());
  bool all_ok = true;
  for (std::size_t dim : report.dims) {
    Vector vals, accs;
    for (const auto& cell : cells) {
      if (cell.latent_dim != dim || !cell.ok) continue;
      vals.push_back(cell.final_nlb);
      if (cell.lda_accuracy) accs.push_back(*cell.lda_accuracy);
    }
    if (vals.empty()) {
      all_ok = false;
      report.nlb_mean.push_back(NAN);
      report.nlb_stderr.push_back(NAN);
    } else {
      double mean = 0.0;
      for (double v : vals) mean += v;
      mean /= static_cast<double>(vals.size());
      double var = 0.0;
      for (double v : vals) var += (v - mean) * (v - mean);
      const double se = vals.size() > 1
                            ? std::sqrt(var / static_cast<double>(vals.size() - 1) / static_cast<double>(vals.size()))
                            : 0.0;
      report.nlb_mean.push_back(mean);
      report.nlb_stderr.push_back(se);
    }
    if (accs.empty()) {
      report.lda_accuracy.emplace_back(std::nullopt);
    } else {
      double m = 0.0;
      for (double a : accs) m += a;
      report.lda_accuracy.emplace_back(m / static_cast<double>(accs.size()));
    }
  }
  if (all_ok) {
    if (auto idx = detect_elbow(report.nlb_mean)) report.elbow_dim = report.dims[*idx];
  }
  report.cells = std::move(cells);
  return report;
}

}  // namespace mcvi
