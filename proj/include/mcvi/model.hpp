#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "mcvi/error.hpp"
#include "mcvi/linalg.hpp"

namespace mcvi {

// Floor applied to every standard deviation before it enters a division or log.
inline constexpr double kSigmaFloor = 1e-12;

struct ChannelSpec {
  std::size_t index = 0;
  std::size_t dim = 0;
  std::string name;

  friend bool operator==(const ChannelSpec&, const ChannelSpec&) = default;
};

// Decoder of one channel: x | z ~ N(g_mu z, diag(exp(g_logvar))).
struct GenerativeParams {
  Matrix g_mu;       // d_c x l
  Vector g_logvar;   // d_c

  friend bool operator==(const GenerativeParams&, const GenerativeParams&) = default;
};

// Encoder of one channel: z | x ~ N(v_mu x, diag(exp(v_logvar x + v_logvar_bias))).
struct VariationalParams {
  Matrix v_mu;           // l x d_c
  Matrix v_logvar;       // l x d_c
  Vector v_logvar_bias;  // l

  friend bool operator==(const VariationalParams&, const VariationalParams&) = default;
};

// Diagonal Gaussians over the latent space, one row per sample.
struct LatentGaussian {
  Matrix mu;
  Matrix sigma;
};

// Decoded likelihood moments for a batch; the variance does not depend on z.
struct DecodedGaussian {
  Matrix mean;      // samples x d_i
  Vector variance;  // d_i
};

struct MultiChannelModel {
  std::size_t latent_dim = 0;
  std::vector<ChannelSpec> channels;
  std::vector<GenerativeParams> theta;
  std::vector<VariationalParams> phi;

  std::size_t channel_count() const noexcept { return channels.size(); }

  void validate() const {
    if (latent_dim < 1) throw ShapeError("model: latent_dim must be >= 1");
    if (channels.empty()) throw ShapeError("model: no channels");
    if (theta.size() != channels.size() || phi.size() != channels.size()) {
      throw ShapeError("model: parameter lists do not match channel count " +
                       std::to_string(channels.size()));
    }
    std::unordered_set<std::string> names;
    const std::size_t l = latent_dim;
    for (std::size_t c = 0; c < channels.size(); ++c) {
      const auto& ch = channels[c];
      const std::size_t d = ch.dim;
      if (ch.index != c) throw ShapeError("model: channel '" + ch.name + "' has wrong index");
      if (d < 1) throw ShapeError("model: channel '" + ch.name + "' has zero dimension");
      if (!names.insert(ch.name).second) {
        throw ShapeError("model: duplicate channel name '" + ch.name + "'");
      }
      const auto& g = theta[c];
      const auto& v = phi[c];
      if (g.g_mu.rows() != d || g.g_mu.cols() != l || g.g_logvar.size() != d ||
          v.v_mu.rows() != l || v.v_mu.cols() != d || v.v_logvar.rows() != l ||
          v.v_logvar.cols() != d || v.v_logvar_bias.size() != l) {
        throw ShapeError("model: parameter shapes of channel '" + ch.name +
                         "' disagree with (d=" + std::to_string(d) +
                         ", l=" + std::to_string(l) + ")");
      }
    }
  }

  friend bool operator==(const MultiChannelModel&, const MultiChannelModel&) = default;
};

// Calls fn(name, span) for every parameter tensor of anything shaped like a
// model (model itself, gradient sets, optimizer moments), in a fixed order.
template <class Params, class Fn>
void for_each_tensor(Params& p, Fn&& fn) {
  for (std::size_t c = 0; c < p.theta.size(); ++c) {
    const std::string tag = "[" + std::to_string(c) + "]";
    fn("g_mu" + tag, p.theta[c].g_mu.values());
    fn("g_logvar" + tag, std::span(p.theta[c].g_logvar));
    fn("v_mu" + tag, p.phi[c].v_mu.values());
    fn("v_logvar" + tag, p.phi[c].v_logvar.values());
    fn("v_logvar_bias" + tag, std::span(p.phi[c].v_logvar_bias));
  }
}

inline std::vector<ChannelSpec> default_channel_specs(std::span<const std::size_t> dims) {
  std::vector<ChannelSpec> specs;
  for (std::size_t c = 0; c < dims.size(); ++c)
    specs.push_back({c, dims[c], "ch" + std::to_string(c)});
  return specs;
}

// Weights are i.i.d. N(0, init_scale^2); every log-variance and bias starts at 0.
inline MultiChannelModel init_model(Rng& rng, std::size_t latent_dim,
                                    std::vector<ChannelSpec> channels, double init_scale = 0.1) {
  if (channels.empty()) throw ShapeError("init_model: empty channel list");
  if (latent_dim < 1) throw ShapeError("init_model: latent_dim must be >= 1");
  if (!(init_scale > 0.0)) throw DataError("init_model: init_scale must be > 0");
  MultiChannelModel m;
  m.latent_dim = latent_dim;
  m.channels = std::move(channels);
  auto draw = [&](std::size_t rows, std::size_t cols) {
    Matrix w(rows, cols);
    for (double& v : w.values()) v = init_scale * rng.normal();
    return w;
  };
  for (const auto& ch : m.channels) {
    if (ch.dim < 1) throw ShapeError("init_model: channel '" + ch.name + "' has zero dimension");
    GenerativeParams g{draw(ch.dim, latent_dim), Vector(ch.dim, 0.0)};
    Matrix v_mu = draw(latent_dim, ch.dim);
    Matrix v_logvar = draw(latent_dim, ch.dim);
    m.theta.push_back(std::move(g));
    m.phi.push_back({std::move(v_mu), std::move(v_logvar), Vector(latent_dim, 0.0)});
  }
  m.validate();
  return m;
}

inline MultiChannelModel init_model(Rng& rng, std::size_t latent_dim,
                                    std::span<const std::size_t> channel_dims,
                                    double init_scale = 0.1) {
  return init_model(rng, latent_dim, default_channel_specs(channel_dims), init_scale);
}

inline void check_channel(const MultiChannelModel& model, std::size_t c) {
  if (c >= model.channel_count()) {
    throw ShapeError("channel index " + std::to_string(c) + " out of range (model has " +
                     std::to_string(model.channel_count()) + ")");
  }
}

// mu = V_mu x, sigma = exp(0.5 (V_logvar x + b)) per row of x_c.
inline LatentGaussian encode(const MultiChannelModel& model, std::size_t c, const Matrix& x_c) {
  check_channel(model, c);
  const auto& v = model.phi[c];
  const std::size_t d = model.channels[c].dim;
  if (x_c.cols() != d) {
    throw ShapeError("encode: channel '" + model.channels[c].name + "' expects width " +
                     std::to_string(d) + ", got " + std::to_string(x_c.cols()));
  }
  const std::size_t l = model.latent_dim;
  LatentGaussian q{Matrix(x_c.rows(), l), Matrix(x_c.rows(), l)};
  for (std::size_t s = 0; s < x_c.rows(); ++s) {
    const auto x = x_c.row(s);
    for (std::size_t k = 0; k < l; ++k) {
      q.mu(s, k) = dot(v.v_mu.row(k), x);
      const double logvar = dot(v.v_logvar.row(k), x) + v.v_logvar_bias[k];
      q.sigma(s, k) = std::max(std::exp(0.5 * logvar), kSigmaFloor);
    }
  }
  return q;
}

inline DecodedGaussian decode(const MultiChannelModel& model, std::size_t i, const Matrix& z) {
  check_channel(model, i);
  if (z.cols() != model.latent_dim) {
    throw ShapeError("decode: latent width " + std::to_string(z.cols()) + " but model has l=" +
                     std::to_string(model.latent_dim));
  }
  const auto& g = model.theta[i];
  DecodedGaussian out{matmul_transposed(z, g.g_mu), Vector(g.g_logvar.size())};
  for (std::size_t j = 0; j < g.g_logvar.size(); ++j) out.variance[j] = std::exp(g.g_logvar[j]);
  return out;
}

// z = mu + sigma * eps, eps drawn row by row.
inline Matrix reparameterized_sample(Rng& rng, const LatentGaussian& q) {
  if (q.mu.rows() != q.sigma.rows() || q.mu.cols() != q.sigma.cols()) {
    throw ShapeError("reparameterized_sample: mu and sigma shapes differ");
  }
  Matrix z(q.mu.rows(), q.mu.cols());
  for (std::size_t k = 0; k < z.size(); ++k) {
    const double sigma = std::max(q.sigma.values()[k], kSigmaFloor);
    z.values()[k] = q.mu.values()[k] + sigma * rng.normal();
  }
  return z;
}

}  // namespace mcvi
