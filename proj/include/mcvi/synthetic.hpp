#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mcvi/error.hpp"
#include "mcvi/linalg.hpp"

namespace mcvi {

// One cell of the synthetic scenario grid. The generation seed is a pure
// function of every field, so a replication index picks a fresh draw of the
// orthonormal bases R_c.
struct ScenarioSpec {
  std::size_t channels = 3;
  std::size_t dim = 16;
  std::size_t latent_dim = 4;
  std::size_t samples = 1000;
  double snr = 10.0;
  std::size_t replication = 1;
  std::uint64_t base_seed = 0;

  std::uint64_t seed() const noexcept {
    return derive_seed(base_seed, channels, dim, latent_dim, samples, std::bit_cast<std::uint64_t>(snr),
                       replication);
  }

  void validate() const {
    if (channels < 1 || dim < 1 || latent_dim < 1 || samples < 1)
      throw DataError("scenario: counts must be >= 1");
    if (!(snr > 0.0) || !std::isfinite(snr)) throw DataError("scenario: snr must be > 0");
    if (dim < latent_dim) {
      throw DataError("scenario: channel dimension " + std::to_string(dim) +
                      " is smaller than the latent dimension " + std::to_string(latent_dim) +
                      "; R_c cannot have orthonormal columns");
    }
  }

  std::string label() const {
    char buf[160];
    std::snprintf(buf, sizeof buf, "C=%zu d=%zu l=%zu S=%zu snr=%g rep=%zu", channels, dim,
                  latent_dim, samples, snr, replication);
    return buf;
  }

  friend bool operator==(const ScenarioSpec&, const ScenarioSpec&) = default;
};

struct SyntheticDataset {
  ScenarioSpec spec;
  std::vector<Matrix> channels;  // S x d per channel
  Matrix z;                      // S x l ground-truth latents
  std::vector<Matrix> bases;     // R_c, d x l with orthonormal columns
  std::vector<Matrix> loadings;  // G_c = diag(R Rᵀ)^(-1/2) R
  std::vector<Matrix> signals;   // G_c z per channel, S x d
  std::vector<std::size_t> sample_index;  // original row of each sample

  std::size_t samples() const noexcept { return z.rows(); }
};

struct GenerateOptions {
  bool noiseless = false;  // drop the additive noise term entirely
};

// x_c = G_c z + snr^(-1/2) eps, with z ~ N(0, I_l) and eps ~ N(0, I_d).
inline SyntheticDataset generate_scenario(const ScenarioSpec& spec,
                                          const GenerateOptions& opts = {}) {
  spec.validate();
  Rng rng(spec.seed());
  SyntheticDataset ds;
  ds.spec = spec;
  const std::size_t d = spec.dim;
  const std::size_t l = spec.latent_dim;
  for (std::size_t c = 0; c < spec.channels; ++c) {
    Matrix r = orthonormalize_columns(standard_normal_matrix(rng, d, l));
    Matrix g = r;
    for (std::size_t j = 0; j < d; ++j) {
      const double norm = std::sqrt(dot(r.row(j), r.row(j)));
      if (!(norm > 0.0)) throw NumericalError("generate_scenario: zero row in R_c");
      for (double& v : g.row(j)) v /= norm;
    }
    ds.bases.push_back(std::move(r));
    ds.loadings.push_back(std::move(g));
  }
  ds.z = standard_normal_matrix(rng, spec.samples, l);
  const double noise_scale = opts.noiseless ? 0.0 : 1.0 / std::sqrt(spec.snr);
  for (std::size_t c = 0; c < spec.channels; ++c) {
    Matrix signal = matmul_transposed(ds.z, ds.loadings[c]);
    Matrix x = signal;
    Matrix eps = standard_normal_matrix(rng, spec.samples, d);
    for (std::size_t k = 0; k < x.size(); ++k) x.values()[k] += noise_scale * eps.values()[k];
    ds.signals.push_back(std::move(signal));
    ds.channels.push_back(std::move(x));
  }
  ds.sample_index.resize(spec.samples);
  for (std::size_t s = 0; s < spec.samples; ++s) ds.sample_index[s] = s;
  return ds;
}

// Attribute ranges for one-at-a-time variation. Defaults are the full table;
// an empty list leaves that attribute at its base value.
struct GridRanges {
  std::vector<std::size_t> channels{2, 3, 5, 10};
  std::vector<std::size_t> dims{4, 8, 16, 32, 500};
  std::vector<std::size_t> latent_dims{1, 2, 4, 10, 20};
  std::vector<std::size_t> samples{50, 100, 1000, 10000};
  std::vector<double> snrs{100, 10, 1, 0.1};
  std::size_t replications = 5;

  static GridRanges none() { return {{}, {}, {}, {}, {}, 5}; }
};

// Base of the one-at-a-time grid: central value of every range.
inline ScenarioSpec default_base_scenario() { return {3, 16, 4, 1000, 10.0, 1, 0}; }

// Varies one attribute at a time around `base`, crossed with replications
// 1..R. Order: attribute (C, d, l, S, snr), then value, then replication.
// Specs are emitted even when d < l; generate_scenario rejects those.
inline std::vector<ScenarioSpec> enumerate_grid(const ScenarioSpec& base,
                                                const GridRanges& ranges = {}) {
  std::vector<ScenarioSpec> out;
  auto emit = [&](auto&& set, const auto& values) {
    for (const auto& v : values) {
      for (std::size_t rep = 1; rep <= ranges.replications; ++rep) {
        ScenarioSpec s = base;
        set(s, v);
        s.replication = rep;
        out.push_back(s);
      }
    }
  };
  emit([](ScenarioSpec& s, std::size_t v) { s.channels = v; }, ranges.channels);
  emit([](ScenarioSpec& s, std::size_t v) { s.dim = v; }, ranges.dims);
  emit([](ScenarioSpec& s, std::size_t v) { s.latent_dim = v; }, ranges.latent_dims);
  emit([](ScenarioSpec& s, std::size_t v) { s.samples = v; }, ranges.samples);
  emit([](ScenarioSpec& s, double v) { s.snr = v; }, ranges.snrs);
  return out;
}

// Named setups used by the figures and the acceptance suite.
inline ScenarioSpec preset(std::string_view name) {
  if (name == "base") return default_base_scenario();
  if (name == "elbow") return {10, 32, 4, 1000, 10.0, 1, 0};
  if (name == "channels-2") return {2, 4, 4, 1000, 10.0, 1, 0};
  if (name == "channels-10") return {10, 4, 4, 1000, 10.0, 1, 0};
  if (name == "high-dim") return {10, 500, 4, 1000, 10.0, 1, 0};
  if (name == "high-dim-hq") return {10, 500, 4, 10000, 100.0, 1, 0};
  if (name == "easy") return {3, 16, 4, 10000, 100.0, 1, 0};
  if (name == "fit-check") return {2, 8, 2, 1000, 100.0, 1, 0};
  throw DataError("unknown scenario preset '" + std::string(name) + "'");
}

inline std::vector<std::string> preset_names() {
  return {"base", "elbow", "channels-2", "channels-10", "high-dim", "high-dim-hq", "easy",
          "fit-check"};
}

inline SyntheticDataset select_rows(const SyntheticDataset& ds, std::span<const std::size_t> rows) {
  auto pick = [&](const Matrix& m) {
    Matrix out(rows.size(), m.cols());
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const auto src = m.row(rows[r]);
      std::copy(src.begin(), src.end(), out.row(r).begin());
    }
    return out;
  };
  SyntheticDataset out;
  out.spec = ds.spec;
  out.spec.samples = rows.size();
  out.bases = ds.bases;
  out.loadings = ds.loadings;
  out.z = pick(ds.z);
  for (const auto& x : ds.channels) out.channels.push_back(pick(x));
  for (const auto& x : ds.signals) out.signals.push_back(pick(x));
  for (std::size_t r : rows) out.sample_index.push_back(ds.sample_index[r]);
  return out;
}

// Disjoint row partition shared by all channels and the ground truth. Rows
// keep their original relative order inside each part.
inline std::pair<SyntheticDataset, SyntheticDataset> train_test_split(const SyntheticDataset& ds,
                                                                      double test_fraction,
                                                                      std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0))
    throw DataError("train_test_split: test_fraction must lie in (0, 1)");
  const std::size_t n = ds.samples();
  const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(n)));
  if (n_test < 1 || n_test >= n) {
    throw DataError("train_test_split: fraction " + std::to_string(test_fraction) + " of " +
                    std::to_string(n) + " samples leaves an empty part");
  }
  std::vector<std::size_t> order(n);
  for (std::size_t k = 0; k < n; ++k) order[k] = k;
  Rng rng(seed);
  rng.shuffle(order);
  std::vector<std::size_t> test(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_test));
  std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(n_test), order.end());
  std::sort(test.begin(), test.end());
  std::sort(train.begin(), train.end());
  return {select_rows(ds, train), select_rows(ds, test)};
}

}  // namespace mcvi
