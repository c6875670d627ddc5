#pragma once

// JSON encodings of matrices, models and reports. Doubles are written in the
// shortest form that parses back to the identical value, so save -> load is
// bit-exact.

#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "mcvi/dataset.hpp"
#include "mcvi/error.hpp"
#include "mcvi/evaluate.hpp"
#include "mcvi/linalg.hpp"
#include "mcvi/model.hpp"
#include "mcvi/optim.hpp"
#include "mcvi/synthetic.hpp"

namespace mcvi {

using Json = nlohmann::ordered_json;

inline constexpr int kSchemaVersion = 1;

namespace detail {

inline void require_object(const Json& j, std::string_view context) {
  if (!j.is_object()) throw DataError(std::string(context) + ": expected a JSON object");
}

// Rejects keys outside `allowed`; typos in config files must not pass silently.
inline void check_keys(const Json& j, std::initializer_list<std::string_view> allowed, std::string_view context) {
  require_object(j, context);
  for (const auto& [key, value] : j.items()) {
    bool known = false;
    for (auto a : allowed) known = known || key == a;
    if (!known) throw DataError(std::string(context) + ": unknown key '" + key + "'");
  }
}

inline const Json& field(const Json& j, std::string_view key, std::string_view context) {
  const auto it = j.find(key);
  if (it == j.end()) throw DataError(std::string(context) + ": missing key '" + std::string(key) + "'");
  return *it;
}

template <class T>
T get_as(const Json& j, std::string_view context) {
  try {
    return j.get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string(context) + ": " + e.what());
  }
}

inline std::size_t get_count(const Json& j, std::string_view context) {
  if (!j.is_number_integer() || (j.is_number_integer() && !j.is_number_unsigned() && j.get<long long>() < 0))
    throw DataError(std::string(context) + ": expected a non-negative integer");
  return j.get<std::size_t>();
}

inline double get_real(const Json& j, std::string_view context) {
  if (!j.is_number()) throw DataError(std::string(context) + ": expected a number");
  return j.get<double>();
}

template <class T>
void read_opt(const Json& j, std::string_view key, T& out, std::string_view context) {
  const auto it = j.find(key);
  if (it == j.end()) return;
  const std::string ctx = std::string(context) + "." + std::string(key);
  if constexpr (std::is_same_v<T, double>) {
    out = get_real(*it, ctx);
  } else if constexpr (std::is_same_v<T, std::size_t> || std::is_same_v<T, std::uint64_t>) {
    out = static_cast<T>(get_count(*it, ctx));
  } else {
    out = get_as<T>(*it, ctx);
  }
}

}  // namespace detail

inline Json parse_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  try {
    return Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError("'" + path.string() + "' is not valid JSON: " + e.what());
  }
}

inline void write_json_file(const std::filesystem::path& path, const Json& j) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << j.dump(2) << '\n';
  if (!out) throw DataError("failed while writing '" + path.string() + "'");
}

// --- tensors ---------------------------------------------------------------

inline Json to_json(const Matrix& m) {
  return Json{{"shape", {m.rows(), m.cols()}}, {"data", std::vector<double>(m.values().begin(), m.values().end())}};
}

inline Json to_json(const Vector& v) { return Json{{"shape", {v.size()}}, {"data", v}}; }

inline Matrix matrix_from_json(const Json& j, std::string_view context) {
  detail::check_keys(j, {"shape", "data"}, context);
  const auto& shape = detail::field(j, "shape", context);
  if (!shape.is_array() || shape.size() != 2) throw DataError(std::string(context) + ": shape must be [rows, cols]");
  const std::size_t r = detail::get_count(shape[0], context);
  const std::size_t c = detail::get_count(shape[1], context);
  auto data = detail::get_as<std::vector<double>>(detail::field(j, "data", context), context);
  try {
    return Matrix(r, c, std::move(data));
  } catch (const Error& e) {
    throw DataError(std::string(context) + ": " + e.what());
  }
}

inline Vector vector_from_json(const Json& j, std::string_view context) {
  detail::check_keys(j, {"shape", "data"}, context);
  const auto& shape = detail::field(j, "shape", context);
  if (!shape.is_array() || shape.size() != 1) throw DataError(std::string(context) + ": shape must be [length]");
  const std::size_t n = detail::get_count(shape[0], context);
  auto data = detail::get_as<Vector>(detail::field(j, "data", context), context);
  if (data.size() != n) throw DataError(std::string(context) + ": data length does not match shape");
  for (double v : data)
    if (!std::isfinite(v)) throw DataError(std::string(context) + ": non-finite entry");
  return data;
}

// --- model -----------------------------------------------------------------

inline Json to_json(const MultiChannelModel& model) {
  Json channels = Json::array();
  for (std::size_t c = 0; c < model.channel_count(); ++c) {
    channels.push_back({{"index", model.channels[c].index},
                        {"name", model.channels[c].name},
                        {"dim", model.channels[c].dim},
                        {"g_mu", to_json(model.theta[c].g_mu)},
                        {"g_logvar", to_json(model.theta[c].g_logvar)},
                        {"v_mu", to_json(model.phi[c].v_mu)},
                        {"v_logvar", to_json(model.phi[c].v_logvar)},
                        {"v_logvar_bias", to_json(model.phi[c].v_logvar_bias)}});
  }
  return Json{{"format", "mcvi-model"},
              {"schema_version", kSchemaVersion},
              {"latent_dim", model.latent_dim},
              {"channels", std::move(channels)}};
}

inline Json to_json(const Standardization& rec) {
  Json out = Json::array();
  for (std::size_t c = 0; c < rec.mean.size(); ++c)
    out.push_back({{"mean", to_json(rec.mean[c])}, {"scale", to_json(rec.scale[c])}});
  return out;
}

inline Standardization standardization_from_json(const Json& j) {
  if (!j.is_array()) throw DataError("preprocessing: expected an array");
  Standardization rec;
  for (std::size_t c = 0; c < j.size(); ++c) {
    const std::string ctx = "preprocessing[" + std::to_string(c) + "]";
    detail::check_keys(j[c], {"mean", "scale"}, ctx);
    rec.mean.push_back(vector_from_json(detail::field(j[c], "mean", ctx), ctx + ".mean"));
    rec.scale.push_back(vector_from_json(detail::field(j[c], "scale", ctx), ctx + ".scale"));
    for (double s : rec.scale.back())
      if (!(s > 0.0)) throw DataError(ctx + ": scale entries must be > 0");
  }
  return rec;
}

// Reads the parameter part of a model document. Extra top-level keys written
// by the CLI (preprocessing, config) are accepted and left to the caller.
inline MultiChannelModel model_from_json(const Json& j) {
  detail::check_keys(j, {"format", "schema_version", "latent_dim", "channels", "preprocessing", "config"}, "model");
  if (detail::field(j, "format", "model") != "mcvi-model") throw DataError("model: not an mcvi model document");
  if (detail::field(j, "schema_version", "model") != kSchemaVersion)
    throw DataError("model: unsupported schema_version");
  MultiChannelModel m;
  m.latent_dim = detail::get_count(detail::field(j, "latent_dim", "model"), "model.latent_dim");
  const auto& chans = detail::field(j, "channels", "model");
  if (!chans.is_array()) throw DataError("model.channels: expected an array");
  for (std::size_t c = 0; c < chans.size(); ++c) {
    const std::string ctx = "model.channels[" + std::to_string(c) + "]";
    const auto& cj = chans[c];
    detail::check_keys(cj, {"index", "name", "dim", "g_mu", "g_logvar", "v_mu", "v_logvar", "v_logvar_bias"}, ctx);
    ChannelSpec spec;
    spec.index = detail::get_count(detail::field(cj, "index", ctx), ctx + ".index");
    spec.name = detail::get_as<std::string>(detail::field(cj, "name", ctx), ctx + ".name");
    spec.dim = detail::get_count(detail::field(cj, "dim", ctx), ctx + ".dim");
    m.channels.push_back(spec);
    m.theta.push_back({matrix_from_json(detail::field(cj, "g_mu", ctx), ctx + ".g_mu"),
                       vector_from_json(detail::field(cj, "g_logvar", ctx), ctx + ".g_logvar")});
    m.phi.push_back({matrix_from_json(detail::field(cj, "v_mu", ctx), ctx + ".v_mu"),
                     matrix_from_json(detail::field(cj, "v_logvar", ctx), ctx + ".v_logvar"),
                     vector_from_json(detail::field(cj, "v_logvar_bias", ctx), ctx + ".v_logvar_bias")});
  }
  try {
    m.validate();
  } catch (const ShapeError& e) {
    throw DataError(e.what());
  }
  return m;
}

inline void save_model(const std::filesystem::path& path, const MultiChannelModel& model) {
  write_json_file(path, to_json(model));
}

inline MultiChannelModel load_model(const std::filesystem::path& path) {
  return model_from_json(parse_json_file(path));
}

// --- configs and reports ---------------------------------------------------

inline Json to_json(const TrainConfig& c) {
  return Json{{"learning_rate", c.learning_rate}, {"beta1", c.beta1},           {"beta2", c.beta2},
              {"eps_adam", c.eps_adam},           {"batch_size", c.batch_size}, {"epochs", c.epochs},
              {"mc_samples", c.mc_samples},       {"seed", c.seed},             {"log_every", c.log_every},
              {"final_mc_samples", c.final_mc_samples}};
}

inline TrainConfig train_config_from_json(const Json& j, TrainConfig c = {}) {
  constexpr std::string_view ctx = "train";
  detail::check_keys(j, {"learning_rate", "beta1", "beta2", "eps_adam", "batch_size", "epochs", "mc_samples", "seed",
                         "log_every", "final_mc_samples"},
                     ctx);
  detail::read_opt(j, "learning_rate", c.learning_rate, ctx);
  detail::read_opt(j, "beta1", c.beta1, ctx);
  detail::read_opt(j, "beta2", c.beta2, ctx);
  detail::read_opt(j, "eps_adam", c.eps_adam, ctx);
  detail::read_opt(j, "batch_size", c.batch_size, ctx);
  detail::read_opt(j, "epochs", c.epochs, ctx);
  detail::read_opt(j, "mc_samples", c.mc_samples, ctx);
  detail::read_opt(j, "seed", c.seed, ctx);
  detail::read_opt(j, "log_every", c.log_every, ctx);
  detail::read_opt(j, "final_mc_samples", c.final_mc_samples, ctx);
  c.validate();
  return c;
}

inline Json to_json(const ScenarioSpec& s) {
  return Json{{"channels", s.channels}, {"dim", s.dim},   {"latent_dim", s.latent_dim},  {"samples", s.samples},
              {"snr", s.snr},           {"replication", s.replication}, {"base_seed", s.base_seed}};
}

// Fields override `base` (default: the grid base scenario).
inline ScenarioSpec scenario_from_json(const Json& j, ScenarioSpec s = default_base_scenario()) {
  constexpr std::string_view ctx = "scenario";
  detail::check_keys(j, {"channels", "dim", "latent_dim", "samples", "snr", "replication", "base_seed"}, ctx);
  detail::read_opt(j, "channels", s.channels, ctx);
  detail::read_opt(j, "dim", s.dim, ctx);
  detail::read_opt(j, "latent_dim", s.latent_dim, ctx);
  detail::read_opt(j, "samples", s.samples, ctx);
  detail::read_opt(j, "snr", s.snr, ctx);
  detail::read_opt(j, "replication", s.replication, ctx);
  detail::read_opt(j, "base_seed", s.base_seed, ctx);
  s.validate();
  return s;
}

inline Json to_json(const FitReport& r) {
  return Json{{"final_nlb", r.final_nlb},   {"final_nlb_stderr", r.final_nlb_stderr},
              {"epochs_run", r.epochs_run}, {"wall_seconds", r.wall_seconds},
              {"train_nlb", r.train_nlb},   {"validation_nlb", r.validation_nlb}};
}

namespace detail {
inline Json nullable(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }
}  // namespace detail

inline Json to_json(const SweepReport& r) {
  Json dims = Json::array();
  for (std::size_t k = 0; k < r.dims.size(); ++k) {
    dims.push_back({{"latent_dim", r.dims[k]},
                    {"nlb_mean", detail::nullable(r.nlb_mean[k])},
                    {"nlb_stderr", detail::nullable(r.nlb_stderr[k])},
                    {"lda_accuracy", r.lda_accuracy[k] ? Json(*r.lda_accuracy[k]) : Json(nullptr)}});
  }
  Json cells = Json::array();
  for (const auto& c : r.cells) {
    Json cj{{"latent_dim", c.latent_dim}, {"replication", c.replication}, {"seed", c.seed}, {"ok", c.ok}};
    if (c.ok) {
      cj["final_nlb"] = c.final_nlb;
      cj["final_nlb_stderr"] = c.final_nlb_stderr;
      cj["epochs_run"] = c.epochs_run;
      cj["lda_accuracy"] = c.lda_accuracy ? Json(*c.lda_accuracy) : Json(nullptr);
    } else {
      cj["error"] = c.error;
    }
    cells.push_back(std::move(cj));
  }
  return Json{{"dims", std::move(dims)},
              {"elbow_dim", r.elbow_dim ? Json(*r.elbow_dim) : Json(nullptr)},
              {"cells", std::move(cells)}};
}

inline Json to_json(const ReconReport& r) {
  Json ratio = Json::array();
  for (const auto& v : r.ratio) ratio.push_back(v ? Json(*v) : Json(nullptr));
  return Json{{"target", r.target}, {"mse_multi", r.mse_multi}, {"mse_single", r.mse_single}, {"ratio", ratio}};
}

}  // namespace mcvi
