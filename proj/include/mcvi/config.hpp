#pragma once

// Run configuration files and on-disk dataset directories.

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mcvi/dataset.hpp"
#include "mcvi/error.hpp"
#include "mcvi/serialize.hpp"
#include "mcvi/synthetic.hpp"

namespace mcvi {

namespace fs = std::filesystem;

// Where the observations come from. Exactly one of csv / dir / scenario is set.
struct DataSource {
  std::vector<fs::path> csv;          // one file per channel
  std::optional<fs::path> dir;        // directory written by `generate`
  std::optional<ScenarioSpec> scenario;
  bool standardize = true;
  std::optional<fs::path> labels;     // id,class CSV for LDA
};

struct EvaluateOptions {
  double validation_fraction = 0.0;  // 0 disables the held-out trace
  std::size_t lda_repeats = 20;
  LatentCombine combine = LatentCombine::average;
};

struct RunConfig {
  DataSource data;
  std::vector<std::size_t> latent_dims{4};
  std::size_t replications = 5;
  double init_scale = 0.1;
  TrainConfig train;
  EvaluateOptions evaluate;
  fs::path output_dir = "out";
};

namespace detail {

inline fs::path resolve_path(const fs::path& base, const std::string& p) {
  fs::path out(p);
  if (out.is_relative()) out = base / out;
  return out.lexically_normal();
}

inline fs::path existing_path(const fs::path& base, const Json& j, std::string_view context) {
  const fs::path p = resolve_path(base, get_as<std::string>(j, context));
  if (!fs::exists(p)) throw DataError(std::string(context) + ": '" + p.string() + "' does not exist");
  return p;
}

}  // namespace detail

inline std::string combine_name(LatentCombine c) {
  return c == LatentCombine::average ? "average" : "concatenate";
}

inline LatentCombine parse_combine(const std::string& s) {
  if (s == "average") return LatentCombine::average;
  if (s == "concatenate") return LatentCombine::concatenate;
  throw DataError("latent_combine must be 'average' or 'concatenate', got '" + s + "'");
}

// Relative paths are taken relative to `base_dir` (the config file's folder).
inline RunConfig run_config_from_json(const Json& j, const fs::path& base_dir) {
  detail::check_keys(j, {"schema_version", "data", "latent_dims", "replications", "init_scale", "train", "evaluate",
                         "output_dir"},
                     "config");
  const auto& version = detail::field(j, "schema_version", "config");
  if (!version.is_number_integer() || version.get<int>() != kSchemaVersion)
    throw DataError("config: schema_version must be " + std::to_string(kSchemaVersion));
  RunConfig cfg;

  const auto& dj = detail::field(j, "data", "config");
  detail::check_keys(dj, {"csv", "dir", "preset", "scenario", "standardize", "labels"}, "config.data");
  int sources = 0;
  if (auto it = dj.find("csv"); it != dj.end()) {
    ++sources;
    if (!it->is_array() || it->empty()) throw DataError("config.data.csv: expected a non-empty list of paths");
    for (const auto& p : *it) cfg.data.csv.push_back(detail::existing_path(base_dir, p, "config.data.csv"));
  }
  if (auto it = dj.find("dir"); it != dj.end()) {
    ++sources;
    cfg.data.dir = detail::existing_path(base_dir, *it, "config.data.dir");
  }
  if (dj.contains("preset") || dj.contains("scenario")) {
    ++sources;
    ScenarioSpec s = default_base_scenario();
    if (auto it = dj.find("preset"); it != dj.end()) s = preset(detail::get_as<std::string>(*it, "config.data.preset"));
    if (auto it = dj.find("scenario"); it != dj.end()) s = scenario_from_json(*it, s);
    s.validate();
    cfg.data.scenario = s;
  }
  if (sources != 1) throw DataError("config.data: give exactly one of csv, dir, or preset/scenario");
  detail::read_opt(dj, "standardize", cfg.data.standardize, "config.data");
  if (auto it = dj.find("labels"); it != dj.end())
    cfg.data.labels = detail::existing_path(base_dir, *it, "config.data.labels");

  if (auto it = j.find("latent_dims"); it != j.end()) {
    cfg.latent_dims.clear();
    if (it->is_array()) {
      for (const auto& v : *it) cfg.latent_dims.push_back(detail::get_count(v, "config.latent_dims"));
    } else {
      cfg.latent_dims.push_back(detail::get_count(*it, "config.latent_dims"));
    }
    if (cfg.latent_dims.empty()) throw DataError("config.latent_dims: empty list");
  }
  for (std::size_t l : cfg.latent_dims)
    if (l < 1) throw DataError("config.latent_dims: latent dimensions must be >= 1");
  detail::read_opt(j, "replications", cfg.replications, "config");
  if (cfg.replications < 1) throw DataError("config.replications must be >= 1");
  detail::read_opt(j, "init_scale", cfg.init_scale, "config");
  if (!(cfg.init_scale > 0.0)) throw DataError("config.init_scale must be > 0");
  if (auto it = j.find("train"); it != j.end()) cfg.train = train_config_from_json(*it);

  if (auto it = j.find("evaluate"); it != j.end()) {
    detail::check_keys(*it, {"validation_fraction", "lda_repeats", "latent_combine"}, "config.evaluate");
    detail::read_opt(*it, "validation_fraction", cfg.evaluate.validation_fraction, "config.evaluate");
    detail::read_opt(*it, "lda_repeats", cfg.evaluate.lda_repeats, "config.evaluate");
    if (auto c = it->find("latent_combine"); c != it->end())
      cfg.evaluate.combine = parse_combine(detail::get_as<std::string>(*c, "config.evaluate.latent_combine"));
    const double f = cfg.evaluate.validation_fraction;
    if (!(f >= 0.0 && f < 1.0)) throw DataError("config.evaluate.validation_fraction must lie in [0, 1)");
    if (cfg.evaluate.lda_repeats < 1) throw DataError("config.evaluate.lda_repeats must be >= 1");
  }
  if (auto it = j.find("output_dir"); it != j.end())
    cfg.output_dir = detail::resolve_path(base_dir, detail::get_as<std::string>(*it, "config.output_dir"));
  else
    cfg.output_dir = (base_dir / cfg.output_dir).lexically_normal();
  return cfg;
}

inline RunConfig load_run_config(const fs::path& path) {
  return run_config_from_json(parse_json_file(path), fs::absolute(path).parent_path());
}

// Every field materialized; paths are absolute, so the document replays the run.
inline Json to_json(const RunConfig& cfg) {
  Json data = Json::object();
  if (!cfg.data.csv.empty()) {
    Json files = Json::array();
    for (const auto& p : cfg.data.csv) files.push_back(fs::absolute(p).lexically_normal().string());
    data["csv"] = files;
  }
  if (cfg.data.dir) data["dir"] = fs::absolute(*cfg.data.dir).lexically_normal().string();
  if (cfg.data.scenario) data["scenario"] = to_json(*cfg.data.scenario);
  data["standardize"] = cfg.data.standardize;
  if (cfg.data.labels) data["labels"] = fs::absolute(*cfg.data.labels).lexically_normal().string();
  return Json{{"schema_version", kSchemaVersion},
              {"data", data},
              {"latent_dims", cfg.latent_dims},
              {"replications", cfg.replications},
              {"init_scale", cfg.init_scale},
              {"train", to_json(cfg.train)},
              {"evaluate",
               {{"validation_fraction", cfg.evaluate.validation_fraction},
                {"lda_repeats", cfg.evaluate.lda_repeats},
                {"latent_combine", combine_name(cfg.evaluate.combine)}}},
              {"output_dir", fs::absolute(cfg.output_dir).lexically_normal().string()}};
}

// ---------------------------------------------------------------------------
// Dataset directories
// ---------------------------------------------------------------------------
// Layout written by export_scenario:
//   dataset.json   manifest: channel files in order, optional truth and labels
//   <name>.csv     one per channel
//   truth.json     ground-truth z, loadings G_c and noise variance
//   labels.csv     optional id,class file

// Zero-padded so lexicographic id order equals generation order.
inline std::vector<std::string> synthetic_sample_ids(std::size_t n) {
  const std::size_t width = std::to_string(n).size();
  std::vector<std::string> ids;
  for (std::size_t s = 0; s < n; ++s) {
    std::string num = std::to_string(s + 1);
    ids.push_back("s" + std::string(width - num.size(), '0') + num);
  }
  return ids;
}

struct LabelRule {
  std::size_t latent = 0;   // which ground-truth coordinate
  double threshold = 0.0;   // class 1 when z_k > threshold
};

inline std::vector<int> threshold_labels(const Matrix& z, const LabelRule& rule) {
  if (rule.latent >= z.cols()) throw DataError("labels: latent index out of range");
  std::vector<int> out;
  for (std::size_t s = 0; s < z.rows(); ++s) out.push_back(z(s, rule.latent) > rule.threshold ? 1 : 0);
  return out;
}

inline void export_scenario(const SyntheticDataset& ds, const fs::path& dir,
                            const std::optional<LabelRule>& labels = std::nullopt) {
  fs::create_directories(dir);
  const auto ids = synthetic_sample_ids(ds.samples());
  Json manifest{{"schema_version", kSchemaVersion}, {"spec", to_json(ds.spec)}};
  Json files = Json::array();
  for (std::size_t c = 0; c < ds.channels.size(); ++c) {
    const std::string name = "ch" + std::to_string(c);
    std::vector<std::string> features;
    for (std::size_t j = 0; j < ds.channels[c].cols(); ++j) features.push_back(name + "_f" + std::to_string(j));
    write_channel_csv(dir / (name + ".csv"), ids, features, ds.channels[c]);
    files.push_back(name + ".csv");
  }
  manifest["channels"] = files;
  Json loadings = Json::array();
  for (const auto& g : ds.loadings) loadings.push_back(to_json(g));
  write_json_file(dir / "truth.json", Json{{"schema_version", kSchemaVersion},
                                           {"spec", to_json(ds.spec)},
                                           {"sample_ids", ids},
                                           {"z", to_json(ds.z)},
                                           {"loadings", loadings},
                                           {"noise_variance", 1.0 / ds.spec.snr}});
  manifest["truth"] = "truth.json";
  if (labels) {
    const auto y = threshold_labels(ds.z, *labels);
    std::ofstream out(dir / "labels.csv");
    out << "id,class\n";
    for (std::size_t s = 0; s < ids.size(); ++s) out << ids[s] << ',' << y[s] << '\n';
    if (!out) throw DataError("failed while writing labels.csv");
    manifest["labels"] = "labels.csv";
    manifest["label_rule"] = {{"latent", labels->latent}, {"threshold", labels->threshold}};
  }
  write_json_file(dir / "dataset.json", manifest);
}

struct GroundTruth {
  std::vector<std::string> sample_ids;
  Matrix z;
  LinearGaussianModel model;
};

struct DataDirectory {
  MultiChannelDataset data;  // raw, not standardized
  std::optional<GroundTruth> truth;  // rows aligned with data.sample_ids
  std::optional<fs::path> labels;
};

// Noiseless signal G_c z per channel, in the row order of `truth`.
inline std::vector<Matrix> truth_signals(const GroundTruth& truth) {
  std::vector<Matrix> out;
  for (const auto& g : truth.model.loadings) out.push_back(matmul_transposed(truth.z, g));
  return out;
}

inline GroundTruth load_truth(const fs::path& path) {
  const Json j = parse_json_file(path);
  detail::check_keys(j, {"schema_version", "spec", "sample_ids", "z", "loadings", "noise_variance"}, "truth");
  GroundTruth t;
  t.sample_ids = detail::get_as<std::vector<std::string>>(detail::field(j, "sample_ids", "truth"), "truth.sample_ids");
  t.z = matrix_from_json(detail::field(j, "z", "truth"), "truth.z");
  if (t.z.rows() != t.sample_ids.size()) throw DataError("truth: z rows do not match sample ids");
  t.model.latent_dim = t.z.cols();
  const double noise = detail::get_real(detail::field(j, "noise_variance", "truth"), "truth.noise_variance");
  for (const auto& g : detail::field(j, "loadings", "truth")) {
    t.model.loadings.push_back(matrix_from_json(g, "truth.loadings"));
    if (t.model.loadings.back().cols() != t.model.latent_dim) throw DataError("truth: loading width mismatch");
    t.model.noise_variance.emplace_back(t.model.loadings.back().rows(), noise);
  }
  return t;
}

// Reads a dataset directory. Without a manifest every *.csv except labels.csv
// is taken as a channel, in file-name order.
inline DataDirectory load_data_directory(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("'" + dir.string() + "' is not a directory");
  DataDirectory out;
  std::vector<fs::path> files;
  const fs::path manifest_path = dir / "dataset.json";
  std::optional<fs::path> truth_path;
  if (fs::exists(manifest_path)) {
    const Json m = parse_json_file(manifest_path);
    detail::check_keys(m, {"schema_version", "spec", "channels", "truth", "labels", "label_rule"}, "dataset.json");
    for (const auto& f : detail::field(m, "channels", "dataset.json"))
      files.push_back(dir / detail::get_as<std::string>(f, "dataset.json.channels"));
    if (auto it = m.find("truth"); it != m.end()) truth_path = dir / detail::get_as<std::string>(*it, "dataset.json.truth");
    if (auto it = m.find("labels"); it != m.end()) out.labels = dir / detail::get_as<std::string>(*it, "dataset.json.labels");
  } else {
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (entry.path().extension() == ".csv" && entry.path().filename() != "labels.csv") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    if (fs::exists(dir / "labels.csv")) out.labels = dir / "labels.csv";
  }
  if (files.empty()) throw DataError("'" + dir.string() + "' contains no channel files");
  out.data = load_channels(files);
  if (truth_path) {
    GroundTruth t = load_truth(*truth_path);
    // Align truth rows with the (sorted) dataset rows.
    std::map<std::string, std::size_t> row_of;
    for (std::size_t r = 0; r < t.sample_ids.size(); ++r) row_of[t.sample_ids[r]] = r;
    Matrix z(out.data.samples(), t.z.cols());
    for (std::size_t s = 0; s < out.data.samples(); ++s) {
      const auto it = row_of.find(out.data.sample_ids[s]);
      if (it == row_of.end()) throw DataError("truth.json has no entry for sample '" + out.data.sample_ids[s] + "'");
      const auto src = t.z.row(it->second);
      std::copy(src.begin(), src.end(), z.row(s).begin());
    }
    t.z = std::move(z);
    t.sample_ids = out.data.sample_ids;
    if (t.model.loadings.size() != out.data.channels.size()) throw DataError("truth.json: channel count mismatch");
    out.truth = std::move(t);
  }
  return out;
}

// Builds the in-memory dataset described by a config source (not standardized).
inline DataDirectory materialize(const DataSource& src) {
  if (src.dir) return load_data_directory(*src.dir);
  DataDirectory out;
  if (!src.csv.empty()) {
    out.data = load_channels(src.csv);
    return out;
  }
  if (!src.scenario) throw DataError("config.data: no source given");
  const SyntheticDataset ds = generate_scenario(*src.scenario);
  out.data.sample_ids = synthetic_sample_ids(ds.samples());
  for (std::size_t c = 0; c < ds.channels.size(); ++c) {
    const std::string name = "ch" + std::to_string(c);
    out.data.channel_names.push_back(name);
    std::vector<std::string> features;
    for (std::size_t j = 0; j < ds.channels[c].cols(); ++j) features.push_back(name + "_f" + std::to_string(j));
    out.data.feature_names.push_back(std::move(features));
    out.data.channels.push_back(ds.channels[c]);
  }
  out.truth = GroundTruth{out.data.sample_ids, ds.z, ground_truth_model(ds)};
  return out;
}

}  // namespace mcvi
