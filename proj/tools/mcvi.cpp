// Command-line front end: generate, fit, sweep, reconstruct, evaluate.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mcvi/mcvi.hpp"

namespace fs = std::filesystem;
using namespace mcvi;

namespace {

struct Globals {
  std::optional<std::uint64_t> seed;
  std::size_t threads = 1;
  bool quiet = false;
};

void note(const Globals& g, const std::string& msg) {
  if (!g.quiet) std::cerr << msg << '\n';
}

std::string fmt(double v) { return format_double(v); }

// Standardizes with a fresh record, or with the record stored in a model.
MultiChannelDataset prepare(const MultiChannelDataset& raw, bool standardize_data,
                            const std::optional<Standardization>& stored = std::nullopt) {
  if (stored) return apply_standardization(raw, *stored);
  return standardize_data ? standardize(raw) : raw;
}

std::vector<ChannelSpec> channel_specs(const MultiChannelDataset& ds) {
  std::vector<ChannelSpec> specs;
  for (std::size_t c = 0; c < ds.channels.size(); ++c) specs.push_back({c, ds.channels[c].cols(), ds.channel_names[c]});
  return specs;
}

std::optional<std::vector<int>> labels_for(const DataDirectory& dd, const std::optional<fs::path>& explicit_path) {
  const auto path = explicit_path ? explicit_path : dd.labels;
  if (!path) return std::nullopt;
  return load_labels(*path, dd.data.sample_ids);
}

struct SavedModel {
  MultiChannelModel model;
  std::optional<Standardization> preprocessing;
  Json config;
};

SavedModel read_saved_model(const fs::path& path) {
  const Json j = parse_json_file(path);
  SavedModel out{model_from_json(j), std::nullopt, Json(nullptr)};
  if (auto it = j.find("preprocessing"); it != j.end() && !it->is_null())
    out.preprocessing = standardization_from_json(*it);
  if (auto it = j.find("config"); it != j.end()) out.config = *it;
  return out;
}

// Model and data must agree channel by channel, by name and width.
void check_compatible(const MultiChannelModel& model, const MultiChannelDataset& ds) {
  if (model.channel_count() != ds.channels.size()) {
    throw DataError("model has " + std::to_string(model.channel_count()) + " channels, data has " +
                    std::to_string(ds.channels.size()));
  }
  for (std::size_t c = 0; c < ds.channels.size(); ++c) {
    const auto& spec = model.channels[c];
    if (spec.name != ds.channel_names[c])
      throw DataError("channel " + std::to_string(c) + ": model expects '" + spec.name + "', data has '" +
                      ds.channel_names[c] + "'");
    if (spec.dim != ds.channels[c].cols())
      throw DataError("channel '" + spec.name + "': model expects " + std::to_string(spec.dim) +
                      " features, data has " + std::to_string(ds.channels[c].cols()));
  }
}

// --- generate --------------------------------------------------------------

int cmd_generate(const Globals& g, const fs::path& spec_path, const fs::path& out_dir) {
  const Json j = parse_json_file(spec_path);
  detail::check_keys(j, {"schema_version", "preset", "scenario", "labels"}, "spec");
  const auto& version = detail::field(j, "schema_version", "spec");
  if (!version.is_number_integer() || version.get<int>() != kSchemaVersion)
    throw DataError("spec: schema_version must be " + std::to_string(kSchemaVersion));
  ScenarioSpec spec = default_base_scenario();
  if (auto it = j.find("preset"); it != j.end()) spec = preset(detail::get_as<std::string>(*it, "spec.preset"));
  if (auto it = j.find("scenario"); it != j.end()) spec = scenario_from_json(*it, spec);
  if (g.seed) spec.base_seed = *g.seed;
  std::optional<LabelRule> rule;
  if (auto it = j.find("labels"); it != j.end()) {
    detail::check_keys(*it, {"latent", "threshold"}, "spec.labels");
    rule = LabelRule{};
    detail::read_opt(*it, "latent", rule->latent, "spec.labels");
    detail::read_opt(*it, "threshold", rule->threshold, "spec.labels");
    if (rule->latent >= spec.latent_dim) throw DataError("spec.labels.latent must be < latent_dim");
  }
  const SyntheticDataset ds = generate_scenario(spec);
  export_scenario(ds, out_dir, rule);
  note(g, "generated " + spec.label() + " into " + out_dir.string());
  return 0;
}

// --- fit -------------------------------------------------------------------

RunConfig load_config(const Globals& g, const fs::path& path, const std::optional<fs::path>& out) {
  RunConfig cfg = load_run_config(path);
  if (g.seed) cfg.train.seed = *g.seed;
  if (out) cfg.output_dir = fs::absolute(*out).lexically_normal();
  return cfg;
}

int cmd_fit(const Globals& g, const fs::path& config_path, const std::optional<fs::path>& out) {
  const RunConfig cfg = load_config(g, config_path, out);
  if (cfg.latent_dims.size() != 1)
    throw UsageError("fit trains one model; config lists " + std::to_string(cfg.latent_dims.size()) +
                     " latent dimensions (use sweep)");
  const DataDirectory dd = materialize(cfg.data);
  MultiChannelDataset train_raw = dd.data;
  std::optional<MultiChannelDataset> valid_raw;
  if (cfg.evaluate.validation_fraction > 0.0) {
    auto [tr, va] = split_samples(dd.data, cfg.evaluate.validation_fraction,
                                  derive_seed(cfg.train.seed, fnv1a("validation-split")));
    train_raw = std::move(tr);
    valid_raw = std::move(va);
  }
  const MultiChannelDataset train = prepare(train_raw, cfg.data.standardize);
  std::optional<MultiChannelDataset> valid;
  if (valid_raw) valid = prepare(*valid_raw, cfg.data.standardize, train.standardization);

  Rng init_rng(derive_seed(cfg.train.seed, fnv1a("init")));
  MultiChannelModel model = init_model(init_rng, cfg.latent_dims[0], channel_specs(train), cfg.init_scale);
  const Json resolved = to_json(cfg);
  fs::create_directories(cfg.output_dir);

  auto on_epoch = [&](std::size_t epoch, double nlb) {
    note(g, "epoch " + std::to_string(epoch) + " train NLB " + fmt(nlb));
  };
  FitReport report;
  std::optional<std::string> failure;
  try {
    std::optional<std::span<const Matrix>> vspan;
    if (valid) vspan = std::span<const Matrix>(valid->channels);
    report = fit(model, train.channels, cfg.train, vspan, on_epoch);
  } catch (const FitDiverged& e) {
    report = e.partial_report();
    failure = e.what();
  }

  Json rep{{"config", resolved}, {"report", to_json(report)}};
  if (failure) {
    rep["error"] = *failure;
    write_json_file(cfg.output_dir / "fit_report.json", rep);
    throw NumericalError(*failure);
  }
  Json mj = to_json(model);
  mj["preprocessing"] = train.standardization ? to_json(*train.standardization) : Json(nullptr);
  // Where the files landed is not part of the model; keeps model.json
  // byte-identical across output directories.
  mj["config"] = resolved;
  mj["config"].erase("output_dir");
  write_json_file(cfg.output_dir / "model.json", mj);
  write_json_file(cfg.output_dir / "fit_report.json", rep);
  note(g, "final NLB " + fmt(report.final_nlb) + " +/- " + fmt(report.final_nlb_stderr) + " after " +
              std::to_string(report.epochs_run) + " epochs; wrote " + (cfg.output_dir / "model.json").string());
  return 0;
}

// --- sweep -----------------------------------------------------------------

int cmd_sweep(const Globals& g, const fs::path& config_path, const std::optional<fs::path>& out) {
  const RunConfig cfg = load_config(g, config_path, out);
  const DataDirectory dd = materialize(cfg.data);
  const MultiChannelDataset data = prepare(dd.data, cfg.data.standardize);
  SweepOptions opts;
  opts.replications = cfg.replications;
  opts.init_scale = cfg.init_scale;
  opts.threads = g.threads;
  opts.channels = channel_specs(data);
  opts.labels = labels_for(dd, cfg.data.labels);
  opts.lda_repeats = cfg.evaluate.lda_repeats;
  opts.combine = cfg.evaluate.combine;
  note(g, "sweeping " + std::to_string(cfg.latent_dims.size()) + " latent dims x " +
              std::to_string(cfg.replications) + " replications on " + std::to_string(g.threads) + " thread(s)");
  const SweepReport report = sweep_latent_dims(data.channels, cfg.latent_dims, cfg.train, opts);

  fs::create_directories(cfg.output_dir);
  write_json_file(cfg.output_dir / "sweep.json", Json{{"config", to_json(cfg)}, {"report", to_json(report)}});
  {
    std::ofstream csv(cfg.output_dir / "sweep_cells.csv");
    csv << "latent_dim,replication,seed,ok,final_nlb,final_nlb_stderr,epochs_run,lda_accuracy,error\n";
    for (const auto& c : report.cells) {
      csv << c.latent_dim << ',' << c.replication << ',' << c.seed << ',' << (c.ok ? 1 : 0) << ',';
      if (c.ok) csv << fmt(c.final_nlb) << ',' << fmt(c.final_nlb_stderr) << ',' << c.epochs_run;
      else csv << ",,";
      csv << ',' << (c.lda_accuracy ? fmt(*c.lda_accuracy) : "") << ',';
      std::string err = c.error;
      for (char& ch : err)
        if (ch == ',' || ch == '\n') ch = ';';
      csv << err << '\n';
    }
  }
  {
    std::ofstream csv(cfg.output_dir / "sweep_summary.csv");
    csv << "latent_dim,nlb_mean,nlb_stderr,lda_accuracy\n";
    for (std::size_t k = 0; k < report.dims.size(); ++k) {
      csv << report.dims[k] << ',' << fmt(report.nlb_mean[k]) << ',' << fmt(report.nlb_stderr[k]) << ','
          << (report.lda_accuracy[k] ? fmt(*report.lda_accuracy[k]) : "") << '\n';
    }
  }
  std::size_t failed = 0;
  for (const auto& c : report.cells) failed += c.ok ? 0 : 1;
  if (report.elbow_dim) note(g, "suggested elbow at latent dim " + std::to_string(*report.elbow_dim));
  if (failed > 0) note(g, std::to_string(failed) + " sweep cell(s) failed; see sweep_cells.csv");
  return failed == report.cells.size() ? 3 : 0;
}

// --- reconstruct / evaluate -----------------------------------------------

struct Loaded {
  SavedModel saved;
  DataDirectory dir;
  MultiChannelDataset data;  // in model units
};

Loaded load_model_and_data(const fs::path& model_path, const fs::path& data_dir) {
  Loaded out{read_saved_model(model_path), load_data_directory(data_dir), {}};
  check_compatible(out.saved.model, out.dir.data);
  out.data = prepare(out.dir.data, false, out.saved.preprocessing);
  return out;
}

// Maps reconstructions back to the units of the raw data.
std::vector<Matrix> to_original_units(const Loaded& in, std::vector<Matrix> recon) {
  if (!in.saved.preprocessing) return recon;
  MultiChannelDataset tmp = in.data;
  tmp.channels = std::move(recon);
  return inverse_standardize(tmp).channels;
}

Json recon_section(const Loaded& in) {
  const auto multi = to_original_units(in, reconstruct(in.saved.model, in.data.channels, ReconMode::multi));
  const auto single = to_original_units(in, reconstruct(in.saved.model, in.data.channels, ReconMode::single));
  auto report = [&](const std::vector<Matrix>& target, const std::string& name) {
    ReconReport r;
    r.target = name;
    for (std::size_t i = 0; i < target.size(); ++i) {
      r.mse_multi.push_back(mse(multi[i], target[i]));
      r.mse_single.push_back(mse(single[i], target[i]));
      r.ratio.push_back(r.mse_single.back() > 0.0 ? std::optional(r.mse_multi.back() / r.mse_single.back())
                                                  : std::nullopt);
    }
    return to_json(r);
  };
  Json out = Json::object();
  out["channels"] = in.data.channel_names;
  out["observed"] = report(in.dir.data.channels, "observed");
  if (in.dir.truth) out["signal"] = report(truth_signals(*in.dir.truth), "signal");
  return out;
}

int cmd_reconstruct(const Globals& g, const fs::path& model_path, const fs::path& data_dir, const std::string& mode,
                    const fs::path& out_dir) {
  const Loaded in = load_model_and_data(model_path, data_dir);
  const ReconMode m = mode == "multi" ? ReconMode::multi : ReconMode::single;
  const auto recon = to_original_units(in, reconstruct(in.saved.model, in.data.channels, m));
  fs::create_directories(out_dir);
  for (std::size_t c = 0; c < recon.size(); ++c) {
    write_channel_csv(out_dir / (in.data.channel_names[c] + "_" + mode + ".csv"), in.data.sample_ids,
                      in.data.feature_names[c], recon[c]);
  }
  Json rep{{"mode", mode},
           {"model", fs::absolute(model_path).lexically_normal().string()},
           {"data", fs::absolute(data_dir).lexically_normal().string()},
           {"config", in.saved.config},
           {"reconstruction", recon_section(in)}};
  write_json_file(out_dir / "recon_report.json", rep);
  note(g, "wrote " + std::to_string(recon.size()) + " reconstructed channel(s) to " + out_dir.string());
  return 0;
}

int cmd_evaluate(const Globals& g, const fs::path& model_path, const fs::path& data_dir,
                 const std::optional<fs::path>& labels_path, std::size_t mc_samples, std::size_t lda_repeats,
                 const std::string& combine, const std::optional<fs::path>& out_dir) {
  const Loaded in = load_model_and_data(model_path, data_dir);
  const MultiChannelModel& model = in.saved.model;
  const std::uint64_t seed = g.seed.value_or(0);
  const ElboBreakdown bound = elbo_batch(model, in.data.channels, derive_seed(seed, fnv1a("evaluate")), mc_samples);
  const double exact_ll = exact_log_evidence(linear_view(model), in.data.channels);
  const double jacobian = in.saved.preprocessing ? log_jacobian(*in.saved.preprocessing) : 0.0;

  Json rep{{"model", fs::absolute(model_path).lexically_normal().string()},
           {"data", fs::absolute(data_dir).lexically_normal().string()},
           {"config", in.saved.config},
           {"samples", in.data.samples()},
           {"mc_samples", mc_samples},
           {"seed", seed},
           {"nlb", -bound.total},
           {"nlb_stderr", bound.mc_stderr},
           {"exact_nll", -exact_ll},
           {"bound_gap", -bound.total + exact_ll},
           {"bound_holds", -bound.total >= -exact_ll - 3.0 * bound.mc_stderr},
           {"log_jacobian", jacobian},
           {"nlb_original_units", -bound.total + jacobian}};
  if (in.dir.truth) rep["truth_nll_original_units"] = -exact_log_evidence(in.dir.truth->model, in.dir.data.channels);
  rep["reconstruction"] = recon_section(in);
  if (const auto labels = labels_for(in.dir, labels_path)) {
    const Matrix feats = latent_features(model, in.data.channels, parse_combine(combine));
    const LdaResult lda = lda_split_half(feats, *labels, derive_seed(seed, fnv1a("lda")), lda_repeats);
    rep["lda"] = {{"mean_accuracy", lda.mean_accuracy},
                  {"stderr_accuracy", lda.stderr_accuracy},
                  {"repeats", lda.repeats},
                  {"regularized", lda.regularized},
                  {"latent_combine", combine}};
  }
  if (out_dir) {
    fs::create_directories(*out_dir);
    write_json_file(*out_dir / "evaluation.json", rep);
  }
  std::cout << rep.dump(2) << '\n';
  note(g, "NLB " + fmt(-bound.total) + " (exact NLL of the same model " + fmt(-exact_ll) + ")");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-channel variational inference for Gaussian-linear latent models"};
  app.failure_message(CLI::FailureMessage::help);
  app.require_subcommand(1);
  app.fallthrough();

  Globals g;
  app.add_option("--seed", g.seed, "Seed overriding the configured one");
  app.add_option("--threads", g.threads, "Worker threads for sweep cells")->check(CLI::PositiveNumber);
  app.add_flag("--quiet", g.quiet, "Suppress progress messages");

  fs::path spec_path, config_path, model_path, data_dir, gen_out, recon_out;
  std::optional<fs::path> fit_out, sweep_out, eval_out, labels_path;
  std::string mode = "multi";
  std::string combine = "average";
  std::size_t mc_samples = 64, lda_repeats = 20;

  auto* gen = app.add_subcommand("generate", "Write a synthetic scenario as channel CSVs plus ground truth");
  gen->add_option("--spec", spec_path, "Scenario spec JSON")->required()->check(CLI::ExistingFile);
  gen->add_option("--out", gen_out, "Output directory")->required();

  auto* fitc = app.add_subcommand("fit", "Train one model");
  fitc->add_option("--config", config_path, "Run config JSON")->required()->check(CLI::ExistingFile);
  fitc->add_option("--out", fit_out, "Output directory (overrides output_dir)");

  auto* sweep = app.add_subcommand("sweep", "Latent dimension x replication sweep");
  sweep->add_option("--config", config_path, "Run config JSON")->required()->check(CLI::ExistingFile);
  sweep->add_option("--out", sweep_out, "Output directory (overrides output_dir)");

  auto* recon = app.add_subcommand("reconstruct", "Reconstruct every channel from a fitted model");
  recon->add_option("--model", model_path, "Model JSON")->required()->check(CLI::ExistingFile);
  recon->add_option("--data", data_dir, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  recon->add_option("--mode", mode, "multi or single")->check(CLI::IsMember({"multi", "single"}));
  recon->add_option("--out", recon_out, "Output directory")->required();

  auto* eval = app.add_subcommand("evaluate", "Bound, exact evidence, reconstruction and optional LDA");
  eval->add_option("--model", model_path, "Model JSON")->required()->check(CLI::ExistingFile);
  eval->add_option("--data", data_dir, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--labels", labels_path, "id,class CSV")->check(CLI::ExistingFile);
  eval->add_option("--mc-samples", mc_samples, "Draws per sample for the bound")->check(CLI::PositiveNumber);
  eval->add_option("--lda-repeats", lda_repeats, "Split-half repeats")->check(CLI::PositiveNumber);
  eval->add_option("--latent-combine", combine, "average or concatenate")
      ->check(CLI::IsMember({"average", "concatenate"}));
  eval->add_option("--out", eval_out, "Also write evaluation.json here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*gen) return cmd_generate(g, spec_path, gen_out);
    if (*fitc) return cmd_fit(g, config_path, fit_out);
    if (*sweep) return cmd_sweep(g, config_path, sweep_out);
    if (*recon) return cmd_reconstruct(g, model_path, data_dir, mode, recon_out);
    if (*eval) return cmd_evaluate(g, model_path, data_dir, labels_path, mc_samples, lda_repeats, combine, eval_out);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    switch (e.kind()) {
      case ErrorKind::usage: return 1;
      case ErrorKind::data: return 2;
      case ErrorKind::numerical: return 3;
    }
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
