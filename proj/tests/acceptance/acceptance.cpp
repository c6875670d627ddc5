// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
// criterion fails. Optional arguments select criteria by number.
#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <limits>
#include <random>
#include <set>
#include <string>
#include <thread>

#include "mcvi/mcvi.hpp"
#include "support/oracles.hpp"

using namespace mcvi;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::size_t workers() { return std::max(1u, std::thread::hardware_concurrency()); }

// Epoch count giving roughly `steps` Adam updates at the default batch size.
std::size_t epochs_for_steps(std::size_t samples, std::size_t steps, std::size_t batch = 64) {
  const std::size_t bs = std::min(batch, samples);
  const std::size_t per_epoch = (samples + bs - 1) / bs;
  return (steps + per_epoch - 1) / per_epoch;
}

MultiChannelModel fresh(const std::vector<Matrix>& data, std::size_t l, std::uint64_t seed) {
  std::vector<std::size_t> dims;
  for (const auto& x : data) dims.push_back(x.cols());
  Rng rng(seed);
  return init_model(rng, l, std::span<const std::size_t>(dims));
}

// --- 1 ----------------------------------------------------------------------

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Verdict gradient_correctness() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(101);
  double worst = 0.0;
  std::string worst_where;
  int failed = 0;
  std::size_t checked = 0;
  for (int m = 0; m < 20; ++m) {
    const std::size_t C = 1 + static_cast<std::size_t>(m % 3);
    const std::size_t l = 1 + rng.uniform_index(4);
    std::vector<std::size_t> dims;
    for (std::size_t c = 0; c < C; ++c) dims.push_back(1 + rng.uniform_index(8));
    const std::size_t batch = 1 + rng.uniform_index(16);
    const std::size_t draws = 1 + rng.uniform_index(2);
    const auto model = oracle::random_model(rng, l, dims);
    const auto x = oracle::random_batch(rng, dims, batch);
    // Pure relative criterion: no absolute escape for small gradients.
    const auto r = oracle::check_gradients(model, x, 1000 + static_cast<std::uint64_t>(m), draws, 1e-5, 1e-4, 0.0);
    checked += r.checked;
    if (!r.pass) ++failed;
    if (r.worst_rel > worst) {
      worst = r.worst_rel;
      worst_where = fmt("model %d %s", m, r.worst_param.c_str());
    }
  }
  const double secs = seconds_since(t0);
  return {failed == 0 && secs < 60.0,
          fmt("20 models, %zu parameters, worst relative error %.2e (%s), %d failing models; %.1f s", checked, worst,
              worst_where.c_str(), failed, secs)};
}

// --- 2 ----------------------------------------------------------------------

Verdict vae_collapse() {
  Rng rng(202);
  int exact = 0;
  double worst = 0.0;
  for (int k = 0; k < 10; ++k) {
    const std::size_t l = 1 + rng.uniform_index(5);
    const std::size_t d = 1 + rng.uniform_index(10);
    const std::size_t n = 1 + rng.uniform_index(20);
    const std::size_t draws = 1 + rng.uniform_index(4);
    const auto model = oracle::random_model(rng, l, {d});
    const auto x = oracle::random_batch(rng, {d}, n);
    const std::uint64_t seed = 5000 + static_cast<std::uint64_t>(k);
    const double lib = elbo_batch(model, x, seed, draws).total;
    const double ref = oracle::vae_elbo(model, x[0], seed, draws);
    exact += lib == ref ? 1 : 0;
    worst = std::max(worst, std::abs(lib - ref));
  }
  return {exact == 10, fmt("%d/10 cases bit-identical, max |difference| %.3g", exact, worst)};
}

// --- 3 ----------------------------------------------------------------------

Verdict bound_property() {
  const std::vector<ScenarioSpec> specs{
      {2, 8, 2, 500, 10.0, 1, 0},   {3, 16, 4, 1000, 10.0, 1, 0}, {5, 8, 3, 300, 1.0, 1, 0},
      {10, 4, 4, 1000, 10.0, 1, 0}, {2, 4, 4, 1000, 10.0, 1, 0},  {3, 16, 4, 100, 10.0, 1, 0},
      {3, 16, 4, 50, 10.0, 1, 0},   {3, 16, 1, 1000, 100.0, 1, 0}, {3, 32, 2, 500, 0.1, 1, 0},
      {2, 16, 10, 1000, 10.0, 1, 0}};
  const auto t0 = std::chrono::steady_clock::now();
  int hard = 0, below = 0;
  double min_z = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < specs.size(); ++k) {
    const auto ds = generate_scenario(specs[k]);
    TrainConfig cfg;
    cfg.learning_rate = 1e-2;
    cfg.seed = specs[k].seed();
    cfg.epochs = epochs_for_steps(specs[k].samples, 2000);
    auto model = fresh(ds.channels, specs[k].latent_dim, derive_seed(cfg.seed, fnv1a("init")));
    fit(model, ds.channels, cfg);
    const auto b = elbo_batch(model, ds.channels, derive_seed(cfg.seed, fnv1a("bound")), 64);
    const double nlb = -b.total;
    const double nll = -exact_log_evidence(linear_view(model), ds.channels);
    const double z = (nlb - nll) / b.mc_stderr;
    min_z = std::min(min_z, z);
    if (nlb < nll) ++below;
    if (nlb < nll - 3.0 * b.mc_stderr) ++hard;
    std::printf("  [3] %-34s NLB %.4f  exact NLL %.4f  gap %.4f  se %.4f\n", specs[k].label().c_str(), nlb, nll,
                nlb - nll, b.mc_stderr);
  }
  const double secs = seconds_since(t0);
  return {hard == 0 && secs < 600.0,
          fmt("10 scenarios, %d below exact NLL, %d beyond 3 se, min (NLB-NLL)/se %.2f; %.1f s", below, hard, min_z,
              secs)};
}

// --- 4, 5 -------------------------------------------------------------------

// Replication-averaged final NLB per latent dim; one dataset per replication.
Vector mean_nlb_curve(const std::string& name, const std::vector<std::size_t>& dims, std::size_t epochs) {
  Vector mean(dims.size(), 0.0);
  for (std::size_t rep = 1; rep <= 5; ++rep) {
    ScenarioSpec spec = preset(name);
    spec.replication = rep;
    const auto ds = generate_scenario(spec);
    TrainConfig cfg;
    cfg.learning_rate = 1e-2;
    cfg.epochs = epochs;
    cfg.seed = rep;
    SweepOptions opts;
    opts.replications = 1;
    opts.threads = workers();
    const auto sw = sweep_latent_dims(ds.channels, dims, cfg, opts);
    for (std::size_t k = 0; k < dims.size(); ++k) mean[k] += sw.nlb_mean[k] / 5.0;
    std::string row;
    for (double v : sw.nlb_mean) row += fmt(" %.3f", v);
    std::printf("  %s rep %zu NLB:%s\n", name.c_str(), rep, row.c_str());
  }
  return mean;
}

// drop(3->4) / drop(4->5); a flat or rising continuation counts as infinite.
double drop_ratio(double n3, double n4, double n5) {
  const double d34 = n3 - n4, d45 = n4 - n5;
  if (d45 <= 0.0) return std::numeric_limits<double>::infinity();
  return d34 / d45;
}

Verdict elbow() {
  const std::vector<std::size_t> dims{1, 2, 3, 4, 5, 6, 7, 8};
  const auto t0 = std::chrono::steady_clock::now();
  const Vector m = mean_nlb_curve("elbow", dims, 300);
  const double minutes = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 60.0;
  const double d34 = m[2] - m[3], d45 = m[3] - m[4];
  const bool ok = d34 > 0.0 && d34 >= 5.0 * d45 && minutes < 30.0;
  std::string curve;
  for (double v : m) curve += fmt(" %.3f", v);
  return {ok, fmt("mean NLB%s; drop 3->4 %.4f, drop 4->5 %.4f, ratio %.1f; %.1f min", curve.c_str(), d34, d45,
                  drop_ratio(m[2], m[3], m[4]), minutes)};
}

Verdict channel_count() {
  const std::vector<std::size_t> dims{3, 4, 5};
  const Vector two = mean_nlb_curve("channels-2", dims, 300);
  const Vector ten = mean_nlb_curve("channels-10", dims, 300);
  const double r2 = drop_ratio(two[0], two[1], two[2]);
  const double r10 = drop_ratio(ten[0], ten[1], ten[2]);
  return {r10 > r2, fmt("ratio C=10 %.3g (drops %.4f / %.4f), C=2 %.3g (drops %.4f / %.4f)", r10, ten[0] - ten[1],
                        ten[1] - ten[2], r2, two[0] - two[1], two[1] - two[2])};
}

// --- 6 ----------------------------------------------------------------------

Verdict reconstruction() {
  GridRanges g;
  g.dims = {4, 8, 16, 32};
  g.samples = {50, 100, 1000};
  g.replications = 5;
  const auto specs = enumerate_grid(default_base_scenario(), g);
  const auto t0 = std::chrono::steady_clock::now();
  std::size_t cells = 0, good = 0, skipped = 0;
  double sum = 0.0, worst = 0.0;
  std::string worst_cell;
  for (const auto& sp : specs) {
    if (sp.dim < sp.latent_dim) {
      ++skipped;
      continue;
    }
    const auto ds = generate_scenario(sp);
    auto [train, test] = train_test_split(ds, 0.2, derive_seed(sp.seed(), 5));
    TrainConfig cfg;
    cfg.learning_rate = 1e-2;
    cfg.seed = sp.seed();
    cfg.epochs = epochs_for_steps(train.samples(), 5000);
    auto model = fresh(train.channels, sp.latent_dim, derive_seed(sp.seed(), 9));
    fit(model, train.channels, cfg);
    const auto rr = reconstruction_report(model, test.channels, test.signals, "signal");
    double multi = 0.0, single = 0.0;
    for (std::size_t i = 0; i < rr.mse_multi.size(); ++i) {
      multi += rr.mse_multi[i];
      single += rr.mse_single[i];
    }
    const double ratio = multi / single;
    ++cells;
    good += ratio <= 1.0 ? 1 : 0;
    sum += ratio;
    if (ratio > worst) {
      worst = ratio;
      worst_cell = sp.label();
    }
    std::printf("  [6] %-40s ratio %.4f\n", sp.label().c_str(), ratio);
  }
  const double hours = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 3600.0;
  const double frac = static_cast<double>(good) / static_cast<double>(cells);
  const double mean = sum / static_cast<double>(cells);
  return {frac >= 0.95 && mean < 1.0 && hours < 2.0,
          fmt("%zu cells (%zu skipped with d<l), %zu with ratio <= 1 (%.1f%%), mean ratio %.4f, worst %.4f (%s); "
              "%.2f h",
              cells, skipped, good, 100.0 * frac, mean, worst, worst_cell.c_str(), hours)};
}

// --- 7 ----------------------------------------------------------------------

Verdict snr_law() {
  double worst = 0.0;
  for (double snr : {100.0, 10.0, 1.0, 0.1}) {
    const auto ds = generate_scenario({3, 16, 4, 10000, snr, 1, 0});
    const double target = 1.0 + 1.0 / snr;
    for (const auto& x : ds.channels) {
      for (std::size_t j = 0; j < x.cols(); ++j) {
        double m = 0.0, v = 0.0;
        for (std::size_t s = 0; s < x.rows(); ++s) m += x(s, j);
        m /= static_cast<double>(x.rows());
        for (std::size_t s = 0; s < x.rows(); ++s) v += (x(s, j) - m) * (x(s, j) - m);
        v /= static_cast<double>(x.rows());
        worst = std::max(worst, std::abs(v / target - 1.0));
      }
    }
  }
  return {worst <= 0.05, fmt("4 snr values x 48 coordinates, worst relative deviation %.2f%%", 100.0 * worst)};
}

// --- 8 ----------------------------------------------------------------------

Verdict posterior_approach() {
  const auto spec = preset("easy");
  const auto ds = generate_scenario(spec);
  const auto truth = ground_truth_model(ds);
  auto model = fresh(ds.channels, spec.latent_dim, 808);
  const double before = average_posterior_kl(model, ds.channels, truth, true);
  TrainConfig cfg;
  cfg.learning_rate = 1e-2;
  cfg.epochs = 100;
  cfg.seed = 8;
  fit(model, ds.channels, cfg);
  const double after = average_posterior_kl(model, ds.channels, truth, true);
  return {before >= 10.0 * after, fmt("aligned KL to the exact posterior %.4f -> %.4f (%.1fx)", before, after,
                                      before / after)};
}

// --- 9 ----------------------------------------------------------------------

Verdict lda_sanity() {
  Rng rng(909);
  const Matrix x = standard_normal_matrix(rng, 400, 3);
  std::vector<int> y(400);
  for (std::size_t s = 0; s < 400; ++s) y[s] = static_cast<int>(s % 2);
  rng.shuffle(y);
  const double chance = lda_split_half(x, y, 1, 50).mean_accuracy;

  Matrix g(5000, 1);
  std::vector<int> gy(5000);
  for (std::size_t s = 0; s < 5000; ++s) {
    gy[s] = static_cast<int>(s % 2);
    g(s, 0) = (gy[s] ? 1.0 : -1.0) + rng.normal();
  }
  const double bayes = 0.5 * std::erfc(-1.0 / std::sqrt(2.0));
  const double acc = lda_split_half(g, gy, 2, 20).mean_accuracy;
  return {std::abs(chance - 0.5) <= 0.05 && std::abs(acc - bayes) <= 0.03,
          fmt("shuffled labels %.4f; two Gaussians at +-1, S=5000: %.4f vs Bayes rate %.4f", chance, acc, bayes)};
}

// --- 10 ---------------------------------------------------------------------

int shell(const std::string& cmd) {
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Verdict end_to_end() {
  const fs::path root = fs::temp_directory_path() / ("mcvi_acceptance_" + std::to_string(std::random_device{}()));
  fs::create_directories(root);
  const std::string cli = std::string("'") + MCVI_CLI_PATH + "'";
  write_json_file(root / "spec.json", Json{{"schema_version", 1},
                                           {"preset", "base"},
                                           {"labels", {{"latent", 0}, {"threshold", 0.0}}}});
  write_json_file(root / "sweep.json", Json{{"schema_version", 1},
                                            {"data", {{"dir", "data"}, {"labels", "data/labels.csv"}}},
                                            {"latent_dims", {2, 4, 6}},
                                            {"replications", 2},
                                            {"train", {{"learning_rate", 0.01}, {"epochs", 150}}},
                                            {"evaluate", {{"lda_repeats", 10}}},
                                            {"output_dir", "out"}});
  Verdict v;
  const std::string r = "'" + root.string() + "'";
  const int gen = shell(cli + " --quiet generate --spec " + r + "/spec.json --out " + r + "/data");
  const int sw = gen == 0 ? shell(cli + " --quiet sweep --config " + r + "/sweep.json") : -1;
  if (gen != 0 || sw != 0) {
    v.detail = fmt("generate exit %d, sweep exit %d", gen, sw);
  } else {
    const Json rep = parse_json_file(root / "out" / "sweep.json")["report"];
    double acc4 = -1.0;
    std::string accs;
    bool complete = true;
    for (const auto& d : rep["dims"]) {
      if (d["lda_accuracy"].is_null() || d["nlb_mean"].is_null()) {
        complete = false;
        continue;
      }
      accs += fmt(" l=%d:%.3f", d["latent_dim"].get<int>(), d["lda_accuracy"].get<double>());
      if (d["latent_dim"] == 4) acc4 = d["lda_accuracy"].get<double>();
    }
    for (const auto& c : rep["cells"]) complete = complete && c["ok"].get<bool>();
    v.pass = complete && acc4 > 0.8;
    v.detail = fmt("CLI generate -> CSV -> sweep; all cells %s; LDA accuracy%s (true l=4: %.3f)",
                   complete ? "completed" : "NOT completed", accs.c_str(), acc4);
  }
  fs::remove_all(root);
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Verdict()>>> criteria{
      {"gradient correctness", gradient_correctness},
      {"VAE collapse at C=1", vae_collapse},
      {"bound property", bound_property},
      {"elbow reproduction", elbow},
      {"channel-count effect", channel_count},
      {"multi vs single reconstruction", reconstruction},
      {"SNR covariance law", snr_law},
      {"posterior approach", posterior_approach},
      {"LDA evaluator sanity", lda_sanity},
      {"end-to-end pipeline with synthetic labels", end_to_end},
  };
  std::set<int> selected;
  for (int k = 1; k < argc; ++k) selected.insert(std::atoi(argv[k]));
  int failures = 0;
  for (std::size_t k = 0; k < criteria.size(); ++k) {
    const int id = static_cast<int>(k + 1);
    if (!selected.empty() && !selected.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = criteria[k].second();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%s criterion %d (%s): %s [%.1f s]\n", v.pass ? "PASS" : "FAIL", id, criteria[k].first,
                v.detail.c_str(), secs);
    std::fflush(stdout);
    failures += v.pass ? 0 : 1;
  }
  return failures == 0 ? 0 : 1;
}
