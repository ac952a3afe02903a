// Command-line front end: simulate / fit / predict / validate over CSV files.
// Every run is a pure function of its config file and seed; timestamps and
// wall-clock figures appear only in summary.txt.

#include <CLI11.hpp>

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>

#include "golf/io.hpp"
#include "golf/oracle.hpp"
#include "golf/sampler.hpp"

namespace fs = std::filesystem;

namespace {

struct Options {
  std::string config_path;
  std::string out_dir;
  bool force = false;
  std::uint64_t seed = 0;
  bool seed_given = false;
  int threads = -1;  // -1: leave the library default (serial)
  bool inject_bug = false;
};

std::string read_config_file(const std::string& path) {
  try {
    return golf::io::read_text_file(path);
  } catch (const golf::data_error&) {
    throw golf::config_error("cannot read config file: " + path);
  }
}

// Config echo written next to simulated data. A command-line seed override
// replaces any seed line so the echo reproduces what actually ran.
std::string effective_config_text(const std::string& text, const Options& opt) {
  if (!opt.seed_given) return text;
  std::string out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const std::size_t nl = text.find('\n', pos);
    const std::size_t end = nl == std::string::npos ? text.size() : nl + 1;
    const std::string line = text.substr(pos, end - pos);
    pos = end;
    const std::string_view key = golf::io::trim(
        std::string_view(line).substr(0, std::min(line.find('='), line.find('#'))));
    if (key != "seed") out += line;
  }
  if (!out.empty() && out.back() != '\n') out += '\n';
  out += "seed=" + std::to_string(opt.seed) + "\n";
  return out;
}

golf::LatticeData load_data(const golf::io::RunConfig& rc, const char* cmd) {
  if (rc.data_csv.empty() || rc.coords_s_csv.empty() || rc.coords_x_csv.empty())
    throw golf::config_error(std::string(cmd) +
                             ": config must set data, coords_s, and coords_x");
  return golf::io::read_lattice(rc.data_csv, rc.coords_s_csv, rc.coords_x_csv);
}

int cmd_simulate(golf::io::RunConfig& rc, const Options& opt, const std::string& config_text) {
  if (opt.out_dir.empty()) throw golf::config_error("simulate: --out DIR is required");
  if (fs::exists(opt.out_dir) && !fs::is_empty(opt.out_dir) && !opt.force)
    throw golf::config_error("simulate: output directory is not empty, pass --force: " +
                             opt.out_dir);
  const golf::oracle::SimData sim = golf::oracle::simulate(rc.sim);
  golf::io::write_lattice(opt.out_dir, sim.data, &sim.truth);
  golf::io::write_text_file(opt.out_dir + "/config.txt", effective_config_text(config_text, opt));
  std::printf("simulate: wrote %dx%d lattice (%lld observed, %lld missing) to %s\n",
              sim.data.n1(), sim.data.n2(), static_cast<long long>(sim.data.n_obs()),
              static_cast<long long>(sim.data.n_missing()), opt.out_dir.c_str());
  return 0;
}

int cmd_fit(golf::io::RunConfig& rc, const Options& opt) {
  const std::string dir = !opt.out_dir.empty() ? opt.out_dir : rc.chain_dir;
  if (dir.empty()) throw golf::config_error("fit: set chain=DIR in the config or pass --out");
  const golf::LatticeData data = load_data(rc, "fit");
  if (!rc.h1_csv.empty()) rc.mcmc.h1 = golf::io::read_full_matrix(rc.h1_csv);
  if (!rc.h2_csv.empty()) rc.mcmc.h2 = golf::io::read_full_matrix(rc.h2_csv);
  golf::io::apply_prior_overrides(rc, data.coords_x);

  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw golf::data_error("fit: cannot create chain directory: " + dir);

  const auto t0 = std::chrono::steady_clock::now();
  std::optional<golf::io::DirLock> lock;
  golf::Chain chain;
  if (rc.resume) {
    golf::Chain prev = golf::io::load_chain(dir);
    if (opt.seed_given && opt.seed != prev.config.seed)
      throw golf::config_error("fit: a resumed chain keeps its original seed");
    lock.emplace(dir);
    golf::McmcConfig cont = prev.config;
    cont.iterations = rc.mcmc.iterations;  // the new total, counting what already ran
    prev.append(golf::mcmc_run(cont, data, &prev.state));
    chain = std::move(prev);
  } else {
    if (fs::exists(dir + "/meta.txt") && !opt.force)
      throw golf::config_error(
          "fit: chain directory already holds a run; pass --force to overwrite it or set "
          "resume=true to continue it: " +
          dir);
    lock.emplace(dir);
    chain = golf::mcmc_run(rc.mcmc, data);
  }
  golf::io::save_chain(dir, chain);
  const double elapsed =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  golf::io::write_summary(dir + "/summary.txt", chain, elapsed);
  golf::io::write_posterior_csv(dir + "/posterior.csv", chain);

  std::printf("fit: %lld stored draws (%lld iterations, d=%d) in %s\n",
              static_cast<long long>(chain.rows()),
              static_cast<long long>(chain.config.iterations), chain.d, dir.c_str());
  std::string acc;
  const Eigen::VectorXd rates = chain.kernel_accept_rates();
  for (Eigen::Index i = 0; i < rates.size(); ++i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%s%.2f", i ? " " : "", rates[i]);
    acc += buf;
  }
  std::printf("fit: acceptance beta0 %.2f, kernel %s; %.1f s wall clock\n",
              chain.beta0_accept_rate(), acc.c_str(), elapsed);
  return 0;
}

int cmd_predict(const golf::io::RunConfig& rc, const Options& opt) {
  if (rc.chain_dir.empty()) throw golf::config_error("predict: set chain=DIR in the config");
  const golf::LatticeData data = load_data(rc, "predict");
  const golf::Chain chain = golf::io::load_chain(rc.chain_dir);
  const golf::Prediction pred = golf::predict(chain, data, rc.level);
  const std::string out = !opt.out_dir.empty() ? opt.out_dir : rc.chain_dir + "/prediction";
  golf::io::write_prediction(out, pred);
  char level_str[32];
  std::snprintf(level_str, sizeof level_str, "%g", rc.level);
  std::printf("predict: %lld post-burn-in draws, %s intervals, written to %s\n",
              static_cast<long long>(pred.draws), pred.has_intervals ? level_str : "no",
              out.c_str());
  if (!rc.truth_csv.empty()) {
    const Eigen::MatrixXd truth = golf::io::read_full_matrix(rc.truth_csv);
    if (truth.rows() != data.y.rows() || truth.cols() != data.y.cols())
      throw golf::data_error("predict: truth matrix shape does not match the data");
    const golf::oracle::Metrics m = golf::oracle::compute_metrics(
        pred.mean, pred.has_intervals ? &pred.lower : nullptr,
        pred.has_intervals ? &pred.upper : nullptr, truth, data.observed);
    golf::io::write_metrics(out + "/metrics.csv", m);
    std::printf("predict: held-out rmse %.6g coverage %.4g length %.6g over %lld cells\n",
                m.rmse, m.coverage, m.length, static_cast<long long>(m.cells));
  }
  return 0;
}

int cmd_validate(const golf::io::RunConfig& rc, const Options& opt) {
  const std::uint64_t seed = opt.seed_given ? opt.seed : rc.mcmc.seed;
  const golf::oracle::EquivalenceReport rep =
      golf::oracle::equivalence_suite(seed, rc.validate_instances, opt.inject_bug);

  std::string table;
  char line[160];
  std::snprintf(line, sizeof line, "equivalence suite: %d instances, seed %llu%s\n",
                rep.instances, static_cast<unsigned long long>(rep.seed),
                opt.inject_bug ? ", transition noise corrupted" : "");
  table += line;
  std::snprintf(line, sizeof line, "%-18s %-12s %-9s %s\n", "check", "max_err", "tol",
                "result");
  table += line;
  for (const golf::oracle::OpCheck& c : rep.checks) {
    std::snprintf(line, sizeof line, "%-18s %-12.3e %-9.0e %s\n", c.op, c.max_err, c.tol,
                  c.pass() ? "pass" : "FAIL");
    table += line;
  }
  table += rep.all_pass() ? "overall: PASS\n" : "overall: FAIL\n";
  std::fputs(table.c_str(), stdout);
  if (!opt.out_dir.empty()) {
    std::error_code ec;
    fs::create_directories(opt.out_dir, ec);
    if (ec) throw golf::data_error("validate: cannot create output directory: " + opt.out_dir);
    golf::io::write_text_file(opt.out_dir + "/report.txt", table);
  }
  if (!rep.all_pass())
    throw golf::numeric_error("validate: fast and dense paths disagree beyond tolerance");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Exact Bayesian inference for orthogonal latent factor Gaussian processes"};
  app.require_subcommand(1);
  Options opt;
  app.add_option("--config", opt.config_path, "key=value run configuration file")
      ->required();
  app.add_option("--out", opt.out_dir, "output directory (overrides the config where relevant)");
  app.add_flag("--force", opt.force, "overwrite existing outputs");
  CLI::Option* seed_opt =
      app.add_option("--seed", opt.seed, "master seed, overrides the config");
  app.add_option("--threads", opt.threads, "worker threads, 0 = all hardware threads")
      ->check(CLI::NonNegativeNumber);

  CLI::App* sub_sim =
      app.add_subcommand("simulate", "generate a lattice data set and write its files");
  CLI::App* sub_fit = app.add_subcommand("fit", "run the sampler and persist the chain");
  CLI::App* sub_pred =
      app.add_subcommand("predict", "posterior predictions from a persisted chain");
  CLI::App* sub_val =
      app.add_subcommand("validate", "randomized fast-vs-dense equivalence suite");
  bool inject = false;
  sub_val->add_flag("--inject-bug", inject,
                    "corrupt the state transition noise; the suite must then fail");
  for (CLI::App* s : {sub_sim, sub_fit, sub_pred, sub_val}) s->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  opt.seed_given = seed_opt->count() > 0;
  opt.inject_bug = inject;
  if (opt.threads >= 0) golf::set_num_threads(opt.threads);

  try {
    const std::string config_text = read_config_file(opt.config_path);
    golf::io::RunConfig rc = golf::io::parse_run_config(config_text);
    if (opt.seed_given) {
      rc.mcmc.seed = opt.seed;
      rc.sim.seed = opt.seed;
    }
    if (sub_sim->parsed()) return cmd_simulate(rc, opt, config_text);
    if (sub_fit->parsed()) return cmd_fit(rc, opt);
    if (sub_pred->parsed()) return cmd_predict(rc, opt);
    return cmd_validate(rc, opt);
  } catch (const golf::config_error& e) {
    std::fprintf(stderr, "golf: %s\n", e.what());
    return 2;
  } catch (const golf::data_error& e) {
    std::fprintf(stderr, "golf: %s\n", e.what());
    return 3;
  } catch (const golf::numeric_error& e) {
    std::fprintf(stderr, "golf: %s\n", e.what());
    return 4;
  } catch (const golf::invalid_parameter& e) {
    std::fprintf(stderr, "golf: %s\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "golf: internal error: %s\n", e.what());
    return 4;
  }
}
