// normlab: command-line driver for the experiments.
//
//   normlab run    --config cfg.json [--out DIR] [--seed S] [--threads N]
//   normlab sweep  --config base.json --lambdas 0,0.1,1 [--out DIR] [--seed S] [--threads N]
//   normlab report PATH          (summary.json or a run directory)
//
// Exit codes: 0 success, 2 invalid configuration, 1 any other failure. Errors
// are printed to stderr as one JSON object.

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "normlab/experiment.hpp"
#include "normlab/kernels.hpp"
#include "normlab/rng.hpp"

#ifndef NORMLAB_VERSION
#define NORMLAB_VERSION "0.0.0"
#endif

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace normlab;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string read_file(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw Error("cannot read " + p.string());
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  f << text;
  if (!f) throw Error("cannot write " + p.string());
}

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

int report_error(const char* kind, const std::string& path, const std::string& message, int code) {
  json e;
  e["error"] = kind;
  if (!path.empty()) e["path"] = path;
  e["message"] = message;
  std::cerr << e.dump() << '\n';
  return code;
}

struct RunOptions {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  int threads = 0;
  std::vector<double> lambdas;  // sweep only
};

std::uint64_t parse_seed(const std::string& text, const std::string& what) {
  if (text.empty() || text.find_first_not_of("0123456789") != std::string::npos)
    throw ConfigError(what, "expected an unsigned integer, got '" + text + "'");
  try {
    return std::stoull(text);
  } catch (const std::out_of_range&) {
    throw ConfigError(what, "value does not fit in 64 bits");
  }
}

int execute(const RunOptions& opt, bool sweep) {
  const std::string started = utc_now();
  ExperimentConfig cfg = parse_config(read_file(opt.config));

  std::string seed_source = "config";
  if (opt.seed) {
    cfg.seed = *opt.seed;
    seed_source = "flag";
  } else if (const char* env = std::getenv("NORMLAB_SEED")) {
    cfg.seed = parse_seed(env, "NORMLAB_SEED");
    seed_source = "env";
  }
  if (sweep) {
    cfg.experiment = ExperimentKind::LambdaSweep;
    if (!opt.lambdas.empty()) cfg.lambdas = opt.lambdas;
  }
  if (!opt.out.empty()) cfg.output_dir = opt.out;
  // Re-validate through the strict parser so overrides obey the same rules.
  const std::string resolved = to_json(cfg);
  cfg = parse_config(resolved);

  if (opt.threads > 0) kernels::set_num_threads(opt.threads);
  std::cerr << "normlab: " << experiment_name(cfg.experiment) << " seed=" << cfg.seed << " (from " << seed_source
            << ") threads=" << kernels::num_threads() << " out=" << cfg.output_dir << '\n';

  const fs::path out = cfg.output_dir;
  fs::create_directories(out);
  write_file(out / "config.resolved.json", resolved);
  RunResult res = run_experiment(cfg, out);

  json manifest;
  manifest["artifact_version"] = NORMLAB_VERSION;
  manifest["experiment"] = experiment_name(cfg.experiment);
  manifest["config_hash"] = hex64(fnv1a(resolved.data(), resolved.size()));
  manifest["seed"] = cfg.seed;
  manifest["seed_source"] = seed_source;
  manifest["threads"] = kernels::num_threads();
  manifest["started_utc"] = started;
  manifest["finished_utc"] = utc_now();
  json files = json::array({"config.resolved.json"});
  for (const auto& f : res.files) files.push_back(f);
  manifest["files"] = files;
  write_file(out / "run_manifest.json", manifest.dump(2) + "\n");
  std::cout << render_report(res.summary_json);
  return 0;
}

int report(const std::string& path) {
  fs::path p = path;
  if (fs::is_directory(p)) p /= "summary.json";
  std::cout << render_report(read_file(p));
  return 0;
}

void add_run_flags(CLI::App* cmd, RunOptions& opt, std::string& seed_text) {
  cmd->add_option("--config", opt.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--out", opt.out, "output directory (overrides output_dir)");
  cmd->add_option("--seed", seed_text, "top-level seed (overrides NORMLAB_SEED and the config)");
  cmd->add_option("--threads", opt.threads, "worker threads")->check(CLI::PositiveNumber);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"normlab: normalization-bias experiments"};
  app.require_subcommand(1);
  app.set_version_flag("--version", NORMLAB_VERSION);

  RunOptions opt;
  std::string seed_text;
  auto* run = app.add_subcommand("run", "run one experiment");
  add_run_flags(run, opt, seed_text);
  auto* sweep = app.add_subcommand("sweep", "CT lambda sweep on a shortcut config");
  add_run_flags(sweep, opt, seed_text);
  sweep->add_option("--lambdas", opt.lambdas, "comma-separated lambda values")->delimiter(',');
  std::string report_path;
  auto* rep = app.add_subcommand("report", "print a summary JSON as an aligned table");
  rep->add_option("path", report_path, "summary.json or a run directory")->required()->check(CLI::ExistingPath);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kExitConfig;
  }

  try {
    if (!seed_text.empty()) opt.seed = parse_seed(seed_text, "--seed");
    if (*rep) return report(report_path);
    return execute(opt, static_cast<bool>(*sweep));
  } catch (const ConfigError& e) {
    return report_error("config", e.path(), e.what(), kExitConfig);
  } catch (const std::exception& e) {
    return report_error("runtime", "", e.what(), kExitRuntime);
  }
}
