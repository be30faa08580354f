#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "normlab/experiment.hpp"
#include "normlab/kernels.hpp"

using namespace normlab;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr ExperimentKind kAllKinds[] = {
    ExperimentKind::TheoryMinNorm, ExperimentKind::TheoryMaxMargin,      ExperimentKind::TheoryCentering,
    ExperimentKind::Shortcut,      ExperimentKind::CorruptionRobustness, ExperimentKind::BnAdaptation,
    ExperimentKind::LambdaSweep,   ExperimentKind::Calibration};

std::string read(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("normlab_test_" + name);
  fs::remove_all(p);
  return p;
}

// A shortcut-family config small enough to train in a second or two.
ExperimentConfig tiny(ExperimentKind kind) {
  auto c = default_config(kind);
  c.replicates = 1;
  c.data.height = c.data.width = 12;
  c.data.square_size = 2;
  c.data.red_square_pos = {1, 1};
  c.data.blue_square_pos = {9, 9};
  c.data.jitter = 1;
  c.data.train_size = 32;
  c.data.test_size = 16;
  c.data.validation_size = 16;
  for (auto* t : {&c.teacher, &c.student}) {
    t->epochs = 1;
    t->batch_size = 16;
  }
  c.adaptation.batch_size = 8;
  c.corruption.severities = {1, 5};
  return c;
}

ExperimentConfig small_theory(ExperimentKind kind) {
  auto c = default_config(kind);
  c.theory.seeds = 10;
  c.theory.projection_instances = 5;
  c.theory.maxmargin_instances = 5;
  c.theory.support_dims = {12, 24};
  c.theory.centering_instances = 5;
  return c;
}

std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files[fs::relative(e.path(), dir).string()] = read(e.path());
  return files;
}

void expect_config_error(const std::string& text, const std::string& path) {
  try {
    parse_config(text);
    ADD_FAILURE() << "accepted: " << text;
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.path(), path) << e.what();
  }
}

}  // namespace

TEST(Config, DefaultsRoundTripForEveryExperiment) {
  for (auto k : kAllKinds) {
    const auto c = default_config(k);
    EXPECT_EQ(c.experiment, k);
    const auto text = to_json(c);
    EXPECT_TRUE(parse_config(text) == c) << experiment_name(k);
    EXPECT_EQ(to_json(parse_config(text)), text);
    EXPECT_EQ(parse_experiment(experiment_name(k)), k);
  }
}

TEST(Config, MissingFieldsTakePresetDefaults) {
  const auto c = parse_config(R"({"experiment": "bn_adaptation", "seed": 9})");
  auto expected = default_config(ExperimentKind::BnAdaptation);
  expected.seed = 9;
  EXPECT_TRUE(c == expected);
}

TEST(Config, ModifiedValuesRoundTrip) {
  auto c = tiny(ExperimentKind::Shortcut);
  c.student.optimizer.kind = OptimizerKind::Adam;
  c.student.schedule.kind = ScheduleKind::Step;
  c.student.schedule.at_epochs = {3, 7};
  c.lambdas = {0.0, 2.5};
  c.corruption.kinds = {CorruptionKind::Contrast};
  c.model.preset = "mlp";
  c.model.hidden = {32, 16};
  EXPECT_TRUE(parse_config(to_json(c)) == c);
}

TEST(Config, StrictErrorsCarryFieldPaths) {
  expect_config_error(R"({"seed": 1})", "experiment");
  expect_config_error(R"({"experiment": "nope"})", "experiment");
  expect_config_error(R"({"experiment": "shortcut", "extra": 1})", "extra");
  expect_config_error(R"({"experiment": "shortcut", "student": {"optimizer": {"lr": -1}}})", "student.optimizer.lr");
  expect_config_error(R"({"experiment": "shortcut", "student": {"optimizer": {"typo": 1}}})",
                      "student.optimizer.typo");
  expect_config_error(R"({"experiment": "shortcut", "teacher": {"epochs": "ten"}})", "teacher.epochs");
  expect_config_error(R"({"experiment": "shortcut", "lambdas": [1, -2]})", "lambdas[1]");
  expect_config_error(R"({"experiment": "shortcut", "corruption": {"kinds": ["fog"]}})", "corruption.kinds[0]");
  expect_config_error(R"({"experiment": "shortcut", "corruption": {"severities": [6]}})",
                      "corruption.severities[0]");
  expect_config_error(R"({"experiment": "theory_minnorm", "theory": {"n": 100, "d": 100}})", "theory.n");
  expect_config_error(R"({"experiment": "shortcut", "model": {"preset": "resnet"}})", "model.preset");
  expect_config_error(R"({"experiment": "shortcut", "seed": -1})", "seed");
  expect_config_error("{not json", "");
  expect_config_error(R"({"experiment": "shortcut", "data": {"square_size": 30}})", "data");
}

TEST(Config, StudentSpecFollowsPreset) {
  auto c = default_config(ExperimentKind::Shortcut);
  EXPECT_EQ(student_spec(c), appendix_cnn(3, 28, 28, 2));
  c.model.preset = "mlp";
  const auto s = student_spec(c);
  EXPECT_EQ(s.count(LayerKind::BatchNorm), 1u);
  EXPECT_EQ(validate(s).back(), (Shape{2}));
}

TEST(Experiments, TheoryRunsWriteTablesAndAreByteStable) {
  for (auto k : {ExperimentKind::TheoryMinNorm, ExperimentKind::TheoryMaxMargin, ExperimentKind::TheoryCentering}) {
    const auto a = temp_dir(std::string("theory_a_") + experiment_name(k));
    const auto b = temp_dir(std::string("theory_b_") + experiment_name(k));
    const auto res = run_experiment(small_theory(k), a);
    run_experiment(small_theory(k), b);
    EXPECT_GE(res.files.size(), 2u);
    for (const auto& f : res.files) EXPECT_TRUE(fs::exists(a / f)) << f;
    EXPECT_EQ(snapshot(a), snapshot(b));
    const auto summary = json::parse(res.summary_json);
    EXPECT_EQ(summary["experiment"], experiment_name(k));
    fs::remove_all(a);
    fs::remove_all(b);
  }
}

TEST(Experiments, ShortcutPipelineOutputs) {
  const auto dir = temp_dir("shortcut");
  const auto res = run_experiment(tiny(ExperimentKind::Shortcut), dir);
  const auto s = json::parse(res.summary_json);
  for (const char* m : {"NoBN", "wBN", "CT"})
    for (const char* split : {"Both", "RedOnly", "BlueOnly", "None"})
      EXPECT_TRUE(s["models"][m]["split_error_median"].contains(split));
  const auto csv = read(dir / "split_errors.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "replicate,model,lambda,selected,Both,RedOnly,BlueOnly,None");
  EXPECT_TRUE(fs::exists(dir / "checkpoints/r0_CT/weights.bin"));
  EXPECT_TRUE(fs::exists(dir / "weight_hist_wBN.csv"));
  EXPECT_TRUE(fs::exists(dir / "traces/r0_CT_lambda10.csv"));
  fs::remove_all(dir);
}

TEST(Experiments, LambdaZeroReproducesTheBaseline) {
  auto c = tiny(ExperimentKind::LambdaSweep);
  c.lambdas = {1.0, 0.0};
  const auto sm = train_shortcut_models(c, 0);
  ASSERT_EQ(sm.ct.size(), 2u);
  EXPECT_EQ(sm.ct[1].state_hash(), sm.wbn.state_hash());
  EXPECT_EQ(sm.ct_traces[1].step_loss, sm.wbn_trace.step_loss);

  const auto dir = temp_dir("sweep");
  run_experiment(c, dir);
  std::istringstream rows(read(dir / "lambda_sweep.csv"));
  std::string line;
  std::getline(rows, line);
  std::vector<double> lambdas;
  double zero_none = -1;
  while (std::getline(rows, line)) {
    std::stringstream ls(line);
    std::vector<std::string> f;
    for (std::string x; std::getline(ls, x, ',');) f.push_back(x);
    lambdas.push_back(std::stod(f[1]));
    if (lambdas.back() == 0.0) zero_none = std::stod(f[3]);
  }
  EXPECT_EQ(lambdas, (std::vector<double>{0.0, 1.0}));
  std::istringstream base(read(dir / "baselines.csv"));
  std::getline(base, line);
  std::getline(base, line);  // wBN row
  EXPECT_NEAR(std::stod(line.substr(line.rfind(',') + 1)), zero_none, 1e-12);
  fs::remove_all(dir);
}

TEST(Experiments, SingleLambdaSweepEqualsPlainCtRun) {
  auto c = tiny(ExperimentKind::LambdaSweep);
  c.lambdas = {1.0};
  const auto sweep = train_shortcut_models(c, 0);
  auto plain = tiny(ExperimentKind::Shortcut);
  plain.lambdas = {1.0};
  const auto run = train_shortcut_models(plain, 0);
  EXPECT_EQ(sweep.ct[0].state_hash(), run.ct[0].state_hash());
}

TEST(Experiments, NeuralRunsAreIdenticalAcrossThreadCounts) {
  for (auto k : {ExperimentKind::CorruptionRobustness, ExperimentKind::BnAdaptation, ExperimentKind::Calibration}) {
    const auto a = temp_dir("threads_a"), b = temp_dir("threads_b");
    const int saved = kernels::num_threads();
    kernels::set_num_threads(1);
    run_experiment(tiny(k), a);
    kernels::set_num_threads(4);
    run_experiment(tiny(k), b);
    kernels::set_num_threads(saved);
    EXPECT_EQ(snapshot(a), snapshot(b)) << experiment_name(k);
    fs::remove_all(a);
    fs::remove_all(b);
  }
}

TEST(Report, RendersAlignedRows) {
  const auto text = render_report(R"({"a": 1, "nested": {"bb": 0.5, "list": [{"x": true}]}})");
  EXPECT_NE(text.find("a                 1\n"), std::string::npos) << text;
  EXPECT_NE(text.find("nested.bb         0.5\n"), std::string::npos) << text;
  EXPECT_NE(text.find("nested.list[0].x"), std::string::npos);
  EXPECT_THROW(render_report("{"), Error);
}

// ---------------------------------------------------------------------------
// Command-line driver

namespace {

int cli(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + " " NORMLAB_CLI_PATH " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

fs::path write_config(const std::string& name, const std::string& text) {
  const auto p = fs::temp_directory_path() / ("normlab_cfg_" + name + ".json");
  std::ofstream(p) << text;
  return p;
}

}  // namespace

TEST(Cli, ExitCodes) {
  const auto bad = write_config("bad", R"({"experiment": "theory_minnorm", "theory": {"seeds": "x"}})");
  const auto ok = write_config("ok", R"({"experiment": "theory_centering", "theory": {"centering_instances": 3}})");
  const auto out = temp_dir("cli_out");
  EXPECT_EQ(cli("run --config " + bad.string() + " --out " + out.string()), 2);
  EXPECT_EQ(cli("run --config /nonexistent.json"), 2);
  EXPECT_EQ(cli("frobnicate"), 2);
  EXPECT_EQ(cli("run --config " + ok.string() + " --out " + out.string() + " --seed abc"), 2);
  EXPECT_EQ(cli("run --config " + ok.string() + " --out " + out.string(), "NORMLAB_SEED=-4"), 2);
  EXPECT_EQ(cli("run --config " + ok.string() + " --out " + out.string() + " --threads 2"), 0);
  EXPECT_EQ(cli("report " + out.string()), 0);
  EXPECT_EQ(cli("report " + (out / "absent.json").string()), 2);
  EXPECT_EQ(cli("report " + write_config("truncated", "{").string()), 1);
  fs::remove_all(out);
}

TEST(Cli, SeedPrecedenceAndManifest) {
  const auto cfg = write_config("seed", R"({"experiment": "theory_centering", "seed": 3,
                                            "theory": {"centering_instances": 2}})");
  const auto out = temp_dir("cli_seed");
  auto manifest = [&] { return json::parse(read(out / "run_manifest.json")); };

  ASSERT_EQ(cli("run --config " + cfg.string() + " --out " + out.string()), 0);
  EXPECT_EQ(manifest()["seed"], 3);
  EXPECT_EQ(manifest()["seed_source"], "config");
  ASSERT_EQ(cli("run --config " + cfg.string() + " --out " + out.string(), "NORMLAB_SEED=5"), 0);
  EXPECT_EQ(manifest()["seed"], 5);
  EXPECT_EQ(manifest()["seed_source"], "env");
  ASSERT_EQ(cli("run --config " + cfg.string() + " --out " + out.string() + " --seed 7", "NORMLAB_SEED=5"), 0);
  const auto m = manifest();
  EXPECT_EQ(m["seed"], 7);
  EXPECT_EQ(m["seed_source"], "flag");

  const auto resolved = read(out / "config.resolved.json");
  EXPECT_EQ(parse_config(resolved).seed, 7u);
  EXPECT_EQ(parse_config(resolved).output_dir, out.string());
  for (const auto& f : m["files"]) EXPECT_TRUE(fs::exists(out / f.get<std::string>())) << f;
  std::size_t on_disk = 0;
  for (const auto& e : fs::recursive_directory_iterator(out)) on_disk += e.is_regular_file();
  EXPECT_EQ(m["files"].size() + 1, on_disk);  // everything except the manifest itself
  fs::remove_all(out);
}

TEST(Cli, SweepOverridesLambdas) {
  auto c = tiny(ExperimentKind::Shortcut);
  const auto cfg = write_config("sweep", to_json(c));
  const auto out = temp_dir("cli_sweep");
  ASSERT_EQ(cli("sweep --config " + cfg.string() + " --out " + out.string() + " --lambdas 10,0"), 0);
  const auto resolved = parse_config(read(out / "config.resolved.json"));
  EXPECT_EQ(resolved.experiment, ExperimentKind::LambdaSweep);
  EXPECT_EQ(resolved.lambdas, (std::vector<double>{10.0, 0.0}));
  EXPECT_TRUE(fs::exists(out / "lambda_sweep.csv"));
  fs::remove_all(out);
}
