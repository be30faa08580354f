#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include "json.hpp"
#include "normlab/experiment.hpp"
#include "normlab/rng.hpp"
#include "normlab/theory.hpp"

namespace normlab {

using json = nlohmann::ordered_json;
namespace th = theory;

namespace {

class Output {
 public:
  explicit Output(std::filesystem::path root) : root_(std::move(root)) { std::filesystem::create_directories(root_); }

  void write(const std::string& rel, const std::string& content) {
    const auto path = root_ / rel;
    std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary);
    f << content;
    if (!f) throw Error("cannot write " + path.string());
    files_.push_back(rel);
  }
  void checkpoint(const std::string& rel, const Model& m) {
    save_checkpoint(m, root_ / rel);
    files_.push_back(rel + "/manifest.json");
    files_.push_back(rel + "/weights.bin");
  }
  std::vector<std::string> files() const { return files_; }

 private:
  std::filesystem::path root_;
  std::vector<std::string> files_;
};

// Row-oriented CSV with full double precision.
class Csv {
 public:
  explicit Csv(std::initializer_list<std::string> header) {
    os_.precision(17);
    bool first = true;
    for (const auto& h : header) {
      os_ << (first ? "" : ",") << h;
      first = false;
    }
    os_ << '\n';
  }
  template <class... T>
  void row(const T&... values) {
    bool first = true;
    ((os_ << (first ? "" : ",") << values, first = false), ...);
    os_ << '\n';
  }
  std::string str() const { return os_.str(); }

 private:
  std::ostringstream os_;
};

double median_of(std::vector<double> v) { return th::median(std::move(v)); }

th::Matrix normal_matrix(Rng& rng, std::size_t rows, std::size_t cols) {
  th::Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = rng.normal();
  return m;
}

th::Vector normal_vector(Rng& rng, std::size_t n) {
  th::Vector v(static_cast<Eigen::Index>(n));
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = rng.normal();
  return v;
}

th::Vector positive_scales(Rng& rng, std::size_t d) {
  th::Vector u(static_cast<Eigen::Index>(d));
  for (Eigen::Index i = 0; i < u.size(); ++i) u(i) = std::exp(rng.uniform(std::log(0.2), std::log(5.0)));
  return u;
}

// ---------------------------------------------------------------------------
// Theory

json run_theory_minnorm(const ExperimentConfig& cfg, Output& out) {
  const auto& t = cfg.theory;
  th::VarianceBiasConfig vb;
  for (std::size_t i = 0; i < t.seeds; ++i) vb.seeds.push_back(derive_seed(cfg.seed, "variance_bias", i));
  vb.n = t.n;
  vb.d = t.d;
  vb.low_var_count = t.low_var_count;
  vb.sigma_low = t.sigma_low;
  vb.sigma_high = t.sigma_high;
  const auto stat = th::variance_bias_statistic(vb);
  out.write("variance_bias.csv", th::variance_bias_csv(stat.rows));

  const double gain = th::analytic_ratio_gain(t.sigma_low, t.sigma_high, t.low_var_count, t.d);
  const double expected = (t.sigma_high / t.sigma_low) * (t.sigma_high / t.sigma_low);

  Csv proj({"instance", "row_space_gap", "null_space_gap", "idempotence_error", "symmetry_error",
            "residual_unnorm", "residual_norm", "direct_gap"});
  double max_gap = 0.0, max_idem = 0.0, max_direct = 0.0;
  for (std::size_t i = 0; i < t.projection_instances; ++i) {
    Rng rng(derive_seed(cfg.seed, "projection", i));
    th::MinNormProblem p{normal_matrix(rng, t.projection_n, t.projection_d), normal_vector(rng, t.projection_n), {}};
    const auto zeta = th::min_norm_solve(p);
    p.U = positive_scales(rng, t.projection_d);
    const auto theta = th::normalized_min_norm_solve(p);
    const auto rep = th::check_projection_identity(zeta.theta, theta.theta, p.X);
    const double direct = (th::weighted_min_norm_direct(p.X, p.Y, *p.U) - theta.theta).norm();
    proj.row(i, rep.row_space_gap, rep.null_space_gap, rep.idempotence_error, rep.symmetry_error,
             zeta.diagnostics.residual_norm, theta.diagnostics.residual_norm, direct);
    max_gap = std::max(max_gap, rep.row_space_gap);
    max_idem = std::max(max_idem, rep.idempotence_error);
    max_direct = std::max(max_direct, direct);
  }
  out.write("projection.csv", proj.str());

  // ||theta - zeta|| as rows are appended until n = d.
  Csv sweep({"n", "d", "median_parameter_gap"});
  json sweep_json = json::array();
  const std::size_t d = t.projection_d;
  for (std::size_t step = 1; step <= 5; ++step) {
    const std::size_t n = std::max<std::size_t>(1, d * step / 5);
    std::vector<double> gaps;
    for (std::size_t s = 0; s < 20; ++s) {
      Rng rng(derive_seed(cfg.seed, "row_sweep", s));
      const auto X = normal_matrix(rng, d, d);
      const auto Y = normal_vector(rng, d);
      const auto U = positive_scales(rng, d);
      th::MinNormProblem p{X.topRows(static_cast<Eigen::Index>(n)), Y.head(static_cast<Eigen::Index>(n)), U};
      const auto theta = th::normalized_min_norm_solve(p).theta;
      p.U.reset();
      gaps.push_back((theta - th::min_norm_solve(p).theta).norm());
    }
    const double med = median_of(gaps);
    sweep.row(n, d, med);
    sweep_json.push_back({{"n", n}, {"median_parameter_gap", med}});
  }
  out.write("row_sweep.csv", sweep.str());

  return {{"median_r_unnorm", stat.median_r_unnorm},
          {"median_r_norm", stat.median_r_norm},
          {"normalized_favours_low_variance", stat.median_r_norm > stat.median_r_unnorm},
          {"analytic_ratio_gain", gain},
          {"analytic_expected", expected},
          {"analytic_error", std::abs(gain - expected)},
          {"projection_instances", t.projection_instances},
          {"max_row_space_gap", max_gap},
          {"max_idempotence_error", max_idem},
          {"max_direct_solve_gap", max_direct},
          {"row_sweep", sweep_json}};
}

json run_theory_maxmargin(const ExperimentConfig& cfg, Output& out) {
  const auto& t = cfg.theory;
  Csv csv({"instance", "n", "d", "estimator", "min_margin", "stationarity_residual", "min_coefficient", "active",
           "active_fraction", "iterations"});
  double worst_margin = 1e300, worst_stat = 0.0, worst_coef = 1e300;
  for (std::size_t i = 0; i < t.maxmargin_instances; ++i) {
    Rng rng(derive_seed(cfg.seed, "maxmargin", i));
    const auto n = static_cast<std::size_t>(rng.integer(2, static_cast<long>(t.maxmargin_max_n)));
    const auto d = static_cast<std::size_t>(rng.integer(static_cast<long>(n) + 1,
                                                        static_cast<long>(std::max(t.maxmargin_max_d, n + 1))));
    const auto X = normal_matrix(rng, n, d);
    th::Vector Y(static_cast<Eigen::Index>(n));
    for (Eigen::Index k = 0; k < Y.size(); ++k) Y(k) = rng.bernoulli(0.5) ? 1.0 : -1.0;
    const auto U = positive_scales(rng, d);
    for (int normalized = 0; normalized < 2; ++normalized) {
      const std::optional<th::Vector> u = normalized ? std::optional<th::Vector>(U) : std::nullopt;
      const auto est = th::max_margin_solve(X, Y, u);
      const auto kkt = th::max_margin_kkt(X, Y, u, est.theta);
      csv.row(i, n, d, normalized ? "normalized" : "unnormalized", kkt.min_margin, kkt.stationarity_residual,
              kkt.min_coefficient, kkt.active, kkt.active_fraction, est.diagnostics.iterations);
      worst_margin = std::min(worst_margin, kkt.min_margin);
      worst_stat = std::max(worst_stat, kkt.stationarity_residual);
      worst_coef = std::min(worst_coef, kkt.min_coefficient);
    }
  }
  out.write("maxmargin.csv", csv.str());

  // Share of support vectors as the dimension grows (logged, not asserted).
  Csv support({"n", "d", "mean_active_fraction"});
  json support_json = json::array();
  const std::size_t n = t.maxmargin_max_n;
  for (auto d : t.support_dims) {
    double sum = 0.0;
    constexpr std::size_t kDraws = 10;
    for (std::size_t s = 0; s < kDraws; ++s) {
      Rng rng(derive_seed(cfg.seed, "support", d, s));
      const auto X = normal_matrix(rng, n, d);
      th::Vector Y(static_cast<Eigen::Index>(n));
      for (Eigen::Index k = 0; k < Y.size(); ++k) Y(k) = k % 2 ? 1.0 : -1.0;
      const auto est = th::max_margin_solve(X, Y);
      sum += th::max_margin_kkt(X, Y, std::nullopt, est.theta).active_fraction;
    }
    support.row(n, d, sum / kDraws);
    support_json.push_back({{"d", d}, {"mean_active_fraction", sum / kDraws}});
  }
  out.write("support_fraction.csv", support.str());

  return {{"instances", t.maxmargin_instances},
          {"min_margin", worst_margin},
          {"max_stationarity_residual", worst_stat},
          {"min_coefficient", worst_coef},
          {"support_fraction", support_json}};
}

json run_theory_centering(const ExperimentConfig& cfg, Output& out) {
  const auto& t = cfg.theory;
  Csv csv({"instance", "in_sample_gap", "parameter_gap", "off_sample_gap"});
  double max_in = 0.0;
  std::vector<double> params, offs;
  for (std::size_t i = 0; i < t.centering_instances; ++i) {
    Rng rng(derive_seed(cfg.seed, "centering", i));
    th::Matrix X = normal_matrix(rng, t.centering_n, t.centering_d);
    th::Matrix P = normal_matrix(rng, t.centering_probes, t.centering_d);
    for (Eigen::Index j = 0; j < X.cols(); ++j) {
      const double shift = 2.0 * rng.normal();
      X.col(j).array() += shift;
      P.col(j).array() += shift;
    }
    th::Vector Y = normal_vector(rng, t.centering_n);
    Y.array() += 3.0;
    const auto rep = th::centering_analysis(X, Y, P);
    csv.row(i, rep.in_sample_gap, rep.parameter_gap, rep.off_sample_gap);
    max_in = std::max(max_in, rep.in_sample_gap);
    params.push_back(rep.parameter_gap);
    offs.push_back(rep.off_sample_gap);
  }
  out.write("centering.csv", csv.str());
  return {{"instances", t.centering_instances},
          {"max_in_sample_gap", max_in},
          {"median_parameter_gap", median_of(params)},
          {"median_off_sample_gap", median_of(offs)}};
}

// ---------------------------------------------------------------------------
// Neural experiments

const char* kModelNames[] = {"NoBN", "wBN", "CT"};

std::vector<double> split_errors(Model& m, const ShortcutDataset& d) {
  std::vector<double> e;
  for (auto s : kAllSplits) e.push_back(error_rate(m, d.split(s)));
  return e;
}

const Dataset& named_split(const ShortcutDataset& d, const std::string& name) {
  for (auto s : kAllSplits)
    if (name == split_name(s)) return d.split(s);
  throw Error("unknown split " + name);
}

std::string lambda_tag(double l) {
  std::ostringstream os;
  os << l;
  return os.str();
}

json medians_by_split(const std::vector<std::vector<double>>& rows) {
  json j;
  for (std::size_t s = 0; s < kAllSplits.size(); ++s) {
    std::vector<double> v;
    for (const auto& r : rows) v.push_back(r[s]);
    j[split_name(kAllSplits[s])] = median_of(v);
  }
  return j;
}

json run_shortcut(const ExperimentConfig& cfg, Output& out) {
  Csv errors({"replicate", "model", "lambda", "selected", "Both", "RedOnly", "BlueOnly", "None"});
  Csv selection({"replicate", "lambda", "validation_none_error", "selected"});
  Csv reliance({"replicate", "model", "lambda", "reliance"});
  std::map<std::string, std::vector<std::vector<double>>> per_model;
  std::map<std::string, std::vector<double>> rel;
  for (std::size_t r = 0; r < cfg.replicates; ++r) {
    auto sm = train_shortcut_models(cfg, r, true, r == 0 ? cfg.histogram_every : 0);
    const auto tag = "r" + std::to_string(r);
    if (r == 0) {
      for (auto* snaps : {&sm.nobn_snapshots, &sm.wbn_snapshots}) {
        std::vector<std::pair<std::size_t, const Model*>> trace;
        for (const auto& [e, m] : *snaps) trace.emplace_back(e, &m);
        out.write(std::string("weight_hist_") + (snaps == &sm.nobn_snapshots ? "NoBN" : "wBN") + ".csv",
                  export_weight_histograms(trace));
      }
    }
    const auto& region = sm.data.square_region;
    const Dataset& both = sm.data.split(SplitName::Both);

    auto record = [&](const std::string& name, Model& m, double lambda, bool selected, bool primary) {
      const auto e = split_errors(m, sm.data);
      errors.row(r, name, lambda, selected ? 1 : 0, e[0], e[1], e[2], e[3]);
      const double rs = saliency_reliance(m, both, region);
      reliance.row(r, name, lambda, rs);
      if (primary) {
        per_model[name].push_back(e);
        rel[name].push_back(rs);
      }
    };
    record("NoBN", sm.nobn, 0.0, false, true);
    record("wBN", sm.wbn, 0.0, false, true);
    for (std::size_t i = 0; i < sm.lambdas.size(); ++i)
      record("CT", sm.ct[i], sm.lambdas[i], i == sm.selected, i == sm.selected);
    for (std::size_t i = 0; i < sm.lambdas.size(); ++i)
      selection.row(r, sm.lambdas[i], sm.validation_none.empty() ? std::nan("") : sm.validation_none[i],
                    i == sm.selected ? 1 : 0);

    out.write("traces/" + tag + "_NoBN.csv", sm.nobn_trace.to_csv());
    out.write("traces/" + tag + "_wBN.csv", sm.wbn_trace.to_csv());
    for (std::size_t i = 0; i < sm.lambdas.size(); ++i)
      out.write("traces/" + tag + "_CT_lambda" + lambda_tag(sm.lambdas[i]) + ".csv", sm.ct_traces[i].to_csv());
    out.checkpoint("checkpoints/" + tag + "_NoBN", sm.nobn);
    out.checkpoint("checkpoints/" + tag + "_wBN", sm.wbn);
    out.checkpoint("checkpoints/" + tag + "_CT", sm.ct[sm.selected]);
  }
  out.write("split_errors.csv", errors.str());
  out.write("lambda_selection.csv", selection.str());
  out.write("reliance.csv", reliance.str());

  json s;
  json models;
  for (const char* name : kModelNames) {
    models[name] = {{"split_error_median", medians_by_split(per_model[name])},
                    {"reliance_median", median_of(rel[name])}};
  }
  s["models"] = models;
  const double wbn_none = models["wBN"]["split_error_median"]["None"];
  const double nobn_none = models["NoBN"]["split_error_median"]["None"];
  const double ct_none = models["CT"]["split_error_median"]["None"];
  const double wbn_both = models["wBN"]["split_error_median"]["Both"];
  const double nobn_both = models["NoBN"]["split_error_median"]["Both"];
  const double ct_both = models["CT"]["split_error_median"]["Both"];
  const double gap = wbn_none - nobn_none;
  s["none_gap_wbn_minus_nobn"] = gap;
  s["ct_gap_recovery"] = gap > 0 ? (wbn_none - ct_none) / gap : 0.0;
  s["ct_both_minus_wbn_both"] = ct_both - wbn_both;
  s["checks"] = {{"both_split_at_most_2pct", wbn_both <= 2.0 && nobn_both <= 2.0},
                 {"nobn_none_15pts_below_wbn", gap >= 15.0},
                 {"ct_recovers_half_gap", gap > 0 && (wbn_none - ct_none) / gap >= 0.5 && ct_both - wbn_both <= 2.0},
                 {"reliance_wbn_above_nobn", median_of(rel["wBN"]) > median_of(rel["NoBN"])}};
  return s;
}

json run_corruption(const ExperimentConfig& cfg, Output& out) {
  Csv cells({"replicate", "model", "kind", "severity", "error"});
  Csv summary({"replicate", "model", "clean_error", "mce"});
  std::map<std::string, std::vector<double>> mces, cleans;
  for (std::size_t r = 0; r < cfg.replicates; ++r) {
    auto sm = train_shortcut_models(cfg, r, true);
    const Dataset& test = named_split(sm.data, cfg.corruption.test_split);
    const auto seed = derive_seed(replicate_seed(cfg, r), "corruption_eval");
    Model* models[] = {&sm.nobn, &sm.wbn, &sm.ct[sm.selected]};
    for (std::size_t k = 0; k < 3; ++k) {
      const auto rep = mean_corruption_error(*models[k], test, cfg.corruption.kinds, cfg.corruption.severities, seed);
      for (const auto& c : rep.cells) cells.row(r, kModelNames[k], corruption_name(c.kind), c.severity, c.error);
      summary.row(r, kModelNames[k], rep.clean_error, rep.mce);
      mces[kModelNames[k]].push_back(rep.mce);
      cleans[kModelNames[k]].push_back(rep.clean_error);
    }
  }
  out.write("corruption_errors.csv", cells.str());
  out.write("mce.csv", summary.str());
  json s, models;
  for (const char* name : kModelNames)
    models[name] = {{"mce_median", median_of(mces[name])}, {"clean_error_median", median_of(cleans[name])}};
  s["models"] = models;
  s["test_split"] = cfg.corruption.test_split;
  s["checks"] = {{"ct_mce_at_most_wbn", median_of(mces["CT"]) <= median_of(mces["wBN"])}};
  return s;
}

json run_bn_adaptation(const ExperimentConfig& cfg, Output& out) {
  Csv cells({"replicate", "scenario", "adapted_on", "kind", "error"});
  Csv means({"replicate", "scenario", "mean_error"});
  std::map<std::string, std::vector<double>> per;
  bool unchanged = true;
  for (std::size_t r = 0; r < cfg.replicates; ++r) {
    auto sm = train_shortcut_models(cfg, r, false);
    const std::uint64_t before = sm.wbn.state_hash();
    AdaptScenario sc;
    sc.adapt_batch_size = cfg.adaptation.batch_size;
    sc.severity = cfg.adaptation.severity;
    sc.blend = cfg.adaptation.blend;
    sc.seed = derive_seed(replicate_seed(cfg, r), "adaptation");
    const Dataset& test = named_split(sm.data, cfg.corruption.test_split);
    for (auto kind : cfg.adaptation.scenarios) {
      sc.kind = kind;
      const auto res = run_adapt_scenario(sm.wbn, sm.data.train, test, sc, cfg.corruption.kinds);
      for (const auto& c : res.cells)
        cells.row(r, scenario_name(kind), res.adapted_on ? corruption_name(*res.adapted_on) : "", corruption_name(c.kind),
                  c.error);
      means.row(r, scenario_name(kind), res.mean_error);
      per[scenario_name(kind)].push_back(res.mean_error);
    }
    unchanged = unchanged && sm.wbn.state_hash() == before;
  }
  out.write("adaptation_cells.csv", cells.str());
  out.write("adaptation.csv", means.str());
  json s, sc;
  for (const auto& [name, v] : per) sc[name] = {{"mean_error_median", median_of(v)}};
  s["scenarios"] = sc;
  s["source_model_unchanged"] = unchanged;
  if (per.count("adapt_one_test_one") && per.count("adapt_one_test_all"))
    s["checks"] = {{"one_test_one_at_most_one_test_all",
                    median_of(per["adapt_one_test_one"]) <= median_of(per["adapt_one_test_all"])}};
  return s;
}

json run_lambda_sweep(const ExperimentConfig& cfg, Output& out) {
  ExperimentConfig c = cfg;
  std::sort(c.lambdas.begin(), c.lambdas.end());
  c.data.validation_size = 0;  // no selection in a sweep
  Csv csv({"replicate", "lambda", "Both", "None"});
  Csv base({"replicate", "model", "Both", "None"});
  json rows = json::array();
  for (std::size_t r = 0; r < c.replicates; ++r) {
    auto sm = train_shortcut_models(c, r, true);
    for (std::size_t i = 0; i < sm.lambdas.size(); ++i) {
      const auto e = split_errors(sm.ct[i], sm.data);
      csv.row(r, sm.lambdas[i], e[0], e[3]);
      rows.push_back({{"replicate", r}, {"lambda", sm.lambdas[i]}, {"Both", e[0]}, {"None", e[3]}});
    }
    const auto w = split_errors(sm.wbn, sm.data);
    const auto nb = split_errors(sm.nobn, sm.data);
    base.row(r, "wBN", w[0], w[3]);
    base.row(r, "NoBN", nb[0], nb[3]);
  }
  out.write("lambda_sweep.csv", csv.str());
  out.write("baselines.csv", base.str());
  return {{"lambdas", c.lambdas}, {"rows", rows}};
}

json run_calibration(const ExperimentConfig& cfg, Output& out) {
  Csv csv({"replicate", "model", "split", "error", "rms_cal_err", "ma_cal_err", "miscalibration_area", "sharpness",
           "crps"});
  Csv adv({"replicate", "model", "split", "group_fraction", "worst_rms_cal_err"});
  bool ma_le_rms = true;
  json reports = json::array();
  for (std::size_t r = 0; r < cfg.replicates; ++r) {
    auto sm = train_shortcut_models(cfg, r, true);
    Model* models[] = {&sm.nobn, &sm.wbn, &sm.ct[sm.selected]};
    for (std::size_t k = 0; k < 3; ++k)
      for (auto split : {SplitName::Both, SplitName::None}) {
        const Dataset& d = sm.data.split(split);
        const Tensor probs = predict_probs(*models[k], d.images);
        const auto rep = calibration_metrics(probs, d.labels);
        const double err = error_rate(probs, d.labels);
        csv.row(r, kModelNames[k], split_name(split), err, rep.rms_cal_err, rep.ma_cal_err, rep.miscalibration_area,
                rep.sharpness, rep.crps);
        ma_le_rms = ma_le_rms && rep.ma_cal_err <= rep.rms_cal_err + 1e-12;
        const auto a = adversarial_calibration(probs, d.labels, derive_seed(replicate_seed(cfg, r), "adv_cal", k),
                                               cfg.calibration.group_fractions, cfg.calibration.groups);
        for (std::size_t g = 0; g < a.group_fractions.size(); ++g)
          adv.row(r, kModelNames[k], split_name(split), a.group_fractions[g], a.worst_rms[g]);
        reports.push_back({{"replicate", r},
                           {"model", kModelNames[k]},
                           {"split", split_name(split)},
                           {"error", err},
                           {"rms_cal_err", rep.rms_cal_err},
                           {"ma_cal_err", rep.ma_cal_err},
                           {"miscalibration_area", rep.miscalibration_area},
                           {"sharpness", rep.sharpness},
                           {"crps", rep.crps}});
      }
  }
  out.write("calibration.csv", csv.str());
  out.write("adversarial_calibration.csv", adv.str());
  return {{"reports", reports}, {"checks", {{"ma_at_most_rms", ma_le_rms}}}};
}

}  // namespace

// ---------------------------------------------------------------------------

std::uint64_t replicate_seed(const ExperimentConfig& cfg, std::size_t replicate) {
  return derive_seed(cfg.seed, "replicate", replicate);
}

ShortcutModels train_shortcut_models(const ExperimentConfig& cfg, std::size_t replicate, bool train_ct,
                                     std::size_t snapshot_every) {
  const std::uint64_t rs = replicate_seed(cfg, replicate);
  ShortcutModels sm;
  ShortcutDatasetConfig dc = cfg.data;
  dc.seed = derive_seed(rs, "data");
  sm.data = generate_shortcut_dataset(dc);

  const ModelSpec spec = student_spec(cfg);
  TrainConfig tc = cfg.teacher;
  tc.seed = derive_seed(rs, "teacher");
  TrainConfig sc = cfg.student;
  sc.seed = derive_seed(rs, "student");

  auto snapshots = [&](std::vector<std::pair<std::size_t, Model>>& into, std::size_t epochs) {
    TrainHooks h;
    if (snapshot_every > 0)
      h.on_epoch_end = [&into, epochs, snapshot_every](std::size_t e, const Model& m) {
        if (e % snapshot_every == 0 || e + 1 == epochs) into.emplace_back(e, m.clone());
      };
    return h;
  };
  if (train_ct) {
    auto t = train_teacher(strip_batchnorm(spec), sm.data.train, tc, snapshots(sm.nobn_snapshots, tc.epochs));
    sm.nobn = std::move(t.model);
    sm.nobn_trace = std::move(t.trace);
  }
  auto w = train_baseline(spec, sm.data.train, sc, snapshots(sm.wbn_snapshots, sc.epochs));
  sm.wbn = std::move(w.model);
  sm.wbn_trace = std::move(w.trace);
  if (!train_ct) return sm;

  sm.lambdas = cfg.lambdas;
  const bool select = sm.lambdas.size() > 1 && cfg.data.validation_size > 0;
  for (double lambda : sm.lambdas) {
    // Every CT cell shares the student init and shuffle streams, so lambda = 0
    // reproduces the wBN baseline exactly.
    auto ct = train_student_ct(spec, sm.nobn, sm.data.train, CTConfig{tc, sc, lambda});
    if (select)
      sm.validation_none.push_back(error_rate(ct.model, sm.data.validation[static_cast<std::size_t>(SplitName::None)]));
    sm.ct.push_back(std::move(ct.model));
    sm.ct_traces.push_back(std::move(ct.trace));
  }
  if (select)
    sm.selected = static_cast<std::size_t>(
        std::min_element(sm.validation_none.begin(), sm.validation_none.end()) - sm.validation_none.begin());
  return sm;
}

RunResult run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& dir) {
  Output out(dir);
  json summary;
  summary["experiment"] = experiment_name(cfg.experiment);
  summary["seed"] = cfg.seed;
  summary["replicates"] = cfg.replicates;
  json body;
  switch (cfg.experiment) {
    case ExperimentKind::TheoryMinNorm: body = run_theory_minnorm(cfg, out); break;
    case ExperimentKind::TheoryMaxMargin: body = run_theory_maxmargin(cfg, out); break;
    case ExperimentKind::TheoryCentering: body = run_theory_centering(cfg, out); break;
    case ExperimentKind::Shortcut: body = run_shortcut(cfg, out); break;
    case ExperimentKind::CorruptionRobustness: body = run_corruption(cfg, out); break;
    case ExperimentKind::BnAdaptation: body = run_bn_adaptation(cfg, out); break;
    case ExperimentKind::LambdaSweep: body = run_lambda_sweep(cfg, out); break;
    case ExperimentKind::Calibration: body = run_calibration(cfg, out); break;
  }
  for (auto it = body.begin(); it != body.end(); ++it) summary[it.key()] = it.value();
  RunResult res;
  res.summary_json = summary.dump(2) + "\n";
  out.write("summary.json", res.summary_json);
  res.files = out.files();
  return res;
}

// ---------------------------------------------------------------------------

namespace {
void flatten(const json& j, const std::string& prefix, std::vector<std::pair<std::string, std::string>>& rows) {
  if (j.is_object()) {
    for (auto it = j.begin(); it != j.end(); ++it) flatten(it.value(), prefix.empty() ? it.key() : prefix + "." + it.key(), rows);
  } else if (j.is_array() && !j.empty() && (j.front().is_object() || j.front().is_array())) {
    for (std::size_t i = 0; i < j.size(); ++i) flatten(j[i], prefix + "[" + std::to_string(i) + "]", rows);
  } else if (j.is_number_float()) {
    std::ostringstream os;
    os << std::setprecision(6) << j.get<double>();
    rows.emplace_back(prefix, os.str());
  } else {
    rows.emplace_back(prefix, j.is_string() ? j.get<std::string>() : j.dump());
  }
}
}  // namespace

std::string render_report(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw Error(std::string("report: malformed JSON: ") + e.what());
  }
  std::vector<std::pair<std::string, std::string>> rows;
  flatten(j, "", rows);
  std::size_t width = 0;
  for (const auto& [k, v] : rows) width = std::max(width, k.size());
  std::ostringstream os;
  for (const auto& [k, v] : rows) os << std::left << std::setw(static_cast<int>(width) + 2) << k << v << '\n';
  return os.str();
}

}  // namespace normlab
