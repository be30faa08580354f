#include <set>

#include "json.hpp"
#include "normlab/experiment.hpp"

namespace normlab {

using json = nlohmann::ordered_json;

const char* experiment_name(ExperimentKind kind) {
  switch (kind) {
    case ExperimentKind::TheoryMinNorm: return "theory_minnorm";
    case ExperimentKind::TheoryMaxMargin: return "theory_maxmargin";
    case ExperimentKind::TheoryCentering: return "theory_centering";
    case ExperimentKind::Shortcut: return "shortcut";
    case ExperimentKind::CorruptionRobustness: return "corruption_robustness";
    case ExperimentKind::BnAdaptation: return "bn_adaptation";
    case ExperimentKind::LambdaSweep: return "lambda_sweep";
    case ExperimentKind::Calibration: return "calibration";
  }
  return "?";
}

std::optional<ExperimentKind> parse_experiment(const std::string& name) {
  for (int i = 0; i <= static_cast<int>(ExperimentKind::Calibration); ++i) {
    const auto k = static_cast<ExperimentKind>(i);
    if (name == experiment_name(k)) return k;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Presets

ExperimentConfig default_config(ExperimentKind kind) {
  ExperimentConfig c;
  c.experiment = kind;
  c.output_dir = std::string("runs/") + experiment_name(kind);

  c.data.train_size = 512;
  c.data.test_size = 256;
  c.data.validation_size = 256;

  TrainConfig t;
  t.optimizer.kind = OptimizerKind::SGD;
  t.optimizer.lr = 0.01;
  t.optimizer.momentum = 0.9;
  t.batch_size = 64;
  t.epochs = 6;
  c.teacher = t;
  c.student = t;

  switch (kind) {
    case ExperimentKind::TheoryMinNorm:
    case ExperimentKind::TheoryMaxMargin:
    case ExperimentKind::TheoryCentering:
      c.replicates = 1;
      break;
    case ExperimentKind::Shortcut:
    case ExperimentKind::CorruptionRobustness:
      c.replicates = 3;
      break;
    case ExperimentKind::BnAdaptation:
      c.replicates = 5;
      break;
    case ExperimentKind::LambdaSweep:
      c.replicates = 1;
      c.lambdas = {0.0, 0.1, 1.0, 10.0};
      break;
    case ExperimentKind::Calibration:
      c.replicates = 1;
      c.lambdas = {1.0};
      break;
  }
  return c;
}

// ---------------------------------------------------------------------------
// Strict reader

namespace {

std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

class Obj {
 public:
  Obj(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_, "expected an object");
  }
  Obj(const Obj&) = delete;

  const json* find(const std::string& key) {
    auto it = j_.find(key);
    if (it == j_.end()) return nullptr;
    seen_.insert(key);
    return &*it;
  }
  std::string at(const std::string& key) const { return join(path_, key); }

  void u64(const std::string& key, std::uint64_t& out) {
    if (auto* v = find(key)) out = as_u64(*v, at(key));
  }
  void size(const std::string& key, std::size_t& out, std::size_t min = 0) {
    if (auto* v = find(key)) {
      out = as_u64(*v, at(key));
      if (out < min) throw ConfigError(at(key), "must be >= " + std::to_string(min));
    }
  }
  void integer(const std::string& key, int& out, int lo, int hi) {
    if (auto* v = find(key)) {
      if (!v->is_number_integer()) throw ConfigError(at(key), "expected an integer");
      const auto x = v->get<long long>();
      if (x < lo || x > hi)
        throw ConfigError(at(key), "must be in [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
      out = static_cast<int>(x);
    }
  }
  void real(const std::string& key, double& out) {
    if (auto* v = find(key)) out = as_real(*v, at(key));
  }
  void boolean(const std::string& key, bool& out) {
    if (auto* v = find(key)) {
      if (!v->is_boolean()) throw ConfigError(at(key), "expected true or false");
      out = v->get<bool>();
    }
  }
  void string(const std::string& key, std::string& out) {
    if (auto* v = find(key)) {
      if (!v->is_string()) throw ConfigError(at(key), "expected a string");
      out = v->get<std::string>();
    }
  }
  template <class T, class F>
  void list(const std::string& key, std::vector<T>& out, F convert) {
    if (auto* v = find(key)) {
      if (!v->is_array()) throw ConfigError(at(key), "expected an array");
      out.clear();
      for (std::size_t i = 0; i < v->size(); ++i)
        out.push_back(convert((*v)[i], at(key) + "[" + std::to_string(i) + "]"));
    }
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError(at(it.key()), "unknown field");
  }

  static std::uint64_t as_u64(const json& v, const std::string& path) {
    if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0))
      throw ConfigError(path, "expected a nonnegative integer");
    return v.get<std::uint64_t>();
  }
  static double as_real(const json& v, const std::string& path) {
    if (!v.is_number()) throw ConfigError(path, "expected a number");
    return v.get<double>();
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <class E, std::size_t N>
E parse_enum(const json& v, const std::string& path, const std::array<std::pair<E, const char*>, N>& names) {
  if (!v.is_string()) throw ConfigError(path, "expected a string");
  const auto s = v.get<std::string>();
  for (const auto& [e, name] : names)
    if (s == name) return e;
  std::string allowed;
  for (const auto& [e, name] : names) allowed += (allowed.empty() ? "" : ", ") + std::string(name);
  throw ConfigError(path, "unknown value '" + s + "' (expected one of: " + allowed + ")");
}

template <class E, std::size_t N>
const char* enum_name(E e, const std::array<std::pair<E, const char*>, N>& names) {
  for (const auto& [k, name] : names)
    if (k == e) return name;
  return "?";
}

constexpr std::array<std::pair<OptimizerKind, const char*>, 2> kOptimizers = {
    {{OptimizerKind::SGD, "sgd"}, {OptimizerKind::Adam, "adam"}}};
constexpr std::array<std::pair<ScheduleKind, const char*>, 3> kSchedules = {
    {{ScheduleKind::Constant, "constant"}, {ScheduleKind::Cosine, "cosine"}, {ScheduleKind::Step, "step"}}};
constexpr std::array<std::pair<DigitSource, const char*>, 2> kSources = {
    {{DigitSource::SyntheticDigits, "synthetic_digits"}, {DigitSource::MnistIdx, "mnist_idx"}}};
constexpr std::array<std::pair<AdaptScenarioKind, const char*>, 3> kScenarios = {
    {{AdaptScenarioKind::AdaptOneTestOne, "adapt_one_test_one"},
     {AdaptScenarioKind::AdaptOneTestAll, "adapt_one_test_all"},
     {AdaptScenarioKind::AdaptAllTestAll, "adapt_all_test_all"}}};

CorruptionKind corruption_from(const json& v, const std::string& path) {
  if (!v.is_string()) throw ConfigError(path, "expected a string");
  if (auto k = parse_corruption(v.get<std::string>())) return *k;
  throw ConfigError(path, "unknown corruption '" + v.get<std::string>() + "'");
}

std::array<std::size_t, 2> position_from(const json& v, const std::string& path) {
  if (!v.is_array() || v.size() != 2) throw ConfigError(path, "expected [row, col]");
  return {Obj::as_u64(v[0], path + "[0]"), Obj::as_u64(v[1], path + "[1]")};
}

void read_train(const json& j, const std::string& path, TrainConfig& t) {
  Obj o(j, path);
  if (auto* opt = o.find("optimizer")) {
    Obj p(*opt, o.at("optimizer"));
    if (auto* k = p.find("kind")) t.optimizer.kind = parse_enum(*k, p.at("kind"), kOptimizers);
    p.real("lr", t.optimizer.lr);
    p.real("momentum", t.optimizer.momentum);
    p.boolean("nesterov", t.optimizer.nesterov);
    p.real("beta1", t.optimizer.beta1);
    p.real("beta2", t.optimizer.beta2);
    p.real("epsilon", t.optimizer.epsilon);
    p.finish();
    if (!(t.optimizer.lr > 0.0)) throw ConfigError(p.at("lr"), "must be > 0");
    if (t.optimizer.momentum < 0.0 || t.optimizer.momentum >= 1.0) throw ConfigError(p.at("momentum"), "must be in [0,1)");
  }
  if (auto* sch = o.find("schedule")) {
    Obj s(*sch, o.at("schedule"));
    if (auto* k = s.find("kind")) t.schedule.kind = parse_enum(*k, s.at("kind"), kSchedules);
    s.real("lr_end", t.schedule.lr_end);
    s.real("factor", t.schedule.factor);
    s.list("at_epochs", t.schedule.at_epochs, Obj::as_u64);
    s.finish();
  }
  o.size("batch_size", t.batch_size, 1);
  o.size("epochs", t.epochs, 1);
  o.real("l2_coefficient", t.l2_coefficient);
  if (t.l2_coefficient < 0.0) throw ConfigError(o.at("l2_coefficient"), "must be >= 0");
  o.finish();
}

json train_json(const TrainConfig& t) {
  return json{{"optimizer",
               {{"kind", enum_name(t.optimizer.kind, kOptimizers)},
                {"lr", t.optimizer.lr},
                {"momentum", t.optimizer.momentum},
                {"nesterov", t.optimizer.nesterov},
                {"beta1", t.optimizer.beta1},
                {"beta2", t.optimizer.beta2},
                {"epsilon", t.optimizer.epsilon}}},
              {"schedule",
               {{"kind", enum_name(t.schedule.kind, kSchedules)},
                {"lr_end", t.schedule.lr_end},
                {"factor", t.schedule.factor},
                {"at_epochs", t.schedule.at_epochs}}},
              {"batch_size", t.batch_size},
              {"epochs", t.epochs},
              {"l2_coefficient", t.l2_coefficient}};
}

}  // namespace

ExperimentConfig parse_config(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError("", std::string("malformed JSON: ") + e.what());
  }
  Obj o(root, "");
  auto* kind = o.find("experiment");
  if (!kind) throw ConfigError("experiment", "missing required field");
  if (!kind->is_string()) throw ConfigError("experiment", "expected a string");
  const auto k = parse_experiment(kind->get<std::string>());
  if (!k) throw ConfigError("experiment", "unknown experiment '" + kind->get<std::string>() + "'");
  ExperimentConfig c = default_config(*k);

  o.u64("seed", c.seed);
  o.size("replicates", c.replicates, 1);
  o.string("output_dir", c.output_dir);

  if (auto* v = o.find("theory")) {
    Obj t(*v, "theory");
    auto& th = c.theory;
    t.size("seeds", th.seeds, 1);
    t.size("n", th.n, 1);
    t.size("d", th.d, 2);
    t.size("low_var_count", th.low_var_count, 1);
    t.real("sigma_low", th.sigma_low);
    t.real("sigma_high", th.sigma_high);
    t.size("projection_instances", th.projection_instances, 1);
    t.size("projection_n", th.projection_n, 1);
    t.size("projection_d", th.projection_d, 1);
    t.size("maxmargin_instances", th.maxmargin_instances, 1);
    t.size("maxmargin_max_n", th.maxmargin_max_n, 2);
    t.size("maxmargin_max_d", th.maxmargin_max_d, 2);
    t.list("support_dims", th.support_dims, Obj::as_u64);
    t.size("centering_instances", th.centering_instances, 1);
    t.size("centering_n", th.centering_n, 2);
    t.size("centering_d", th.centering_d, 1);
    t.size("centering_probes", th.centering_probes, 1);
    t.finish();
    if (th.n >= th.d) throw ConfigError("theory.n", "must be < theory.d (overparameterized)");
    if (th.low_var_count >= th.d) throw ConfigError("theory.low_var_count", "must be < theory.d");
    if (!(th.sigma_low > 0.0)) throw ConfigError("theory.sigma_low", "must be > 0");
    if (!(th.sigma_high >= th.sigma_low)) throw ConfigError("theory.sigma_high", "must be >= sigma_low");
    if (th.projection_n > th.projection_d) throw ConfigError("theory.projection_n", "must be <= projection_d");
    if (th.maxmargin_max_n > th.maxmargin_max_d)
      throw ConfigError("theory.maxmargin_max_n", "must be <= maxmargin_max_d");
    for (std::size_t i = 0; i < th.support_dims.size(); ++i)
      if (th.support_dims[i] < th.maxmargin_max_n)
        throw ConfigError("theory.support_dims[" + std::to_string(i) + "]", "must be >= maxmargin_max_n");
  }

  if (auto* v = o.find("data")) {
    Obj d(*v, "data");
    auto& dc = c.data;
    if (auto* s = d.find("source")) dc.source = parse_enum(*s, d.at("source"), kSources);
    d.string("idx_images", dc.idx_images);
    d.string("idx_labels", dc.idx_labels);
    if (auto* cl = d.find("classes")) {
      if (!cl->is_array() || cl->size() != 2) throw ConfigError("data.classes", "expected two digit labels");
      for (std::size_t i = 0; i < 2; ++i) {
        const auto x = Obj::as_u64((*cl)[i], "data.classes[" + std::to_string(i) + "]");
        if (x > 9) throw ConfigError("data.classes[" + std::to_string(i) + "]", "must be a digit 0-9");
        dc.classes[i] = static_cast<int>(x);
      }
    }
    d.size("height", dc.height, 1);
    d.size("width", dc.width, 1);
    d.size("channels", dc.channels, 1);
    d.real("noise_sigma", dc.noise_sigma);
    d.size("square_size", dc.square_size, 1);
    d.real("square_intensity", dc.square_intensity);
    if (auto* p = d.find("red_square_pos")) dc.red_square_pos = position_from(*p, "data.red_square_pos");
    if (auto* p = d.find("blue_square_pos")) dc.blue_square_pos = position_from(*p, "data.blue_square_pos");
    d.size("jitter", dc.jitter);
    d.real("rotation_deg", dc.rotation_deg);
    d.real("scale_jitter", dc.scale_jitter);
    d.real("stroke_jitter", dc.stroke_jitter);
    d.size("train_size", dc.train_size, 2);
    d.size("test_size", dc.test_size, 2);
    d.size("validation_size", dc.validation_size);
    d.finish();
    try {
      validate(dc);
    } catch (const Error& e) {
      throw ConfigError("data", e.what());
    }
  }

  if (auto* v = o.find("model")) {
    Obj m(*v, "model");
    m.string("preset", c.model.preset);
    m.list("hidden", c.model.hidden, Obj::as_u64);
    m.finish();
    if (c.model.preset != "appendix_cnn" && c.model.preset != "mlp")
      throw ConfigError("model.preset", "unknown preset '" + c.model.preset + "' (expected appendix_cnn or mlp)");
  }
  if (auto* v = o.find("teacher")) read_train(*v, "teacher", c.teacher);
  if (auto* v = o.find("student")) read_train(*v, "student", c.student);
  o.list("lambdas", c.lambdas, [](const json& x, const std::string& p) {
    const double l = Obj::as_real(x, p);
    if (!(l >= 0.0)) throw ConfigError(p, "lambda must be >= 0");
    return l;
  });
  if (c.lambdas.empty()) throw ConfigError("lambdas", "must list at least one value");
  o.size("histogram_every", c.histogram_every, 1);

  if (auto* v = o.find("corruption")) {
    Obj cc(*v, "corruption");
    cc.list("kinds", c.corruption.kinds, corruption_from);
    cc.list("severities", c.corruption.severities, [](const json& x, const std::string& p) {
      if (!x.is_number_integer() || x.get<long long>() < 1 || x.get<long long>() > 5)
        throw ConfigError(p, "severity must be an integer in [1,5]");
      return static_cast<int>(x.get<long long>());
    });
    cc.string("test_split", c.corruption.test_split);
    cc.finish();
    if (c.corruption.kinds.empty()) throw ConfigError("corruption.kinds", "must list at least one kind");
    if (c.corruption.severities.empty()) throw ConfigError("corruption.severities", "must list at least one severity");
    bool known = false;
    for (auto s : kAllSplits) known |= c.corruption.test_split == split_name(s);
    if (!known) throw ConfigError("corruption.test_split", "expected Both, RedOnly, BlueOnly or None");
  }
  if (auto* v = o.find("adaptation")) {
    Obj a(*v, "adaptation");
    a.size("batch_size", c.adaptation.batch_size, 2);
    a.integer("severity", c.adaptation.severity, 1, 5);
    a.real("blend", c.adaptation.blend);
    a.list("scenarios", c.adaptation.scenarios,
           [](const json& x, const std::string& p) { return parse_enum(x, p, kScenarios); });
    a.finish();
    if (!(c.adaptation.blend > 0.0 && c.adaptation.blend <= 1.0))
      throw ConfigError("adaptation.blend", "must be in (0,1]");
  }
  if (auto* v = o.find("calibration")) {
    Obj a(*v, "calibration");
    a.list("group_fractions", c.calibration.group_fractions, [](const json& x, const std::string& p) {
      const double f = Obj::as_real(x, p);
      if (!(f > 0.0 && f <= 1.0)) throw ConfigError(p, "must be in (0,1]");
      return f;
    });
    a.size("groups", c.calibration.groups, 1);
    a.finish();
  }
  o.finish();
  for (const auto* t : {&c.teacher, &c.student}) {
    const std::string which = t == &c.teacher ? "teacher" : "student";
    if (t->schedule.kind == ScheduleKind::Cosine && !(t->schedule.lr_end > 0.0))
      throw ConfigError(which + ".schedule.lr_end", "must be > 0");
  }
  if (c.student.batch_size < 2) throw ConfigError("student.batch_size", "must be >= 2 for a model with BatchNorm");
  return c;
}

std::string to_json(const ExperimentConfig& c) {
  json j;
  j["experiment"] = experiment_name(c.experiment);
  j["seed"] = c.seed;
  j["replicates"] = c.replicates;
  j["output_dir"] = c.output_dir;
  const auto& th = c.theory;
  j["theory"] = {{"seeds", th.seeds},
                 {"n", th.n},
                 {"d", th.d},
                 {"low_var_count", th.low_var_count},
                 {"sigma_low", th.sigma_low},
                 {"sigma_high", th.sigma_high},
                 {"projection_instances", th.projection_instances},
                 {"projection_n", th.projection_n},
                 {"projection_d", th.projection_d},
                 {"maxmargin_instances", th.maxmargin_instances},
                 {"maxmargin_max_n", th.maxmargin_max_n},
                 {"maxmargin_max_d", th.maxmargin_max_d},
                 {"support_dims", th.support_dims},
                 {"centering_instances", th.centering_instances},
                 {"centering_n", th.centering_n},
                 {"centering_d", th.centering_d},
                 {"centering_probes", th.centering_probes}};
  const auto& d = c.data;
  j["data"] = {{"source", enum_name(d.source, kSources)},
               {"idx_images", d.idx_images},
               {"idx_labels", d.idx_labels},
               {"classes", d.classes},
               {"height", d.height},
               {"width", d.width},
               {"channels", d.channels},
               {"noise_sigma", d.noise_sigma},
               {"square_size", d.square_size},
               {"square_intensity", d.square_intensity},
               {"red_square_pos", d.red_square_pos},
               {"blue_square_pos", d.blue_square_pos},
               {"jitter", d.jitter},
               {"rotation_deg", d.rotation_deg},
               {"scale_jitter", d.scale_jitter},
               {"stroke_jitter", d.stroke_jitter},
               {"train_size", d.train_size},
               {"test_size", d.test_size},
               {"validation_size", d.validation_size}};
  j["model"] = {{"preset", c.model.preset}, {"hidden", c.model.hidden}};
  j["teacher"] = train_json(c.teacher);
  j["student"] = train_json(c.student);
  j["lambdas"] = c.lambdas;
  j["histogram_every"] = c.histogram_every;
  json kinds = json::array();
  for (auto k : c.corruption.kinds) kinds.push_back(corruption_name(k));
  j["corruption"] = {{"kinds", kinds}, {"severities", c.corruption.severities}, {"test_split", c.corruption.test_split}};
  json scen = json::array();
  for (auto s : c.adaptation.scenarios) scen.push_back(enum_name(s, kScenarios));
  j["adaptation"] = {{"batch_size", c.adaptation.batch_size},
                     {"severity", c.adaptation.severity},
                     {"blend", c.adaptation.blend},
                     {"scenarios", scen}};
  j["calibration"] = {{"group_fractions", c.calibration.group_fractions}, {"groups", c.calibration.groups}};
  return j.dump(2) + "\n";
}

bool operator==(const ExperimentConfig& a, const ExperimentConfig& b) { return to_json(a) == to_json(b); }

ModelSpec student_spec(const ExperimentConfig& cfg) {
  const auto& d = cfg.data;
  if (cfg.model.preset == "mlp") {
    auto s = mlp(d.channels * d.height * d.width, cfg.model.hidden, 2, true);
    s.input_shape = {d.channels, d.height, d.width};  // first Dense flattens
    return s;
  }
  return appendix_cnn(d.channels, d.height, d.width, 2);
}

}  // namespace normlab
