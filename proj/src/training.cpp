#include "normlab/training.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "normlab/metrics.hpp"
#include "normlab/rng.hpp"

namespace normlab {

void validate(const TrainConfig& cfg) {
  auto fail = [](const std::string& m) { throw Error("train config: " + m); };
  if (!(cfg.optimizer.lr > 0.0)) fail("lr must be > 0");
  if (cfg.epochs == 0) fail("epochs must be >= 1");
  if (cfg.batch_size == 0) fail("batch_size must be >= 1");
  if (cfg.l2_coefficient < 0.0) fail("l2_coefficient must be >= 0");
  if (cfg.optimizer.momentum < 0.0 || cfg.optimizer.momentum >= 1.0) fail("momentum must be in [0,1)");
  if (cfg.schedule.kind == ScheduleKind::Cosine && !(cfg.schedule.lr_end > 0.0))
    fail("cosine lr_end must be > 0");
}

double lr_at(const TrainConfig& cfg, std::size_t epoch) {
  if (epoch >= cfg.epochs)
    throw Error("lr_at: epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(cfg.epochs) + ")");
  const double start = cfg.optimizer.lr;
  switch (cfg.schedule.kind) {
    case ScheduleKind::Constant:
      return start;
    case ScheduleKind::Cosine: {
      if (cfg.epochs == 1) return start;
      const double end = cfg.schedule.lr_end;
      const double t = static_cast<double>(epoch) / static_cast<double>(cfg.epochs - 1);
      return end + 0.5 * (start - end) * (1.0 + std::cos(std::numbers::pi * t));
    }
    case ScheduleKind::Step: {
      double lr = start;
      for (auto e : cfg.schedule.at_epochs)
        if (epoch >= e) lr *= cfg.schedule.factor;
      return lr;
    }
  }
  return start;
}

Optimizer::Optimizer(const OptimizerConfig& cfg, std::vector<Tensor> params)
    : cfg_(cfg), params_(std::move(params)) {
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    if (cfg_.kind == OptimizerKind::Adam) v_.emplace_back(p.numel(), 0.0);
  }
}

void Optimizer::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void Optimizer::step(double lr) {
  ++t_;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (!p.has_grad()) continue;
    auto w = p.data();
    auto g = p.grad();
    auto& m = m_[i];
    if (cfg_.kind == OptimizerKind::SGD) {
      const double mu = cfg_.momentum;
      for (std::size_t j = 0; j < w.size(); ++j) {
        double d = g[j];
        if (mu != 0.0) {
          m[j] = t_ == 1 ? d : mu * m[j] + d;
          d = cfg_.nesterov ? d + mu * m[j] : m[j];
        }
        w[j] -= lr * d;
      }
    } else {
      auto& v = v_[i];
      const double b1 = cfg_.beta1, b2 = cfg_.beta2;
      const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
      const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
      for (std::size_t j = 0; j < w.size(); ++j) {
        m[j] = b1 * m[j] + (1.0 - b1) * g[j];
        v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
        w[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg_.epsilon);
      }
    }
  }
}

std::string TrainTrace::to_csv() const {
  std::ostringstream os;
  os.precision(17);
  os << "epoch,loss,l_cls,l_ct,lr";
  for (const auto& s : split_names) os << ",error_" << s;
  os << '\n';
  for (const auto& e : epochs) {
    os << e.epoch << ',' << e.loss << ',' << e.l_cls << ',' << e.l_ct << ',' << e.lr;
    for (double v : e.split_errors) os << ',' << v;
    os << '\n';
  }
  return os.str();
}

namespace {

double l2_penalty(const std::vector<Tensor>& weights) {
  double s = 0.0;
  for (const auto& w : weights)
    for (double v : w.data()) s += v * v;
  return s;
}

void add_l2_grad(std::vector<Tensor>& weights, double c) {
  for (auto& w : weights) {
    auto g = w.grad_mut();
    auto d = w.data();
    for (std::size_t j = 0; j < d.size(); ++j) g[j] += 2.0 * c * d[j];
  }
}

TrainResult train_loop(const ModelSpec& spec, const Dataset& data, const TrainConfig& cfg,
                       Model* teacher, double lambda, const TrainHooks& hooks) {
  validate(cfg);
  if (data.size() == 0) throw Error("train: empty dataset");
  const bool has_bn = spec.count(LayerKind::BatchNorm) > 0;
  if (has_bn && cfg.batch_size < 2) throw Error("train config: batch_size must be >= 2 for a model with BatchNorm");
  if (data.classes != validate(spec).back()[0])
    throw Error("train: dataset has " + std::to_string(data.classes) + " classes, model outputs " +
                std::to_string(validate(spec).back()[0]));

  TrainResult res;
  res.model = Model::build(spec, derive_seed(cfg.seed, "init"));
  Model& m = res.model;
  std::uint64_t teacher_hash = 0;
  if (teacher) {
    if (!teacher->frozen()) throw Error("train_student_ct: teacher must be frozen");
    teacher_hash = teacher->state_hash();
  }
  Optimizer opt(cfg.optimizer, m.parameters());
  auto weights = m.weights();
  for (const auto& [name, ds] : hooks.eval_sets) res.trace.split_names.push_back(name);

  const std::size_t n = data.size();
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at(cfg, epoch);
    Rng rng(derive_seed(cfg.seed, "shuffle", epoch));
    const auto perm = rng.permutation(n);
    double sum_loss = 0.0, sum_cls = 0.0, sum_ct = 0.0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t len = std::min(cfg.batch_size, n - start);
      if (has_bn && len < 2) continue;
      std::span<const std::size_t> idx(perm.data() + start, len);
      const Tensor x = data.batch(idx);
      const Tensor y = data.onehot(idx);

      opt.zero_grad();
      Graph g;
      auto out = m.forward(g, x, Mode::Train);
      Tensor loss = g.softmax_cross_entropy(out.logits, y);
      const double cls = loss.item();
      double ct = 0.0;
      if (teacher) {
        const auto t = teacher->infer(x, Mode::Eval);
        if (t.representation.shape() != out.representation.shape())
          throw Error("train_student_ct: teacher representation " + to_string(t.representation.shape()) +
                      " vs student " + to_string(out.representation.shape()));
        Tensor lct = g.mse_mean(out.representation, t.representation);
        ct = lct.item();
        loss = g.add(loss, g.scale(lct, lambda));
      }
      g.backward(loss);
      double total = loss.item();
      if (cfg.l2_coefficient > 0.0) {
        total += cfg.l2_coefficient * l2_penalty(weights);
        add_l2_grad(weights, cfg.l2_coefficient);
      }
      opt.step(lr);

      res.trace.step_loss.push_back(total);
      sum_loss += total * static_cast<double>(len);
      sum_cls += cls * static_cast<double>(len);
      sum_ct += ct * static_cast<double>(len);
      seen += len;
    }
    if (seen == 0) throw Error("train: no batch of size >= 2 in an epoch");
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.loss = sum_loss / static_cast<double>(seen);
    rec.l_cls = sum_cls / static_cast<double>(seen);
    rec.l_ct = sum_ct / static_cast<double>(seen);
    for (const auto& [name, ds] : hooks.eval_sets) rec.split_errors.push_back(error_rate(m, *ds));
    if (!std::isfinite(rec.loss)) throw Error("train: loss became non-finite at epoch " + std::to_string(epoch));
    res.trace.epochs.push_back(std::move(rec));
    if (hooks.on_epoch_end) hooks.on_epoch_end(epoch, m);
    if (teacher && teacher->state_hash() != teacher_hash)
      throw Error("train_student_ct: teacher state changed during student training");
  }
  return res;
}

}  // namespace

TrainResult train_baseline(const ModelSpec& spec, const Dataset& data, const TrainConfig& cfg,
                           const TrainHooks& hooks) {
  return train_loop(spec, data, cfg, nullptr, 0.0, hooks);
}

TrainResult train_teacher(const ModelSpec& spec, const Dataset& data, const TrainConfig& cfg,
                          const TrainHooks& hooks) {
  if (spec.count(LayerKind::BatchNorm) > 0) throw Error("teacher must be BN-free");
  auto res = train_loop(spec, data, cfg, nullptr, 0.0, hooks);
  res.model.freeze();
  return res;
}

TrainResult train_student_ct(const ModelSpec& spec, Model& teacher, const Dataset& data,
                             const CTConfig& cfg, const TrainHooks& hooks) {
  if (!(cfg.lambda >= 0.0)) throw Error("CT config: lambda must be >= 0");
  ModelSpec stripped = strip_batchnorm(spec);
  ModelSpec tspec = teacher.spec();
  stripped.name = tspec.name = "";
  if (!(stripped == tspec))
    throw Error("train_student_ct: teacher spec must equal strip_batchnorm(student spec)");
  return train_loop(spec, data, cfg.student, &teacher, cfg.lambda, hooks);
}

}  // namespace normlab
