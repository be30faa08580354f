#include "support.hpp"

#include <cmath>
#include <functional>
#include <limits>

#include "normlab/graph.hpp"
#include "normlab/model.hpp"
#include "normlab/rng.hpp"

namespace normlab::testkit {

namespace {

constexpr double kStep = 1e-5;

Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape), true);
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

using Fn = std::function<Tensor(Graph&, std::vector<Tensor>&)>;

// Reduces a non-scalar output to a scalar with fixed random weights so every
// output element contributes to the checked gradient.
Tensor reduce(Graph& g, const Tensor& out, const Tensor& w) {
  return out.numel() == 1 ? out : g.weighted_sum(out, w);
}

double check(std::vector<Tensor> inputs, const Fn& f, Rng& rng) {
  Tensor w;
  {
    Graph g;
    auto out = f(g, inputs);
    w = Tensor(out.shape());
    for (auto& v : w.data()) v = rng.uniform(-1.0, 1.0);
  }
  for (auto& t : inputs) t.zero_grad();
  {
    Graph g;
    g.backward(reduce(g, f(g, inputs), w));
  }
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (auto& t : inputs) {
    if (!t.requires_grad()) continue;
    std::vector<double> analytic(t.grad().begin(), t.grad().end());
    auto x = t.data();
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double keep = x[i];
      x[i] = keep + kStep;
      double up, down;
      {
        Graph g;
        up = reduce(g, f(g, inputs), w).item();
      }
      x[i] = keep - kStep;
      {
        Graph g;
        down = reduce(g, f(g, inputs), w).item();
      }
      x[i] = keep;
      const double numeric = (up - down) / (2.0 * kStep);
      diff += (analytic[i] - numeric) * (analytic[i] - numeric);
      na += analytic[i] * analytic[i];
      nn += numeric * numeric;
    }
  }
  return std::sqrt(diff) / std::max(std::sqrt(na) + std::sqrt(nn), 1e-12);
}

struct Case {
  std::string name;
  std::function<double(Rng&)> run;
};

Tensor onehot_rows(Rng& rng, std::size_t n, std::size_t k) {
  Tensor y({n, k});
  for (std::size_t i = 0; i < n; ++i) y.data()[i * k + static_cast<std::size_t>(rng.integer(0, long(k) - 1))] = 1.0;
  return y;
}

std::vector<Case> cases() {
  std::vector<Case> c;
  c.push_back({"matmul", [](Rng& r) {
                 return check({random_tensor(r, {3, 4}), random_tensor(r, {4, 5})},
                              [](Graph& g, auto& in) { return g.matmul(in[0], in[1]); }, r);
               }});
  c.push_back({"matmul_vector", [](Rng& r) {
                 return check({random_tensor(r, {3, 4}), random_tensor(r, {4})},
                              [](Graph& g, auto& in) { return g.matmul(in[0], in[1]); }, r);
               }});
  c.push_back({"add_bias", [](Rng& r) {
                 return check({random_tensor(r, {2, 3, 2, 2}), random_tensor(r, {3})},
                              [](Graph& g, auto& in) { return g.add_bias(in[0], in[1]); }, r);
               }});
  c.push_back({"relu", [](Rng& r) {
                 return check({random_tensor(r, {4, 5})}, [](Graph& g, auto& in) { return g.relu(in[0]); }, r);
               }});
  c.push_back({"conv2d", [](Rng& r) {
                 return check({random_tensor(r, {2, 2, 4, 5}), random_tensor(r, {3, 2, 3, 3})},
                              [](Graph& g, auto& in) { return g.conv2d(in[0], in[1]); }, r);
               }});
  c.push_back({"maxpool2d", [](Rng& r) {
                 return check({random_tensor(r, {2, 2, 5, 4})}, [](Graph& g, auto& in) { return g.maxpool2d(in[0]); },
                              r);
               }});
  c.push_back({"flatten", [](Rng& r) {
                 return check({random_tensor(r, {2, 2, 3, 3})}, [](Graph& g, auto& in) { return g.flatten(in[0]); }, r);
               }});
  for (bool spatial : {false, true}) {
    c.push_back({spatial ? "batchnorm_train_nchw" : "batchnorm_train", [spatial](Rng& r) {
                   auto st = std::make_shared<BatchNormState>(BatchNormState::create(3));
                   st->gamma = random_tensor(r, {3}, 0.5, 1.5);
                   st->beta = random_tensor(r, {3});
                   Shape s = spatial ? Shape{4, 3, 2, 3} : Shape{5, 3};
                   return check({random_tensor(r, s), st->gamma, st->beta},
                                [st](Graph& g, auto& in) { return g.batchnorm(in[0], *st, false); }, r);
                 }});
  }
  c.push_back({"batchnorm_eval", [](Rng& r) {
                 auto st = std::make_shared<BatchNormState>(BatchNormState::create(3));
                 st->gamma = random_tensor(r, {3}, 0.5, 1.5);
                 st->beta = random_tensor(r, {3});
                 for (std::size_t i = 0; i < 3; ++i) {
                   st->running_mean[i] = r.uniform(-1, 1);
                   st->running_var[i] = r.uniform(0.5, 2);
                 }
                 st->mode = Mode::Eval;
                 return check({random_tensor(r, {4, 3}), st->gamma, st->beta},
                              [st](Graph& g, auto& in) { return g.batchnorm(in[0], *st); }, r);
               }});
  c.push_back({"softmax", [](Rng& r) {
                 return check({random_tensor(r, {3, 4}, -2, 2)}, [](Graph& g, auto& in) { return g.softmax(in[0]); }, r);
               }});
  c.push_back({"mean", [](Rng& r) {
                 return check({random_tensor(r, {3, 4})}, [](Graph& g, auto& in) { return g.mean(in[0]); }, r);
               }});
  c.push_back({"softmax_cross_entropy", [](Rng& r) {
                 Tensor y = onehot_rows(r, 4, 3);
                 return check({random_tensor(r, {4, 3}, -2, 2)},
                              [y](Graph& g, auto& in) { return g.softmax_cross_entropy(in[0], y); }, r);
               }});
  c.push_back({"mse_mean", [](Rng& r) {
                 return check({random_tensor(r, {3, 4}), random_tensor(r, {3, 4})},
                              [](Graph& g, auto& in) { return g.mse_mean(in[0], in[1]); }, r);
               }});
  c.push_back({"weighted_sum", [](Rng& r) {
                 Tensor w = random_tensor(r, {3, 4});
                 w.set_requires_grad(false);
                 return check({random_tensor(r, {3, 4})}, [w](Graph& g, auto& in) { return g.weighted_sum(in[0], w); },
                              r);
               }});
  c.push_back({"add_scale", [](Rng& r) {
                 return check({random_tensor(r, {1}), random_tensor(r, {1})},
                              [](Graph& g, auto& in) {
                                return g.add(g.scale(g.mean(in[0]), 2.5), g.scale(g.mean(in[1]), -0.5));
                              },
                              r);
               }});
  c.push_back({"cnn_with_batchnorm", [](Rng& r) {
                 using K = LayerKind;
                 ModelSpec spec{"tiny_cnn", {2, 4, 4},
                                {{K::Conv2D, 2, 3}, {K::BatchNorm}, {K::ReLU}, {K::MaxPool2D},
                                 {K::Dense, 12, 5}, {K::BatchNorm}, {K::ReLU}, {K::Dense, 5, 3}, {K::Softmax}},
                                6};
                 auto m = std::make_shared<Model>(Model::build(spec, r.engine()()));
                 Tensor x = random_tensor(r, {4, 2, 4, 4}, 0, 1);
                 Tensor y = onehot_rows(r, 4, 3);
                 std::vector<Tensor> in = m->parameters();
                 in.push_back(x);
                 return check(in,
                              [m, y](Graph& g, auto& t) {
                                return g.softmax_cross_entropy(m->forward(g, t.back(), Mode::Train).logits, y);
                              },
                              r);
               }});
  return c;
}

}  // namespace

std::vector<GradCheck> gradient_suite(std::size_t seeds) {
  std::vector<GradCheck> out;
  const auto all = cases();
  for (const auto& c : all) {
    for (std::uint64_t s = 0; s < seeds; ++s) {
      Rng rng(derive_seed(s, "gradcheck", fnv1a(c.name.data(), c.name.size())));
      out.push_back({c.name, s, c.run(rng)});
    }
  }
  return out;
}

theory::Vector brute_force_max_margin_2d(const theory::Matrix& X, const theory::Vector& Y,
                                         const theory::Vector& U) {
  using theory::Vector;
  const auto n = X.rows();
  // Work in beta = U theta, rows a_i = y_i x_i U^-1; constraints a_i . beta >= 1.
  theory::Matrix A(n, 2);
  for (Eigen::Index i = 0; i < n; ++i) A.row(i) = Y(i) * X.row(i).cwiseQuotient(U.transpose());
  auto feasible = [&](const Vector& b) { return ((A * b).array() >= 1.0 - 1e-9).all(); };
  Vector best;
  double best_norm = std::numeric_limits<double>::infinity();
  auto consider = [&](const Vector& b) {
    if (b.allFinite() && feasible(b) && b.norm() < best_norm) {
      best = b;
      best_norm = b.norm();
    }
  };
  for (Eigen::Index i = 0; i < n; ++i) consider(A.row(i).transpose() / A.row(i).squaredNorm());
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j) {
      Eigen::Matrix2d M;
      M.row(0) = A.row(i);
      M.row(1) = A.row(j);
      if (std::abs(M.determinant()) < 1e-12) continue;
      consider(M.inverse() * Eigen::Vector2d(1.0, 1.0));
    }
  if (!std::isfinite(best_norm)) return Vector();
  return best.cwiseQuotient(U);
}

void separable_instance(std::uint64_t seed, std::size_t n, std::size_t d, theory::Matrix& X,
                        theory::Vector& Y, double gap) {
  Rng rng(derive_seed(seed, "separable"));
  theory::Vector w(static_cast<Eigen::Index>(d));
  for (auto& v : w) v = rng.normal();
  w.normalize();
  X.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  Y.resize(static_cast<Eigen::Index>(n));
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    double s = 0.0;
    do {
      for (Eigen::Index j = 0; j < X.cols(); ++j) X(i, j) = rng.normal();
      s = X.row(i).dot(w);
    } while (std::abs(s) < gap);
    Y(i) = s > 0 ? 1.0 : -1.0;
  }
}

void calibrated_sample(std::uint64_t seed, std::size_t n, std::size_t k, Tensor& probs,
                       std::vector<int>& labels) {
  Rng rng(derive_seed(seed, "calibrated"));
  probs = Tensor({n, k});
  labels.assign(n, 0);
  auto p = probs.data();
  for (std::size_t i = 0; i < n; ++i) {
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += p[i * k + j] = std::exp(rng.normal(0.0, 1.5));
    for (std::size_t j = 0; j < k; ++j) p[i * k + j] /= z;
    double u = rng.uniform(), acc = 0.0;
    labels[i] = static_cast<int>(k - 1);
    for (std::size_t j = 0; j < k; ++j) {
      acc += p[i * k + j];
      if (u < acc) {
        labels[i] = static_cast<int>(j);
        break;
      }
    }
  }
}

}  // namespace normlab::testkit
