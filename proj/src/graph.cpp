#include "normlab/graph.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "normlab/kernels.hpp"

namespace normlab {

namespace kp = kernels::parallel;

BatchNormState BatchNormState::create(std::size_t channels) {
  BatchNormState st;
  st.gamma = Tensor(Shape{channels}, std::vector<double>(channels, 1.0), true);
  st.beta = Tensor(Shape{channels}, true);
  st.running_mean.assign(channels, 0.0);
  st.running_var.assign(channels, 1.0);
  return st;
}

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Leaf: return "leaf";
    case OpKind::MatMul: return "matmul";
    case OpKind::AddBias: return "add_bias";
    case OpKind::Relu: return "relu";
    case OpKind::Conv2d: return "conv2d";
    case OpKind::MaxPool2d: return "maxpool2d";
    case OpKind::Flatten: return "flatten";
    case OpKind::BatchNorm: return "batchnorm";
    case OpKind::Softmax: return "softmax";
    case OpKind::Mean: return "mean";
    case OpKind::SoftmaxCrossEntropy: return "softmax_cross_entropy";
    case OpKind::MseMean: return "mse_mean";
    case OpKind::WeightedSum: return "weighted_sum";
    case OpKind::Add: return "add";
    case OpKind::Scale: return "scale";
  }
  return "?";
}

namespace {

[[noreturn]] void shape_error(const char* op, const Tensor& a, const Tensor& b,
                              const std::string& detail = {}) {
  std::string msg = std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                    to_string(b.shape());
  if (!detail.empty()) msg += " (" + detail + ")";
  throw Error(msg);
}

[[noreturn]] void rank_error(const char* op, const Tensor& a, const std::string& expected) {
  throw Error(std::string(op) + ": expected " + expected + ", got shape " + to_string(a.shape()));
}

void add_into(std::span<double> dst, std::span<const double> src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

// Splits [N, C, rest...] into batch, channels, spatial.
kernels::ChannelShape channel_shape(const Tensor& x) {
  kernels::ChannelShape s;
  s.batch = x.dim(0);
  s.channels = x.dim(1);
  s.spatial = x.numel() / (s.batch * s.channels);
  return s;
}

}  // namespace

int Graph::node_id(const Tensor& t) const {
  if (!t.defined()) return -1;
  auto it = ids_.find(t.storage_id());
  return it == ids_.end() ? -1 : it->second;
}

int Graph::register_input(const Tensor& t) {
  if (!t.defined()) throw Error("graph: undefined tensor passed to an op");
  auto it = ids_.find(t.storage_id());
  if (it != ids_.end()) return it->second;
  Node n;
  n.kind = OpKind::Leaf;
  n.value = t;
  n.needs_grad = t.requires_grad();
  nodes_.push_back(std::move(n));
  const int id = static_cast<int>(nodes_.size() - 1);
  ids_.emplace(t.storage_id(), id);
  return id;
}

Tensor Graph::emit(OpKind kind, std::vector<int> parents, Tensor out, BackwardFn fn) {
  Node n;
  n.kind = kind;
  n.needs_grad = std::any_of(parents.begin(), parents.end(), [&](int p) { return needs_grad(p); });
  n.parents = std::move(parents);
  n.value = out;
  if (n.needs_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  ids_.emplace(out.storage_id(), static_cast<int>(nodes_.size() - 1));
  return out;
}

// ---------------------------------------------------------------------------

Tensor Graph::matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2) rank_error("matmul", a, "2-D left operand");
  if (b.rank() != 1 && b.rank() != 2) rank_error("matmul", b, "1-D or 2-D right operand");
  const std::size_t m = a.dim(0), k = a.dim(1);
  const std::size_t n = b.rank() == 2 ? b.dim(1) : 1;
  if (b.dim(0) != k) shape_error("matmul", a, b, "inner dimensions differ");
  const int ia = register_input(a), ib = register_input(b);
  Tensor out(b.rank() == 2 ? Shape{m, n} : Shape{m});
  kp::gemm(kernels::GemmOp::NN, a.data().data(), b.data().data(), out.data().data(), m, k, n);
  Tensor ca = a, cb = b;
  return emit(OpKind::MatMul, {ia, ib}, out,
              [ca, cb, m, k, n](std::span<const double> g, std::vector<std::span<double>>& pg) {
                if (!pg[0].empty()) {
                  std::vector<double> tmp(m * k);
                  kp::gemm(kernels::GemmOp::NT, g.data(), cb.data().data(), tmp.data(), m, n, k);
                  add_into(pg[0], tmp);
                }
                if (!pg[1].empty()) {
                  std::vector<double> tmp(k * n);
                  kp::gemm(kernels::GemmOp::TN, ca.data().data(), g.data(), tmp.data(), k, m, n);
                  add_into(pg[1], tmp);
                }
              });
}

Tensor Graph::add_bias(const Tensor& x, const Tensor& bias) {
  if (x.rank() < 2) rank_error("add_bias", x, "[N,C,...] input");
  if (bias.rank() != 1 || bias.dim(0) != x.dim(1)) shape_error("add_bias", x, bias);
  const auto cs = channel_shape(x);
  const int ix = register_input(x), ib = register_input(bias);
  Tensor out = x.clone();
  out.set_requires_grad(false);
  auto o = out.data();
  const auto bv = bias.data();
  for (std::size_t n = 0; n < cs.batch; ++n)
    for (std::size_t c = 0; c < cs.channels; ++c) {
      double* p = o.data() + (n * cs.channels + c) * cs.spatial;
      for (std::size_t i = 0; i < cs.spatial; ++i) p[i] += bv[c];
    }
  return emit(OpKind::AddBias, {ix, ib}, out,
              [cs](std::span<const double> g, std::vector<std::span<double>>& pg) {
                if (!pg[0].empty()) add_into(pg[0], g);
                if (!pg[1].empty()) {
                  for (std::size_t c = 0; c < cs.channels; ++c) {
                    double acc = 0.0;
                    for (std::size_t n = 0; n < cs.batch; ++n) {
                      const double* p = g.data() + (n * cs.channels + c) * cs.spatial;
                      for (std::size_t i = 0; i < cs.spatial; ++i) acc += p[i];
                    }
                    pg[1][c] += acc;
                  }
                }
              });
}

Tensor Graph::relu(const Tensor& x) {
  const int ix = register_input(x);
  Tensor out(x.shape());
  auto o = out.data();
  const auto xv = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  Tensor cx = x;
  return emit(OpKind::Relu, {ix}, out,
              [cx](std::span<const double> g, std::vector<std::span<double>>& pg) {
                const auto xv = cx.data();
                // Subgradient at exactly 0 is 0.
                for (std::size_t i = 0; i < g.size(); ++i)
                  if (xv[i] > 0.0) pg[0][i] += g[i];
              });
}

Tensor Graph::conv2d(const Tensor& x, const Tensor& w) {
  if (x.rank() != 4) rank_error("conv2d", x, "NCHW input");
  if (w.rank() != 4 || w.dim(2) != 3 || w.dim(3) != 3 || w.dim(1) != x.dim(1))
    shape_error("conv2d", x, w, "kernel must be [Cout, Cin, 3, 3] with Cin matching input");
  kernels::ConvShape s{x.dim(0), x.dim(1), w.dim(0), x.dim(2), x.dim(3)};
  const int ix = register_input(x), iw = register_input(w);
  Tensor out(Shape{s.batch, s.out_channels, s.height, s.width});
  kp::conv2d_forward(x.data(), w.data(), out.data(), s);
  Tensor cx = x, cw = w;
  return emit(OpKind::Conv2d, {ix, iw}, out,
              [cx, cw, s](std::span<const double> g, std::vector<std::span<double>>& pg) {
                if (!pg[0].empty()) {
                  std::vector<double> tmp(cx.numel());
                  kp::conv2d_backward_input(g, cw.data(), tmp, s);
                  add_into(pg[0], tmp);
                }
                if (!pg[1].empty()) {
                  std::vector<double> tmp(cw.numel());
                  kp::conv2d_backward_weight(cx.data(), g, tmp, s);
                  add_into(pg[1], tmp);
                }
              });
}

Tensor Graph::maxpool2d(const Tensor& x) {
  if (x.rank() != 4) rank_error("maxpool2d", x, "NCHW input");
  if (x.dim(2) < 2 || x.dim(3) < 2) rank_error("maxpool2d", x, "spatial size >= 2");
  kernels::PoolShape s{x.dim(0), x.dim(1), x.dim(2), x.dim(3)};
  const int ix = register_input(x);
  Tensor out(Shape{s.batch, s.channels, s.out_height(), s.out_width()});
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.numel());
  kp::maxpool_forward(x.data(), out.data(), *argmax, s);
  return emit(OpKind::MaxPool2d, {ix}, out,
              [argmax](std::span<const double> g, std::vector<std::span<double>>& pg) {
                kp::maxpool_backward(g, *argmax, pg[0]);
              });
}

Tensor Graph::flatten(const Tensor& x) {
  if (x.rank() < 2) rank_error("flatten", x, "[N, ...] input");
  const int ix = register_input(x);
  Tensor out = x.reshaped(Shape{x.dim(0), x.numel() / x.dim(0)});
  return emit(OpKind::Flatten, {ix}, out,
              [](std::span<const double> g, std::vector<std::span<double>>& pg) {
                add_into(pg[0], g);
              });
}

Tensor Graph::batchnorm(const Tensor& x, BatchNormState& st, bool update_running) {
  if (x.rank() != 2 && x.rank() != 4) rank_error("batchnorm", x, "[N,C] or [N,C,H,W] input");
  if (x.dim(1) != st.channels() || st.gamma.numel() != st.channels() ||
      st.beta.numel() != st.channels())
    shape_error("batchnorm", x, st.gamma, "channel count");
  const auto cs = channel_shape(x);
  const bool train = st.mode == Mode::Train;
  if (train && cs.batch < 2) throw Error("batchnorm requires batch \xE2\x89\xA5 2");

  std::vector<double> mean(cs.channels), var(cs.channels);
  if (train) {
    kp::channel_moments(x.data(), mean, var, cs);
    if (update_running) {
      for (std::size_t c = 0; c < cs.channels; ++c) {
        st.running_mean[c] = (1.0 - st.momentum) * st.running_mean[c] + st.momentum * mean[c];
        st.running_var[c] = (1.0 - st.momentum) * st.running_var[c] + st.momentum * var[c];
      }
    }
  } else {
    mean = st.running_mean;
    var = st.running_var;
  }
  auto inv_std = std::make_shared<std::vector<double>>(cs.channels);
  for (std::size_t c = 0; c < cs.channels; ++c) (*inv_std)[c] = 1.0 / std::sqrt(var[c] + st.epsilon);

  const int ix = register_input(x), ig = register_input(st.gamma), ib = register_input(st.beta);
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  Tensor out(x.shape());
  {
    const auto xv = x.data();
    const auto gv = st.gamma.data(), bv = st.beta.data();
    auto o = out.data();
    const long total = static_cast<long>(cs.batch * cs.channels);
#pragma omp parallel for schedule(static)
    for (long nc = 0; nc < total; ++nc) {
      const std::size_t c = static_cast<std::size_t>(nc) % cs.channels;
      const std::size_t base = static_cast<std::size_t>(nc) * cs.spatial;
      for (std::size_t i = 0; i < cs.spatial; ++i) {
        const double h = (xv[base + i] - mean[c]) * (*inv_std)[c];
        (*xhat)[base + i] = h;
        o[base + i] = gv[c] * h + bv[c];
      }
    }
  }
  Tensor gamma = st.gamma;
  return emit(
      OpKind::BatchNorm, {ix, ig, ib}, out,
      [cs, train, xhat, inv_std, gamma](std::span<const double> g,
                                        std::vector<std::span<double>>& pg) {
        std::vector<double> sum_g(cs.channels), sum_gx(cs.channels);
        const long C = static_cast<long>(cs.channels);
#pragma omp parallel for schedule(static)
        for (long lc = 0; lc < C; ++lc) {
          const auto c = static_cast<std::size_t>(lc);
          double a = 0.0, b = 0.0;
          for (std::size_t n = 0; n < cs.batch; ++n) {
            const std::size_t base = (n * cs.channels + c) * cs.spatial;
            for (std::size_t i = 0; i < cs.spatial; ++i) {
              a += g[base + i];
              b += g[base + i] * (*xhat)[base + i];
            }
          }
          sum_g[c] = a;
          sum_gx[c] = b;
        }
        if (!pg[1].empty())
          for (std::size_t c = 0; c < cs.channels; ++c) pg[1][c] += sum_gx[c];
        if (!pg[2].empty())
          for (std::size_t c = 0; c < cs.channels; ++c) pg[2][c] += sum_g[c];
        if (pg[0].empty()) return;
        const auto gv = gamma.data();
        const double count = static_cast<double>(cs.batch * cs.spatial);
        const long total = static_cast<long>(cs.batch * cs.channels);
#pragma omp parallel for schedule(static)
        for (long nc = 0; nc < total; ++nc) {
          const std::size_t c = static_cast<std::size_t>(nc) % cs.channels;
          const std::size_t base = static_cast<std::size_t>(nc) * cs.spatial;
          const double k = gv[c] * (*inv_std)[c];
          if (train) {
            const double mg = sum_g[c] / count, mgx = sum_gx[c] / count;
            for (std::size_t i = 0; i < cs.spatial; ++i)
              pg[0][base + i] += k * (g[base + i] - mg - (*xhat)[base + i] * mgx);
          } else {
            for (std::size_t i = 0; i < cs.spatial; ++i) pg[0][base + i] += k * g[base + i];
          }
        }
      });
}

Tensor Graph::softmax(const Tensor& x) {
  if (x.rank() != 2) rank_error("softmax", x, "[N,k] input");
  const std::size_t rows = x.dim(0), k = x.dim(1);
  const int ix = register_input(x);
  Tensor out(x.shape());
  const auto xv = x.data();
  auto o = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* z = xv.data() + r * k;
    double* p = o.data() + r * k;
    const double mx = *std::max_element(z, z + k);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += (p[j] = std::exp(z[j] - mx));
    for (std::size_t j = 0; j < k; ++j) p[j] /= s;
  }
  Tensor cp = out;
  return emit(OpKind::Softmax, {ix}, out,
              [cp, rows, k](std::span<const double> g, std::vector<std::span<double>>& pg) {
                const auto p = cp.data();
                for (std::size_t r = 0; r < rows; ++r) {
                  double dot = 0.0;
                  for (std::size_t j = 0; j < k; ++j) dot += g[r * k + j] * p[r * k + j];
                  for (std::size_t j = 0; j < k; ++j)
                    pg[0][r * k + j] += p[r * k + j] * (g[r * k + j] - dot);
                }
              });
}

Tensor Graph::mean(const Tensor& x) {
  const int ix = register_input(x);
  const auto xv = x.data();
  double s = 0.0;
  for (double v : xv) s += v;
  const double count = static_cast<double>(xv.size());
  return emit(OpKind::Mean, {ix}, Tensor::scalar(s / count),
              [count](std::span<const double> g, std::vector<std::span<double>>& pg) {
                const double d = g[0] / count;
                for (auto& v : pg[0]) v += d;
              });
}

Tensor Graph::softmax_cross_entropy(const Tensor& logits, const Tensor& onehot) {
  if (logits.rank() != 2) rank_error("softmax_cross_entropy", logits, "[N,k] logits");
  if (logits.shape() != onehot.shape()) shape_error("softmax_cross_entropy", logits, onehot);
  const std::size_t rows = logits.dim(0), k = logits.dim(1);
  if (k < 2) rank_error("softmax_cross_entropy", logits, "k >= 2 classes");
  const int il = register_input(logits), iy = register_input(onehot);
  auto probs = std::make_shared<std::vector<double>>(rows * k);
  const auto z = logits.data();
  const auto y = onehot.data();
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* zr = z.data() + r * k;
    const double mx = *std::max_element(zr, zr + k);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(zr[j] - mx);
    const double lse = std::log(s);
    double row = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      const double logp = zr[j] - mx - lse;
      (*probs)[r * k + j] = std::exp(logp);
      if (y[r * k + j] != 0.0) row -= y[r * k + j] * logp;
    }
    total += row;
  }
  Tensor cy = onehot;
  return emit(OpKind::SoftmaxCrossEntropy, {il, iy},
              Tensor::scalar(total / static_cast<double>(rows)),
              [probs, cy, rows, k](std::span<const double> g, std::vector<std::span<double>>& pg) {
                if (pg[0].empty()) return;
                const auto y = cy.data();
                const double scale = g[0] / static_cast<double>(rows);
                for (std::size_t r = 0; r < rows; ++r) {
                  double ysum = 0.0;
                  for (std::size_t j = 0; j < k; ++j) ysum += y[r * k + j];
                  for (std::size_t j = 0; j < k; ++j)
                    pg[0][r * k + j] += scale * ((*probs)[r * k + j] * ysum - y[r * k + j]);
                }
              });
}

Tensor Graph::mse_mean(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error("mse_mean", a, b);
  const int ia = register_input(a), ib = register_input(b);
  const auto av = a.data(), bv = b.data();
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double d = av[i] - bv[i];
    s += d * d;
  }
  const double count = static_cast<double>(av.size());
  Tensor ca = a, cb = b;
  return emit(OpKind::MseMean, {ia, ib}, Tensor::scalar(s / count),
              [ca, cb, count](std::span<const double> g, std::vector<std::span<double>>& pg) {
                const auto av = ca.data(), bv = cb.data();
                const double k = 2.0 * g[0] / count;
                for (std::size_t i = 0; i < av.size(); ++i) {
                  const double d = k * (av[i] - bv[i]);
                  if (!pg[0].empty()) pg[0][i] += d;
                  if (!pg[1].empty()) pg[1][i] -= d;
                }
              });
}

Tensor Graph::weighted_sum(const Tensor& x, const Tensor& weights) {
  if (x.numel() != weights.numel()) shape_error("weighted_sum", x, weights);
  const int ix = register_input(x);
  const auto xv = x.data(), wv = weights.data();
  double s = 0.0;
  for (std::size_t i = 0; i < xv.size(); ++i) s += xv[i] * wv[i];
  Tensor cw = weights;
  return emit(OpKind::WeightedSum, {ix}, Tensor::scalar(s),
              [cw](std::span<const double> g, std::vector<std::span<double>>& pg) {
                const auto wv = cw.data();
                for (std::size_t i = 0; i < wv.size(); ++i) pg[0][i] += g[0] * wv[i];
              });
}

Tensor Graph::add(const Tensor& a, const Tensor& b) {
  if (a.numel() != 1 || b.numel() != 1) shape_error("add", a, b, "scalars expected");
  const int ia = register_input(a), ib = register_input(b);
  return emit(OpKind::Add, {ia, ib}, Tensor::scalar(a.item() + b.item()),
              [](std::span<const double> g, std::vector<std::span<double>>& pg) {
                if (!pg[0].empty()) pg[0][0] += g[0];
                if (!pg[1].empty()) pg[1][0] += g[0];
              });
}

Tensor Graph::scale(const Tensor& x, double factor) {
  const int ix = register_input(x);
  Tensor out(x.shape());
  const auto xv = x.data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = factor * xv[i];
  return emit(OpKind::Scale, {ix}, out,
              [factor](std::span<const double> g, std::vector<std::span<double>>& pg) {
                for (std::size_t i = 0; i < g.size(); ++i) pg[0][i] += factor * g[i];
              });
}

// ---------------------------------------------------------------------------

void Graph::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw Error("backward: loss must be a scalar, got shape " +
                (loss.defined() ? to_string(loss.shape()) : std::string("<undefined>")));
  const int root = node_id(loss);
  if (root < 0) throw Error("backward: loss was not produced by this graph");
  if (!needs_grad(root)) return;

  // Leaf gradients go straight into the tensor's own buffer.
  std::vector<std::vector<double>> grads(nodes_.size());
  auto buffer = [&](int id) -> std::span<double> {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.needs_grad) return {};
    if (n.kind == OpKind::Leaf) return n.value.grad_mut();
    auto& g = grads[static_cast<std::size_t>(id)];
    if (g.empty()) g.assign(n.value.numel(), 0.0);
    return g;
  };

  grads[static_cast<std::size_t>(root)].assign(1, 1.0);
  if (nodes_[static_cast<std::size_t>(root)].kind == OpKind::Leaf) {
    nodes_[static_cast<std::size_t>(root)].value.grad_mut()[0] += 1.0;
    return;
  }
  std::vector<std::span<double>> pgrads;
  for (int id = root; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.kind == OpKind::Leaf || !n.needs_grad) continue;
    auto& g = grads[static_cast<std::size_t>(id)];
    if (g.empty()) continue;  // not reachable from the loss
    pgrads.clear();
    for (int p : n.parents) pgrads.push_back(buffer(p));
    n.backward(g, pgrads);
    std::vector<double>().swap(g);
  }
}

}  // namespace normlab
