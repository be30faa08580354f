#include "normlab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "normlab/rng.hpp"

namespace normlab {

namespace {
constexpr std::size_t kEvalChunk = 256;
constexpr std::size_t kSaliencyChunk = 64;

std::vector<std::size_t> iota_range(std::size_t begin, std::size_t end) {
  std::vector<std::size_t> v(end - begin);
  std::iota(v.begin(), v.end(), begin);
  return v;
}
}  // namespace

std::vector<int> predictions(const Tensor& scores) {
  if (scores.rank() != 2) throw Error("predictions: expected [N,k] scores, got " + to_string(scores.shape()));
  const std::size_t n = scores.dim(0), k = scores.dim(1);
  const auto s = scores.data();
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j)
      if (s[i * k + j] > s[i * k + best]) best = j;
    out[i] = static_cast<int>(best);
  }
  return out;
}

Tensor predict_probs(Model& model, const Tensor& images) {
  const std::size_t n = images.dim(0);
  const Dataset view{images, std::vector<int>(n, 0), model.spec().num_classes()};
  std::vector<double> probs;
  std::size_t k = 0;
  for (std::size_t start = 0; start < n; start += kEvalChunk) {
    const auto idx = iota_range(start, std::min(n, start + kEvalChunk));
    const auto r = model.infer(start == 0 && idx.size() == n ? images : view.batch(idx), Mode::Eval);
    k = r.probs.dim(1);
    probs.insert(probs.end(), r.probs.data().begin(), r.probs.data().end());
  }
  return Tensor(Shape{n, k}, std::move(probs));
}

double error_rate(const Tensor& scores, const std::vector<int>& labels) {
  if (labels.empty()) throw Error("error_rate: empty split");
  if (scores.dim(0) != labels.size())
    throw Error("error_rate: " + std::to_string(scores.dim(0)) + " predictions for " +
                std::to_string(labels.size()) + " labels");
  const auto pred = predictions(scores);
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) wrong += pred[i] != labels[i];
  return 100.0 * static_cast<double>(wrong) / static_cast<double>(labels.size());
}

double error_rate(Model& model, const Dataset& data) {
  if (data.size() == 0) throw Error("error_rate: empty split");
  return error_rate(predict_probs(model, data.images), data.labels);
}

CorruptionReport mean_corruption_error(Model& model, const Dataset& clean,
                                       const std::vector<CorruptionKind>& kinds,
                                       const std::vector<int>& severities, std::uint64_t seed) {
  if (kinds.empty()) throw Error("mean_corruption_error: empty corruption kind list");
  if (severities.empty()) throw Error("mean_corruption_error: empty severity list");
  CorruptionReport rep;
  rep.clean_error = error_rate(model, clean);
  double sum = 0.0;
  for (auto kind : kinds)
    for (int sev : severities) {
      // Seeds depend only on (seed, kind, severity), not on list order.
      const auto corrupted = apply_corruption(clean, {kind, sev}, derive_seed(seed, "mce"));
      rep.cells.push_back({kind, sev, error_rate(model, corrupted)});
      sum += rep.cells.back().error;
    }
  rep.mce = sum / static_cast<double>(rep.cells.size());
  return rep;
}

// ---------------------------------------------------------------------------

Model adapt_bn_statistics(const Model& model, const Tensor& batch, double blend) {
  if (model.spec().count(LayerKind::BatchNorm) == 0) throw Error("nothing to adapt: model has no BatchNorm layer");
  if (batch.rank() == 0 || batch.dim(0) < 2) throw Error("adapt_bn_statistics: adaptation batch must hold >= 2 samples");
  if (!(blend > 0.0 && blend <= 1.0)) throw Error("adapt_bn_statistics: blend must be in (0,1]");
  Model out = model.clone();
  const bool was_frozen = out.frozen();
  out.unfreeze();
  std::vector<double> saved;
  for (auto& l : out.layers())
    if (l.bn) {
      saved.push_back(l.bn->momentum);
      l.bn->momentum = blend;
    }
  out.infer(batch, Mode::Train);
  std::size_t i = 0;
  for (auto& l : out.layers())
    if (l.bn) {
      l.bn->momentum = saved[i++];
      l.bn->mode = Mode::Eval;
    }
  if (was_frozen) out.freeze();
  return out;
}

const char* scenario_name(AdaptScenarioKind kind) {
  switch (kind) {
    case AdaptScenarioKind::AdaptOneTestOne: return "adapt_one_test_one";
    case AdaptScenarioKind::AdaptOneTestAll: return "adapt_one_test_all";
    case AdaptScenarioKind::AdaptAllTestAll: return "adapt_all_test_all";
  }
  return "?";
}

AdaptScenarioResult run_adapt_scenario(const Model& model, const Dataset& pool, const Dataset& test,
                                       const AdaptScenario& sc, const std::vector<CorruptionKind>& kinds) {
  if (model.spec().count(LayerKind::BatchNorm) == 0) throw Error("nothing to adapt: model has no BatchNorm layer");
  if (kinds.empty()) throw Error("run_adapt_scenario: empty corruption kind list");
  if (sc.adapt_batch_size < 2) throw Error("run_adapt_scenario: adapt_batch_size must be >= 2");
  if (sc.adapt_batch_size > pool.size())
    throw Error("run_adapt_scenario: adapt_batch_size " + std::to_string(sc.adapt_batch_size) +
                " exceeds pool of " + std::to_string(pool.size()));

  auto perm = Rng(derive_seed(sc.seed, "adapt_batch")).permutation(pool.size());
  perm.resize(sc.adapt_batch_size);
  const Tensor source = pool.batch(perm);

  const std::size_t nk = kinds.size();
  std::vector<Tensor> adapt(nk);
  std::vector<Dataset> tests(nk);
  for (std::size_t i = 0; i < nk; ++i) {
    adapt[i] = apply_corruption(source, {kinds[i], sc.severity}, derive_seed(sc.seed, "adapt_source"));
    tests[i] = apply_corruption(test, {kinds[i], sc.severity}, derive_seed(sc.seed, "adapt_test"));
  }

  AdaptScenarioResult res;
  res.kind = sc.kind;
  auto test_all = [&](Model& m) {
    for (std::size_t i = 0; i < nk; ++i) res.cells.push_back({kinds[i], sc.severity, error_rate(m, tests[i])});
  };
  switch (sc.kind) {
    case AdaptScenarioKind::AdaptOneTestOne:
      for (std::size_t i = 0; i < nk; ++i) {
        Model m = adapt_bn_statistics(model, adapt[i], sc.blend);
        res.cells.push_back({kinds[i], sc.severity, error_rate(m, tests[i])});
      }
      break;
    case AdaptScenarioKind::AdaptOneTestAll: {
      const auto pick = static_cast<std::size_t>(
          Rng(derive_seed(sc.seed, "adapt_kind")).integer(0, static_cast<long>(nk) - 1));
      res.adapted_on = kinds[pick];
      Model m = adapt_bn_statistics(model, adapt[pick], sc.blend);
      test_all(m);
      break;
    }
    case AdaptScenarioKind::AdaptAllTestAll: {
      // Sample j of the mixed batch carries corruption j mod K.
      const std::size_t per = numel(pool.sample_shape());
      Shape shape = source.shape();
      std::vector<double> mixed(source.numel());
      for (std::size_t j = 0; j < sc.adapt_batch_size; ++j) {
        const auto src = adapt[j % nk].data();
        std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(j * per), per,
                    mixed.begin() + static_cast<std::ptrdiff_t>(j * per));
      }
      Model m = adapt_bn_statistics(model, Tensor(shape, std::move(mixed)), sc.blend);
      test_all(m);
      break;
    }
  }
  double sum = 0.0;
  for (const auto& c : res.cells) sum += c.error;
  res.mean_error = sum / static_cast<double>(res.cells.size());
  return res;
}

// ---------------------------------------------------------------------------

double saliency_reliance(const Model& model, const Dataset& data, const std::vector<std::uint8_t>& region) {
  if (data.size() == 0) throw Error("saliency_reliance: empty split");
  const Shape sample = data.sample_shape();
  const std::size_t channels = sample.size() == 3 ? sample[0] : 1;
  const std::size_t pixels = numel(sample) / channels;
  if (region.size() != pixels)
    throw Error("saliency_reliance: region mask has " + std::to_string(region.size()) + " entries, input has " +
                std::to_string(pixels) + " pixels");
  if (std::none_of(region.begin(), region.end(), [](std::uint8_t v) { return v != 0; }))
    throw Error("saliency_reliance: region is empty");

  Model m = model.clone();
  m.freeze();
  const std::size_t k = m.spec().num_classes();
  double total_share = 0.0;
  for (std::size_t start = 0; start < data.size(); start += kSaliencyChunk) {
    const auto idx = iota_range(start, std::min(data.size(), start + kSaliencyChunk));
    Tensor x = data.batch(idx);
    x.set_requires_grad(true);
    Graph g;
    const auto out = m.forward(g, x, Mode::Eval);
    const auto pred = predictions(out.logits);
    Tensor mask(Shape{idx.size(), k});
    for (std::size_t i = 0; i < idx.size(); ++i) mask.data()[i * k + static_cast<std::size_t>(pred[i])] = 1.0;
    g.backward(g.weighted_sum(out.logits, mask));
    const auto grad = x.grad();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      double in = 0.0, all = 0.0;
      for (std::size_t p = 0; p < pixels; ++p) {
        double s = 0.0;
        for (std::size_t c = 0; c < channels; ++c) s += std::abs(grad[i * channels * pixels + c * pixels + p]);
        all += s;
        if (region[p]) in += s;
      }
      total_share += all > 0.0 ? in / all : 0.0;
    }
  }
  return std::clamp(total_share / static_cast<double>(data.size()), 0.0, 1.0);
}

// ---------------------------------------------------------------------------

std::string export_weight_histograms(const std::vector<std::pair<std::size_t, const Model*>>& trace) {
  if (trace.empty()) throw Error("export_weight_histograms: need at least one snapshot");
  const auto& spec = trace.front().second->spec();
  for (const auto& [epoch, m] : trace)
    if (!(m->spec() == spec)) throw Error("export_weight_histograms: snapshots have different specs");
  std::ostringstream os;
  os.precision(17);
  os << "layer,epoch,bin,lo,hi,count\n";
  for (std::size_t l = 0; l < spec.layers.size(); ++l) {
    if (!trace.front().second->layers()[l].weight.defined()) continue;
    double range = 0.0;
    for (const auto& [epoch, m] : trace)
      for (double w : m->layers()[l].weight.data()) range = std::max(range, std::abs(w));
    if (range == 0.0) range = 1.0;
    const double width = 2.0 * range / static_cast<double>(kHistogramBins);
    for (const auto& [epoch, m] : trace) {
      std::vector<std::size_t> counts(kHistogramBins, 0);
      for (double w : m->layers()[l].weight.data()) {
        const auto b = static_cast<long>(std::floor((w + range) / width));
        ++counts[static_cast<std::size_t>(std::clamp(b, 0L, static_cast<long>(kHistogramBins) - 1))];
      }
      for (std::size_t b = 0; b < kHistogramBins; ++b)
        os << l << ',' << epoch << ',' << b << ',' << -range + width * static_cast<double>(b) << ','
           << -range + width * static_cast<double>(b + 1) << ',' << counts[b] << '\n';
    }
  }
  return os.str();
}

}  // namespace normlab
