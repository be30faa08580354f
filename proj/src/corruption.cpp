#include <algorithm>

#include "normlab/data.hpp"
#include "normlab/rng.hpp"

namespace normlab {

const char* corruption_name(CorruptionKind kind) {
  switch (kind) {
    case CorruptionKind::GaussianNoise: return "gaussian_noise";
    case CorruptionKind::ImpulseNoise: return "impulse_noise";
    case CorruptionKind::BoxBlur: return "box_blur";
    case CorruptionKind::Occlusion: return "occlusion";
    case CorruptionKind::Contrast: return "contrast";
  }
  throw Error("unknown corruption kind");
}

std::optional<CorruptionKind> parse_corruption(const std::string& name) {
  for (auto k : kAllCorruptions)
    if (name == corruption_name(k)) return k;
  return std::nullopt;
}

namespace {

// One image (C x H x W) in place.
void corrupt_image(std::span<double> px, std::size_t channels, std::size_t h, std::size_t w,
                   const CorruptionSpec& spec, Rng& rng) {
  const double sev = spec.severity;
  const std::size_t plane = h * w;
  switch (spec.kind) {
    case CorruptionKind::GaussianNoise:
      for (auto& v : px) v += 0.05 * sev * rng.normal();
      break;
    case CorruptionKind::ImpulseNoise:
      for (auto& v : px)
        if (rng.bernoulli(0.02 * sev)) v = rng.bernoulli(0.5) ? 1.0 : 0.0;
      break;
    case CorruptionKind::BoxBlur: {
      const std::size_t k = std::min<std::size_t>(2 * spec.severity - 1, std::max(h, w));
      const long r = static_cast<long>(k / 2);
      std::vector<double> src(px.begin(), px.end());
      for (std::size_t c = 0; c < channels; ++c)
        for (long y = 0; y < static_cast<long>(h); ++y)
          for (long x = 0; x < static_cast<long>(w); ++x) {
            double sum = 0.0;
            int count = 0;
            for (long yy = std::max(0L, y - r); yy <= std::min<long>(h - 1, y + r); ++yy)
              for (long xx = std::max(0L, x - r); xx <= std::min<long>(w - 1, x + r); ++xx) {
                sum += src[c * plane + static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx)];
                ++count;
              }
            px[c * plane + static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)] = sum / count;
          }
      break;
    }
    case CorruptionKind::Occlusion: {
      const std::size_t side = std::min({2 + 2 * static_cast<std::size_t>(spec.severity), h, w});
      const auto top = static_cast<std::size_t>(rng.integer(0, static_cast<long>(h - side)));
      const auto left = static_cast<std::size_t>(rng.integer(0, static_cast<long>(w - side)));
      for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t y = top; y < top + side; ++y)
          for (std::size_t x = left; x < left + side; ++x) px[c * plane + y * w + x] = 0.5;
      break;
    }
    case CorruptionKind::Contrast:
      for (auto& v : px) v = (v - 0.5) * (1.0 - 0.15 * sev) + 0.5;
      break;
  }
  for (auto& v : px) v = std::clamp(v, 0.0, 1.0);
}

}  // namespace

Tensor apply_corruption(const Tensor& images, const CorruptionSpec& spec, std::uint64_t seed) {
  if (spec.severity < 1 || spec.severity > 5)
    throw Error("corruption severity must be in [1,5], got " + std::to_string(spec.severity));
  if (images.rank() != 4) throw Error("apply_corruption expects NCHW images, got " + to_string(images.shape()));
  const std::size_t n = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  const std::size_t per = c * h * w;
  Tensor out = images.clone();
  out.set_requires_grad(false);
  auto data = out.data();
  const std::uint64_t cell = static_cast<std::uint64_t>(spec.kind) * 8 + static_cast<std::uint64_t>(spec.severity);
#pragma omp parallel for schedule(static)
  for (long li = 0; li < static_cast<long>(n); ++li) {
    const auto i = static_cast<std::size_t>(li);
    Rng rng(derive_seed(seed, "corruption", cell, i));
    corrupt_image(data.subspan(i * per, per), c, h, w, spec, rng);
  }
  return out;
}

Dataset apply_corruption(const Dataset& data, const CorruptionSpec& spec, std::uint64_t seed) {
  Dataset out = data;
  out.images = apply_corruption(data.images, spec, seed);
  return out;
}

}  // namespace normlab
