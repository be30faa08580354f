#include "normlab/kernels.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace normlab::kernels {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
using MutMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;

// Rows of C handled by one task. Fixed, so the partition never depends on the
// number of threads.
constexpr std::size_t kGemmRowBlock = 32;

auto idx(std::size_t v) { return static_cast<Eigen::Index>(v); }

// C[r0:r0+rows, :] for the given op, single-threaded.
void gemm_rows(GemmOp op, const double* a, const double* b, double* c, std::size_t m,
               std::size_t k, std::size_t n, std::size_t r0, std::size_t rows) {
  MutMap cm(c + r0 * n, idx(rows), idx(n), Eigen::OuterStride<>(idx(n)));
  switch (op) {
    case GemmOp::NN: {
      ConstMap am(a + r0 * k, idx(rows), idx(k), Eigen::OuterStride<>(idx(k)));
      ConstMap bm(b, idx(k), idx(n), Eigen::OuterStride<>(idx(n)));
      cm.noalias() = am * bm;
      break;
    }
    case GemmOp::TN: {
      ConstMap am(a + r0, idx(k), idx(rows), Eigen::OuterStride<>(idx(m)));
      ConstMap bm(b, idx(k), idx(n), Eigen::OuterStride<>(idx(n)));
      cm.noalias() = am.transpose() * bm;
      break;
    }
    case GemmOp::NT: {
      ConstMap am(a + r0 * k, idx(rows), idx(k), Eigen::OuterStride<>(idx(k)));
      ConstMap bm(b, idx(n), idx(k), Eigen::OuterStride<>(idx(k)));
      cm.noalias() = am * bm.transpose();
      break;
    }
  }
}

void gemm_serial(GemmOp op, const double* a, const double* b, double* c, std::size_t m,
                 std::size_t k, std::size_t n) {
  gemm_rows(op, a, b, c, m, k, n, 0, m);
}

void im2col(const double* x, double* cols, std::size_t cin, std::size_t h, std::size_t w) {
  const std::size_t plane = h * w;
  for (std::size_t ci = 0; ci < cin; ++ci) {
    const double* xp = x + ci * plane;
    for (std::size_t ky = 0; ky < 3; ++ky) {
      for (std::size_t kx = 0; kx < 3; ++kx) {
        double* row = cols + ((ci * 3 + ky) * 3 + kx) * plane;
        for (std::size_t y = 0; y < h; ++y) {
          const long sy = static_cast<long>(y + ky) - 1;
          double* out = row + y * w;
          if (sy < 0 || sy >= static_cast<long>(h)) {
            std::fill(out, out + w, 0.0);
            continue;
          }
          const double* src = xp + static_cast<std::size_t>(sy) * w;
          for (std::size_t xx = 0; xx < w; ++xx) {
            const long sx = static_cast<long>(xx + kx) - 1;
            out[xx] = (sx < 0 || sx >= static_cast<long>(w)) ? 0.0 : src[sx];
          }
        }
      }
    }
  }
}

void col2im_add(const double* cols, double* x, std::size_t cin, std::size_t h, std::size_t w) {
  const std::size_t plane = h * w;
  for (std::size_t ci = 0; ci < cin; ++ci) {
    double* xp = x + ci * plane;
    for (std::size_t ky = 0; ky < 3; ++ky) {
      for (std::size_t kx = 0; kx < 3; ++kx) {
        const double* row = cols + ((ci * 3 + ky) * 3 + kx) * plane;
        for (std::size_t y = 0; y < h; ++y) {
          const long sy = static_cast<long>(y + ky) - 1;
          if (sy < 0 || sy >= static_cast<long>(h)) continue;
          double* dst = xp + static_cast<std::size_t>(sy) * w;
          const double* in = row + y * w;
          for (std::size_t xx = 0; xx < w; ++xx) {
            const long sx = static_cast<long>(xx + kx) - 1;
            if (sx >= 0 && sx < static_cast<long>(w)) dst[sx] += in[xx];
          }
        }
      }
    }
  }
}

long as_long(std::size_t v) { return static_cast<long>(v); }

}  // namespace

void set_num_threads(int n) {
#ifdef _OPENMP
  omp_set_num_threads(std::max(1, n));
#else
  (void)n;
#endif
}

int num_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

// ---------------------------------------------------------------------------
// reference

namespace reference {

void gemm(GemmOp op, const double* a, const double* b, double* c, std::size_t m, std::size_t k,
          std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = op == GemmOp::TN ? a[p * m + i] : a[i * k + p];
        const double bv = op == GemmOp::NT ? b[j * k + p] : b[p * n + j];
        acc += av * bv;
      }
      c[i * n + j] = acc;
    }
  }
}

void conv2d_forward(std::span<const double> x, std::span<const double> w, std::span<double> y,
                    const ConvShape& s) {
  const long h = as_long(s.height), wd = as_long(s.width);
  for (std::size_t n = 0; n < s.batch; ++n)
    for (std::size_t co = 0; co < s.out_channels; ++co)
      for (long oy = 0; oy < h; ++oy)
        for (long ox = 0; ox < wd; ++ox) {
          double acc = 0.0;
          for (std::size_t ci = 0; ci < s.in_channels; ++ci)
            for (long ky = 0; ky < 3; ++ky)
              for (long kx = 0; kx < 3; ++kx) {
                const long iy = oy + ky - 1, ix = ox + kx - 1;
                if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                acc += w[((co * s.in_channels + ci) * 3 + ky) * 3 + kx] *
                       x[((n * s.in_channels + ci) * h + iy) * wd + ix];
              }
          y[((n * s.out_channels + co) * h + oy) * wd + ox] = acc;
        }
}

void conv2d_backward_input(std::span<const double> dy, std::span<const double> w,
                           std::span<double> dx, const ConvShape& s) {
  const long h = as_long(s.height), wd = as_long(s.width);
  std::fill(dx.begin(), dx.end(), 0.0);
  for (std::size_t n = 0; n < s.batch; ++n)
    for (std::size_t co = 0; co < s.out_channels; ++co)
      for (long oy = 0; oy < h; ++oy)
        for (long ox = 0; ox < wd; ++ox) {
          const double g = dy[((n * s.out_channels + co) * h + oy) * wd + ox];
          for (std::size_t ci = 0; ci < s.in_channels; ++ci)
            for (long ky = 0; ky < 3; ++ky)
              for (long kx = 0; kx < 3; ++kx) {
                const long iy = oy + ky - 1, ix = ox + kx - 1;
                if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                dx[((n * s.in_channels + ci) * h + iy) * wd + ix] +=
                    g * w[((co * s.in_channels + ci) * 3 + ky) * 3 + kx];
              }
        }
}

void conv2d_backward_weight(std::span<const double> x, std::span<const double> dy,
                            std::span<double> dw, const ConvShape& s) {
  const long h = as_long(s.height), wd = as_long(s.width);
  std::fill(dw.begin(), dw.end(), 0.0);
  for (std::size_t n = 0; n < s.batch; ++n)
    for (std::size_t co = 0; co < s.out_channels; ++co)
      for (long oy = 0; oy < h; ++oy)
        for (long ox = 0; ox < wd; ++ox) {
          const double g = dy[((n * s.out_channels + co) * h + oy) * wd + ox];
          for (std::size_t ci = 0; ci < s.in_channels; ++ci)
            for (long ky = 0; ky < 3; ++ky)
              for (long kx = 0; kx < 3; ++kx) {
                const long iy = oy + ky - 1, ix = ox + kx - 1;
                if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                dw[((co * s.in_channels + ci) * 3 + ky) * 3 + kx] +=
                    g * x[((n * s.in_channels + ci) * h + iy) * wd + ix];
              }
        }
}

void maxpool_forward(std::span<const double> x, std::span<double> y, std::span<std::size_t> argmax,
                     const PoolShape& s) {
  const std::size_t oh = s.out_height(), ow = s.out_width();
  for (std::size_t nc = 0; nc < s.batch * s.channels; ++nc)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = nc * s.height * s.width + (2 * oy) * s.width + 2 * ox;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t i = nc * s.height * s.width + (2 * oy + dy) * s.width + 2 * ox + dx;
            if (x[i] > x[best]) best = i;
          }
        const std::size_t o = (nc * oh + oy) * ow + ox;
        y[o] = x[best];
        argmax[o] = best;
      }
}

void maxpool_backward(std::span<const double> dy, std::span<const std::size_t> argmax,
                      std::span<double> dx) {
  for (std::size_t o = 0; o < dy.size(); ++o) dx[argmax[o]] += dy[o];
}

void channel_moments(std::span<const double> x, std::span<double> mean, std::span<double> var,
                     const ChannelShape& s) {
  const double count = static_cast<double>(s.batch * s.spatial);
  for (std::size_t c = 0; c < s.channels; ++c) {
    double sum = 0.0;
    for (std::size_t n = 0; n < s.batch; ++n)
      for (std::size_t i = 0; i < s.spatial; ++i) sum += x[(n * s.channels + c) * s.spatial + i];
    const double mu = sum / count;
    double ss = 0.0;
    for (std::size_t n = 0; n < s.batch; ++n)
      for (std::size_t i = 0; i < s.spatial; ++i) {
        const double d = x[(n * s.channels + c) * s.spatial + i] - mu;
        ss += d * d;
      }
    mean[c] = mu;
    var[c] = ss / count;
  }
}

}  // namespace reference

// ---------------------------------------------------------------------------
// parallel

namespace parallel {

void gemm(GemmOp op, const double* a, const double* b, double* c, std::size_t m, std::size_t k,
          std::size_t n) {
  const long blocks = as_long((m + kGemmRowBlock - 1) / kGemmRowBlock);
#pragma omp parallel for schedule(static)
  for (long blk = 0; blk < blocks; ++blk) {
    const std::size_t r0 = static_cast<std::size_t>(blk) * kGemmRowBlock;
    gemm_rows(op, a, b, c, m, k, n, r0, std::min(kGemmRowBlock, m - r0));
  }
}

void conv2d_forward(std::span<const double> x, std::span<const double> w, std::span<double> y,
                    const ConvShape& s) {
  const std::size_t plane = s.plane(), patch = s.patch();
#pragma omp parallel
  {
    std::vector<double> cols(patch * plane);
#pragma omp for schedule(static)
    for (long n = 0; n < as_long(s.batch); ++n) {
      const auto un = static_cast<std::size_t>(n);
      im2col(x.data() + un * s.in_channels * plane, cols.data(), s.in_channels, s.height, s.width);
      gemm_serial(GemmOp::NN, w.data(), cols.data(), y.data() + un * s.out_channels * plane,
                  s.out_channels, patch, plane);
    }
  }
}

void conv2d_backward_input(std::span<const double> dy, std::span<const double> w,
                           std::span<double> dx, const ConvShape& s) {
  const std::size_t plane = s.plane(), patch = s.patch();
#pragma omp parallel
  {
    std::vector<double> cols(patch * plane);
#pragma omp for schedule(static)
    for (long n = 0; n < as_long(s.batch); ++n) {
      const auto un = static_cast<std::size_t>(n);
      gemm_serial(GemmOp::TN, w.data(), dy.data() + un * s.out_channels * plane, cols.data(),
                  patch, s.out_channels, plane);
      double* dxn = dx.data() + un * s.in_channels * plane;
      std::fill(dxn, dxn + s.in_channels * plane, 0.0);
      col2im_add(cols.data(), dxn, s.in_channels, s.height, s.width);
    }
  }
}

void conv2d_backward_weight(std::span<const double> x, std::span<const double> dy,
                            std::span<double> dw, const ConvShape& s) {
  const std::size_t plane = s.plane(), patch = s.patch();
  const std::size_t wsize = s.out_channels * patch;
  std::vector<double> per_sample(s.batch * wsize);
#pragma omp parallel
  {
    std::vector<double> cols(patch * plane);
#pragma omp for schedule(static)
    for (long n = 0; n < as_long(s.batch); ++n) {
      const auto un = static_cast<std::size_t>(n);
      im2col(x.data() + un * s.in_channels * plane, cols.data(), s.in_channels, s.height, s.width);
      gemm_serial(GemmOp::NT, dy.data() + un * s.out_channels * plane, cols.data(),
                  per_sample.data() + un * wsize, s.out_channels, plane, patch);
    }
    // Batch reduction in sample order, split over weight entries.
#pragma omp for schedule(static)
    for (long e = 0; e < as_long(wsize); ++e) {
      double acc = 0.0;
      for (std::size_t n = 0; n < s.batch; ++n) acc += per_sample[n * wsize + static_cast<std::size_t>(e)];
      dw[static_cast<std::size_t>(e)] = acc;
    }
  }
}

void maxpool_forward(std::span<const double> x, std::span<double> y, std::span<std::size_t> argmax,
                     const PoolShape& s) {
  const std::size_t oh = s.out_height(), ow = s.out_width();
  const std::size_t in_plane = s.height * s.width;
#pragma omp parallel for schedule(static)
  for (long nc = 0; nc < as_long(s.batch * s.channels); ++nc) {
    const auto unc = static_cast<std::size_t>(nc);
    const double* xp = x.data() + unc * in_plane;
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = (2 * oy) * s.width + 2 * ox;
        const std::size_t cand[3] = {best + 1, best + s.width, best + s.width + 1};
        for (auto i : cand)
          if (xp[i] > xp[best]) best = i;
        const std::size_t o = (unc * oh + oy) * ow + ox;
        y[o] = xp[best];
        argmax[o] = unc * in_plane + best;
      }
  }
}

void maxpool_backward(std::span<const double> dy, std::span<const std::size_t> argmax,
                      std::span<double> dx) {
  // Pool windows are disjoint, so each dx entry has at most one writer.
#pragma omp parallel for schedule(static)
  for (long o = 0; o < as_long(dy.size()); ++o)
    dx[argmax[static_cast<std::size_t>(o)]] += dy[static_cast<std::size_t>(o)];
}

void channel_moments(std::span<const double> x, std::span<double> mean, std::span<double> var,
                     const ChannelShape& s) {
  const double count = static_cast<double>(s.batch * s.spatial);
#pragma omp parallel for schedule(static)
  for (long c = 0; c < as_long(s.channels); ++c) {
    const auto uc = static_cast<std::size_t>(c);
    double sum = 0.0;
    for (std::size_t n = 0; n < s.batch; ++n) {
      const double* p = x.data() + (n * s.channels + uc) * s.spatial;
      for (std::size_t i = 0; i < s.spatial; ++i) sum += p[i];
    }
    const double mu = sum / count;
    double ss = 0.0;
    for (std::size_t n = 0; n < s.batch; ++n) {
      const double* p = x.data() + (n * s.channels + uc) * s.spatial;
      for (std::size_t i = 0; i < s.spatial; ++i) {
        const double d = p[i] - mu;
        ss += d * d;
      }
    }
    mean[uc] = mu;
    var[uc] = ss / count;
  }
}

}  // namespace parallel

}  // namespace normlab::kernels
