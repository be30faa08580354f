#pragma once

// Numerical kernels behind the autodiff primitives.
//
// Every kernel exists twice: `reference::` is a plain serial loop nest kept
// for testing, `parallel::` is the OpenMP version the graph actually calls.
// Work in `parallel::` is always split along fixed-size blocks whose layout
// does not depend on the thread count, and every reduction runs in a fixed
// order inside one block, so results are bit-identical for any number of
// threads.

#include <cstddef>
#include <span>

namespace normlab::kernels {

void set_num_threads(int n);
int num_threads();

/// C = op(A) * op(B), C is m x n row-major and is overwritten.
///   NN: A is m x k, B is k x n
///   TN: A is k x m (used transposed), B is k x n
///   NT: A is m x k, B is n x k (used transposed)
enum class GemmOp { NN, TN, NT };

struct ConvShape {
  std::size_t batch = 0;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t patch() const { return in_channels * 9; }
  std::size_t plane() const { return height * width; }
};

struct PoolShape {
  std::size_t batch = 0;
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t out_height() const { return height / 2; }
  std::size_t out_width() const { return width / 2; }
};

/// Per-channel layout of an (N, C, spatial...) activation.
struct ChannelShape {
  std::size_t batch = 0;
  std::size_t channels = 0;
  std::size_t spatial = 1;
};

namespace reference {
void gemm(GemmOp op, const double* a, const double* b, double* c, std::size_t m, std::size_t k,
          std::size_t n);
// 3x3 kernel, stride 1, zero padding 1. x: N,Cin,H,W  w: Cout,Cin,3,3  y: N,Cout,H,W
void conv2d_forward(std::span<const double> x, std::span<const double> w, std::span<double> y,
                    const ConvShape& s);
void conv2d_backward_input(std::span<const double> dy, std::span<const double> w,
                           std::span<double> dx, const ConvShape& s);
void conv2d_backward_weight(std::span<const double> x, std::span<const double> dy,
                            std::span<double> dw, const ConvShape& s);
// 2x2 window, stride 2, floor. argmax holds flat input indices.
void maxpool_forward(std::span<const double> x, std::span<double> y, std::span<std::size_t> argmax,
                     const PoolShape& s);
void maxpool_backward(std::span<const double> dy, std::span<const std::size_t> argmax,
                      std::span<double> dx);
// Per-channel mean and population variance (divide by count).
void channel_moments(std::span<const double> x, std::span<double> mean, std::span<double> var,
                     const ChannelShape& s);
}  // namespace reference

namespace parallel {
void gemm(GemmOp op, const double* a, const double* b, double* c, std::size_t m, std::size_t k,
          std::size_t n);
void conv2d_forward(std::span<const double> x, std::span<const double> w, std::span<double> y,
                    const ConvShape& s);
void conv2d_backward_input(std::span<const double> dy, std::span<const double> w,
                           std::span<double> dx, const ConvShape& s);
void conv2d_backward_weight(std::span<const double> x, std::span<const double> dy,
                            std::span<double> dw, const ConvShape& s);
void maxpool_forward(std::span<const double> x, std::span<double> y, std::span<std::size_t> argmax,
                     const PoolShape& s);
void maxpool_backward(std::span<const double> dy, std::span<const std::size_t> argmax,
                      std::span<double> dx);
void channel_moments(std::span<const double> x, std::span<double> mean, std::span<double> var,
                     const ChannelShape& s);
}  // namespace parallel

}  // namespace normlab::kernels
