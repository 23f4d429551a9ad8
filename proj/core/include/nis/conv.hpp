#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "nis/grid.hpp"

namespace nis {

/// Bias-free 3x3 multi-channel convolution, weights laid out [out][in][ky][kx].
/// Tap (ky, kx) multiplies the input at offset (kx - 1, ky - 1).
class ConvLayer {
 public:
  static constexpr std::size_t kSize = 3;
  static constexpr std::size_t kTaps = kSize * kSize;

  ConvLayer(std::size_t out_channels, std::size_t in_channels);
  ConvLayer(std::size_t out_channels, std::size_t in_channels, std::vector<double> weights);

  std::size_t out_channels() const noexcept { return out_; }
  std::size_t in_channels() const noexcept { return in_; }
  std::span<double> weights() noexcept { return weights_; }
  std::span<const double> weights() const noexcept { return weights_; }

  double& at(std::size_t o, std::size_t i, std::size_t ky, std::size_t kx) noexcept {
    return weights_[((o * in_ + i) * kSize + ky) * kSize + kx];
  }
  double at(std::size_t o, std::size_t i, std::size_t ky, std::size_t kx) const noexcept {
    return weights_[((o * in_ + i) * kSize + ky) * kSize + kx];
  }

  bool operator==(const ConvLayer&) const = default;

 private:
  std::size_t out_;
  std::size_t in_;
  std::vector<double> weights_;
};

/// Channel-major activations: channel c occupies [c * grid.size(), (c+1) * grid.size()).
/// `out` is overwritten.
void conv_forward(const ConvLayer& layer, const Grid2D& grid, std::span<const double> in,
                  std::span<double> out);

/// grad_in += layer^T grad_out (adjoint of conv_forward).
void conv_backward_input(const ConvLayer& layer, const Grid2D& grid,
                         std::span<const double> grad_out, std::span<double> grad_in);

/// grad_weights += d<grad_out, conv_forward(in)> / d weights.
void conv_backward_weights(const ConvLayer& layer, const Grid2D& grid, std::span<const double> in,
                           std::span<const double> grad_out, ConvLayer& grad_weights);

/// dst[x] += w * src[x + (dx, dy)] over every x where both are on the grid.
void shifted_axpy(double w, const double* src, double* dst, std::size_t nx, std::size_t ny,
                  int dx, int dy);

}  // namespace nis
