#include "nis/conv.hpp"

#include <algorithm>
#include <sstream>

#include "nis/error.hpp"

namespace nis {

ConvLayer::ConvLayer(std::size_t out_channels, std::size_t in_channels)
    : ConvLayer(out_channels, in_channels,
                std::vector<double>(out_channels * in_channels * kTaps, 0.0)) {}

ConvLayer::ConvLayer(std::size_t out_channels, std::size_t in_channels,
                     std::vector<double> weights)
    : out_(out_channels), in_(in_channels), weights_(std::move(weights)) {
  if (out_ == 0 || in_ == 0) throw InvalidArgument("conv layer needs at least one channel");
  if (weights_.size() != out_ * in_ * kTaps) {
    std::ostringstream os;
    os << "conv layer (" << out_ << ", " << in_ << ", 3, 3) given " << weights_.size()
       << " weights";
    throw ShapeMismatch(os.str());
  }
}

void shifted_axpy(double w, const double* src, double* dst, std::size_t nx_, std::size_t ny_,
                  int dx, int dy) {
  const auto nx = static_cast<int>(nx_);
  const auto ny = static_cast<int>(ny_);
  const int y0 = std::max(0, -dy), y1 = std::min(ny, ny - dy);
  const int x0 = std::max(0, -dx), x1 = std::min(nx, nx - dx);
  for (int iy = y0; iy < y1; ++iy) {
    double* o = dst + static_cast<std::ptrdiff_t>(iy) * nx;
    const double* s = src + static_cast<std::ptrdiff_t>(iy + dy) * nx + dx;
    for (int ix = x0; ix < x1; ++ix) o[ix] += w * s[ix];
  }
}

namespace {

void check_sizes(const ConvLayer& layer, const Grid2D& grid, std::size_t in_size,
                 std::size_t out_size) {
  if (in_size != layer.in_channels() * grid.size() ||
      out_size != layer.out_channels() * grid.size()) {
    throw ShapeMismatch("conv activation size does not match layer channels");
  }
}

double shifted_dot(const double* a, const double* b, std::size_t nx_, std::size_t ny_, int dx,
                   int dy) {
  // sum_x a[x] * b[x + (dx, dy)]
  const auto nx = static_cast<int>(nx_);
  const auto ny = static_cast<int>(ny_);
  const int y0 = std::max(0, -dy), y1 = std::min(ny, ny - dy);
  const int x0 = std::max(0, -dx), x1 = std::min(nx, nx - dx);
  double s = 0.0;
  for (int iy = y0; iy < y1; ++iy) {
    const double* pa = a + static_cast<std::ptrdiff_t>(iy) * nx;
    const double* pb = b + static_cast<std::ptrdiff_t>(iy + dy) * nx + dx;
    for (int ix = x0; ix < x1; ++ix) s += pa[ix] * pb[ix];
  }
  return s;
}

}  // namespace

void conv_forward(const ConvLayer& layer, const Grid2D& grid, std::span<const double> in,
                  std::span<double> out) {
  check_sizes(layer, grid, in.size(), out.size());
  std::fill(out.begin(), out.end(), 0.0);
  const std::size_t n = grid.size();
  for (std::size_t o = 0; o < layer.out_channels(); ++o) {
    double* dst = out.data() + o * n;
    for (std::size_t i = 0; i < layer.in_channels(); ++i) {
      const double* src = in.data() + i * n;
      for (std::size_t ky = 0; ky < ConvLayer::kSize; ++ky)
        for (std::size_t kx = 0; kx < ConvLayer::kSize; ++kx) {
          const double w = layer.at(o, i, ky, kx);
          if (w == 0.0) continue;
          shifted_axpy(w, src, dst, grid.nx(), grid.ny(), static_cast<int>(kx) - 1,
                       static_cast<int>(ky) - 1);
        }
    }
  }
}

void conv_backward_input(const ConvLayer& layer, const Grid2D& grid,
                         std::span<const double> grad_out, std::span<double> grad_in) {
  check_sizes(layer, grid, grad_in.size(), grad_out.size());
  const std::size_t n = grid.size();
  for (std::size_t i = 0; i < layer.in_channels(); ++i) {
    double* dst = grad_in.data() + i * n;
    for (std::size_t o = 0; o < layer.out_channels(); ++o) {
      const double* src = grad_out.data() + o * n;
      for (std::size_t ky = 0; ky < ConvLayer::kSize; ++ky)
        for (std::size_t kx = 0; kx < ConvLayer::kSize; ++kx) {
          const double w = layer.at(o, i, ky, kx);
          if (w == 0.0) continue;
          shifted_axpy(w, src, dst, grid.nx(), grid.ny(), 1 - static_cast<int>(kx),
                       1 - static_cast<int>(ky));
        }
    }
  }
}

void conv_backward_weights(const ConvLayer& layer, const Grid2D& grid, std::span<const double> in,
                           std::span<const double> grad_out, ConvLayer& grad_weights) {
  check_sizes(layer, grid, in.size(), grad_out.size());
  if (grad_weights.out_channels() != layer.out_channels() ||
      grad_weights.in_channels() != layer.in_channels())
    throw ShapeMismatch("conv gradient shape does not match layer");
  const std::size_t n = grid.size();
  for (std::size_t o = 0; o < layer.out_channels(); ++o) {
    const double* g = grad_out.data() + o * n;
    for (std::size_t i = 0; i < layer.in_channels(); ++i) {
      const double* src = in.data() + i * n;
      for (std::size_t ky = 0; ky < ConvLayer::kSize; ++ky)
        for (std::size_t kx = 0; kx < ConvLayer::kSize; ++kx)
          grad_weights.at(o, i, ky, kx) +=
              shifted_dot(g, src, grid.nx(), grid.ny(), static_cast<int>(kx) - 1,
                          static_cast<int>(ky) - 1);
    }
  }
}

}  // namespace nis
