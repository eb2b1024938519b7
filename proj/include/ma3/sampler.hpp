#pragma once

// Differentiable affine warping: sampling-grid generation and bilinear
// interpolation with analytic gradients for the image and the affine entries.
//
// Normalized coordinates put -1 and +1 on the centers of the edge pixels:
//   u = 2 j / (W - 1) - 1,   v = 2 i / (H - 1) - 1.
// Reads outside the source raster contribute zero.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "ma3/errors.hpp"
#include "ma3/geometry.hpp"

namespace ma3 {

/// Channel-major (C, H, W) raster stored row-major within each channel.
template <typename Scalar>
struct Image {
  using Values = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  int height = 0;
  int width = 0;
  int channels = 1;
  Values values;

  Image() = default;
  Image(int h, int w, int c = 1) : height(h), width(w), channels(c), values(Values::Zero(Eigen::Index(h) * w * c)) {}

  static Image constant(int h, int w, Scalar v, int c = 1) {
    Image img(h, w, c);
    img.values.setConstant(v);
    return img;
  }

  Eigen::Index pixels() const { return Eigen::Index(height) * width; }
  Scalar& at(int c, int i, int j) { return values[(Eigen::Index(c) * height + i) * width + j]; }
  Scalar at(int c, int i, int j) const { return values[(Eigen::Index(c) * height + i) * width + j]; }

  template <typename Other>
  Image<Other> cast() const {
    Image<Other> out;
    out.height = height;
    out.width = width;
    out.channels = channels;
    out.values = values.template cast<Other>();
    return out;
  }

  bool same_shape(const Image& o) const {
    return height == o.height && width == o.width && channels == o.channels;
  }
};

/// Per-output-pixel source coordinates in normalized space.
template <typename Scalar>
struct SampleGrid {
  using Plane = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Plane x;  // H x W
  Plane y;  // H x W

  int height() const { return static_cast<int>(x.rows()); }
  int width() const { return static_cast<int>(x.cols()); }
};

enum class BorderPolicy { Zeros };

template <typename Scalar>
inline Scalar normalized_coord(int index, int extent) {
  return Scalar(2) * Scalar(index) / Scalar(extent - 1) - Scalar(1);
}

template <typename Scalar>
SampleGrid<Scalar> affine_grid(const AffineMatrix<Scalar>& a, int height, int width) {
  if (height < 2 || width < 2) throw ContractError("affine_grid: H and W must be at least 2");
  SampleGrid<Scalar> g;
  g.x.resize(height, width);
  g.y.resize(height, width);
  for (int i = 0; i < height; ++i) {
    const Scalar v = normalized_coord<Scalar>(i, height);
    for (int j = 0; j < width; ++j) {
      const Scalar u = normalized_coord<Scalar>(j, width);
      g.x(i, j) = a(0, 0) * u + a(0, 1) * v + a(0, 2);
      g.y(i, j) = a(1, 0) * u + a(1, 1) * v + a(1, 2);
    }
  }
  return g;
}

namespace detail {

// Bilinear stencil for one source location in pixel units.
template <typename Scalar>
struct Stencil {
  int x0, y0;
  Scalar fx, fy;
};

// Pixel centers come back from normalized coordinates a few ulps off an integer
// (about 1e-6 px in float at 28 px); snap those so the identity grid reads exactly one pixel.
template <typename Scalar>
Scalar snap_to_pixel(Scalar v, int extent) {
  const Scalar r = std::round(v);
  const Scalar tol = Scalar(8) * std::numeric_limits<Scalar>::epsilon() * Scalar(std::max(extent, 1));
  return std::abs(v - r) <= tol ? r : v;
}

template <typename Scalar>
Stencil<Scalar> stencil(Scalar gx, Scalar gy, int height, int width) {
  const Scalar ix = snap_to_pixel((gx + Scalar(1)) * Scalar(width - 1) / Scalar(2), width);
  const Scalar iy = snap_to_pixel((gy + Scalar(1)) * Scalar(height - 1) / Scalar(2), height);
  const Scalar fx0 = std::floor(ix);
  const Scalar fy0 = std::floor(iy);
  return {static_cast<int>(fx0), static_cast<int>(fy0), ix - fx0, iy - fy0};
}

template <typename Scalar>
Scalar read_zero(const Image<Scalar>& img, int c, int i, int j) {
  if (i < 0 || j < 0 || i >= img.height || j >= img.width) return Scalar(0);
  return img.at(c, i, j);
}

inline void require_grid(int gh, int gw, const char* who) {
  if (gh < 1 || gw < 1) {
    std::ostringstream os;
    os << who << ": empty sampling grid";
    throw ContractError(os.str());
  }
}

}  // namespace detail

template <typename Scalar>
Image<Scalar> bilinear_sample(const Image<Scalar>& img, const SampleGrid<Scalar>& grid,
                              BorderPolicy = BorderPolicy::Zeros) {
  detail::require_grid(grid.height(), grid.width(), "bilinear_sample");
  if (grid.y.rows() != grid.x.rows() || grid.y.cols() != grid.x.cols()) {
    throw ContractError("bilinear_sample: grid x/y planes differ in shape");
  }
  Image<Scalar> out(grid.height(), grid.width(), img.channels);
  for (int i = 0; i < out.height; ++i) {
    for (int j = 0; j < out.width; ++j) {
      const auto s = detail::stencil(grid.x(i, j), grid.y(i, j), img.height, img.width);
      if (!std::isfinite(s.fx) || !std::isfinite(s.fy)) continue;
      const Scalar w00 = (1 - s.fx) * (1 - s.fy), w01 = s.fx * (1 - s.fy);
      const Scalar w10 = (1 - s.fx) * s.fy, w11 = s.fx * s.fy;
      for (int c = 0; c < img.channels; ++c) {
        out.at(c, i, j) = w00 * detail::read_zero(img, c, s.y0, s.x0) +
                          w01 * detail::read_zero(img, c, s.y0, s.x0 + 1) +
                          w10 * detail::read_zero(img, c, s.y0 + 1, s.x0) +
                          w11 * detail::read_zero(img, c, s.y0 + 1, s.x0 + 1);
      }
    }
  }
  return out;
}

template <typename Scalar>
struct WarpGradients {
  Image<Scalar> image;         // d loss / d source image
  SampleGrid<Scalar> grid;     // d loss / d grid coordinates
  AffineMatrix<Scalar> affine; // d loss / d affine entries (grid from affine_grid)
};

/// Backward pass of bilinear_sample(img, grid) given d loss / d output.
///
/// The affine gradient assumes `grid` came from affine_grid at the grid's own
/// size. At integer source coordinates the derivative is the right-sided limit.
template <typename Scalar>
WarpGradients<Scalar> warp_backward(const Image<Scalar>& img, const SampleGrid<Scalar>& grid,
                                    const Image<Scalar>& upstream) {
  const int gh = grid.height(), gw = grid.width();
  detail::require_grid(gh, gw, "warp_backward");
  if (upstream.height != gh || upstream.width != gw || upstream.channels != img.channels) {
    throw ContractError("warp_backward: upstream gradient shape does not match the grid");
  }

  WarpGradients<Scalar> g;
  g.image = Image<Scalar>(img.height, img.width, img.channels);
  g.grid.x = SampleGrid<Scalar>::Plane::Zero(gh, gw);
  g.grid.y = SampleGrid<Scalar>::Plane::Zero(gh, gw);
  g.affine.setZero();

  const Scalar sx = Scalar(img.width - 1) / Scalar(2);
  const Scalar sy = Scalar(img.height - 1) / Scalar(2);
  auto scatter = [&](int c, int i, int j, Scalar v) {
    if (i < 0 || j < 0 || i >= img.height || j >= img.width) return;
    g.image.at(c, i, j) += v;
  };

  for (int i = 0; i < gh; ++i) {
    const Scalar v = gh > 1 ? normalized_coord<Scalar>(i, gh) : Scalar(0);
    for (int j = 0; j < gw; ++j) {
      const Scalar u = gw > 1 ? normalized_coord<Scalar>(j, gw) : Scalar(0);
      const auto s = detail::stencil(grid.x(i, j), grid.y(i, j), img.height, img.width);
      if (!std::isfinite(s.fx) || !std::isfinite(s.fy)) continue;
      Scalar dix = 0, diy = 0;
      for (int c = 0; c < img.channels; ++c) {
        const Scalar up = upstream.at(c, i, j);
        if (up == Scalar(0)) continue;
        const Scalar p00 = detail::read_zero(img, c, s.y0, s.x0);
        const Scalar p01 = detail::read_zero(img, c, s.y0, s.x0 + 1);
        const Scalar p10 = detail::read_zero(img, c, s.y0 + 1, s.x0);
        const Scalar p11 = detail::read_zero(img, c, s.y0 + 1, s.x0 + 1);
        scatter(c, s.y0, s.x0, up * (1 - s.fx) * (1 - s.fy));
        scatter(c, s.y0, s.x0 + 1, up * s.fx * (1 - s.fy));
        scatter(c, s.y0 + 1, s.x0, up * (1 - s.fx) * s.fy);
        scatter(c, s.y0 + 1, s.x0 + 1, up * s.fx * s.fy);
        dix += up * ((1 - s.fy) * (p01 - p00) + s.fy * (p11 - p10));
        diy += up * ((1 - s.fx) * (p10 - p00) + s.fx * (p11 - p01));
      }
      const Scalar dgx = dix * sx, dgy = diy * sy;
      g.grid.x(i, j) = dgx;
      g.grid.y(i, j) = dgy;
      g.affine(0, 0) += dgx * u;
      g.affine(0, 1) += dgx * v;
      g.affine(0, 2) += dgx;
      g.affine(1, 0) += dgy * u;
      g.affine(1, 1) += dgy * v;
      g.affine(1, 2) += dgy;
    }
  }
  return g;
}

/// Convenience: warp `img` by `a` onto a grid of the image's own size.
template <typename Scalar>
Image<Scalar> warp_affine(const Image<Scalar>& img, const AffineMatrix<Scalar>& a) {
  return bilinear_sample(img, affine_grid(a, img.height, img.width));
}

/// Bilinear resize with the same edge-center convention (identity grid at the new size).
template <typename Scalar>
Image<Scalar> resize_bilinear(const Image<Scalar>& img, int height, int width) {
  return bilinear_sample(img, affine_grid(identity_affine<Scalar>(), height, width));
}

}  // namespace ma3
