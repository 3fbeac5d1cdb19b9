#pragma once

#include <array>
#include <cstdint>
#include <vector>

namespace nrt {

/// Depth raster in meters; 0 marks an invalid pixel. Kept in double so the
/// synthetic renderer stays analytically exact; the on-disk format is f32.
struct DepthImage {
  int width = 0;
  int height = 0;
  std::vector<double> data;  // row-major, meters

  DepthImage() = default;
  DepthImage(int w, int h) : width(w), height(h), data(static_cast<std::size_t>(w) * h, 0.0) {}

  double& at(int u, int v) { return data[static_cast<std::size_t>(v) * width + u]; }
  double at(int u, int v) const { return data[static_cast<std::size_t>(v) * width + u]; }
};

/// 8-bit RGB raster.
struct ColorImage {
  int width = 0;
  int height = 0;
  std::vector<std::array<std::uint8_t, 3>> data;  // row-major

  ColorImage() = default;
  ColorImage(int w, int h) : width(w), height(h), data(static_cast<std::size_t>(w) * h, {0, 0, 0}) {}

  std::array<std::uint8_t, 3>& at(int u, int v) { return data[static_cast<std::size_t>(v) * width + u]; }
  const std::array<std::uint8_t, 3>& at(int u, int v) const {
    return data[static_cast<std::size_t>(v) * width + u];
  }
};

/// Binary per-pixel mask (dynamic-surface flags on synthetic test frames).
struct MaskImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> data;  // 0 = static, 255 = dynamic

  MaskImage() = default;
  MaskImage(int w, int h) : width(w), height(h), data(static_cast<std::size_t>(w) * h, 0) {}

  std::uint8_t& at(int u, int v) { return data[static_cast<std::size_t>(v) * width + u]; }
  std::uint8_t at(int u, int v) const { return data[static_cast<std::size_t>(v) * width + u]; }
  bool dynamic_at(int u, int v) const { return at(u, v) != 0; }
};

}  // namespace nrt
