#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "sgdiff/tensor.hpp"

namespace sgdiff {

/// 8-bit RGB PNG from raw [3 x H x W] values (rounded, clamped to [0, 255]).
void write_png(const std::filesystem::path& path, const Tensor<float>& image_raw);
/// Raw [3 x H x W] in [0, 255]. Grey and alpha inputs are converted to RGB.
Tensor<float> read_png(const std::filesystem::path& path);

/// Normalised [-1, 1] images [N x 3 x H x W] to raw, tiled row-major into a
/// grid with `columns` images per row and a 1-pixel separator.
Tensor<float> tile_images(const Tensor<float>& images_normalized, int columns, float separator_raw = 255.0f);

/// Little-endian dump: rank, dims as uint32, float32 values.
void write_raw_floats(const std::filesystem::path& path, const Tensor<float>& t);
Tensor<float> read_raw_floats(const std::filesystem::path& path);

using Color8 = std::array<std::uint8_t, 3>;

/// Minimal RGB raster for line plots.
class Canvas {
 public:
  Canvas(int width, int height, Color8 background = {255, 255, 255});
  int width() const { return w_; }
  int height() const { return h_; }
  void set(int x, int y, Color8 c);
  Color8 get(int x, int y) const;
  void line(double x0, double y0, double x1, double y1, Color8 c, int thickness = 1);
  void rect(int x0, int y0, int x1, int y1, Color8 c);
  void circle(double cx, double cy, double r, Color8 c);
  /// 3x5 glyphs scaled by `scale`; digits, A-Z, space and . - _ = : / ( ).
  void text(int x, int y, const std::string& s, Color8 c, int scale = 2);
  static int text_width(const std::string& s, int scale = 2) { return static_cast<int>(s.size()) * 4 * scale; }
  void save_png(const std::filesystem::path& path) const;

 private:
  int w_, h_;
  std::vector<std::uint8_t> px_;
};

struct PlotSeries {
  std::string label;
  Color8 color;
  std::vector<double> x;
  std::vector<double> y;
};

/// Line plot with axes, tick labels, a legend, and an optional ring around
/// one highlighted point.
void line_plot(const std::filesystem::path& path, const std::string& title, const std::vector<PlotSeries>& series,
               const double* highlight_x = nullptr, const double* highlight_y = nullptr);

}  // namespace sgdiff
