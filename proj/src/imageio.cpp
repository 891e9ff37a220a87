#include "sgdiff/imageio.hpp"

#include <png.h>

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <memory>

namespace sgdiff {
namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using File = std::unique_ptr<std::FILE, FileCloser>;

// Row bits of each glyph, top to bottom, 3 bits per row (MSB = left column).
const std::map<char, std::array<std::uint8_t, 5>>& glyphs() {
  static const std::map<char, std::array<std::uint8_t, 5>> g = {
      {'0', {7, 5, 5, 5, 7}}, {'1', {2, 6, 2, 2, 7}}, {'2', {7, 1, 7, 4, 7}}, {'3', {7, 1, 3, 1, 7}},
      {'4', {5, 5, 7, 1, 1}}, {'5', {7, 4, 7, 1, 7}}, {'6', {7, 4, 7, 5, 7}}, {'7', {7, 1, 1, 2, 2}},
      {'8', {7, 5, 7, 5, 7}}, {'9', {7, 5, 7, 1, 7}}, {'A', {2, 5, 7, 5, 5}}, {'B', {6, 5, 6, 5, 6}},
      {'C', {3, 4, 4, 4, 3}}, {'D', {6, 5, 5, 5, 6}}, {'E', {7, 4, 6, 4, 7}}, {'F', {7, 4, 6, 4, 4}},
      {'G', {3, 4, 5, 5, 3}}, {'H', {5, 5, 7, 5, 5}}, {'I', {7, 2, 2, 2, 7}}, {'J', {1, 1, 1, 5, 2}},
      {'K', {5, 5, 6, 5, 5}}, {'L', {4, 4, 4, 4, 7}}, {'M', {5, 7, 7, 5, 5}}, {'N', {6, 5, 5, 5, 5}},
      {'O', {2, 5, 5, 5, 2}}, {'P', {6, 5, 6, 4, 4}}, {'Q', {2, 5, 5, 6, 3}}, {'R', {6, 5, 6, 5, 5}},
      {'S', {3, 4, 2, 1, 6}}, {'T', {7, 2, 2, 2, 2}}, {'U', {5, 5, 5, 5, 7}}, {'V', {5, 5, 5, 5, 2}},
      {'W', {5, 5, 7, 7, 5}}, {'X', {5, 5, 2, 5, 5}}, {'Y', {5, 5, 2, 2, 2}}, {'Z', {7, 1, 2, 4, 7}},
      {' ', {0, 0, 0, 0, 0}}, {'.', {0, 0, 0, 0, 2}}, {'-', {0, 0, 7, 0, 0}}, {'_', {0, 0, 0, 0, 7}},
      {'=', {0, 7, 0, 7, 0}}, {':', {0, 2, 0, 2, 0}}, {'/', {1, 1, 2, 4, 4}}, {'(', {1, 2, 2, 2, 1}},
      {')', {4, 2, 2, 2, 4}},
  };
  return g;
}

std::string tick_label(double v) {
  char buf[32];
  const double a = std::abs(v);
  if (a != 0 && (a >= 1e4 || a < 1e-2)) std::snprintf(buf, sizeof(buf), "%.1e", v);
  else std::snprintf(buf, sizeof(buf), "%.3g", v);
  return buf;
}

}  // namespace

void write_png(const std::filesystem::path& path, const Tensor<float>& img) {
  if (img.rank() != 3 || img.dim(0) != 3) throw DimensionError("write_png expects [3 x H x W], got " + shape_string(img.shape()));
  const int h = static_cast<int>(img.dim(1)), w = static_cast<int>(img.dim(2));
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  File f(std::fopen(path.string().c_str(), "wb"));
  if (!f) throw std::runtime_error("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw std::runtime_error("libpng initialisation failed");
  }
  std::vector<png_byte> rows(static_cast<std::size_t>(h) * w * 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        const float v = std::clamp(std::round(img[(c * h + y) * w + x]), 0.0f, 255.0f);
        rows[(static_cast<std::size_t>(y) * w + x) * 3 + c] = static_cast<png_byte>(v);
      }
  std::vector<png_bytep> ptrs(static_cast<std::size_t>(h));
  for (int y = 0; y < h; ++y) ptrs[static_cast<std::size_t>(y)] = rows.data() + static_cast<std::size_t>(y) * w * 3;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("libpng failed writing " + path.string());
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, ptrs.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Tensor<float> read_png(const std::filesystem::path& path) {
  File f(std::fopen(path.string().c_str(), "rb"));
  if (!f) throw std::runtime_error("cannot read " + path.string());
  png_byte sig[8];
  if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw std::runtime_error(path.string() + " is not a PNG file");
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw std::runtime_error("libpng initialisation failed");
  }
  std::vector<png_byte> rows;
  std::vector<png_bytep> ptrs;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("libpng failed reading " + path.string());
  }
  png_init_io(png, f.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const png_byte type = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  if (type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (type == PNG_COLOR_TYPE_GRAY || type == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
  if (png_get_bit_depth(png, info) < 8) png_set_expand(png);
  if (type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  const int w = static_cast<int>(png_get_image_width(png, info));
  const int h = static_cast<int>(png_get_image_height(png, info));
  rows.resize(static_cast<std::size_t>(h) * w * 3);
  ptrs.resize(static_cast<std::size_t>(h));
  for (int y = 0; y < h; ++y) ptrs[static_cast<std::size_t>(y)] = rows.data() + static_cast<std::size_t>(y) * w * 3;
  png_read_image(png, ptrs.data());
  png_destroy_read_struct(&png, &info, nullptr);
  Tensor<float> img({3, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) img[(c * h + y) * w + x] = rows[(static_cast<std::size_t>(y) * w + x) * 3 + c];
  return img;
}

Tensor<float> tile_images(const Tensor<float>& images, int columns, float separator_raw) {
  if (images.rank() != 4 || images.dim(1) != 3) throw DimensionError("tile_images expects [N x 3 x H x W]");
  const int n = static_cast<int>(images.dim(0)), h = static_cast<int>(images.dim(2)), w = static_cast<int>(images.dim(3));
  columns = std::max(1, std::min(columns, n));
  const int rows = (n + columns - 1) / columns;
  const int H = rows * (h + 1) - 1, W = columns * (w + 1) - 1;
  Tensor<float> out = Tensor<float>::full({3, H, W}, separator_raw);
  for (int i = 0; i < n; ++i) {
    const int oy = (i / columns) * (h + 1), ox = (i % columns) * (w + 1);
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const float v = images[((static_cast<Index>(i) * 3 + c) * h + y) * w + x];
          out[(c * H + oy + y) * W + ox + x] = std::clamp((v + 1.0f) * 127.5f, 0.0f, 255.0f);
        }
  }
  return out;
}

void write_raw_floats(const std::filesystem::path& path, const Tensor<float>& t) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  auto put = [&](auto v) {
    unsigned char b[sizeof(v)];
    std::memcpy(b, &v, sizeof(v));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(v));
    out.write(reinterpret_cast<const char*>(b), sizeof(v));
  };
  put(static_cast<std::uint32_t>(t.rank()));
  for (int a = 0; a < t.rank(); ++a) put(static_cast<std::uint32_t>(t.dim(a)));
  for (Index i = 0; i < t.size(); ++i) put(t[i]);
}

Tensor<float> read_raw_floats(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  auto get = [&](auto& v) {
    unsigned char b[sizeof(v)];
    if (!in.read(reinterpret_cast<char*>(b), sizeof(v))) throw std::runtime_error("truncated float dump " + path.string());
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(v));
    std::memcpy(&v, b, sizeof(v));
  };
  std::uint32_t rank = 0;
  get(rank);
  if (rank > 8) throw std::runtime_error("corrupt float dump " + path.string());
  Shape shape;
  for (std::uint32_t a = 0; a < rank; ++a) {
    std::uint32_t d = 0;
    get(d);
    shape.push_back(d);
  }
  Tensor<float> t(shape);
  for (Index i = 0; i < t.size(); ++i) get(t[i]);
  return t;
}

Canvas::Canvas(int width, int height, Color8 bg) : w_(width), h_(height), px_(static_cast<std::size_t>(width) * height * 3) {
  for (std::size_t i = 0; i < px_.size(); i += 3) std::copy(bg.begin(), bg.end(), px_.begin() + static_cast<std::ptrdiff_t>(i));
}

void Canvas::set(int x, int y, Color8 c) {
  if (x < 0 || y < 0 || x >= w_ || y >= h_) return;
  std::copy(c.begin(), c.end(), px_.begin() + (static_cast<std::ptrdiff_t>(y) * w_ + x) * 3);
}

Color8 Canvas::get(int x, int y) const {
  const auto i = (static_cast<std::size_t>(y) * w_ + x) * 3;
  return {px_[i], px_[i + 1], px_[i + 2]};
}

void Canvas::line(double x0, double y0, double x1, double y1, Color8 c, int thickness) {
  const int steps = static_cast<int>(std::ceil(std::max(std::abs(x1 - x0), std::abs(y1 - y0)))) + 1;
  const int r = thickness / 2;
  for (int i = 0; i <= steps; ++i) {
    const double f = static_cast<double>(i) / steps;
    const int x = static_cast<int>(std::lround(x0 + f * (x1 - x0))), y = static_cast<int>(std::lround(y0 + f * (y1 - y0)));
    for (int dy = -r; dy <= r; ++dy)
      for (int dx = -r; dx <= r; ++dx) set(x + dx, y + dy, c);
  }
}

void Canvas::rect(int x0, int y0, int x1, int y1, Color8 c) {
  line(x0, y0, x1, y0, c);
  line(x1, y0, x1, y1, c);
  line(x1, y1, x0, y1, c);
  line(x0, y1, x0, y0, c);
}

void Canvas::circle(double cx, double cy, double r, Color8 c) {
  const int n = std::max(16, static_cast<int>(r * 8));
  for (int i = 0; i < n; ++i) {
    const double a0 = 2 * M_PI * i / n, a1 = 2 * M_PI * (i + 1) / n;
    line(cx + r * std::cos(a0), cy + r * std::sin(a0), cx + r * std::cos(a1), cy + r * std::sin(a1), c, 2);
  }
}

void Canvas::text(int x, int y, const std::string& s, Color8 c, int scale) {
  for (std::size_t k = 0; k < s.size(); ++k) {
    auto it = glyphs().find(static_cast<char>(std::toupper(static_cast<unsigned char>(s[k]))));
    if (it == glyphs().end()) continue;
    for (int row = 0; row < 5; ++row)
      for (int col = 0; col < 3; ++col) {
        if (!(it->second[static_cast<std::size_t>(row)] & (4 >> col))) continue;
        for (int dy = 0; dy < scale; ++dy)
          for (int dx = 0; dx < scale; ++dx)
            set(x + (static_cast<int>(k) * 4 + col) * scale + dx, y + row * scale + dy, c);
      }
  }
}

void Canvas::save_png(const std::filesystem::path& path) const {
  Tensor<float> img({3, h_, w_});
  for (int y = 0; y < h_; ++y)
    for (int x = 0; x < w_; ++x)
      for (int c = 0; c < 3; ++c) img[(c * h_ + y) * w_ + x] = px_[(static_cast<std::size_t>(y) * w_ + x) * 3 + c];
  write_png(path, img);
}

void line_plot(const std::filesystem::path& path, const std::string& title, const std::vector<PlotSeries>& series,
               const double* hx, const double* hy) {
  const int W = 640, H = 420, left = 70, right = 180, top = 40, bottom = 50;
  Canvas cv(W, H);
  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin, ymin = xmin, ymax = -xmin;
  for (const auto& s : series) {
    for (double v : s.x) xmin = std::min(xmin, v), xmax = std::max(xmax, v);
    for (double v : s.y) {
      if (std::isfinite(v)) ymin = std::min(ymin, v), ymax = std::max(ymax, v);
    }
  }
  if (!std::isfinite(xmin)) xmin = 0, xmax = 1;
  if (!std::isfinite(ymin)) ymin = 0, ymax = 1;
  if (xmax - xmin < 1e-12) xmax = xmin + 1;
  if (ymax - ymin < 1e-12) ymin -= 0.5, ymax += 0.5;
  const double pad = 0.05 * (ymax - ymin);
  ymin -= pad;
  ymax += pad;
  const int pw = W - left - right, ph = H - top - bottom;
  auto sx = [&](double x) { return left + (x - xmin) / (xmax - xmin) * pw; };
  auto sy = [&](double y) { return top + (ymax - y) / (ymax - ymin) * ph; };
  const Color8 ink{0, 0, 0}, grid{225, 225, 225};
  for (int i = 0; i <= 4; ++i) {
    const double yv = ymin + (ymax - ymin) * i / 4, xv = xmin + (xmax - xmin) * i / 4;
    cv.line(left, sy(yv), left + pw, sy(yv), grid);
    cv.line(sx(xv), top, sx(xv), top + ph, grid);
    const std::string yl = tick_label(yv), xl = tick_label(xv);
    cv.text(left - 6 - Canvas::text_width(yl), static_cast<int>(sy(yv)) - 5, yl, ink);
    cv.text(static_cast<int>(sx(xv)) - Canvas::text_width(xl) / 2, top + ph + 8, xl, ink);
  }
  cv.rect(left, top, left + pw, top + ph, ink);
  cv.text(left, 12, title, ink);
  cv.text(left + pw / 2 - Canvas::text_width("WEIGHT") / 2, H - 20, "WEIGHT", ink);
  int ly = top;
  for (const auto& s : series) {
    for (std::size_t i = 0; i + 1 < s.x.size() && i + 1 < s.y.size(); ++i) {
      cv.line(sx(s.x[i]), sy(s.y[i]), sx(s.x[i + 1]), sy(s.y[i + 1]), s.color, 2);
    }
    for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) cv.circle(sx(s.x[i]), sy(s.y[i]), 2, s.color);
    cv.line(left + pw + 10, ly + 4, left + pw + 30, ly + 4, s.color, 2);
    cv.text(left + pw + 36, ly, s.label, ink);
    ly += 16;
  }
  if (hx && hy) {
    cv.circle(sx(*hx), sy(*hy), 7, {220, 0, 0});
    cv.text(left + pw + 10, ly + 8, "O = REFERENCE", {220, 0, 0});
  }
  cv.save_png(path);
}

}  // namespace sgdiff
