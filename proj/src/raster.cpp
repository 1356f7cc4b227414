#include "raster.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "udaliver/errors.hpp"

namespace udaliver::detail {

namespace {

constexpr int kMargin = 40;
constexpr std::array<uint8_t, 3> kAxis{40, 40, 40};
constexpr std::array<uint8_t, 3> kGrid{220, 220, 220};

void frame(Canvas& c) {
  for (int k = 0; k <= 4; ++k) {
    const int y = c.height - kMargin - k * (c.height - 2 * kMargin) / 4;
    c.line(kMargin, y, c.width - kMargin, y, kGrid);
  }
  c.line(kMargin, c.height - kMargin, c.width - kMargin, c.height - kMargin, kAxis);
  c.line(kMargin, kMargin, kMargin, c.height - kMargin, kAxis);
}

}  // namespace

void Canvas::set(int x, int y, std::array<uint8_t, 3> c) {
  if (x < 0 || y < 0 || x >= width || y >= height) return;
  auto* p = &rgb[(size_t(y) * size_t(width) + size_t(x)) * 3];
  p[0] = c[0];
  p[1] = c[1];
  p[2] = c[2];
}

void Canvas::line(int x0, int y0, int x1, int y1, std::array<uint8_t, 3> c) {
  const int dx = std::abs(x1 - x0), sx = x0 < x1 ? 1 : -1;
  const int dy = -std::abs(y1 - y0), sy = y0 < y1 ? 1 : -1;
  int err = dx + dy;
  while (true) {
    set(x0, y0, c);
    if (x0 == x1 && y0 == y1) break;
    const int e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x0 += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y0 += sy;
    }
  }
}

void Canvas::rect(int x0, int y0, int x1, int y1, std::array<uint8_t, 3> c) {
  for (int y = std::min(y0, y1); y <= std::max(y0, y1); ++y)
    for (int x = std::min(x0, x1); x <= std::max(x0, x1); ++x) set(x, y, c);
}

std::array<uint8_t, 3> palette(size_t i) {
  static constexpr std::array<std::array<uint8_t, 3>, 8> colors{{{31, 119, 180},
                                                                  {255, 127, 14},
                                                                  {44, 160, 44},
                                                                  {214, 39, 40},
                                                                  {148, 103, 189},
                                                                  {140, 86, 75},
                                                                  {227, 119, 194},
                                                                  {127, 127, 127}}};
  return colors[i % colors.size()];
}

Canvas plot_lines(const std::vector<std::vector<std::pair<double, double>>>& series) {
  Canvas c(640, 400);
  frame(c);
  double xmin = 0.0, xmax = 1.0;
  bool first = true;
  for (const auto& s : series)
    for (auto [x, y] : s) {
      xmin = first ? x : std::min(xmin, x);
      xmax = first ? x : std::max(xmax, x);
      first = false;
    }
  if (xmax <= xmin) xmax = xmin + 1.0;
  auto px = [&](double x) { return kMargin + int(std::lround((x - xmin) / (xmax - xmin) * (c.width - 2 * kMargin))); };
  auto py = [&](double y) {
    y = std::clamp(y, 0.0, 1.0);
    return c.height - kMargin - int(std::lround(y * (c.height - 2 * kMargin)));
  };
  for (size_t i = 0; i < series.size(); ++i) {
    const auto color = palette(i);
    const auto& s = series[i];
    for (size_t k = 0; k < s.size(); ++k) {
      const int x = px(s[k].first), y = py(s[k].second);
      c.rect(x - 2, y - 2, x + 2, y + 2, color);
      if (k > 0) c.line(px(s[k - 1].first), py(s[k - 1].second), x, y, color);
    }
  }
  return c;
}

Canvas plot_grouped_bars(const std::vector<std::vector<double>>& groups) {
  Canvas c(std::max<int>(640, int(groups.size()) * 60 + 2 * kMargin), 400);
  frame(c);
  if (groups.empty()) return c;
  const double slot = double(c.width - 2 * kMargin) / double(groups.size());
  for (size_t g = 0; g < groups.size(); ++g) {
    const auto& bars = groups[g];
    if (bars.empty()) continue;
    const double bw = slot * 0.8 / double(bars.size());
    for (size_t s = 0; s < bars.size(); ++s) {
      const int x0 = kMargin + int(slot * double(g) + slot * 0.1 + bw * double(s));
      const int x1 = x0 + std::max(1, int(bw) - 1);
      const int y0 = c.height - kMargin;
      const int y1 = y0 - int(std::lround(std::clamp(bars[s], 0.0, 1.0) * (c.height - 2 * kMargin)));
      c.rect(x0, y1, x1, y0, palette(s));
    }
  }
  return c;
}

void write_png(const std::filesystem::path& path, const Canvas& canvas) {
  FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw IoError(path.string(), "cannot open for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw IoError(path.string(), "png encoding failed");
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, png_uint_32(canvas.width), png_uint_32(canvas.height), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < canvas.height; ++y)
    png_write_row(png, &canvas.rgb[size_t(y) * size_t(canvas.width) * 3]);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  if (std::fclose(fp) != 0) throw IoError(path.string(), "write failed");
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(path.string(), "cannot open for writing");
  out << text;
  if (!out) throw IoError(path.string(), "write failed");
}

}  // namespace udaliver::detail
