#pragma once

// Minimal RGB canvas for report figures. Internal to the library.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace udaliver::detail {

struct Canvas {
  int width = 0, height = 0;
  std::vector<uint8_t> rgb;

  Canvas(int w, int h) : width(w), height(h), rgb(size_t(w) * size_t(h) * 3, 255) {}
  void set(int x, int y, std::array<uint8_t, 3> c);
  void line(int x0, int y0, int x1, int y1, std::array<uint8_t, 3> c);
  void rect(int x0, int y0, int x1, int y1, std::array<uint8_t, 3> c);
};

std::array<uint8_t, 3> palette(size_t i);

// One polyline per series, x/y rescaled to fit; y axis fixed to [0,1].
Canvas plot_lines(const std::vector<std::vector<std::pair<double, double>>>& series);

// groups[g][s]: bar height in [0,1] for group g and series s.
Canvas plot_grouped_bars(const std::vector<std::vector<double>>& groups);

void write_png(const std::filesystem::path& path, const Canvas& canvas);
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace udaliver::detail
