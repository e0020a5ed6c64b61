#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include "r3cnn/io.hpp"
#include "r3cnn/png.hpp"

namespace r3cnn {
namespace plot {

struct Canvas {
  std::size_t w, h;
  std::vector<std::uint8_t> rgb;

  Canvas(std::size_t width, std::size_t height)
      : w(width), h(height), rgb(width * height * 3, 255) {}

  void set(std::ptrdiff_t x, std::ptrdiff_t y, std::uint8_t r, std::uint8_t g,
           std::uint8_t b) {
    if (x < 0 || y < 0 || x >= static_cast<std::ptrdiff_t>(w) ||
        y >= static_cast<std::ptrdiff_t>(h))
      return;
    const std::size_t p =
        (static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)) * 3;
    rgb[p] = r;
    rgb[p + 1] = g;
    rgb[p + 2] = b;
  }

  void fill_rect(std::ptrdiff_t x0, std::ptrdiff_t y0, std::ptrdiff_t x1,
                 std::ptrdiff_t y1, std::uint8_t r, std::uint8_t g,
                 std::uint8_t b) {
    for (std::ptrdiff_t y = y0; y < y1; ++y)
      for (std::ptrdiff_t x = x0; x < x1; ++x) set(x, y, r, g, b);
  }
};

// 5x7 glyphs for the small set of characters the chart labels need.
inline const std::map<char, std::array<std::uint8_t, 7>>& font() {
  static const std::map<char, std::array<std::uint8_t, 7>> f = {
      {'0', {0x0e, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0e}},
      {'1', {0x04, 0x0c, 0x04, 0x04, 0x04, 0x04, 0x0e}},
      {'2', {0x0e, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1f}},
      {'3', {0x1f, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0e}},
      {'4', {0x02, 0x06, 0x0a, 0x12, 0x1f, 0x02, 0x02}},
      {'5', {0x1f, 0x10, 0x1e, 0x01, 0x01, 0x11, 0x0e}},
      {'6', {0x06, 0x08, 0x10, 0x1e, 0x11, 0x11, 0x0e}},
      {'7', {0x1f, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08}},
      {'8', {0x0e, 0x11, 0x11, 0x0e, 0x11, 0x11, 0x0e}},
      {'9', {0x0e, 0x11, 0x11, 0x0f, 0x01, 0x02, 0x0c}},
      {'.', {0x00, 0x00, 0x00, 0x00, 0x00, 0x0c, 0x0c}},
      {':', {0x00, 0x0c, 0x0c, 0x00, 0x0c, 0x0c, 0x00}},
      {'l', {0x0c, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0e}},
      {'o', {0x00, 0x00, 0x0e, 0x11, 0x11, 0x11, 0x0e}},
      {'p', {0x00, 0x00, 0x1e, 0x11, 0x1e, 0x10, 0x10}},
      {' ', {0, 0, 0, 0, 0, 0, 0}},
  };
  return f;
}

inline void draw_text(Canvas& c, std::ptrdiff_t x, std::ptrdiff_t y,
                      const std::string& text) {
  for (char ch : text) {
    auto it = font().find(ch);
    if (it != font().end()) {
      for (int row = 0; row < 7; ++row)
        for (int col = 0; col < 5; ++col)
          if (it->second[static_cast<std::size_t>(row)] & (1 << (4 - col)))
            c.set(x + col, y + row, 0, 0, 0);
    }
    x += 6;
  }
}

inline void series_color(std::size_t loop, std::uint8_t rgb[3]) {
  static const std::uint8_t palette[][3] = {
      {66, 133, 244}, {219, 68, 55}, {244, 180, 0},
      {15, 157, 88},  {171, 71, 188}, {0, 172, 193}};
  const auto& p = palette[loop % 6];
  rgb[0] = p[0];
  rgb[1] = p[1];
  rgb[2] = p[2];
}

// Stacked per-loop bar chart over IoU bins. One color series per loop, legend
// gives each series total.
inline void render_histogram_png(const std::vector<HistogramRow>& rows,
                                 const std::string& out_path) {
  std::map<std::size_t, std::map<double, std::uint64_t>> series;  // loop -> bin_low -> count
  std::vector<double> bin_lows;
  for (const auto& r : rows) {
    series[r.loop][r.bin_low] += r.count;
    bin_lows.push_back(r.bin_low);
  }
  std::sort(bin_lows.begin(), bin_lows.end());
  bin_lows.erase(std::unique(bin_lows.begin(), bin_lows.end()), bin_lows.end());

  const std::size_t W = 800, H = 500;
  Canvas canvas(W, H);
  const std::ptrdiff_t left = 60, right = 780, top = 30, bottom = 440;

  // axes
  canvas.fill_rect(left, bottom, right, bottom + 2, 0, 0, 0);
  canvas.fill_rect(left - 2, top, left, bottom + 2, 0, 0, 0);

  std::uint64_t max_stack = 1;
  for (double b : bin_lows) {
    std::uint64_t stack = 0;
    for (const auto& [loop, bins] : series) {
      auto it = bins.find(b);
      if (it != bins.end()) stack += it->second;
    }
    max_stack = std::max(max_stack, stack);
  }

  const std::size_t nbins = std::max<std::size_t>(bin_lows.size(), 1);
  const double bar_w = static_cast<double>(right - left) / static_cast<double>(nbins);
  for (std::size_t bi = 0; bi < bin_lows.size(); ++bi) {
    const std::ptrdiff_t x0 = left + static_cast<std::ptrdiff_t>(bi * bar_w) + 1;
    const std::ptrdiff_t x1 =
        left + static_cast<std::ptrdiff_t>((bi + 1) * bar_w) - 1;
    double base = 0;
    for (const auto& [loop, bins] : series) {
      auto it = bins.find(bin_lows[bi]);
      if (it == bins.end() || it->second == 0) continue;
      const double frac_lo = base / static_cast<double>(max_stack);
      base += static_cast<double>(it->second);
      const double frac_hi = base / static_cast<double>(max_stack);
      const std::ptrdiff_t y1 =
          bottom - static_cast<std::ptrdiff_t>(frac_lo * (bottom - top));
      const std::ptrdiff_t y0 =
          bottom - static_cast<std::ptrdiff_t>(frac_hi * (bottom - top));
      std::uint8_t col[3];
      series_color(loop - 1, col);
      canvas.fill_rect(x0, y0, x1, y1, col[0], col[1], col[2]);
    }
    // x tick label on every 4th bin
    if (bi % 4 == 0) {
      char label[16];
      std::snprintf(label, sizeof(label), "%.2f", bin_lows[bi]);
      draw_text(canvas, x0, bottom + 8, label);
    }
  }

  // legend: one entry per loop with its total count
  std::ptrdiff_t ly = top + 6;
  for (const auto& [loop, bins] : series) {
    std::uint64_t total = 0;
    for (const auto& [b, c] : bins) total += c;
    std::uint8_t col[3];
    series_color(loop - 1, col);
    canvas.fill_rect(left + 12, ly, left + 26, ly + 10, col[0], col[1], col[2]);
    draw_text(canvas, left + 32, ly + 1,
              "loop " + std::to_string(loop) + ": " + std::to_string(total));
    ly += 16;
  }

  write_png(out_path, canvas.rgb.data(), W, H);
}

}  // namespace plot
}  // namespace r3cnn
