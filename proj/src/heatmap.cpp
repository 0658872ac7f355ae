#include "rlt/heatmap.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <vector>

namespace rlt {

namespace {

// 3x5 glyphs, rows top to bottom, 3 bits per row
struct Glyph {
    char ch;
    std::uint8_t rows[5];
};

const Glyph kGlyphs[] = {
    {'0', {0b111, 0b101, 0b101, 0b101, 0b111}},
    {'1', {0b010, 0b110, 0b010, 0b010, 0b111}},
    {'2', {0b111, 0b001, 0b111, 0b100, 0b111}},
    {'3', {0b111, 0b001, 0b111, 0b001, 0b111}},
    {'4', {0b101, 0b101, 0b111, 0b001, 0b001}},
    {'5', {0b111, 0b100, 0b111, 0b001, 0b111}},
    {'6', {0b111, 0b100, 0b111, 0b101, 0b111}},
    {'7', {0b111, 0b001, 0b010, 0b010, 0b010}},
    {'8', {0b111, 0b101, 0b111, 0b101, 0b111}},
    {'9', {0b111, 0b101, 0b111, 0b001, 0b111}},
    {'.', {0b000, 0b000, 0b000, 0b000, 0b010}},
    {'-', {0b000, 0b000, 0b111, 0b000, 0b000}},
};

const Glyph* find_glyph(char c) {
    for (const auto& g : kGlyphs)
        if (g.ch == c) return &g;
    return nullptr;
}

struct Rgb {
    std::uint8_t r, g, b;
};

// blue (low) through white to red (high)
Rgb colormap(double v) {
    v = std::clamp(v, 0.0, 1.0);
    auto lerp = [](double a, double b, double t) {
        return static_cast<std::uint8_t>(a + (b - a) * t + 0.5);
    };
    if (v < 0.5) {
        double t = v / 0.5;
        return {lerp(40, 245, t), lerp(90, 245, t), lerp(200, 245, t)};
    }
    double t = (v - 0.5) / 0.5;
    return {lerp(245, 200, t), lerp(245, 60, t), lerp(245, 50, t)};
}

class Canvas {
  public:
    Canvas(int w, int h) : w_(w), h_(h), pix_(static_cast<std::size_t>(w) * h, {0, 0, 0}) {}

    void fill_rect(int x, int y, int w, int h, Rgb c) {
        for (int yy = y; yy < y + h; ++yy)
            for (int xx = x; xx < x + w; ++xx)
                if (xx >= 0 && xx < w_ && yy >= 0 && yy < h_)
                    pix_[static_cast<std::size_t>(yy) * w_ + xx] = c;
    }

    void draw_text(int x, int y, const std::string& text, Rgb c, int scale) {
        int cx = x;
        for (char ch : text) {
            const Glyph* g = find_glyph(ch);
            if (g != nullptr) {
                for (int ry = 0; ry < 5; ++ry)
                    for (int rx = 0; rx < 3; ++rx)
                        if (g->rows[ry] & (1 << (2 - rx)))
                            fill_rect(cx + rx * scale, y + ry * scale, scale, scale, c);
            }
            cx += 4 * scale;
        }
    }

    void write_bmp(const std::filesystem::path& path) const {
        const int row_bytes = ((w_ * 3 + 3) / 4) * 4;
        const std::uint32_t data_size = static_cast<std::uint32_t>(row_bytes) * h_;
        const std::uint32_t file_size = 54 + data_size;
        std::vector<std::uint8_t> header(54, 0);
        header[0] = 'B';
        header[1] = 'M';
        auto put32 = [&](int off, std::uint32_t v) {
            for (int i = 0; i < 4; ++i) header[off + i] = std::uint8_t(v >> (8 * i));
        };
        put32(2, file_size);
        put32(10, 54);
        put32(14, 40);
        put32(18, static_cast<std::uint32_t>(w_));
        put32(22, static_cast<std::uint32_t>(h_));
        header[26] = 1;
        header[28] = 24;
        put32(34, data_size);

        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out.write(reinterpret_cast<const char*>(header.data()), 54);
        std::vector<std::uint8_t> row(static_cast<std::size_t>(row_bytes), 0);
        for (int y = h_ - 1; y >= 0; --y) {  // BMP rows are bottom-up
            for (int x = 0; x < w_; ++x) {
                const Rgb& p = pix_[static_cast<std::size_t>(y) * w_ + x];
                row[3 * x + 0] = p.b;
                row[3 * x + 1] = p.g;
                row[3 * x + 2] = p.r;
            }
            out.write(reinterpret_cast<const char*>(row.data()), row_bytes);
        }
    }

  private:
    int w_, h_;
    std::vector<Rgb> pix_;
};

}  // namespace

void write_heatmap_bmp(const Mat& values, const std::filesystem::path& path, int cell_w,
                       int cell_h) {
    const int rows = static_cast<int>(values.rows());
    const int cols = static_cast<int>(values.cols());
    Canvas canvas(cols * cell_w + 2, rows * cell_h + 2);
    canvas.fill_rect(0, 0, cols * cell_w + 2, rows * cell_h + 2, {30, 30, 30});
    char buf[16];
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            const double v = values(r, c);
            canvas.fill_rect(c * cell_w + 2, r * cell_h + 2, cell_w - 1, cell_h - 1, colormap(v));
            std::snprintf(buf, sizeof(buf), "%.1f", v * 100.0);
            const int scale = 2;
            const int tw = static_cast<int>(std::strlen(buf)) * 4 * scale;
            canvas.draw_text(c * cell_w + (cell_w - tw) / 2, r * cell_h + (cell_h - 5 * scale) / 2,
                             buf, {15, 15, 15}, scale);
        }
    }
    if (!path.parent_path().empty()) std::filesystem::create_directories(path.parent_path());
    canvas.write_bmp(path);
}

}  // namespace rlt
