#pragma once

#include "rlt/types.hpp"

#include <filesystem>

namespace rlt {

// Renders a value grid as a 24-bit BMP, one colored cell per entry with the
// value printed inside (percent, one decimal). Values are expected in [0,1].
void write_heatmap_bmp(const Mat& values, const std::filesystem::path& path, int cell_w = 64,
                       int cell_h = 36);

}  // namespace rlt
