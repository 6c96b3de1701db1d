#pragma once

#include <string>
#include <vector>

#include "ginv/tensor.hpp"

namespace ginv {

// Minimal PNG support for the artifact's own files: 8-bit grayscale or RGB,
// non-interlaced. Pixel values map [0,1] <-> [0,255] (clamped, rounded).
void write_png(const std::string& path, const Tensor& image);  // (H,W,C), C=1|3
Tensor read_png(const std::string& path);

// Tile a batch (N,H,W,C) into a grid image with a 2px separator.
Tensor tile_grid(const Tensor& batch, int cols);

struct PngInfo {
  int width = 0, height = 0, channels = 0;
};
PngInfo png_info(const std::string& path);

}  // namespace ginv
