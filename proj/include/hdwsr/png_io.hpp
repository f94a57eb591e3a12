#pragma once

#include <string>

#include "hdwsr/tensor.hpp"

namespace hdwsr {

// Decodes a PNG into a (3, height, width) tensor scaled to [0,1]. Grayscale
// and palette images are expanded to RGB; any alpha channel is dropped; 8-
// and 16-bit depths are honored at their native precision. Throws IoError
// when the file cannot be opened and IngestError when it cannot be decoded.
Tensor<double> read_png_rgb(const std::string& path);

// Writes a (3, height, width) tensor with values in [0,1]; out-of-range
// values are clipped at quantization. bit_depth is 8 or 16.
void write_png_rgb(const std::string& path, const Tensor<double>& img, int bit_depth = 8);

}  // namespace hdwsr
