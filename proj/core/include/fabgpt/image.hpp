// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>

#include "fabgpt/tensor.hpp"

namespace fabgpt::io {

// Writes a [H,W] tensor with values in [0,1] as an 8-bit grayscale PNG.
// Values are rounded to the nearest of 256 levels, so write/read round-trips
// to within 1/255 and binary masks (0 or 1) round-trip exactly.
void write_png_gray(const std::string& path, const Tensor& img);

// Reads any grayscale-convertible PNG back to a [H,W] tensor in [0,1].
Tensor read_png_gray(const std::string& path);

}  // namespace fabgpt::io
