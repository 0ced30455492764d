#pragma once

#include <string>

#include "neused/tensor.hpp"

namespace neused {

/// Writes an [H,W,3] tensor of values in [0,1] as an 8-bit RGB PNG
/// (out-of-range values are clamped). Deterministic byte output.
void write_png(const std::string& path, const Tensor& rgb);

/// Reads an 8-bit non-interlaced PNG (gray, RGB, or RGBA) into an [H,W,3]
/// tensor in [0,1]; gray is replicated, alpha is dropped.
Tensor read_png(const std::string& path);

/// PFM float32 image, [H,W,3] ("PF") or [H,W] ("Pf"), little-endian.
void write_pfm(const std::string& path, const Tensor& img);
Tensor read_pfm(const std::string& path);

}  // namespace neused
