// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "maskdiff/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <vector>

namespace maskdiff {

class ImageIoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Interleaved 8-bit image, row-major, 1 (gray) or 3 (RGB) channels.
struct ImageU8 {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<std::uint8_t> pixels;
};

/// Decodes any PNG to `channels` (1 or 3) 8-bit channels.
ImageU8 read_png(const std::filesystem::path& path, int channels);
void write_png(const std::filesystem::path& path, const ImageU8& image);

/// [1, C, H, W] float tensor in [0, 1].
Tensor<float> to_tensor(const ImageU8& image);

/// Converts a [C, H, W] or [1, C, H, W] tensor (C = 1 or 3) to 8 bits, mapping
/// [lo, hi] linearly to [0, 255] with clamping and rounding.
ImageU8 to_image(const Tensor<float>& t, float lo = 0.0f, float hi = 1.0f);

}  // namespace maskdiff
