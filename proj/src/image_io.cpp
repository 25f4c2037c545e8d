// SPDX-License-Identifier: Apache-2.0
#include "maskdiff/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>

namespace maskdiff {

ImageU8 read_png(const std::filesystem::path& path, int channels) {
  if (channels != 1 && channels != 3) throw std::invalid_argument("read_png: channels must be 1 or 3");
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (png_image_begin_read_from_file(&img, path.c_str()) == 0) {
    throw ImageIoError("cannot read PNG " + path.string() + ": " + img.message);
  }
  img.format = channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  ImageU8 out;
  out.width = static_cast<int>(img.width);
  out.height = static_cast<int>(img.height);
  out.channels = channels;
  out.pixels.resize(PNG_IMAGE_SIZE(img));
  if (png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr) == 0) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw ImageIoError("cannot decode PNG " + path.string() + ": " + msg);
  }
  return out;
}

void write_png(const std::filesystem::path& path, const ImageU8& image) {
  if (image.channels != 1 && image.channels != 3) throw std::invalid_argument("write_png: channels must be 1 or 3");
  if (image.pixels.size() != static_cast<std::size_t>(image.width) * image.height * image.channels) {
    throw std::invalid_argument("write_png: pixel buffer size does not match the image dimensions");
  }
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = image.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (png_image_write_to_file(&img, path.c_str(), 0, image.pixels.data(), 0, nullptr) == 0) {
    throw ImageIoError("cannot write PNG " + path.string() + ": " + img.message);
  }
}

Tensor<float> to_tensor(const ImageU8& image) {
  const Index c = image.channels, h = image.height, w = image.width;
  Tensor<float> t(Shape{1, c, h, w});
  for (Index y = 0; y < h; ++y) {
    for (Index x = 0; x < w; ++x) {
      for (Index k = 0; k < c; ++k) {
        t(0, k, y, x) = static_cast<float>(image.pixels[static_cast<std::size_t>((y * w + x) * c + k)]) / 255.0f;
      }
    }
  }
  return t;
}

ImageU8 to_image(const Tensor<float>& t, float lo, float hi) {
  const int r = t.rank();
  if ((r != 3 && r != 4) || (r == 4 && t.dim(0) != 1)) {
    throw ShapeError("to_image: expected [C, H, W] or [1, C, H, W], got " + shape_str(t.shape()));
  }
  const Index c = t.dim(-3), h = t.dim(-2), w = t.dim(-1);
  if (c != 1 && c != 3) throw ShapeError("to_image: expected 1 or 3 channels");
  ImageU8 out;
  out.width = static_cast<int>(w);
  out.height = static_cast<int>(h);
  out.channels = static_cast<int>(c);
  out.pixels.resize(static_cast<std::size_t>(c * h * w));
  const float span = hi - lo;
  for (Index k = 0; k < c; ++k) {
    for (Index y = 0; y < h; ++y) {
      for (Index x = 0; x < w; ++x) {
        const float v = (t.data()[(k * h + y) * w + x] - lo) / span;
        const float q = std::round(std::clamp(v, 0.0f, 1.0f) * 255.0f);
        out.pixels[static_cast<std::size_t>((y * w + x) * c + k)] = static_cast<std::uint8_t>(q);
      }
    }
  }
  return out;
}

}  // namespace maskdiff
