// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "maskdiff/tensor.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace maskdiff {

inline constexpr int kEdgeWidth = 2;

using Point = std::array<double, 2>;  // (x, y) in pixel units, pixel centres at integer + 0.5

struct Sample {
  Tensor<float> image;    // [1, 3, H, W] in [0, 1]
  Tensor<float> gt_mask;  // [1, 1, H, W] in {0, 1}
  Tensor<float> gt_edge;  // [1, 1, H, W] in {0, 1}
  std::string id;
  /// Region outline for generated samples; empty for loaded ones.
  std::vector<Point> region;

  Index height() const { return gt_mask.dim(2); }
  Index width() const { return gt_mask.dim(3); }
};

using Dataset = std::vector<Sample>;

/// Procedural tampering dataset: textured gradient backgrounds with one
/// polygonal region (ellipse or irregular polygon, 2-30% of the area) filled
/// with a statistically different texture and blended over a 2 px band.
/// Sample i depends only on (seed, i).
Dataset generate_synthetic(int n, int size, std::uint64_t seed);
Sample generate_synthetic_sample(int size, std::uint64_t seed, int index);

/// [1, 1, h, w] mask that is 1 where the pixel centre lies inside `polygon`
/// (even-odd rule).
Tensor<float> rasterize_polygon(const std::vector<Point>& polygon, Index h, Index w);

/// dilate(mask, r) XOR erode(mask, r) with a (2r+1)^2 square and replicate
/// padding. Accepts [N, 1, H, W] binary masks.
Tensor<float> derive_edge(const Tensor<float>& mask, int width = kEdgeWidth);

enum class AttackKind { gaussian_noise, gaussian_blur, scaling, distortion };

/// strength semantics:
///   gaussian_noise: noise standard deviation, [0, 1]
///   gaussian_blur:  kernel sigma in pixels, [0, 10]
///   scaling:        1 - scale factor, [0, 0.9]; 0.25 shrinks to 75% and back
///   distortion:     peak displacement in pixels, [0, 16]
struct AttackSpec {
  AttackKind kind = AttackKind::gaussian_noise;
  double strength = 0.0;
  std::uint64_t seed = 0;
};

std::string to_string(AttackKind kind);
AttackKind parse_attack_kind(const std::string& name);
double max_attack_strength(AttackKind kind);

/// Default robustness grid, including a strength-0 entry per kind.
std::vector<AttackSpec> default_attack_grid(std::uint64_t seed);

Sample apply_attack(const Sample& sample, const AttackSpec& spec);

/// Smooth, divergence-free displacement field used by the distortion attack:
/// [1, 2, H, W] with channel 0 = dx and 1 = dy, peak magnitude `amplitude`.
Tensor<float> smooth_displacement_field(Index h, Index w, double amplitude, std::uint64_t seed);

/// Separable Gaussian blur of every plane of an NCHW tensor, replicate border.
Tensor<float> gaussian_blur(const Tensor<float>& x, double sigma);

/// Bilinear resize of every plane of an NCHW tensor (half-pixel centres).
Tensor<float> resize_planes(const Tensor<float>& x, Index out_h, Index out_w);

/// Reads root/images/*.png and root/masks/*.png paired by file stem. Files
/// without a partner are skipped and their names appended to `unpaired`.
Dataset load_folder(const std::filesystem::path& root, std::vector<std::string>* unpaired = nullptr);

/// Writes the same layout that load_folder reads.
void export_folder(const Dataset& data, const std::filesystem::path& root);

}  // namespace maskdiff
