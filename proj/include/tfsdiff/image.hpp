#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <vector>

#include "tfsdiff/tensor.hpp"

namespace tfsdiff {

/// Catmull-Rom (a = -0.5) cubic kernel.
double cubic_kernel(double x);

/// Weights of the four taps at positions floor(u)-1 .. floor(u)+2 for a
/// sample at fractional offset `frac` = u - floor(u).
std::array<double, 4> cubic_tap_weights(double frac);

struct ResampleOptions {
  /// Stretch the kernel by the reduction factor when shrinking, so every
  /// source pixel contributes (imresize-style anti-aliasing).
  bool antialias = true;
  /// Clamp results to [0, 1].
  bool clamp_unit = true;
};

/// Separable bicubic resampling of a [C,H,W] image with half-pixel centre
/// alignment and edge-clamp padding. Not differentiable.
Tensor bicubic_resample(const Tensor& image, std::size_t out_h, std::size_t out_w,
                        const ResampleOptions& options = {});

/// Reads a PNG into a [C,H,W] tensor with values v/255. Gray(+alpha) gives
/// C=1, RGB(A) gives C=3; alpha is dropped. 16-bit files are reduced to
/// 8 bits by libpng.
Tensor load_png(const std::filesystem::path& path);

/// Writes a [1,H,W] or [3,H,W] tensor with values in [0,1] as an 8-bit PNG.
/// Values are clamped then rounded to the nearest of 256 levels.
void save_png(const std::filesystem::path& path, const Tensor& image);

/// The bytes save_png would write.
std::vector<unsigned char> encode_png(const Tensor& image);
/// Writes `bytes` unless the file already holds exactly them; returns
/// whether the file was written.
bool write_file_if_changed(const std::filesystem::path& path,
                           const std::vector<unsigned char>& bytes);
/// Rounds [0,1] values to the 8-bit grid k/255, matching what save_png writes.
Tensor quantize_8bit(const Tensor& image);

/// Rec. 601 luma of a [3,H,W] image; [1,H,W] input is returned unchanged.
Tensor to_luminance(const Tensor& image);

/// Replicates a [1,H,W] image to [3,H,W]; [3,H,W] input is returned unchanged.
Tensor to_rgb(const Tensor& image);

}  // namespace tfsdiff
