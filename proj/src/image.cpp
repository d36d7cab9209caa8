#include "tfsdiff/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "tfsdiff/error.hpp"

namespace tfsdiff {

double cubic_kernel(double x) {
  constexpr double a = -0.5;
  const double ax = std::abs(x);
  if (ax <= 1.0) return ((a + 2.0) * ax - (a + 3.0)) * ax * ax + 1.0;
  if (ax < 2.0) return ((a * ax - 5.0 * a) * ax + 8.0 * a) * ax - 4.0 * a;
  return 0.0;
}

std::array<double, 4> cubic_tap_weights(double frac) {
  return {cubic_kernel(frac + 1.0), cubic_kernel(frac), cubic_kernel(1.0 - frac),
          cubic_kernel(2.0 - frac)};
}

namespace {

struct Contribution {
  std::vector<std::size_t> index;
  std::vector<double> weight;
};

std::vector<Contribution> contributions(std::size_t in_len, std::size_t out_len,
                                        bool antialias) {
  const double ratio = static_cast<double>(out_len) / static_cast<double>(in_len);
  const bool shrink = antialias && ratio < 1.0;
  const double kscale = shrink ? ratio : 1.0;
  const double width = 4.0 / kscale;
  const auto taps = static_cast<std::size_t>(std::ceil(width)) + 2;

  std::vector<Contribution> out(out_len);
  for (std::size_t i = 0; i < out_len; ++i) {
    const double u = (static_cast<double>(i) + 0.5) / ratio - 0.5;
    const auto left = static_cast<std::ptrdiff_t>(std::floor(u - width / 2.0));
    Contribution& c = out[i];
    double total = 0.0;
    for (std::size_t j = 0; j < taps; ++j) {
      const std::ptrdiff_t pos = left + static_cast<std::ptrdiff_t>(j);
      const double w = kscale * cubic_kernel(kscale * (u - static_cast<double>(pos)));
      if (w == 0.0) continue;
      const auto clamped = std::clamp<std::ptrdiff_t>(pos, 0, static_cast<std::ptrdiff_t>(in_len) - 1);
      c.index.push_back(static_cast<std::size_t>(clamped));
      c.weight.push_back(w);
      total += w;
    }
    for (double& w : c.weight) w /= total;
  }
  return out;
}

}  // namespace

Tensor bicubic_resample(const Tensor& image, std::size_t out_h, std::size_t out_w,
                        const ResampleOptions& options) {
  require(image.rank() == 3, ErrorCode::kShape,
          "bicubic_resample: expected [C,H,W], got " + shape_str(image.shape()));
  require(out_h >= 1 && out_w >= 1, ErrorCode::kInvalidArgument,
          "bicubic_resample: output size must be positive");
  const std::size_t C = image.dim(0), H = image.dim(1), W = image.dim(2);
  const auto rows = contributions(H, out_h, options.antialias);
  const auto cols = contributions(W, out_w, options.antialias);
  auto src = image.data();

  // Horizontal pass, then vertical.
  std::vector<double> tmp(C * H * out_w);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t y = 0; y < H; ++y) {
      const double* row = src.data() + (c * H + y) * W;
      for (std::size_t x = 0; x < out_w; ++x) {
        double acc = 0.0;
        for (std::size_t k = 0; k < cols[x].index.size(); ++k) acc += cols[x].weight[k] * row[cols[x].index[k]];
        tmp[(c * H + y) * out_w + x] = acc;
      }
    }
  }
  std::vector<double> out(C * out_h * out_w);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t y = 0; y < out_h; ++y) {
      for (std::size_t x = 0; x < out_w; ++x) {
        double acc = 0.0;
        for (std::size_t k = 0; k < rows[y].index.size(); ++k) {
          acc += rows[y].weight[k] * tmp[(c * H + rows[y].index[k]) * out_w + x];
        }
        out[(c * out_h + y) * out_w + x] = options.clamp_unit ? std::clamp(acc, 0.0, 1.0) : acc;
      }
    }
  }
  return Tensor::from_data({C, out_h, out_w}, std::move(out));
}

Tensor load_png(const std::filesystem::path& path) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    fail(ErrorCode::kIo, "cannot read PNG '" + path.string() + "': " + img.message);
  }
  const bool color = (img.format & PNG_FORMAT_FLAG_COLOR) != 0;
  img.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  const std::size_t C = color ? 3 : 1;
  const std::size_t H = img.height, W = img.width;
  std::vector<png_byte> buffer(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buffer.data(), 0, nullptr)) {
    png_image_free(&img);
    fail(ErrorCode::kIo, "cannot decode PNG '" + path.string() + "': " + img.message);
  }
  std::vector<double> data(C * H * W);
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      for (std::size_t c = 0; c < C; ++c) {
        data[(c * H + y) * W + x] = buffer[(y * W + x) * C + c] / 255.0;
      }
    }
  }
  return Tensor::from_data({C, H, W}, std::move(data));
}

std::vector<unsigned char> encode_png(const Tensor& image) {
  require(image.rank() == 3 && (image.dim(0) == 1 || image.dim(0) == 3), ErrorCode::kShape,
          "save_png: expected [1,H,W] or [3,H,W], got " + shape_str(image.shape()));
  const std::size_t C = image.dim(0), H = image.dim(1), W = image.dim(2);
  auto src = image.data();
  std::vector<png_byte> buffer(C * H * W);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t i = 0; i < H * W; ++i) {
      const double v = std::clamp(src[c * H * W + i], 0.0, 1.0);
      buffer[i * C + c] = static_cast<png_byte>(std::lround(v * 255.0));
    }
  }
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(W);
  img.height = static_cast<png_uint_32>(H);
  img.format = C == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&img, nullptr, &size, 0, buffer.data(), 0, nullptr)) {
    fail(ErrorCode::kIo, std::string("cannot encode PNG: ") + img.message);
  }
  std::vector<unsigned char> bytes(size);
  if (!png_image_write_to_memory(&img, bytes.data(), &size, 0, buffer.data(), 0, nullptr)) {
    fail(ErrorCode::kIo, std::string("cannot encode PNG: ") + img.message);
  }
  bytes.resize(size);
  return bytes;
}

bool write_file_if_changed(const std::filesystem::path& path,
                           const std::vector<unsigned char>& bytes) {
  if (std::filesystem::exists(path) && std::filesystem::file_size(path) == bytes.size()) {
    std::ifstream in(path, std::ios::binary);
    std::vector<unsigned char> existing(bytes.size());
    in.read(reinterpret_cast<char*>(existing.data()), static_cast<std::streamsize>(existing.size()));
    if (in && existing == bytes) return false;
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  require(out.good(), ErrorCode::kIo, "cannot write '" + path.string() + "'");
  return true;
}

void save_png(const std::filesystem::path& path, const Tensor& image) {
  const auto bytes = encode_png(image);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  require(out.good(), ErrorCode::kIo, "cannot write PNG '" + path.string() + "'");
}

Tensor quantize_8bit(const Tensor& image) {
  auto src = image.data();
  std::vector<double> out(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) {
    out[i] = static_cast<double>(std::lround(std::clamp(src[i], 0.0, 1.0) * 255.0)) / 255.0;
  }
  return Tensor::from_data(image.shape(), std::move(out));
}

Tensor to_luminance(const Tensor& image) {
  require(image.rank() == 3 && (image.dim(0) == 1 || image.dim(0) == 3), ErrorCode::kShape,
          "to_luminance: expected [1,H,W] or [3,H,W], got " + shape_str(image.shape()));
  if (image.dim(0) == 1) return image.detach();
  const std::size_t plane = image.dim(1) * image.dim(2);
  auto src = image.data();
  std::vector<double> out(plane);
  for (std::size_t i = 0; i < plane; ++i) {
    out[i] = 0.299 * src[i] + 0.587 * src[plane + i] + 0.114 * src[2 * plane + i];
  }
  return Tensor::from_data({1, image.dim(1), image.dim(2)}, std::move(out));
}

Tensor to_rgb(const Tensor& image) {
  require(image.rank() == 3 && (image.dim(0) == 1 || image.dim(0) == 3), ErrorCode::kShape,
          "to_rgb: expected [1,H,W] or [3,H,W], got " + shape_str(image.shape()));
  if (image.dim(0) == 3) return image.detach();
  auto src = image.data();
  std::vector<double> out;
  out.reserve(3 * src.size());
  for (int c = 0; c < 3; ++c) out.insert(out.end(), src.begin(), src.end());
  return Tensor::from_data({3, image.dim(1), image.dim(2)}, std::move(out));
}

}  // namespace tfsdiff
