#pragma once

// In-memory images, binary PNM (P5/P6) I/O, image-space transforms and the
// view preprocessing pipeline.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "studyformer/errors.hpp"
#include "studyformer/tensor.hpp"

namespace studyformer {

// Interleaved HWC pixels with values in [0, 1]. channels is 1 or 3.
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 3;
  std::vector<float> pixels;

  Image() = default;
  Image(std::size_t h, std::size_t w, std::size_t c, float fill = 0.0f)
      : height(h), width(w), channels(c), pixels(h * w * c, fill) {}

  float& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * channels + c]; }
  float at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * channels + c]; }

  bool operator==(const Image&) const = default;
};

inline constexpr std::array<double, 3> kImageNetMean{0.485, 0.456, 0.406};
inline constexpr std::array<double, 3> kImageNetStd{0.229, 0.224, 0.225};

namespace detail {

inline void skip_pnm_space(std::istream& in) {
  while (true) {
    const int c = in.peek();
    if (c == '#') {
      std::string comment;
      std::getline(in, comment);
    } else if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
      in.get();
    } else {
      return;
    }
  }
}

inline std::size_t read_pnm_number(std::istream& in, const std::string& path) {
  skip_pnm_space(in);
  std::size_t v = 0;
  if (!(in >> v)) throw InputError("undecodable image " + path + ": bad header");
  return v;
}

}  // namespace detail

// Reads 8-bit binary PGM (P5) or PPM (P6).
inline Image read_pnm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open image " + path);
  std::string magic(2, '\0');
  in.read(magic.data(), 2);
  if (!in || (magic != "P5" && magic != "P6")) throw InputError("undecodable image " + path + ": not P5/P6");
  const std::size_t width = detail::read_pnm_number(in, path);
  const std::size_t height = detail::read_pnm_number(in, path);
  const std::size_t maxval = detail::read_pnm_number(in, path);
  if (width == 0 || height == 0 || maxval == 0 || maxval > 255) {
    throw InputError("undecodable image " + path + ": unsupported geometry or depth");
  }
  in.get();  // single whitespace before the raster
  Image img(height, width, magic == "P6" ? 3 : 1);
  std::vector<unsigned char> raw(img.pixels.size());
  if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
    throw InputError("undecodable image " + path + ": truncated raster");
  }
  const auto scale = static_cast<float>(maxval);
  for (std::size_t i = 0; i < raw.size(); ++i) img.pixels[i] = static_cast<float>(raw[i]) / scale;
  return img;
}

inline unsigned char quantize_pixel(float v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

// One-channel images become P5, three-channel images P6.
inline void write_pnm(const std::string& path, const Image& img) {
  if (img.channels != 1 && img.channels != 3) throw ContractError("write_pnm: channels must be 1 or 3");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot open " + path + " for writing");
  out << (img.channels == 3 ? "P6" : "P5") << '\n' << img.width << ' ' << img.height << "\n255\n";
  std::vector<unsigned char> raw(img.pixels.size());
  std::transform(img.pixels.begin(), img.pixels.end(), raw.begin(), quantize_pixel);
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!out) throw InputError("write failed for " + path);
}

// Half-pixel-centre bilinear resampling with edge clamping.
inline Image resize_bilinear(const Image& src, std::size_t out_h, std::size_t out_w) {
  if (src.height == out_h && src.width == out_w) return src;
  Image dst(out_h, out_w, src.channels);
  const double sy = static_cast<double>(src.height) / static_cast<double>(out_h);
  const double sx = static_cast<double>(src.width) / static_cast<double>(out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(src.height - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, src.height - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(src.width - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, src.width - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < src.channels; ++c) {
        const double top = src.at(y0, x0, c) * (1.0 - wx) + src.at(y0, x1, c) * wx;
        const double bottom = src.at(y1, x0, c) * (1.0 - wx) + src.at(y1, x1, c) * wx;
        dst.at(y, x, c) = static_cast<float>(top * (1.0 - wy) + bottom * wy);
      }
    }
  }
  return dst;
}

inline Image flip_horizontal(const Image& src) {
  Image dst(src.height, src.width, src.channels);
  for (std::size_t y = 0; y < src.height; ++y)
    for (std::size_t x = 0; x < src.width; ++x)
      for (std::size_t c = 0; c < src.channels; ++c) dst.at(y, src.width - 1 - x, c) = src.at(y, x, c);
  return dst;
}

inline Image flip_vertical(const Image& src) {
  Image dst(src.height, src.width, src.channels);
  for (std::size_t y = 0; y < src.height; ++y)
    for (std::size_t x = 0; x < src.width; ++x)
      for (std::size_t c = 0; c < src.channels; ++c) dst.at(src.height - 1 - y, x, c) = src.at(y, x, c);
  return dst;
}

// Clockwise rotation by quarter_turns * 90 degrees.
inline Image rotate_quarter(const Image& src, int quarter_turns) {
  Image cur = src;
  for (int t = 0; t < ((quarter_turns % 4) + 4) % 4; ++t) {
    Image next(cur.width, cur.height, cur.channels);
    for (std::size_t y = 0; y < cur.height; ++y)
      for (std::size_t x = 0; x < cur.width; ++x)
        for (std::size_t c = 0; c < cur.channels; ++c) next.at(x, cur.height - 1 - y, c) = cur.at(y, x, c);
    cur = std::move(next);
  }
  return cur;
}

inline Image scale_brightness(const Image& src, float factor) {
  Image dst = src;
  for (auto& v : dst.pixels) v = std::clamp(v * factor, 0.0f, 1.0f);
  return dst;
}

// Resize to S x S, replicate grayscale to three channels, then normalise each
// channel with the ImageNet statistics. Output is [3 x S x S].
template <class T>
Tensor<T> preprocess_image(const Image& raw, std::size_t target_size) {
  if (target_size < 8) throw ContractError("preprocess_image: target size must be >= 8");
  if (raw.height == 0 || raw.width == 0 || (raw.channels != 1 && raw.channels != 3)) {
    throw InputError("preprocess_image: image must be non-empty with 1 or 3 channels");
  }
  const Image img = resize_bilinear(raw, target_size, target_size);
  const std::size_t plane = target_size * target_size;
  std::vector<T> out(3 * plane);
  for (std::size_t c = 0; c < 3; ++c) {
    const std::size_t src_c = img.channels == 1 ? 0 : c;
    const T mean = static_cast<T>(kImageNetMean[c]);
    const T inv_std = T(1) / static_cast<T>(kImageNetStd[c]);
    for (std::size_t i = 0; i < plane; ++i) {
      out[c * plane + i] = (static_cast<T>(img.pixels[i * img.channels + src_c]) - mean) * inv_std;
    }
  }
  return Tensor<T>(Shape{3, target_size, target_size}, std::move(out));
}

}  // namespace studyformer
