#pragma once

// Raster file formats: 8-bit P5 PGM (read/write) and 8-bit PNG (read, plus
// in-memory encode for serving patch crops). 16-bit sources are rejected.

#include <png.h>

#include <cctype>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "raster.hpp"

namespace patchlab {

using Bytes = std::vector<std::uint8_t>;

inline Bytes read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io, "cannot open " + path.string());
  Bytes data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw Error(ErrorCode::io, "read failed for " + path.string());
  return data;
}

/// Writes through a sibling temp file and renames, so readers never see a partial file.
inline void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> data) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::io, "cannot open " + tmp.string() + " for writing");
    out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
    if (!out) throw Error(ErrorCode::io, "write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error(ErrorCode::io, "rename to " + path.string() + " failed: " + ec.message());
}

namespace detail {

class PgmHeaderReader {
 public:
  explicit PgmHeaderReader(std::span<const std::uint8_t> data) : data_(data) {}

  int next_int() {
    skip_space_and_comments();
    if (pos_ >= data_.size() || !std::isdigit(data_[pos_])) {
      throw Error(ErrorCode::corrupt_header, "expected integer in PGM header");
    }
    long long v = 0;
    while (pos_ < data_.size() && std::isdigit(data_[pos_])) {
      v = v * 10 + (data_[pos_++] - '0');
      if (v > (1LL << 30)) throw Error(ErrorCode::corrupt_header, "PGM header value too large");
    }
    return static_cast<int>(v);
  }

  // Exactly one whitespace byte separates maxval from the raster.
  std::size_t raster_offset() {
    if (pos_ >= data_.size() || !std::isspace(data_[pos_])) {
      throw Error(ErrorCode::corrupt_header, "missing separator before PGM raster");
    }
    return pos_ + 1;
  }

 private:
  void skip_space_and_comments() {
    while (pos_ < data_.size()) {
      if (std::isspace(data_[pos_])) {
        ++pos_;
      } else if (data_[pos_] == '#') {
        while (pos_ < data_.size() && data_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
  }

  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 2;
};

inline RasterImage decode_pgm(std::span<const std::uint8_t> data) {
  PgmHeaderReader reader(data);
  const int w = reader.next_int();
  const int h = reader.next_int();
  const int maxval = reader.next_int();
  if (w < 1 || h < 1) throw Error(ErrorCode::corrupt_header, "PGM dimensions must be positive");
  if (maxval < 1) throw Error(ErrorCode::corrupt_header, "PGM maxval must be positive");
  if (maxval > 255) throw Error(ErrorCode::unsupported_format, "16-bit PGM is not supported");
  const std::size_t offset = reader.raster_offset();
  const std::size_t n = static_cast<std::size_t>(w) * h;
  if (data.size() < offset + n) throw Error(ErrorCode::corrupt_header, "PGM raster truncated");
  std::vector<std::uint8_t> px(data.begin() + static_cast<std::ptrdiff_t>(offset),
                               data.begin() + static_cast<std::ptrdiff_t>(offset + n));
  if (maxval != 255) {
    for (auto& p : px) p = static_cast<std::uint8_t>(std::min<long>(255, std::lround(p * 255.0 / maxval)));
  }
  return RasterImage(w, h, 1, std::move(px));
}

inline RasterImage decode_png(std::span<const std::uint8_t> data) {
  // IHDR is mandated to be the first chunk: 8-byte signature, 8-byte chunk
  // head, 13-byte body. Bit depth and colour type sit at offsets 24 and 25.
  if (data.size() < 33 || std::memcmp(data.data() + 12, "IHDR", 4) != 0) {
    throw Error(ErrorCode::corrupt_header, "PNG missing IHDR");
  }
  const int bit_depth = data[24];
  const int color_type = data[25];
  if (bit_depth == 16) throw Error(ErrorCode::unsupported_format, "16-bit PNG is not supported");

  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&img, data.data(), data.size())) {
    throw Error(ErrorCode::corrupt_header, std::string("PNG header: ") + img.message);
  }
  const bool gray = (color_type & PNG_COLOR_MASK_COLOR) == 0 && (color_type & PNG_COLOR_MASK_PALETTE) == 0;
  img.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  const int channels = gray ? 1 : 3;
  std::vector<std::uint8_t> px(PNG_IMAGE_SIZE(img));
  png_color background{0, 0, 0};
  if (!png_image_finish_read(&img, &background, px.data(), 0, nullptr)) {
    png_image_free(&img);
    throw Error(ErrorCode::corrupt_header, std::string("PNG data: ") + img.message);
  }
  return RasterImage(static_cast<int>(img.width), static_cast<int>(img.height), channels, std::move(px));
}

}  // namespace detail

/// Decodes PNG or binary PGM from memory, dispatching on the magic bytes.
inline RasterImage decode_image(std::span<const std::uint8_t> data) {
  static constexpr std::uint8_t png_sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  if (data.size() >= 8 && std::memcmp(data.data(), png_sig, 8) == 0) return detail::decode_png(data);
  if (data.size() >= 2 && data[0] == 'P' && data[1] == '5') return detail::decode_pgm(data);
  if (data.size() < 2) throw Error(ErrorCode::corrupt_header, "file too short");
  throw Error(ErrorCode::unsupported_format, "not a PNG or binary PGM");
}

inline RasterImage load_image(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw Error(ErrorCode::missing_file, path.string());
  return decode_image(read_file_bytes(path));
}

/// Gray view of an image as a mask (sample/255). RGB is converted to luma.
inline GrayMask to_mask(const RasterImage& image) {
  auto luma = to_luma(image);
  for (double& v : luma) v /= 255.0;
  return GrayMask::from_unclamped(image.width(), image.height(), std::move(luma));
}

inline Bytes encode_pgm(const GrayMask& mask) {
  const std::string header = "P5\n" + std::to_string(mask.width()) + " " + std::to_string(mask.height()) + "\n255\n";
  Bytes out(header.begin(), header.end());
  out.reserve(out.size() + mask.size());
  for (double v : mask.values()) out.push_back(quantize(v));
  return out;
}

inline Bytes encode_pgm(const RasterImage& gray) {
  if (gray.channels() != 1) throw Error(ErrorCode::invalid_argument, "PGM requires a single channel");
  const std::string header = "P5\n" + std::to_string(gray.width()) + " " + std::to_string(gray.height()) + "\n255\n";
  Bytes out(header.begin(), header.end());
  out.insert(out.end(), gray.pixels().begin(), gray.pixels().end());
  return out;
}

/// Stores each value as round(v*255) in an 8-bit P5 PGM.
inline void write_mask(const GrayMask& mask, const std::filesystem::path& path) {
  write_file_atomic(path, encode_pgm(mask));
}

inline GrayMask load_mask(const std::filesystem::path& path) { return to_mask(load_image(path)); }

inline Bytes encode_png(const RasterImage& image) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width());
  img.height = static_cast<png_uint_32>(image.height());
  img.format = image.channels() == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  const auto* px = image.pixels().data();
  if (!png_image_write_to_memory(&img, nullptr, &size, 0, px, 0, nullptr)) {
    throw Error(ErrorCode::io, std::string("PNG encode: ") + img.message);
  }
  Bytes out(size);
  if (!png_image_write_to_memory(&img, out.data(), &size, 0, px, 0, nullptr)) {
    throw Error(ErrorCode::io, std::string("PNG encode: ") + img.message);
  }
  out.resize(size);
  return out;
}

inline void write_png(const RasterImage& image, const std::filesystem::path& path) {
  write_file_atomic(path, encode_png(image));
}

}  // namespace patchlab
