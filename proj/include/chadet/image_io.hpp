#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "chadet/tensor.hpp"

namespace chadet {

struct IoError : std::runtime_error {
  explicit IoError(const std::string& m) : std::runtime_error(m) {}
};
struct MalformedHeaderError : IoError {
  explicit MalformedHeaderError(const std::string& m) : IoError(m) {}
};
struct TruncatedPayloadError : IoError {
  explicit TruncatedPayloadError(const std::string& m) : IoError(m) {}
};
struct UnsupportedVariantError : IoError {
  explicit UnsupportedVariantError(const std::string& m) : IoError(m) {}
};

namespace detail {

inline std::string next_token(std::istream& in, const std::string& path) {
  std::string tok;
  if (!(in >> tok))
    throw MalformedHeaderError(path + ": unexpected end of header");
  return tok;
}

}  // namespace detail

// Binary PPM (P6, maxval 255). rgb is (1, 3, h, w) in [0, 1].
inline void write_ppm(const std::string& path, const Tensor<float>& rgb) {
  const Shape4& s = rgb.shape();
  require(s[0] == 1 && s[1] == 3, "write_ppm: expected (1, 3, h, w) tensor");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << "P6\n" << s[3] << " " << s[2] << "\n255\n";
  std::vector<unsigned char> row(static_cast<size_t>(s[3]) * 3);
  for (int y = 0; y < s[2]; ++y) {
    for (int x = 0; x < s[3]; ++x)
      for (int c = 0; c < 3; ++c) {
        float v = std::clamp(rgb.at(0, c, y, x), 0.0f, 1.0f);
        row[static_cast<size_t>(x) * 3 + c] =
            static_cast<unsigned char>(v * 255.0f + 0.5f);
      }
    out.write(reinterpret_cast<const char*>(row.data()),
              static_cast<std::streamsize>(row.size()));
  }
  if (!out) throw IoError("short write to " + path);
}

inline Tensor<float> read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::string magic = detail::next_token(in, path);
  if (magic == "P5" || magic == "P3")
    throw UnsupportedVariantError(path + ": unsupported PPM variant " + magic);
  if (magic != "P6")
    throw MalformedHeaderError(path + ": bad PPM magic '" + magic + "'");
  int w = 0, h = 0, maxval = 0;
  try {
    w = std::stoi(detail::next_token(in, path));
    h = std::stoi(detail::next_token(in, path));
    maxval = std::stoi(detail::next_token(in, path));
  } catch (const std::logic_error&) {
    throw MalformedHeaderError(path + ": non-numeric PPM header field");
  }
  if (w <= 0 || h <= 0)
    throw MalformedHeaderError(path + ": non-positive PPM dimensions");
  if (maxval != 255)
    throw UnsupportedVariantError(path + ": only maxval 255 supported");
  in.get();  // single whitespace after maxval
  std::vector<unsigned char> buf(static_cast<size_t>(w) * h * 3);
  in.read(reinterpret_cast<char*>(buf.data()),
          static_cast<std::streamsize>(buf.size()));
  if (static_cast<size_t>(in.gcount()) != buf.size())
    throw TruncatedPayloadError(path + ": truncated PPM payload");
  Tensor<float> rgb(Shape4{1, 3, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        rgb.at(0, c, y, x) =
            buf[(static_cast<size_t>(y) * w + x) * 3 + c] / 255.0f;
  return rgb;
}

// Grayscale PFM ("Pf"), little-endian (negative scale), bottom-up rows.
inline void write_pfm(const std::string& path, const Tensor<float>& depth) {
  const Shape4& s = depth.shape();
  require(s[0] == 1 && s[1] == 1, "write_pfm: expected (1, 1, h, w) tensor");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << "Pf\n" << s[3] << " " << s[2] << "\n-1.0\n";
  for (int y = s[2] - 1; y >= 0; --y)
    out.write(reinterpret_cast<const char*>(depth.data() + depth.idx(0, 0, y, 0)),
              static_cast<std::streamsize>(sizeof(float)) * s[3]);
  if (!out) throw IoError("short write to " + path);
}

inline Tensor<float> read_pfm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::string magic = detail::next_token(in, path);
  if (magic == "PF")
    throw UnsupportedVariantError(path +
                                  ": color PFM not supported by grayscale reader");
  if (magic != "Pf")
    throw MalformedHeaderError(path + ": bad PFM magic '" + magic + "'");
  int w = 0, h = 0;
  double scale = 0;
  try {
    w = std::stoi(detail::next_token(in, path));
    h = std::stoi(detail::next_token(in, path));
    scale = std::stod(detail::next_token(in, path));
  } catch (const std::logic_error&) {
    throw MalformedHeaderError(path + ": non-numeric PFM header field");
  }
  if (w <= 0 || h <= 0)
    throw MalformedHeaderError(path + ": non-positive PFM dimensions");
  if (scale >= 0)
    throw UnsupportedVariantError(path + ": big-endian PFM not supported");
  in.get();
  Tensor<float> depth(Shape4{1, 1, h, w});
  for (int y = h - 1; y >= 0; --y) {
    in.read(reinterpret_cast<char*>(depth.data() + depth.idx(0, 0, y, 0)),
            static_cast<std::streamsize>(sizeof(float)) * w);
    if (in.gcount() != static_cast<std::streamsize>(sizeof(float)) * w)
      throw TruncatedPayloadError(path + ": truncated PFM payload");
  }
  return depth;
}

}  // namespace chadet
