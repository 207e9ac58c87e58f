#pragma once

// Binary PPM (P6, 8-bit) for images and grayscale PFM (little-endian float32,
// bottom-up scanlines) for depth maps.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "ddissect/tensor.hpp"

namespace ddissect {

static_assert(std::endian::native == std::endian::little,
              "PFM writer assumes a little-endian host");

// Quantizes [0,1] floats to 8 bits. image: (1,3,H,W).
inline void write_ppm(const std::filesystem::path& path, const Tensor& image) {
  const Shape& s = image.shape();
  expect(s.n == 1 && s.c == 3, "write_ppm: image must be (1,3,H,W)");
  std::ofstream f(path, std::ios::binary);
  expect(f.good(), msg("write_ppm: cannot open ", path.string()));
  f << "P6\n" << s.w << " " << s.h << "\n255\n";
  std::vector<unsigned char> row(static_cast<std::size_t>(s.w) * 3);
  for (int y = 0; y < s.h; ++y) {
    for (int x = 0; x < s.w; ++x)
      for (int c = 0; c < 3; ++c) {
        float v = image.at(0, c, y, x);
        v = std::min(std::max(v, 0.f), 1.f);
        row[static_cast<std::size_t>(x) * 3 + c] =
            static_cast<unsigned char>(std::lround(v * 255.f));
      }
    f.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  expect(f.good(), msg("write_ppm: write failed for ", path.string()));
}

inline Tensor read_ppm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  expect(f.good(), msg("read_ppm: cannot open ", path.string()));
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  f >> magic >> w >> h >> maxval;
  expect(magic == "P6", msg("read_ppm: ", path.string(), " is not a binary PPM"));
  expect(w >= 1 && h >= 1, msg("read_ppm: bad dimensions in ", path.string()));
  expect(maxval == 255, msg("read_ppm: unsupported maxval in ", path.string()));
  f.get();  // single whitespace after header
  std::vector<unsigned char> raw(static_cast<std::size_t>(w) * h * 3);
  f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  expect(f.gcount() == static_cast<std::streamsize>(raw.size()),
         msg("read_ppm: truncated file ", path.string()));
  Tensor img = Tensor::zeros({1, 3, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        img.at(0, c, y, x) =
            static_cast<float>(raw[(static_cast<std::size_t>(y) * w + x) * 3 + c]) / 255.f;
  return img;
}

// depth: (1,1,H,W). Scale header -1.0 marks little-endian data.
inline void write_pfm(const std::filesystem::path& path, const Tensor& depth) {
  const Shape& s = depth.shape();
  expect(s.n == 1 && s.c == 1, "write_pfm: depth must be (1,1,H,W)");
  std::ofstream f(path, std::ios::binary);
  expect(f.good(), msg("write_pfm: cannot open ", path.string()));
  f << "Pf\n" << s.w << " " << s.h << "\n-1.0\n";
  for (int y = s.h - 1; y >= 0; --y)
    f.write(reinterpret_cast<const char*>(depth.data().data() + static_cast<long long>(y) * s.w),
            static_cast<std::streamsize>(sizeof(float)) * s.w);
  expect(f.good(), msg("write_pfm: write failed for ", path.string()));
}

inline Tensor read_pfm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  expect(f.good(), msg("read_pfm: cannot open ", path.string()));
  std::string magic;
  int w = 0, h = 0;
  double scale = 0.0;
  f >> magic >> w >> h >> scale;
  expect(magic == "Pf", msg("read_pfm: ", path.string(), " is not a grayscale PFM"));
  expect(w >= 1 && h >= 1, msg("read_pfm: bad dimensions in ", path.string()));
  expect(scale < 0.0, msg("read_pfm: big-endian PFM not supported: ", path.string()));
  f.get();
  Tensor depth = Tensor::zeros({1, 1, h, w});
  for (int y = h - 1; y >= 0; --y) {
    f.read(reinterpret_cast<char*>(depth.data().data() + static_cast<long long>(y) * w),
           static_cast<std::streamsize>(sizeof(float)) * w);
    expect(f.gcount() == static_cast<std::streamsize>(sizeof(float) * w),
           msg("read_pfm: truncated file ", path.string()));
  }
  return depth;
}

}  // namespace ddissect
