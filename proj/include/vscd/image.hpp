#pragma once

#include <cctype>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "vscd/errors.hpp"
#include "vscd/tensor.hpp"

namespace vscd {

// Interleaved 8-bit image; channels is 1 (mask/gray) or 3 (RGB).
struct Image {
  int h = 0, w = 0, channels = 0;
  std::vector<uint8_t> data;

  Image() = default;
  Image(int h_, int w_, int c_) : h(h_), w(w_), channels(c_), data(static_cast<size_t>(h_) * w_ * c_, 0) {}

  uint8_t& at(int y, int x, int c = 0) {
    return data[(static_cast<size_t>(y) * w + x) * channels + c];
  }
  uint8_t at(int y, int x, int c = 0) const {
    return data[(static_cast<size_t>(y) * w + x) * channels + c];
  }
};

inline void write_ppm(const std::string& path, const Image& img) {
  if (img.channels != 3) throw InputError("write_ppm: need 3 channels");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("write_ppm: cannot open " + path);
  f << "P6\n" << img.w << " " << img.h << "\n255\n";
  f.write(reinterpret_cast<const char*>(img.data.data()), static_cast<std::streamsize>(img.data.size()));
}

inline void write_pgm(const std::string& path, const Image& img) {
  if (img.channels != 1) throw InputError("write_pgm: need 1 channel");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("write_pgm: cannot open " + path);
  f << "P5\n" << img.w << " " << img.h << "\n255\n";
  f.write(reinterpret_cast<const char*>(img.data.data()), static_cast<std::streamsize>(img.data.size()));
}

namespace detail {
inline int pnm_int(std::istream& s) {
  // skips whitespace and '#' comments
  int c = s.get();
  while (c == '#' || std::isspace(c)) {
    if (c == '#')
      while (c != '\n' && c != EOF) c = s.get();
    c = s.get();
  }
  int v = 0;
  while (std::isdigit(c)) {
    v = v * 10 + (c - '0');
    c = s.get();
  }
  return v;
}
}  // namespace detail

inline Image read_pnm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("read_pnm: cannot open " + path);
  char m0 = static_cast<char>(f.get()), m1 = static_cast<char>(f.get());
  int channels;
  if (m0 == 'P' && m1 == '6')
    channels = 3;
  else if (m0 == 'P' && m1 == '5')
    channels = 1;
  else
    throw DataError("read_pnm: not a binary PPM/PGM: " + path);
  int w = detail::pnm_int(f);
  int h = detail::pnm_int(f);
  int maxv = detail::pnm_int(f);
  if (maxv != 255) throw DataError("read_pnm: only 8-bit supported: " + path);
  Image img(h, w, channels);
  f.read(reinterpret_cast<char*>(img.data.data()), static_cast<std::streamsize>(img.data.size()));
  if (!f) throw DataError("read_pnm: truncated file: " + path);
  return img;
}

// [0,1] float CHW view of an RGB image.
template <typename T>
Tensor<T> to_float_chw(const Image& img) {
  Tensor<T> t({img.channels, img.h, img.w});
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < img.h; ++y)
      for (int x = 0; x < img.w; ++x) t.at(c, y, x) = static_cast<T>(img.at(y, x, c)) / T(255);
  return t;
}

// ---- square float-plane stack: the shared debug dump format ----
// header: two little-endian int32 (plane_size, n_planes), then n_planes
// row-major plane_size*plane_size float32 planes.

inline void write_float_planes(const std::string& path, int plane_size,
                               const std::vector<std::vector<float>>& planes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("write_float_planes: cannot open " + path);
  int32_t hdr[2] = {plane_size, static_cast<int32_t>(planes.size())};
  f.write(reinterpret_cast<const char*>(hdr), sizeof(hdr));
  for (const auto& p : planes) {
    if (static_cast<int>(p.size()) != plane_size * plane_size)
      throw InputError("write_float_planes: plane size mismatch");
    f.write(reinterpret_cast<const char*>(p.data()),
            static_cast<std::streamsize>(p.size() * sizeof(float)));
  }
}

inline std::vector<std::vector<float>> read_float_planes(const std::string& path,
                                                         int* plane_size_out = nullptr) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("read_float_planes: cannot open " + path);
  int32_t hdr[2];
  f.read(reinterpret_cast<char*>(hdr), sizeof(hdr));
  if (!f) throw DataError("read_float_planes: truncated header: " + path);
  std::vector<std::vector<float>> planes(static_cast<size_t>(hdr[1]));
  for (auto& p : planes) {
    p.resize(static_cast<size_t>(hdr[0]) * hdr[0]);
    f.read(reinterpret_cast<char*>(p.data()), static_cast<std::streamsize>(p.size() * sizeof(float)));
    if (!f) throw DataError("read_float_planes: truncated data: " + path);
  }
  if (plane_size_out) *plane_size_out = hdr[0];
  return planes;
}

// ---- precomputed-token records ----
// one record per frame: int32 LE (frame_index, D, grid_h, grid_w), then
// row-major [D, grid_h, grid_w] float32.

struct TokenRecord {
  int frame_index = 0;
  Tensor<float> tokens;  // [D, grid_h, grid_w]
};

inline void write_token_records(const std::string& path, const std::vector<TokenRecord>& recs) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("write_token_records: cannot open " + path);
  for (const auto& r : recs) {
    int32_t hdr[4] = {r.frame_index, r.tokens.dim(0), r.tokens.dim(1), r.tokens.dim(2)};
    f.write(reinterpret_cast<const char*>(hdr), sizeof(hdr));
    f.write(reinterpret_cast<const char*>(r.tokens.ptr()),
            static_cast<std::streamsize>(r.tokens.numel() * sizeof(float)));
  }
}

inline std::vector<TokenRecord> read_token_records(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("read_token_records: cannot open " + path);
  std::vector<TokenRecord> recs;
  while (true) {
    int32_t hdr[4];
    f.read(reinterpret_cast<char*>(hdr), sizeof(hdr));
    if (f.eof()) break;
    if (!f) throw DataError("read_token_records: truncated header: " + path);
    TokenRecord r;
    r.frame_index = hdr[0];
    r.tokens = Tensor<float>({hdr[1], hdr[2], hdr[3]});
    f.read(reinterpret_cast<char*>(r.tokens.ptr()),
           static_cast<std::streamsize>(r.tokens.numel() * sizeof(float)));
    if (!f) throw DataError("read_token_records: truncated record: " + path);
    recs.push_back(std::move(r));
  }
  return recs;
}

}  // namespace vscd
