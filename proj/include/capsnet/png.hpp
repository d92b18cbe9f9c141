#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <zlib.h>

#include "capsnet/tensor.hpp"

namespace capsnet {

namespace png_detail {

inline void put_be32(std::vector<uint8_t>& b, uint32_t v) {
    b.push_back(uint8_t(v >> 24));
    b.push_back(uint8_t(v >> 16));
    b.push_back(uint8_t(v >> 8));
    b.push_back(uint8_t(v));
}

inline void write_chunk(std::ofstream& os, const char type[4], const std::vector<uint8_t>& payload) {
    std::vector<uint8_t> hdr;
    put_be32(hdr, uint32_t(payload.size()));
    os.write(reinterpret_cast<const char*>(hdr.data()), 4);
    os.write(type, 4);
    os.write(reinterpret_cast<const char*>(payload.data()), std::streamsize(payload.size()));
    uint32_t crc = uint32_t(crc32(0L, reinterpret_cast<const Bytef*>(type), 4));
    crc = uint32_t(crc32(crc, payload.data(), uInt(payload.size())));
    std::vector<uint8_t> cb;
    put_be32(cb, crc);
    os.write(reinterpret_cast<const char*>(cb.data()), 4);
}

}  // namespace png_detail

// 8-bit grayscale PNG.
inline void write_png_gray(const std::vector<uint8_t>& pixels, int width, int height,
                           const std::string& path) {
    require(int(pixels.size()) == width * height, "png: pixel buffer size mismatch");
    using namespace png_detail;
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("png: cannot write " + path);
    static const uint8_t sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    os.write(reinterpret_cast<const char*>(sig), 8);

    std::vector<uint8_t> ihdr;
    put_be32(ihdr, uint32_t(width));
    put_be32(ihdr, uint32_t(height));
    ihdr.push_back(8);  // bit depth
    ihdr.push_back(0);  // grayscale
    ihdr.push_back(0);  // deflate
    ihdr.push_back(0);  // filter method
    ihdr.push_back(0);  // no interlace
    write_chunk(os, "IHDR", ihdr);

    // filter byte 0 per scanline
    std::vector<uint8_t> raw(size_t(height) * (width + 1));
    for (int y = 0; y < height; ++y) {
        raw[size_t(y) * (width + 1)] = 0;
        std::copy(pixels.begin() + size_t(y) * width, pixels.begin() + size_t(y + 1) * width,
                  raw.begin() + size_t(y) * (width + 1) + 1);
    }
    uLongf zlen = compressBound(uLong(raw.size()));
    std::vector<uint8_t> zdata(zlen);
    int rc = compress2(zdata.data(), &zlen, raw.data(), uLong(raw.size()), 6);
    require(rc == Z_OK, "png: deflate failed for " + path);
    zdata.resize(zlen);
    write_chunk(os, "IDAT", zdata);
    write_chunk(os, "IEND", {});
    require(bool(os), "png: write failed for " + path);
}

// Row-major grid of equal-size [0,1] grayscale images with 1-pixel white
// separators.
template <class S>
void write_png_grid(const std::vector<Tensor<S>>& images, int cols, const std::string& path) {
    require(!images.empty(), "png grid: no images");
    require(cols >= 1, "png grid: cols must be >= 1");
    int h = images[0].dim(0), w = images[0].dim(1);
    for (const auto& im : images)
        require(im.ndim() == 2 && im.dim(0) == h && im.dim(1) == w, "png grid: images differ in size");
    int n = int(images.size());
    int rows = (n + cols - 1) / cols;
    int gw = cols * w + (cols - 1);
    int gh = rows * h + (rows - 1);
    std::vector<uint8_t> pixels(size_t(gw) * gh, 255);
    for (int i = 0; i < n; ++i) {
        int r = i / cols, c = i % cols;
        int oy = r * (h + 1), ox = c * (w + 1);
        const auto& vals = images[size_t(i)].values();
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double v = std::min(1.0, std::max(0.0, double(vals[size_t(y) * w + x])));
                pixels[size_t(oy + y) * gw + (ox + x)] = uint8_t(std::lround(v * 255.0));
            }
    }
    write_png_gray(pixels, gw, gh, path);
}

}  // namespace capsnet
