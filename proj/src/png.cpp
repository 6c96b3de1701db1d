#include "ginv/png.hpp"

#include <zlib.h>

#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace ginv {

namespace {

void put_u32be(std::vector<unsigned char>& out, uint32_t v) {
  out.push_back(static_cast<unsigned char>(v >> 24));
  out.push_back(static_cast<unsigned char>(v >> 16));
  out.push_back(static_cast<unsigned char>(v >> 8));
  out.push_back(static_cast<unsigned char>(v));
}

uint32_t get_u32be(const unsigned char* p) {
  return (static_cast<uint32_t>(p[0]) << 24) | (static_cast<uint32_t>(p[1]) << 16) |
         (static_cast<uint32_t>(p[2]) << 8) | static_cast<uint32_t>(p[3]);
}

void append_chunk(std::vector<unsigned char>& out, const char type[4],
                  const std::vector<unsigned char>& data) {
  put_u32be(out, static_cast<uint32_t>(data.size()));
  size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), data.begin(), data.end());
  uLong crc = crc32(0L, out.data() + start, static_cast<uInt>(out.size() - start));
  put_u32be(out, static_cast<uint32_t>(crc));
}

unsigned char paeth(int a, int b, int c) {
  int p = a + b - c;
  int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return static_cast<unsigned char>(a);
  if (pb <= pc) return static_cast<unsigned char>(b);
  return static_cast<unsigned char>(c);
}

}  // namespace

void write_png(const std::string& path, const Tensor& image) {
  if (image.rank() != 3 || (image.dim(2) != 1 && image.dim(2) != 3))
    throw std::runtime_error("write_png: expected (H,W,1|3) image");
  int h = image.dim(0), w = image.dim(1), c = image.dim(2);

  // Raw scanlines with filter byte 0.
  std::vector<unsigned char> raw(static_cast<size_t>(h) * (1 + static_cast<size_t>(w) * c));
  size_t pos = 0;
  for (int y = 0; y < h; ++y) {
    raw[pos++] = 0;
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < c; ++ch) {
        double v = image.data[(static_cast<size_t>(y) * w + x) * c + ch];
        v = std::min(1.0, std::max(0.0, v));
        raw[pos++] = static_cast<unsigned char>(std::lround(v * 255.0));
      }
  }

  uLongf zlen = compressBound(static_cast<uLong>(raw.size()));
  std::vector<unsigned char> z(zlen);
  if (compress2(z.data(), &zlen, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw std::runtime_error("write_png: deflate failed");
  z.resize(zlen);

  std::vector<unsigned char> out;
  const unsigned char sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
  out.insert(out.end(), sig, sig + 8);
  std::vector<unsigned char> ihdr;
  put_u32be(ihdr, static_cast<uint32_t>(w));
  put_u32be(ihdr, static_cast<uint32_t>(h));
  ihdr.push_back(8);                                   // bit depth
  ihdr.push_back(c == 3 ? 2 : 0);                      // color type
  ihdr.push_back(0); ihdr.push_back(0); ihdr.push_back(0);
  append_chunk(out, "IHDR", ihdr);
  append_chunk(out, "IDAT", z);
  append_chunk(out, "IEND", {});

  std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("write_png: cannot open " + tmp);
    f.write(reinterpret_cast<const char*>(out.data()),
            static_cast<std::streamsize>(out.size()));
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw std::runtime_error("write_png: rename failed for " + path);
}

namespace {

struct ParsedPng {
  int w = 0, h = 0, c = 0;
  std::vector<unsigned char> pixels;  // unfiltered, h*w*c
};

ParsedPng parse_png(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_png: cannot open " + path);
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(f)),
                                 std::istreambuf_iterator<char>());
  const unsigned char sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
  if (buf.size() < 8 || std::memcmp(buf.data(), sig, 8) != 0)
    throw std::runtime_error("read_png: bad signature in " + path);

  ParsedPng png;
  std::vector<unsigned char> idat;
  size_t p = 8;
  while (p + 8 <= buf.size()) {
    uint32_t len = get_u32be(&buf[p]);
    if (p + 12 + len > buf.size())
      throw std::runtime_error("read_png: truncated chunk in " + path);
    const char* type = reinterpret_cast<const char*>(&buf[p + 4]);
    const unsigned char* data = &buf[p + 8];
    if (std::memcmp(type, "IHDR", 4) == 0) {
      png.w = static_cast<int>(get_u32be(data));
      png.h = static_cast<int>(get_u32be(data + 4));
      int depth = data[8], color = data[9], interlace = data[12];
      if (depth != 8 || (color != 0 && color != 2) || interlace != 0)
        throw std::runtime_error("read_png: unsupported format in " + path);
      png.c = color == 2 ? 3 : 1;
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      idat.insert(idat.end(), data, data + len);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      break;
    }
    p += 12 + len;
  }
  if (png.w <= 0 || png.h <= 0 || idat.empty())
    throw std::runtime_error("read_png: missing image data in " + path);

  size_t stride = static_cast<size_t>(png.w) * png.c;
  std::vector<unsigned char> raw(static_cast<size_t>(png.h) * (1 + stride));
  uLongf rawlen = static_cast<uLongf>(raw.size());
  if (uncompress(raw.data(), &rawlen, idat.data(), static_cast<uLong>(idat.size())) != Z_OK ||
      rawlen != raw.size())
    throw std::runtime_error("read_png: inflate failed for " + path);

  png.pixels.resize(static_cast<size_t>(png.h) * stride);
  int bpp = png.c;
  for (int y = 0; y < png.h; ++y) {
    unsigned char filter = raw[static_cast<size_t>(y) * (1 + stride)];
    const unsigned char* src = &raw[static_cast<size_t>(y) * (1 + stride) + 1];
    unsigned char* dst = &png.pixels[static_cast<size_t>(y) * stride];
    const unsigned char* up =
        y > 0 ? &png.pixels[static_cast<size_t>(y - 1) * stride] : nullptr;
    for (size_t i = 0; i < stride; ++i) {
      int a = i >= static_cast<size_t>(bpp) ? dst[i - bpp] : 0;
      int b = up ? up[i] : 0;
      int cc = (up && i >= static_cast<size_t>(bpp)) ? up[i - bpp] : 0;
      int v = src[i];
      switch (filter) {
        case 0: break;
        case 1: v += a; break;
        case 2: v += b; break;
        case 3: v += (a + b) / 2; break;
        case 4: v += paeth(a, b, cc); break;
        default:
          throw std::runtime_error("read_png: bad filter in " + path);
      }
      dst[i] = static_cast<unsigned char>(v);
    }
  }
  return png;
}

}  // namespace

Tensor read_png(const std::string& path) {
  ParsedPng png = parse_png(path);
  Tensor out({png.h, png.w, png.c});
  for (size_t i = 0; i < png.pixels.size(); ++i)
    out.data[i] = static_cast<double>(png.pixels[i]) / 255.0;
  return out;
}

PngInfo png_info(const std::string& path) {
  ParsedPng png = parse_png(path);
  return {png.w, png.h, png.c};
}

Tensor tile_grid(const Tensor& batch, int cols) {
  if (batch.rank() != 4) throw std::runtime_error("tile_grid: expected batch");
  int n = batch.dim(0), h = batch.dim(1), w = batch.dim(2), c = batch.dim(3);
  int rows = (n + cols - 1) / cols;
  const int sep = 2;
  Tensor grid = Tensor::full({rows * h + (rows - 1) * sep,
                              cols * w + (cols - 1) * sep, c},
                             1.0);
  for (int i = 0; i < n; ++i) {
    int r = i / cols, col = i % cols;
    int y0 = r * (h + sep), x0 = col * (w + sep);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int ch = 0; ch < c; ++ch)
          grid.data[((static_cast<size_t>(y0 + y) * grid.dim(1)) + x0 + x) * c + ch] =
              batch.data[(((static_cast<size_t>(i) * h + y) * w) + x) * c + ch];
  }
  return grid;
}

}  // namespace ginv
