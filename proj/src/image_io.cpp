#include "neused/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include <zlib.h>

namespace neused {

namespace {

void put_u32_be(std::string& out, uint32_t v) {
  out.push_back(static_cast<char>((v >> 24) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>(v & 0xff));
}

uint32_t get_u32_be(const unsigned char* p) {
  return (static_cast<uint32_t>(p[0]) << 24) | (static_cast<uint32_t>(p[1]) << 16) |
         (static_cast<uint32_t>(p[2]) << 8) | static_cast<uint32_t>(p[3]);
}

void append_chunk(std::string& out, const char type[4], const std::string& data) {
  put_u32_be(out, static_cast<uint32_t>(data.size()));
  std::string body(type, 4);
  body += data;
  out += body;
  const uLong crc =
      crc32(0L, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size()));
  put_u32_be(out, static_cast<uint32_t>(crc));
}

unsigned char quantize(double v) {
  const double c = std::clamp(v, 0.0, 1.0);
  return static_cast<unsigned char>(std::lround(c * 255.0));
}

// Paeth predictor from the PNG filter specification.
int paeth(int a, int b, int c) {
  const int p = a + b - c;
  const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

}  // namespace

void write_png(const std::string& path, const Tensor& rgb) {
  if (rgb.shape.size() != 3 || rgb.shape[2] != 3)
    throw ShapeError("write_png: expected an [H,W,3] tensor");
  const int h = rgb.shape[0], w = rgb.shape[1];

  // Filter type 0 on every scanline keeps the writer bit-deterministic.
  std::vector<unsigned char> raw(static_cast<std::size_t>(h) * (1 + 3 * w));
  std::size_t p = 0;
  for (int y = 0; y < h; ++y) {
    raw[p++] = 0;
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        raw[p++] = quantize(rgb[(static_cast<std::size_t>(y) * w + x) * 3 + c]);
  }

  uLongf comp_len = compressBound(static_cast<uLong>(raw.size()));
  std::vector<unsigned char> comp(comp_len);
  if (compress2(comp.data(), &comp_len, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw ConfigError("write_png: deflate failed");

  std::string out("\x89PNG\r\n\x1a\n", 8);
  std::string ihdr;
  put_u32_be(ihdr, static_cast<uint32_t>(w));
  put_u32_be(ihdr, static_cast<uint32_t>(h));
  ihdr.push_back(8);   // bit depth
  ihdr.push_back(2);   // color type: truecolor
  ihdr.push_back(0);   // compression
  ihdr.push_back(0);   // filter method
  ihdr.push_back(0);   // no interlace
  append_chunk(out, "IHDR", ihdr);
  append_chunk(out, "IDAT",
               std::string(reinterpret_cast<const char*>(comp.data()), comp_len));
  append_chunk(out, "IEND", "");

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DatasetError("write_png: cannot open " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw DatasetError("write_png: short write to " + path);
}

Tensor read_png(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DatasetError("read_png: cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  const auto* data = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::size_t n = bytes.size();
  if (n < 8 || std::memcmp(data, "\x89PNG\r\n\x1a\n", 8) != 0)
    throw DatasetError("read_png: not a PNG file: " + path);

  int w = 0, h = 0, channels = 0;
  std::string idat;
  std::size_t pos = 8;
  bool saw_ihdr = false, saw_iend = false;
  while (pos + 8 <= n) {
    const uint32_t len = get_u32_be(data + pos);
    if (pos + 12 + len > n) throw DatasetError("read_png: truncated chunk in " + path);
    const std::string type(bytes, pos + 4, 4);
    const unsigned char* body = data + pos + 8;
    if (type == "IHDR") {
      if (len != 13) throw DatasetError("read_png: bad IHDR in " + path);
      w = static_cast<int>(get_u32_be(body));
      h = static_cast<int>(get_u32_be(body + 4));
      const int depth = body[8], color = body[9], interlace = body[12];
      if (depth != 8) throw DatasetError("read_png: only 8-bit PNGs supported: " + path);
      if (interlace != 0) throw DatasetError("read_png: interlaced PNGs unsupported: " + path);
      if (color == 0) channels = 1;
      else if (color == 2) channels = 3;
      else if (color == 6) channels = 4;
      else throw DatasetError("read_png: unsupported color type in " + path);
      saw_ihdr = true;
    } else if (type == "IDAT") {
      idat.append(reinterpret_cast<const char*>(body), len);
    } else if (type == "IEND") {
      saw_iend = true;
      break;
    }
    pos += 12 + len;
  }
  if (!saw_ihdr || !saw_iend || w <= 0 || h <= 0)
    throw DatasetError("read_png: malformed PNG structure in " + path);

  const std::size_t stride = static_cast<std::size_t>(w) * channels;
  std::vector<unsigned char> raw(static_cast<std::size_t>(h) * (stride + 1));
  uLongf raw_len = static_cast<uLongf>(raw.size());
  if (uncompress(raw.data(), &raw_len, reinterpret_cast<const Bytef*>(idat.data()),
                 static_cast<uLong>(idat.size())) != Z_OK ||
      raw_len != raw.size())
    throw DatasetError("read_png: inflate failed for " + path);

  // Undo per-scanline filters.
  std::vector<unsigned char> img(static_cast<std::size_t>(h) * stride);
  const int bpp = channels;
  for (int y = 0; y < h; ++y) {
    const unsigned char filter = raw[static_cast<std::size_t>(y) * (stride + 1)];
    const unsigned char* src = raw.data() + static_cast<std::size_t>(y) * (stride + 1) + 1;
    unsigned char* dst = img.data() + static_cast<std::size_t>(y) * stride;
    const unsigned char* up = y > 0 ? dst - stride : nullptr;
    for (std::size_t x = 0; x < stride; ++x) {
      const int a = x >= static_cast<std::size_t>(bpp) ? dst[x - bpp] : 0;
      const int b = up ? up[x] : 0;
      const int c = (up && x >= static_cast<std::size_t>(bpp)) ? up[x - bpp] : 0;
      int v = src[x];
      switch (filter) {
        case 0: break;
        case 1: v += a; break;
        case 2: v += b; break;
        case 3: v += (a + b) / 2; break;
        case 4: v += paeth(a, b, c); break;
        default: throw DatasetError("read_png: unknown filter type in " + path);
      }
      dst[x] = static_cast<unsigned char>(v & 0xff);
    }
  }

  Tensor out({h, w, 3});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const unsigned char* px = img.data() + (static_cast<std::size_t>(y) * w + x) * channels;
      for (int c = 0; c < 3; ++c) {
        const unsigned char byte = channels == 1 ? px[0] : px[c];
        out[(static_cast<std::size_t>(y) * w + x) * 3 + c] = byte / 255.0;
      }
    }
  return out;
}

void write_pfm(const std::string& path, const Tensor& img) {
  const bool color = img.shape.size() == 3 && img.shape[2] == 3;
  const bool gray = img.shape.size() == 2;
  if (!color && !gray) throw ShapeError("write_pfm: expected [H,W,3] or [H,W]");
  const int h = img.shape[0], w = img.shape[1];
  const int ch = color ? 3 : 1;

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DatasetError("write_pfm: cannot open " + path);
  f << (color ? "PF" : "Pf") << "\n" << w << " " << h << "\n" << "-1.0" << "\n";
  std::vector<float> row(static_cast<std::size_t>(w) * ch);
  for (int y = h - 1; y >= 0; --y) {  // PFM stores rows bottom-up
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < ch; ++c)
        row[static_cast<std::size_t>(x) * ch + c] =
            static_cast<float>(img[(static_cast<std::size_t>(y) * w + x) * ch + c]);
    f.write(reinterpret_cast<const char*>(row.data()),
            static_cast<std::streamsize>(row.size() * sizeof(float)));
  }
  if (!f) throw DatasetError("write_pfm: short write to " + path);
}

Tensor read_pfm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DatasetError("read_pfm: cannot open " + path);
  std::string magic;
  int w = 0, h = 0;
  double scale = 0.0;
  f >> magic >> w >> h >> scale;
  if ((magic != "PF" && magic != "Pf") || w <= 0 || h <= 0 || scale == 0.0)
    throw DatasetError("read_pfm: malformed header in " + path);
  if (scale > 0.0) throw DatasetError("read_pfm: big-endian PFM unsupported: " + path);
  f.get();  // single whitespace after the scale
  const int ch = magic == "PF" ? 3 : 1;

  Tensor out(ch == 3 ? std::vector<int>{h, w, 3} : std::vector<int>{h, w});
  std::vector<float> row(static_cast<std::size_t>(w) * ch);
  for (int y = h - 1; y >= 0; --y) {
    f.read(reinterpret_cast<char*>(row.data()),
           static_cast<std::streamsize>(row.size() * sizeof(float)));
    if (!f) throw DatasetError("read_pfm: truncated payload in " + path);
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < ch; ++c)
        out[(static_cast<std::size_t>(y) * w + x) * ch + c] =
            row[static_cast<std::size_t>(x) * ch + c];
  }
  return out;
}

}  // namespace neused
