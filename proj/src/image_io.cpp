#include "mimdet/image_io.hpp"

#include <algorithm>
#include <fstream>
#include <stdexcept>

namespace mimdet {

namespace {

// Skips whitespace and '#' comment lines between header fields.
long read_header_int(std::istream& is, const std::string& path) {
  int c = is.get();
  while (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '#') {
    if (c == '#')
      while (c != '\n' && c != EOF) c = is.get();
    c = is.get();
  }
  long v = 0;
  bool any = false;
  while (c >= '0' && c <= '9') {
    v = v * 10 + (c - '0');
    any = true;
    c = is.get();
  }
  if (!any) throw std::runtime_error(path + ": malformed header");
  return v;
}

void write_normalized_pgm(const std::vector<double>& vals, long h, long w, const std::string& path) {
  double lo = vals[0], hi = vals[0];
  for (double v : vals) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const double span = hi - lo;
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  os << "P5\n" << w << " " << h << "\n255\n";
  for (double v : vals) {
    const double u = span > 0 ? (v - lo) / span : 0.0;  // min==max guarded to 0
    os.put(static_cast<char>(static_cast<int>(u * 255.0 + 0.5)));
  }
  if (!os) throw std::runtime_error("write failure on " + path);
}

}  // namespace

Tensor read_image_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  char m0 = 0, m1 = 0;
  is.get(m0);
  is.get(m1);
  if (m0 != 'P' || m1 != '6') throw std::runtime_error(path + ": not a binary P6 PPM");
  const long w = read_header_int(is, path);
  const long h = read_header_int(is, path);
  const long maxval = read_header_int(is, path);
  if (w <= 0 || h <= 0 || w > (1 << 16) || h > (1 << 16))
    throw std::runtime_error(path + ": unreasonable dimensions");
  if (maxval <= 0 || maxval > 255) throw std::runtime_error(path + ": unsupported maxval");
  std::vector<char> raw(static_cast<std::size_t>(3 * w * h));
  is.read(raw.data(), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(is.gcount()) != raw.size()) throw std::runtime_error(path + ": truncated pixel data");
  Tensor img({1, 3, h, w});
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x)
      for (long c = 0; c < 3; ++c)
        img[(c * h + y) * w + x] =
            static_cast<double>(static_cast<unsigned char>(raw[static_cast<std::size_t>((y * w + x) * 3 + c)])) /
            static_cast<double>(maxval);
  return img;
}

void write_feature_pgm(const Tensor& map, const std::string& dir, const std::string& name) {
  if (map.rank() != 3) throw std::invalid_argument("write_feature_pgm expects [C,H,W], got " + shape_str(map.shape()));
  const long C = map.dim(0), H = map.dim(1), W = map.dim(2);
  std::vector<double> mean(static_cast<std::size_t>(H * W)), var(static_cast<std::size_t>(H * W));
  for (long i = 0; i < H * W; ++i) {
    double m = 0;
    for (long c = 0; c < C; ++c) m += map[c * H * W + i];
    m /= static_cast<double>(C);
    double v = 0;
    for (long c = 0; c < C; ++c) {
      const double d = map[c * H * W + i] - m;
      v += d * d;
    }
    mean[static_cast<std::size_t>(i)] = m;
    var[static_cast<std::size_t>(i)] = v / static_cast<double>(C);
  }
  write_normalized_pgm(mean, H, W, dir + "/" + name + "_mean.pgm");
  write_normalized_pgm(var, H, W, dir + "/" + name + "_var.pgm");
}

Tensor read_image_pgm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  char m0 = 0, m1 = 0;
  is.get(m0);
  is.get(m1);
  if (m0 != 'P' || m1 != '5') throw std::runtime_error(path + ": not a binary P5 PGM");
  const long w = read_header_int(is, path);
  const long h = read_header_int(is, path);
  const long maxval = read_header_int(is, path);
  std::vector<char> raw(static_cast<std::size_t>(w * h));
  is.read(raw.data(), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(is.gcount()) != raw.size()) throw std::runtime_error(path + ": truncated pixel data");
  Tensor img({h, w});
  for (long i = 0; i < h * w; ++i)
    img[i] = static_cast<double>(static_cast<unsigned char>(raw[static_cast<std::size_t>(i)])) / static_cast<double>(maxval);
  return img;
}

}  // namespace mimdet
