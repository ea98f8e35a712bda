#include "mimdet/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace mimdet {

namespace {

constexpr char kMagic[4] = {'M', 'I', 'M', 'D'};

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

void put_f64(std::ostream& os, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64(os, bits);
}

struct Reader {
  std::istream& is;
  std::string context;

  void fail(const std::string& what) const {
    throw std::runtime_error("checkpoint: " + what + (context.empty() ? "" : " (entry \"" + context + "\")"));
  }
  void read(void* dst, std::size_t n, const char* what) {
    is.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is.gcount()) != n) fail(std::string("truncated while reading ") + what);
  }
  std::uint32_t u32(const char* what) {
    unsigned char b[4];
    read(b, 4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
  }
  std::uint64_t u64(const char* what) {
    unsigned char b[8];
    read(b, 8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
  }
};

}  // namespace

void save_checkpoint(const ParamStore& tensors, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  os.write(kMagic, 4);
  put_u32(os, kCheckpointVersion);
  put_u32(os, static_cast<std::uint32_t>(tensors.size()));
  for (const std::string& name : tensors.names()) {
    const Tensor& t = tensors.at(name);
    put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (long d : t.shape()) put_u64(os, static_cast<std::uint64_t>(d));
    put_u32(os, 1);  // f64
    for (long i = 0; i < t.numel(); ++i) put_f64(os, t[i]);
  }
  if (!os) throw std::runtime_error("checkpoint: write failure on " + path);
}

ParamStore load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
  Reader r{is, ""};
  char magic[4];
  r.read(magic, 4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0) r.fail("bad magic, not a MIMD file");
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion)
    r.fail("unsupported version " + std::to_string(version) + ", expected " + std::to_string(kCheckpointVersion));
  const std::uint32_t count = r.u32("entry count");

  ParamStore store;
  for (std::uint32_t e = 0; e < count; ++e) {
    r.context = "#" + std::to_string(e);
    const std::uint32_t name_len = r.u32("name length");
    std::string name(name_len, '\0');
    r.read(name.data(), name_len, "name");
    r.context = name;
    const std::uint32_t rank = r.u32("rank");
    Shape shape;
    long numel = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const std::uint64_t ext = r.u64("dims");
      if (ext == 0 || ext > (1ull << 40)) r.fail("invalid extent " + std::to_string(ext));
      shape.push_back(static_cast<long>(ext));
      numel *= static_cast<long>(ext);
    }
    const std::uint32_t dtype = r.u32("dtype");
    if (dtype != 0 && dtype != 1) r.fail("unknown dtype tag " + std::to_string(dtype));
    if (store.has(name)) r.fail("duplicate name");
    Tensor& t = store.add(name, shape);
    if (dtype == 1) {
      for (long i = 0; i < numel; ++i) {
        const std::uint64_t bits = r.u64("f64 payload");
        double v;
        std::memcpy(&v, &bits, 8);
        t[i] = v;
      }
    } else {
      for (long i = 0; i < numel; ++i) {
        const std::uint32_t bits = r.u32("f32 payload");
        float v;
        std::memcpy(&v, &bits, 4);
        t[i] = static_cast<double>(v);
      }
    }
  }
  return store;
}

}  // namespace mimdet
