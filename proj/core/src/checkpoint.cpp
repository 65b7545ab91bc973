#include "evanet/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

namespace evanet {

namespace {

constexpr char kMagic[4] = {'E', 'V', 'A', 'W'};
constexpr std::uint16_t kVersion = 1;

void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

struct Reader {
  const std::string& buf;
  std::size_t pos = 0;

  void need(std::size_t n, const char* what) const {
    if (pos + n > buf.size())
      throw ParseError(std::string("checkpoint: truncated while reading ") + what +
                       " at offset " + std::to_string(pos));
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return static_cast<std::uint8_t>(buf[pos++]);
  }
  std::uint16_t u16(const char* what) {
    need(2, what);
    std::uint16_t v = static_cast<std::uint8_t>(buf[pos]) |
                      (static_cast<std::uint16_t>(static_cast<std::uint8_t>(buf[pos + 1])) << 8);
    pos += 2;
    return v;
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(buf[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  double f64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(buf[pos + i])) << (8 * i);
    pos += 8;
    return std::bit_cast<double>(v);
  }
};

}  // namespace

void save_checkpoint(const std::string& path, const NamedTensors& tensors) {
  std::string out;
  out.append(kMagic, 4);
  put_u16(out, kVersion);
  for (const auto& [name, tensor] : tensors) {
    if (name.size() > 0xffff) throw IoError("checkpoint: tensor name too long: " + name);
    put_u16(out, static_cast<std::uint16_t>(name.size()));
    out.append(name);
    const auto& shape = tensor.shape();
    if (shape.size() > 0xff) throw IoError("checkpoint: rank too large for " + name);
    out.push_back(static_cast<char>(shape.size()));
    for (std::size_t d : shape) put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : tensor.values()) put_f64(out, v);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("checkpoint: cannot open for writing: " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("checkpoint: short write: " + path);
}

NamedTensors load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("checkpoint: cannot open: " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  Reader r{buf};
  r.need(4, "magic");
  if (std::memcmp(buf.data(), kMagic, 4) != 0)
    throw ParseError("checkpoint: bad magic at offset 0");
  r.pos = 4;
  const std::uint16_t version = r.u16("version");
  if (version != kVersion)
    throw ParseError("checkpoint: unsupported version " + std::to_string(version) +
                     " at offset 4");

  NamedTensors result;
  while (r.pos < buf.size()) {
    const std::uint16_t name_len = r.u16("name length");
    r.need(name_len, "name");
    std::string name = buf.substr(r.pos, name_len);
    r.pos += name_len;
    const std::uint8_t rank = r.u8("rank");
    std::vector<std::size_t> shape(rank);
    std::size_t numel = 1;
    for (auto& d : shape) {
      d = r.u32("dimension");
      if (d == 0) throw ParseError("checkpoint: zero dimension in " + name + " at offset " +
                                   std::to_string(r.pos - 4));
      numel *= d;
    }
    std::vector<double> data(numel);
    for (auto& v : data) v = r.f64("payload");
    result.emplace_back(std::move(name), Tensor::from_data(std::move(shape), std::move(data)));
  }
  return result;
}

}  // namespace evanet
