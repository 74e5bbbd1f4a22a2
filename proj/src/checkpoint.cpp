#include "dpn/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "dpn/network.hpp"

namespace dpn {

namespace {

void put_u16(std::ostream& os, std::uint16_t v) {
  const char b[2] = {static_cast<char>(v & 0xff), static_cast<char>(v >> 8)};
  os.write(b, 2);
}

void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 4);
}

std::uint16_t get_u16(std::istream& is) {
  unsigned char b[2];
  is.read(reinterpret_cast<char*>(b), 2);
  return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) |
         (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_f32(std::ostream& os, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(os, bits);
}

float get_f32(std::istream& is) {
  const std::uint32_t bits = get_u32(is);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

constexpr char kMagic[4] = {'D', 'P', 'N', 'C'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint8_t kDtypeF32 = 0;

}  // namespace

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return &t;
  }
  return nullptr;
}

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
  os.write(kMagic, 4);
  put_u32(os, kVersion);
  put_u32(os, static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& [name, t] : ck.tensors) {
    if (name.size() > 0xffff) throw std::runtime_error("checkpoint: tensor name too long");
    put_u16(os, static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    os.put(static_cast<char>(t.ndim()));
    for (int d = 0; d < t.ndim(); ++d) put_u32(os, static_cast<std::uint32_t>(t.dim(d)));
    os.put(static_cast<char>(kDtypeF32));
    for (float v : t.values()) put_f32(os, v);
  }
  if (!os) throw std::runtime_error("checkpoint: write failed for '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) {
    throw std::runtime_error("checkpoint: bad magic in '" + path + "'");
  }
  const std::uint32_t version = get_u32(is);
  if (version != kVersion) {
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  }
  const std::uint32_t count = get_u32(is);
  Checkpoint ck;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t len = get_u16(is);
    std::string name(len, '\0');
    is.read(name.data(), len);
    const int ndim = is.get();
    std::vector<int> shape;
    std::int64_t numel = 1;
    for (int d = 0; d < ndim; ++d) {
      shape.push_back(static_cast<int>(get_u32(is)));
      numel *= shape.back();
    }
    const int dtype = is.get();
    if (dtype != kDtypeF32) {
      throw std::runtime_error("checkpoint: unsupported dtype code " + std::to_string(dtype));
    }
    std::vector<float> values(static_cast<std::size_t>(numel));
    for (auto& v : values) v = get_f32(is);
    if (!is) throw std::runtime_error("checkpoint: truncated file '" + path + "'");
    ck.tensors.emplace_back(std::move(name), Tensor::from_values(std::move(shape), std::move(values)));
  }
  return ck;
}

Checkpoint checkpoint_from(const Network& net) {
  Checkpoint ck;
  for (const auto& [name, t] : net.parameters()) ck.tensors.emplace_back(name, t.clone());
  for (const auto& [name, t] : const_cast<Network&>(net).buffers()) {
    ck.tensors.emplace_back(name, t.clone());
  }
  return ck;
}

void apply_checkpoint(Network& net, const Checkpoint& ck) {
  auto restore = [&](std::vector<std::pair<std::string, Tensor>>& dst) {
    for (auto& [name, t] : dst) {
      const Tensor* src = ck.find(name);
      if (!src) throw std::runtime_error("checkpoint: missing tensor '" + name + "'");
      if (src->shape() != t.shape()) {
        throw std::runtime_error("checkpoint: shape mismatch for '" + name + "'");
      }
      std::copy_n(src->data(), src->numel(), t.data());
    }
  };
  restore(net.parameters());
  restore(net.buffers());
}

}  // namespace dpn
