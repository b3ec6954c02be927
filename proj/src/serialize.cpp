#include <zlib.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "gadt/model.hpp"

namespace gadt {

namespace {

constexpr char kMagic[4] = {'D', 'A', 'D', 'V'};
constexpr std::uint16_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "weight I/O assumes a little-endian host");

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  template <typename U>
  void put(U v) {
    bytes(&v, sizeof v);
  }
  std::vector<std::uint8_t>& buffer() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}
  void bytes(void* dst, std::size_t n) {
    if (pos_ + n > b_.size()) {
      throw FormatError("weight file truncated at byte " + std::to_string(pos_) + " (needed " + std::to_string(n) +
                        " more bytes)");
    }
    std::memcpy(dst, b_.data() + pos_, n);
    pos_ += n;
  }
  template <typename U>
  U get() {
    U v;
    bytes(&v, sizeof v);
    return v;
  }
  std::size_t pos() const { return pos_; }

 private:
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

// "<arch>/<layer>.<kind>.<param>"
std::string arch_of(const std::string& name) {
  const auto slash = name.find('/');
  if (slash == std::string::npos || slash == 0) throw FormatError("tensor name '" + name + "' lacks an architecture prefix");
  return name.substr(0, slash);
}

}  // namespace

std::vector<std::uint8_t> serialize_model(const Model<float>& model) {
  const auto params = model.spec.parameters();
  if (params.size() != model.weights.size()) throw SpecError("model weights do not match its spec");
  if (params.size() > 0xffff) throw SpecError("too many tensors for the weight format");
  Writer w;
  w.bytes(kMagic, 4);
  w.put<std::uint16_t>(kVersion);
  w.put<std::uint16_t>(static_cast<std::uint16_t>(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    const auto& t = model.weights[i];
    if (t.shape() != p.shape) throw SpecError("weight '" + p.name + "' has shape " + to_string(t.shape()));
    if (p.name.size() > 255) throw SpecError("tensor name too long: " + p.name);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(p.name.size()));
    w.bytes(p.name.data(), p.name.size());
    w.put<std::uint8_t>(static_cast<std::uint8_t>(p.shape.size()));
    for (auto d : p.shape) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
    w.bytes(t.data().data(), t.data().size_bytes());
  }
  auto& buf = w.buffer();
  const auto crc = static_cast<std::uint32_t>(crc32(crc32(0L, Z_NULL, 0), buf.data(), static_cast<uInt>(buf.size())));
  w.put<std::uint32_t>(crc);
  return std::move(buf);
}

Model<float> deserialize_model(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("bad magic at byte 0: not a DADV weight file");
  const auto version = r.get<std::uint16_t>();
  if (version != kVersion) throw FormatError("unsupported weight file version " + std::to_string(version) + " at byte 4");
  const auto count = r.get<std::uint16_t>();

  std::vector<NamedTensor> tensors;
  for (std::size_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name.resize(r.get<std::uint8_t>());
    r.bytes(t.name.data(), t.name.size());
    const auto rank = r.get<std::uint8_t>();
    if (rank == 0) throw FormatError("tensor '" + t.name + "' has rank 0 at byte " + std::to_string(r.pos()));
    for (std::size_t d = 0; d < rank; ++d) {
      const auto dim = r.get<std::uint32_t>();
      if (dim == 0) throw FormatError("tensor '" + t.name + "' has a zero dimension");
      t.shape.push_back(dim);
    }
    t.values.resize(numel(t.shape));
    r.bytes(t.values.data(), t.values.size() * sizeof(float));
    tensors.push_back(std::move(t));
  }
  const auto payload_end = r.pos();
  const auto stored = r.get<std::uint32_t>();
  if (r.pos() != bytes.size()) throw FormatError("trailing bytes after CRC at byte " + std::to_string(r.pos()));
  const auto crc = static_cast<std::uint32_t>(crc32(crc32(0L, Z_NULL, 0), bytes.data(), static_cast<uInt>(payload_end)));
  if (crc != stored) throw FormatError("CRC mismatch at byte " + std::to_string(payload_end));

  // Recover the spec from the shape table.
  if (tensors.size() < 4) throw FormatError("weight file holds too few tensors to describe a model");
  const auto arch = arch_of(tensors.front().name);
  const auto& first = tensors.front();
  const auto& last_w = tensors[tensors.size() - 2];
  const auto& last_conv = tensors[tensors.size() - 4];
  if (first.shape.size() != 4 || last_w.shape.size() != 2 || last_conv.shape.size() != 4) {
    throw FormatError("shape table inconsistent with a conv/dense model");
  }
  const double side = std::sqrt(static_cast<double>(last_w.shape[1]) / static_cast<double>(last_conv.shape[0]));
  const auto spatial = static_cast<std::size_t>(std::llround(side)) * 4;
  ModelSpec spec;
  try {
    spec = architecture(arch, first.shape[1], spatial, spatial, last_w.shape[0]);
    spec.validate();
  } catch (const SpecError& e) {
    throw FormatError(std::string("shape table inconsistency: ") + e.what());
  }
  const auto params = spec.parameters();
  if (params.size() != tensors.size()) throw FormatError("shape table inconsistency: tensor count");
  Model<float> model{spec, {}, {}};
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].name != tensors[i].name || params[i].shape != tensors[i].shape) {
      throw FormatError("shape table inconsistency at tensor '" + tensors[i].name + "'");
    }
    model.weights.push_back(Tensor<float>::from(tensors[i].shape, std::move(tensors[i].values)));
  }
  return model;
}

void save_model(const Model<float>& model, const std::filesystem::path& path) {
  const auto bytes = serialize_model(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing '" + path.string() + "'");
}

Model<float> load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open weight file '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_model(bytes);
}

}  // namespace gadt
