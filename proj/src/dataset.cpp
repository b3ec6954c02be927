#include "gadt/dataset.hpp"

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <sstream>

#include "gadt/random.hpp"

namespace gadt {

template <typename T>
Tensor<T> Dataset::batch(std::span<const std::size_t> indices) const {
  const auto n = image_size();
  std::vector<T> out(indices.size() * n);
  for (std::size_t k = 0; k < indices.size(); ++k) {
    if (indices[k] >= size()) throw ContractError("dataset index " + std::to_string(indices[k]) + " out of range");
    std::copy_n(images.begin() + static_cast<std::ptrdiff_t>(indices[k] * n), n,
                out.begin() + static_cast<std::ptrdiff_t>(k * n));
  }
  return Tensor<T>::from({indices.size(), channels, height, width}, std::move(out));
}

template Tensor<float> Dataset::batch<float>(std::span<const std::size_t>) const;
template Tensor<double> Dataset::batch<double>(std::span<const std::size_t>) const;

std::vector<ClassIndex> Dataset::labels_at(std::span<const std::size_t> indices) const {
  std::vector<ClassIndex> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(labels.at(i));
  return out;
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset d{{}, {}, channels, height, width, classes, split, source};
  const auto n = image_size();
  d.images.reserve(indices.size() * n);
  for (auto i : indices) {
    auto img = image(i);
    d.images.insert(d.images.end(), img.begin(), img.end());
    d.labels.push_back(labels.at(i));
  }
  return d;
}

Dataset Dataset::head(std::size_t n) const {
  std::vector<std::size_t> idx(std::min(n, size()));
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return subset(idx);
}

void Dataset::validate() const {
  if (images.size() != labels.size() * image_size()) throw FormatError("dataset: image buffer size mismatch");
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= classes) throw FormatError("dataset: label " + std::to_string(labels[i]) + " out of range at row " + std::to_string(i));
  }
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (!(images[i] >= 0.0f && images[i] <= 1.0f)) throw FormatError("dataset: pixel out of [0,1] at value " + std::to_string(i));
  }
}

// ---------------------------------------------------------------------------
// Synthetic shapes

namespace {

enum Shape6 { disk, square, triangle, cross, ring, bar };

bool inside(int cls, double u, double v, double r) {
  switch (cls) {
    case disk:
      return u * u + v * v <= r * r;
    case square:
      return std::abs(u) <= 0.75 * r && std::abs(v) <= 0.75 * r;
    case triangle:
      return v <= 0.5 * r && v >= -r + std::sqrt(3.0) * std::abs(u);
    case cross:
      return (std::abs(u) <= 0.28 * r && std::abs(v) <= r) || (std::abs(v) <= 0.28 * r && std::abs(u) <= r);
    case ring: {
      const double d2 = u * u + v * v;
      return d2 <= r * r && d2 >= 0.3 * r * r;
    }
    default:
      return std::abs(u) <= r && std::abs(v) <= 0.3 * r;
  }
}

double luma(const std::array<double, 3>& c) { return 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]; }

}  // namespace

Dataset make_synthetic_shapes(const SyntheticSpec& spec) {
  if (spec.count == 0 || spec.size < 8) throw ContractError("synthetic: need count > 0 and size >= 8");
  Dataset d;
  d.channels = 3;
  d.height = d.width = spec.size;
  d.classes = kSyntheticClasses;
  d.source = "synthetic:seed=" + std::to_string(spec.seed) + ",n=" + std::to_string(spec.count);
  const std::size_t S = spec.size, P = S * S;
  d.images.resize(spec.count * 3 * P);
  d.labels.resize(spec.count);
  const double side = static_cast<double>(S);

  for (std::size_t n = 0; n < spec.count; ++n) {
    Rng rng(mix_seed(spec.seed, n));
    const int cls = static_cast<int>(rng.below(kSyntheticClasses));
    d.labels[n] = static_cast<ClassIndex>(cls);

    std::array<double, 3> bg{}, fg{};
    for (auto& c : bg) c = rng.uniform();
    do {
      for (auto& c : fg) c = rng.uniform();
    } while (std::abs(luma(fg) - luma(bg)) < 0.35);
    // Linear background ramp in a random direction.
    const double ramp_angle = rng.uniform(0.0, 6.283185307179586);
    const double ramp = rng.uniform(0.0, 0.25);
    const double r = rng.uniform(0.28, 0.38) * side;
    const double cx = rng.uniform(0.35, 0.65) * side;
    const double cy = rng.uniform(0.35, 0.65) * side;
    const double rot = rng.uniform(0.0, 6.283185307179586);
    const double cr = std::cos(rot), sr = std::sin(rot);

    float* img = d.images.data() + n * 3 * P;
    for (std::size_t y = 0; y < S; ++y) {
      for (std::size_t x = 0; x < S; ++x) {
        // 2x2 supersampled coverage for soft edges.
        int hits = 0;
        for (int sy = 0; sy < 2; ++sy)
          for (int sx = 0; sx < 2; ++sx) {
            const double px = static_cast<double>(x) + 0.25 + 0.5 * sx - cx;
            const double py = static_cast<double>(y) + 0.25 + 0.5 * sy - cy;
            const double u = cr * px + sr * py;
            const double v = -sr * px + cr * py;
            hits += inside(cls, u, v, r);
          }
        const double cover = hits / 4.0;
        const double t = ((static_cast<double>(x) - side / 2) * std::cos(ramp_angle) +
                          (static_cast<double>(y) - side / 2) * std::sin(ramp_angle)) /
                         side;
        for (std::size_t c = 0; c < 3; ++c) {
          const double back = bg[c] + ramp * t;
          double v = (1.0 - cover) * back + cover * fg[c] + spec.noise * rng.normal();
          img[c * P + y * S + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
      }
    }
  }
  return d;
}

// ---------------------------------------------------------------------------
// IDX

namespace {

std::vector<std::uint8_t> read_maybe_gzip(const std::filesystem::path& path) {
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (!f) throw FormatError("cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> out;
  std::array<std::uint8_t, 1 << 16> buf{};
  int n = 0;
  while ((n = gzread(f, buf.data(), static_cast<unsigned>(buf.size()))) > 0) out.insert(out.end(), buf.begin(), buf.begin() + n);
  const bool failed = n < 0;
  gzclose(f);
  if (failed) throw FormatError("gzip stream error in '" + path.string() + "' after byte " + std::to_string(out.size()));
  return out;
}

std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t off, const std::string& what) {
  if (off + 4 > b.size()) throw FormatError(what + ": truncated header at byte " + std::to_string(off));
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

}  // namespace

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  const auto ib = read_maybe_gzip(images);
  const auto lb = read_maybe_gzip(labels);
  const auto im = be32(ib, 0, images.string());
  if (im != 0x00000803) throw FormatError(images.string() + ": bad IDX image magic at byte 0");
  const auto lm = be32(lb, 0, labels.string());
  if (lm != 0x00000801) throw FormatError(labels.string() + ": bad IDX label magic at byte 0");
  const std::size_t n = be32(ib, 4, images.string()), h = be32(ib, 8, images.string()), w = be32(ib, 12, images.string());
  const std::size_t nl = be32(lb, 4, labels.string());
  if (n != nl) throw FormatError("IDX image count " + std::to_string(n) + " vs label count " + std::to_string(nl) + " (byte 4)");
  if (n == 0 || h == 0 || w == 0) throw FormatError(images.string() + ": empty IDX dimensions at byte 4");
  if (ib.size() < 16 + n * h * w) throw FormatError(images.string() + ": truncated at byte " + std::to_string(ib.size()));
  if (lb.size() < 8 + n) throw FormatError(labels.string() + ": truncated at byte " + std::to_string(lb.size()));

  Dataset d;
  d.channels = 1;
  d.height = h;
  d.width = w;
  d.source = "idx:" + images.string() + "," + labels.string();
  d.images.resize(n * h * w);
  for (std::size_t i = 0; i < d.images.size(); ++i) d.images[i] = static_cast<float>(ib[16 + i]) / 255.0f;
  d.labels.resize(n);
  ClassIndex top = 0;
  for (std::size_t i = 0; i < n; ++i) {
    d.labels[i] = lb[8 + i];
    top = std::max(top, d.labels[i]);
  }
  d.classes = std::max<std::size_t>(top + 1, 2);
  return d;
}

// ---------------------------------------------------------------------------
// CIFAR-10

Dataset load_cifar10(std::span<const std::filesystem::path> batches) {
  constexpr std::size_t kRecord = 1 + 3072;
  Dataset d;
  d.channels = 3;
  d.height = d.width = 32;
  d.classes = 10;
  d.source = "cifar10:";
  for (const auto& path : batches) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open CIFAR batch '" + path.string() + "'");
    std::vector<std::uint8_t> b((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (b.empty() || b.size() % kRecord != 0) {
      throw FormatError(path.string() + ": truncated record at byte " + std::to_string(b.size() - b.size() % kRecord));
    }
    for (std::size_t off = 0; off < b.size(); off += kRecord) {
      if (b[off] >= 10) throw FormatError(path.string() + ": label " + std::to_string(b[off]) + " out of range at byte " + std::to_string(off));
      d.labels.push_back(b[off]);
      for (std::size_t i = 1; i < kRecord; ++i) d.images.push_back(static_cast<float>(b[off + i]) / 255.0f);
    }
    if (d.source.back() != ':') d.source += ",";
    d.source += path.string();
  }
  return d;
}

// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) out.push_back(item);
  return out;
}

}  // namespace

Dataset load_dataset(const std::string& source) {
  const auto colon = source.find(':');
  if (colon == std::string::npos) throw ConfigError("dataset source '" + source + "' lacks a kind prefix");
  const auto kind = source.substr(0, colon);
  const auto rest = split(source.substr(colon + 1), ',');
  if (kind == "synthetic") {
    SyntheticSpec spec;
    for (const auto& kv : rest) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError("synthetic source expects key=value, got '" + kv + "'");
      const auto key = kv.substr(0, eq), val = kv.substr(eq + 1);
      try {
        if (key == "seed") spec.seed = std::stoull(val);
        else if (key == "n") spec.count = std::stoull(val);
        else if (key == "size") spec.size = std::stoull(val);
        else if (key == "noise") spec.noise = std::stod(val);
        else throw ConfigError("unknown synthetic key '" + key + "'");
      } catch (const std::logic_error&) {
        throw ConfigError("bad value for synthetic key '" + key + "'");
      }
    }
    return make_synthetic_shapes(spec);
  }
  if (kind == "idx") {
    if (rest.size() != 2) throw ConfigError("idx source needs <images>,<labels>");
    return load_idx(rest[0], rest[1]);
  }
  if (kind == "cifar10") {
    std::vector<std::filesystem::path> paths(rest.begin(), rest.end());
    if (paths.empty()) throw ConfigError("cifar10 source needs at least one batch file");
    return load_cifar10(paths);
  }
  throw ConfigError("unknown dataset kind '" + kind + "'");
}

}  // namespace gadt
