#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "gadt/ops.hpp"
#include "gadt/tensor.hpp"

namespace gadt {

/// Images stored as float [N,C,H,W] in [0,1] with one class label each.
struct Dataset {
  std::vector<float> images;
  std::vector<ClassIndex> labels;
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t classes = 0;
  std::string split = "train";
  std::string source;

  std::size_t size() const { return labels.size(); }
  std::size_t image_size() const { return channels * height * width; }
  Shape image_shape() const { return {channels, height, width}; }

  std::span<const float> image(std::size_t i) const { return {images.data() + i * image_size(), image_size()}; }

  /// Rows `indices` as an [n,C,H,W] tensor.
  template <typename T>
  Tensor<T> batch(std::span<const std::size_t> indices) const;
  template <typename T>
  Tensor<T> single(std::size_t i) const {
    const std::size_t idx[1] = {i};
    return batch<T>(idx);
  }
  std::vector<ClassIndex> labels_at(std::span<const std::size_t> indices) const;

  Dataset subset(std::span<const std::size_t> indices) const;
  /// First n rows.
  Dataset head(std::size_t n) const;

  /// Throws FormatError if a label or pixel is out of range.
  void validate() const;
};

struct SyntheticSpec {
  std::uint64_t seed = 0;
  std::size_t count = 1000;
  std::size_t size = 32;
  /// Pixel noise standard deviation added after drawing.
  double noise = 0.06;
};

/// Number of classes emitted by the synthetic shapes generator.
inline constexpr std::size_t kSyntheticClasses = 6;

/// 3-channel colored geometric shapes on textured backgrounds; the class is
/// the shape type (disk, square, triangle, cross, ring, bar). Fully determined
/// by the seed.
Dataset make_synthetic_shapes(const SyntheticSpec& spec);

/// IDX image + label files (optionally gzip-compressed), magic 0x00000803 and
/// 0x00000801. Produces 1-channel images.
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);

/// CIFAR-10 binary batches: records of 1 label byte + 3072 pixel bytes.
Dataset load_cifar10(std::span<const std::filesystem::path> batches);

/// Parses the textual source descriptors accepted by the CLI and configs:
///   synthetic:seed=7,n=100
///   idx:<images-file>,<labels-file>
///   cifar10:<batch>[,<batch>...]
Dataset load_dataset(const std::string& source);

}  // namespace gadt
