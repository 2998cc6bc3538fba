#ifndef CAPSTRAIN_DATASET_HPP
#define CAPSTRAIN_DATASET_HPP

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "capstrain/tensor.hpp"

namespace capstrain {

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

/// Unsigned-byte tensor as stored in an IDX file.
struct ByteTensor {
  Shape shape;
  std::vector<std::uint8_t> data;
  friend bool operator==(const ByteTensor&, const ByteTensor&) = default;
};

/// Parses a big-endian IDX container (0x0803 images or 0x0801 labels).
ByteTensor parse_idx(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> serialize_idx(const ByteTensor& tensor);
ByteTensor read_idx_file(const std::filesystem::path& path);

enum class DatasetKind { Mnist, FashionMnist };
enum class SplitKind { Train, Test };

std::string_view to_string(DatasetKind kind);
DatasetKind parse_dataset_kind(std::string_view name);

struct DatasetSplit {
  ByteTensor images;                 // [N, rows, cols]
  std::vector<std::uint8_t> labels;  // [N], each < 10
  std::string name;                  // e.g. "mnist-train"
  SplitKind split = SplitKind::Train;

  Index size() const { return static_cast<Index>(labels.size()); }
  Index rows() const { return images.shape.at(1); }
  Index cols() const { return images.shape.at(2); }
};

/// Checks that images and labels agree and every label is a digit class.
void validate_split(const DatasetSplit& split);

/// Reads {train,t10k}-{images-idx3,labels-idx1}-ubyte from dir. Throws
/// MissingDataError when a file is absent and FormatError when it is malformed.
DatasetSplit load_split(const std::filesystem::path& dir, DatasetKind kind, SplitKind split);

/// Pixels divided by 255 as [N, 1, rows, cols].
template <typename Scalar>
Tensor<Scalar> normalize(const DatasetSplit& split) {
  Tensor<Scalar> out(Shape{split.size(), 1, split.rows(), split.cols()});
  for (Index i = 0; i < out.size(); ++i) out[i] = static_cast<Scalar>(split.images.data[i]) / Scalar(255);
  return out;
}

/// Normalized images and labels of the given samples, in the given order.
template <typename Scalar>
Tensor<Scalar> gather_images(const DatasetSplit& split, std::span<const Index> indices) {
  const Index pixels = split.rows() * split.cols();
  Tensor<Scalar> out(Shape{static_cast<Index>(indices.size()), 1, split.rows(), split.cols()});
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const std::uint8_t* src = split.images.data.data() + indices[k] * pixels;
    Scalar* dst = out.ptr() + static_cast<Index>(k) * pixels;
    for (Index p = 0; p < pixels; ++p) dst[p] = static_cast<Scalar>(src[p]) / Scalar(255);
  }
  return out;
}
std::vector<Index> gather_labels(const DatasetSplit& split, std::span<const Index> indices);

/// Sample indices per batch for one epoch. The permutation is a pure function
/// of (seed, epoch); without shuffling the natural order is kept. The last
/// batch may be smaller.
std::vector<std::vector<Index>> shuffled_batches(Index n, Index batch_size, std::uint64_t seed, int epoch,
                                                 bool shuffle = true);
/// Train splits are shuffled, test splits never are.
std::vector<std::vector<Index>> shuffled_batches(const DatasetSplit& split, Index batch_size, std::uint64_t seed,
                                                 int epoch);

/// Class-balanced sample of n items: each class gets floor(n/10) or one more,
/// capped by availability. Deterministic in seed; original order preserved.
DatasetSplit subset(const DatasetSplit& split, Index n, std::uint64_t seed);

}  // namespace capstrain

#endif  // CAPSTRAIN_DATASET_HPP
