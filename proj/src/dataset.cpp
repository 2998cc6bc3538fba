#include "capstrain/dataset.hpp"

#include <algorithm>
#include <array>
#include <fmt/format.h>
#include <fstream>
#include <iterator>
#include <numeric>

#include "capstrain/errors.hpp"
#include "capstrain/random.hpp"

namespace capstrain {
namespace {

constexpr int kClasses = 10;
constexpr std::uint64_t kShuffleStream = 0x5348554646ull;
constexpr std::uint64_t kSubsetStream = 0x5355425345ull;

std::uint32_t read_be32(std::span<const std::uint8_t> b, std::size_t at) {
  return std::uint32_t{b[at]} << 24 | std::uint32_t{b[at + 1]} << 16 | std::uint32_t{b[at + 2]} << 8 |
         std::uint32_t{b[at + 3]};
}

void write_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int shift = 24; shift >= 0; shift -= 8) out.push_back(static_cast<std::uint8_t>(v >> shift));
}

std::string file_stem(SplitKind split, bool images) {
  return fmt::format("{}-{}", split == SplitKind::Train ? "train" : "t10k",
                     images ? "images-idx3-ubyte" : "labels-idx1-ubyte");
}

}  // namespace

ByteTensor parse_idx(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4) throw FormatError("IDX data shorter than its magic number");
  const std::uint32_t magic = read_be32(bytes, 0);
  if (magic != kIdxImageMagic && magic != kIdxLabelMagic) {
    throw FormatError(fmt::format("bad IDX magic 0x{:08x}", magic));
  }
  const std::size_t rank = magic & 0xff;
  const std::size_t header = 4 + 4 * rank;
  if (bytes.size() < header) throw FormatError("IDX header truncated");
  ByteTensor t;
  std::uint64_t total = 1;
  for (std::size_t d = 0; d < rank; ++d) {
    const std::uint32_t extent = read_be32(bytes, 4 + 4 * d);
    total *= extent;
    if (total > (std::uint64_t{1} << 40)) throw FormatError("IDX extents overflow");
    t.shape.push_back(static_cast<Index>(extent));
  }
  const std::size_t payload = bytes.size() - header;
  if (payload < total) throw FormatError(fmt::format("IDX payload truncated: {} of {} bytes", payload, total));
  if (payload > total) throw FormatError(fmt::format("IDX payload has {} trailing bytes", payload - total));
  t.data.assign(bytes.begin() + static_cast<std::ptrdiff_t>(header), bytes.end());
  return t;
}

std::vector<std::uint8_t> serialize_idx(const ByteTensor& t) {
  std::uint32_t magic = 0;
  if (t.shape.size() == 3) magic = kIdxImageMagic;
  else if (t.shape.size() == 1) magic = kIdxLabelMagic;
  else throw DimensionError("IDX serialisation supports rank 1 (labels) or rank 3 (images)");
  if (static_cast<std::size_t>(shape_size(t.shape)) != t.data.size()) {
    throw DimensionError("byte tensor data does not match its shape");
  }
  std::vector<std::uint8_t> out;
  out.reserve(4 + 4 * t.shape.size() + t.data.size());
  write_be32(out, magic);
  for (Index e : t.shape) {
    if (e < 0 || e > static_cast<Index>(UINT32_MAX)) throw RangeError("IDX extent out of range");
    write_be32(out, static_cast<std::uint32_t>(e));
  }
  out.insert(out.end(), t.data.begin(), t.data.end());
  return out;
}

ByteTensor read_idx_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingDataError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  try {
    return parse_idx(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

std::string_view to_string(DatasetKind kind) { return kind == DatasetKind::Mnist ? "mnist" : "fashion-mnist"; }

DatasetKind parse_dataset_kind(std::string_view name) {
  if (name == "mnist") return DatasetKind::Mnist;
  if (name == "fashion-mnist") return DatasetKind::FashionMnist;
  throw RangeError(fmt::format("unknown dataset '{}' (expected mnist or fashion-mnist)", name));
}

void validate_split(const DatasetSplit& s) {
  if (s.images.shape.size() != 3) throw FormatError(s.name + ": images must be a 3-D tensor");
  if (s.images.shape[0] != s.size()) {
    throw FormatError(fmt::format("{}: {} images but {} labels", s.name, s.images.shape[0], s.size()));
  }
  for (std::uint8_t y : s.labels) {
    if (y >= kClasses) throw FormatError(fmt::format("{}: label {} outside [0, 10)", s.name, y));
  }
}

DatasetSplit load_split(const std::filesystem::path& dir, DatasetKind kind, SplitKind split) {
  DatasetSplit s;
  s.split = split;
  s.name = fmt::format("{}-{}", to_string(kind), split == SplitKind::Train ? "train" : "test");
  for (bool images : {true, false}) {
    const auto path = dir / file_stem(split, images);
    if (!std::filesystem::exists(path)) throw MissingDataError("missing data file " + path.string());
  }
  s.images = read_idx_file(dir / file_stem(split, true));
  ByteTensor labels = read_idx_file(dir / file_stem(split, false));
  if (labels.shape.size() != 1) throw FormatError(s.name + ": label file must be 1-D");
  s.labels = std::move(labels.data);
  validate_split(s);
  return s;
}

std::vector<Index> gather_labels(const DatasetSplit& split, std::span<const Index> indices) {
  std::vector<Index> out;
  out.reserve(indices.size());
  for (Index i : indices) out.push_back(split.labels.at(static_cast<std::size_t>(i)));
  return out;
}

std::vector<std::vector<Index>> shuffled_batches(Index n, Index batch_size, std::uint64_t seed, int epoch,
                                                 bool shuffle) {
  if (batch_size < 1) throw RangeError("batch size must be at least 1");
  if (n < 0) throw RangeError("sample count must be non-negative");
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  if (shuffle) {
    Rng rng(derive_seed(derive_seed(seed, kShuffleStream), static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order);
  }
  std::vector<std::vector<Index>> batches;
  batches.reserve(static_cast<std::size_t>((n + batch_size - 1) / batch_size));
  for (Index start = 0; start < n; start += batch_size) {
    const Index end = std::min(n, start + batch_size);
    batches.emplace_back(order.begin() + start, order.begin() + end);
  }
  return batches;
}

std::vector<std::vector<Index>> shuffled_batches(const DatasetSplit& split, Index batch_size, std::uint64_t seed,
                                                 int epoch) {
  return shuffled_batches(split.size(), batch_size, seed, epoch, split.split == SplitKind::Train);
}

DatasetSplit subset(const DatasetSplit& split, Index n, std::uint64_t seed) {
  if (n < 0 || n > split.size()) {
    throw RangeError(fmt::format("subset of {} requested from {} samples", n, split.size()));
  }
  std::array<std::vector<Index>, kClasses> members;
  for (Index i = 0; i < split.size(); ++i) members[split.labels[static_cast<std::size_t>(i)]].push_back(i);

  // Water-filling: equal shares, capped by availability, until n is placed.
  std::array<Index, kClasses> quota{};
  Index remaining = n;
  while (remaining > 0) {
    std::vector<int> open;
    for (int c = 0; c < kClasses; ++c) {
      if (quota[c] < static_cast<Index>(members[c].size())) open.push_back(c);
    }
    const Index share = remaining / static_cast<Index>(open.size());
    if (share == 0) {
      Rng rng(derive_seed(derive_seed(seed, kSubsetStream), 0));
      rng.shuffle(open);
      for (Index k = 0; k < remaining; ++k) ++quota[open[static_cast<std::size_t>(k)]];
      break;
    }
    for (int c : open) {
      const Index take = std::min(share, static_cast<Index>(members[c].size()) - quota[c]);
      quota[c] += take;
      remaining -= take;
    }
  }

  std::vector<Index> chosen;
  chosen.reserve(static_cast<std::size_t>(n));
  for (int c = 0; c < kClasses; ++c) {
    Rng rng(derive_seed(derive_seed(seed, kSubsetStream), static_cast<std::uint64_t>(c + 1)));
    rng.shuffle(members[c]);
    chosen.insert(chosen.end(), members[c].begin(), members[c].begin() + quota[c]);
  }
  std::sort(chosen.begin(), chosen.end());

  DatasetSplit out;
  out.name = split.name;
  out.split = split.split;
  const Index pixels = split.rows() * split.cols();
  out.images.shape = {n, split.rows(), split.cols()};
  out.images.data.reserve(static_cast<std::size_t>(n * pixels));
  for (Index i : chosen) {
    const auto first = split.images.data.begin() + i * pixels;
    out.images.data.insert(out.images.data.end(), first, first + pixels);
    out.labels.push_back(split.labels[static_cast<std::size_t>(i)]);
  }
  return out;
}

}  // namespace capstrain
