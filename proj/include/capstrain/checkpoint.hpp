#ifndef CAPSTRAIN_CHECKPOINT_HPP
#define CAPSTRAIN_CHECKPOINT_HPP

#include <cstdint>
#include <filesystem>
#include <iosfwd>

#include "capstrain/capsnet.hpp"

namespace capstrain {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Binary container: "FTCP", u32 version, u32 field count, config fields
/// (u32 each), u32 tensor count, then per tensor u32 name length, name bytes,
/// u32 rank, u32 extents and float32 values. All integers little-endian.
void write_checkpoint(std::ostream& os, CapsNetModel<float>& model);
CapsNetModel<float> read_checkpoint(std::istream& is);

void save_checkpoint(const std::filesystem::path& path, CapsNetModel<float>& model);
CapsNetModel<float> load_checkpoint(const std::filesystem::path& path);

}  // namespace capstrain

#endif  // CAPSTRAIN_CHECKPOINT_HPP
