#include "capstrain/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fmt/format.h>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <vector>

#include "capstrain/errors.hpp"

namespace capstrain {
namespace {

constexpr std::array<char, 4> kMagic{'F', 'T', 'C', 'P'};
constexpr std::uint32_t kFlagWeightSharing = 1u << 0;
constexpr std::uint32_t kFlagReducedDecoder = 1u << 1;

void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw FormatError("checkpoint truncated");
  return std::uint32_t{b[0]} | std::uint32_t{b[1]} << 8 | std::uint32_t{b[2]} << 16 | std::uint32_t{b[3]} << 24;
}

std::uint32_t narrow(Index v) {
  if (v < 0 || v > static_cast<Index>(UINT32_MAX)) throw RangeError("value does not fit a checkpoint field");
  return static_cast<std::uint32_t>(v);
}

std::vector<std::uint32_t> config_fields(const CapsNetConfig& c) {
  return {narrow(c.input_side),
          narrow(c.conv_filters),
          narrow(c.kernel),
          narrow(c.primary_caps_types),
          narrow(c.primary_caps_dim),
          narrow(c.primary_stride),
          narrow(c.digit_caps),
          narrow(c.digit_caps_dim),
          narrow(c.routing_iterations),
          narrow(c.decoder_hidden1),
          narrow(c.decoder_hidden2),
          narrow(c.decoder_out),
          (c.weight_sharing ? kFlagWeightSharing : 0u) | (c.reduced_decoder ? kFlagReducedDecoder : 0u),
          static_cast<std::uint32_t>(c.scale_preset)};
}

CapsNetConfig config_from_fields(const std::vector<std::uint32_t>& f) {
  if (f.size() != 14) throw FormatError(fmt::format("checkpoint config has {} fields, expected 14", f.size()));
  CapsNetConfig c;
  c.input_side = f[0];
  c.conv_filters = f[1];
  c.kernel = f[2];
  c.primary_caps_types = f[3];
  c.primary_caps_dim = f[4];
  c.primary_stride = f[5];
  c.digit_caps = f[6];
  c.digit_caps_dim = f[7];
  c.routing_iterations = static_cast<int>(f[8]);
  c.decoder_hidden1 = f[9];
  c.decoder_hidden2 = f[10];
  c.decoder_out = f[11];
  if (f[12] & ~(kFlagWeightSharing | kFlagReducedDecoder)) throw FormatError("unknown checkpoint flags");
  c.weight_sharing = (f[12] & kFlagWeightSharing) != 0;
  c.reduced_decoder = (f[12] & kFlagReducedDecoder) != 0;
  if (f[13] > static_cast<std::uint32_t>(ScalePreset::Custom)) throw FormatError("unknown scale preset");
  c.scale_preset = static_cast<ScalePreset>(f[13]);
  try {
    c.validate();
  } catch (const std::exception& e) {
    throw FormatError(std::string("checkpoint config invalid: ") + e.what());
  }
  return c;
}

}  // namespace

void write_checkpoint(std::ostream& os, CapsNetModel<float>& model) {
  static_assert(sizeof(float) == 4 && std::numeric_limits<float>::is_iec559);
  os.write(kMagic.data(), kMagic.size());
  put_u32(os, kCheckpointVersion);
  const auto fields = config_fields(model.config());
  put_u32(os, narrow(static_cast<Index>(fields.size())));
  for (std::uint32_t v : fields) put_u32(os, v);
  const auto params = model.parameters();
  put_u32(os, narrow(static_cast<Index>(params.size())));
  for (const auto& p : params) {
    put_u32(os, narrow(static_cast<Index>(p.name.size())));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    put_u32(os, narrow(p.tensor->rank()));
    for (Index e : p.tensor->shape()) put_u32(os, narrow(e));
    for (Index i = 0; i < p.tensor->size(); ++i) put_u32(os, std::bit_cast<std::uint32_t>((*p.tensor)[i]));
  }
  if (!os) throw FormatError("failed writing checkpoint");
}

CapsNetModel<float> read_checkpoint(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kMagic) throw FormatError("not a checkpoint (bad magic)");
  const std::uint32_t version = get_u32(is);
  if (version != kCheckpointVersion) throw FormatError(fmt::format("unsupported checkpoint version {}", version));
  std::vector<std::uint32_t> fields(get_u32(is));
  if (fields.size() > 64) throw FormatError("checkpoint config record too long");
  for (auto& f : fields) f = get_u32(is);
  CapsNetModel<float> model(config_from_fields(fields));

  auto params = model.parameters();
  const std::uint32_t count = get_u32(is);
  if (count != params.size()) throw FormatError(fmt::format("checkpoint holds {} tensors, expected {}", count, params.size()));
  for (auto& p : params) {
    const std::uint32_t len = get_u32(is);
    if (len > 256) throw FormatError("tensor name too long");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw FormatError("checkpoint truncated");
    if (name != p.name) throw FormatError(fmt::format("expected tensor '{}', found '{}'", p.name, name));
    const std::uint32_t rank = get_u32(is);
    Shape shape(rank);
    for (auto& e : shape) e = get_u32(is);
    if (shape != p.tensor->shape()) {
      throw FormatError(fmt::format("tensor '{}' has shape {}, config implies {}", name, to_string(shape),
                                    to_string(p.tensor->shape())));
    }
    for (Index i = 0; i < p.tensor->size(); ++i) (*p.tensor)[i] = std::bit_cast<float>(get_u32(is));
  }
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes after checkpoint");
  return model;
}

void save_checkpoint(const std::filesystem::path& path, CapsNetModel<float>& model) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  write_checkpoint(os, model);
}

CapsNetModel<float> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  return read_checkpoint(is);
}

}  // namespace capstrain
