#include "capstrain/capsnet.hpp"

#include <fmt/format.h>

namespace capstrain {

CapsNetConfig CapsNetConfig::desk() {
  CapsNetConfig c;
  c.conv_filters = 64;
  c.primary_caps_types = 8;
  c.scale_preset = ScalePreset::Desk;
  return c;
}

void CapsNetConfig::validate() const {
  const Index positive[] = {input_side,       conv_filters, kernel,          primary_caps_types,
                            primary_caps_dim, primary_stride, digit_caps,     digit_caps_dim,
                            decoder_hidden1,  decoder_hidden2, decoder_out};
  for (Index v : positive) {
    if (v < 1) throw RangeError("every CapsNet extent must be positive");
  }
  if (routing_iterations < 1) throw RangeError("routing needs at least one iteration");
  if (kernel > input_side) {
    throw DimensionError(fmt::format("kernel {} larger than the {}-pixel input", kernel, input_side));
  }
  if (kernel > conv_side()) {
    throw DimensionError(fmt::format("PrimaryCaps kernel {} larger than the {}-pixel feature map", kernel, conv_side()));
  }
}

std::string to_string(ScalePreset preset) {
  switch (preset) {
    case ScalePreset::Paper: return "paper";
    case ScalePreset::Desk: return "desk";
    case ScalePreset::Custom: return "custom";
  }
  return "custom";
}

ParameterBreakdown parameter_breakdown(const CapsNetConfig& c) {
  c.validate();
  const std::int64_t k2 = c.kernel * c.kernel;
  const std::int64_t channels = c.primary_channels();
  const std::int64_t positions = c.weight_sharing ? 1 : c.primary_positions();
  ParameterBreakdown b;
  b.conv = c.conv_filters * k2 + c.conv_filters;
  b.primary = channels * c.conv_filters * k2 + channels;
  b.digit_weights = c.primary_caps_types * positions * c.digit_caps * c.digit_caps_dim * c.primary_caps_dim;
  b.digit_bias = c.digit_caps * c.digit_caps_dim;
  const std::int64_t h1 = c.decoder_hidden1, h2 = c.decoder_hidden2, out = c.decoder_out;
  b.decoder = c.decoder_in() * h1 + h1 + h1 * h2 + h2 + h2 * out + out;
  return b;
}

}  // namespace capstrain
