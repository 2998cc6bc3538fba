#ifndef CAPSTRAIN_CAPSNET_HPP
#define CAPSTRAIN_CAPSNET_HPP

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "capstrain/errors.hpp"
#include "capstrain/ops.hpp"
#include "capstrain/random.hpp"
#include "capstrain/tape.hpp"
#include "capstrain/tensor.hpp"

namespace capstrain {

enum class ScalePreset { Paper, Desk, Custom };

/// Architecture hyperparameters. Derived extents (conv output side, capsule
/// grid) are computed rather than stored so they cannot disagree.
struct CapsNetConfig {
  Index input_side = 28;
  Index conv_filters = 256;
  Index kernel = 9;
  Index primary_caps_types = 32;
  Index primary_caps_dim = 8;
  Index primary_stride = 2;
  Index digit_caps = 10;
  Index digit_caps_dim = 16;
  int routing_iterations = 3;
  bool weight_sharing = false;
  bool reduced_decoder = false;
  Index decoder_hidden1 = 512;
  Index decoder_hidden2 = 1024;
  Index decoder_out = 784;
  ScalePreset scale_preset = ScalePreset::Paper;

  static CapsNetConfig paper() { return {}; }
  /// 64 conv filters and 8 primary capsule types; every capsule extent unchanged.
  static CapsNetConfig desk();

  Index conv_side() const { return input_side - kernel + 1; }
  Index primary_grid_side() const { return (conv_side() - kernel) / primary_stride + 1; }
  Index primary_positions() const { return primary_grid_side() * primary_grid_side(); }
  /// Capsules feeding DigitCaps: grid positions times capsule types (1152 at paper scale).
  Index input_capsules() const { return primary_positions() * primary_caps_types; }
  Index primary_channels() const { return primary_caps_types * primary_caps_dim; }
  Index decoder_in() const { return reduced_decoder ? digit_caps_dim : digit_caps * digit_caps_dim; }

  /// Throws DimensionError/RangeError on inconsistent extents.
  void validate() const;

  friend bool operator==(const CapsNetConfig&, const CapsNetConfig&) = default;
};

std::string to_string(ScalePreset preset);

/// Loss constants of the margin and reconstruction terms.
struct LossConfig {
  double m_plus = 0.9;
  double m_minus = 0.1;
  double lambda = 0.5;
  double reconstruction_weight = 0.0005;
};

struct ParameterBreakdown {
  std::int64_t conv = 0;
  std::int64_t primary = 0;
  std::int64_t digit_weights = 0;
  std::int64_t digit_bias = 0;
  std::int64_t decoder = 0;
  std::int64_t total() const { return conv + primary + digit_weights + digit_bias + decoder; }
};

/// Closed-form count of every weight and bias.
ParameterBreakdown parameter_breakdown(const CapsNetConfig& config);
inline std::int64_t count_parameters(const CapsNetConfig& config) { return parameter_breakdown(config).total(); }

/// DigitCaps transforms: [types, positions, J, D, d] for the full variant,
/// [types, 1, J, D, d] broadcast over positions when weights are shared.
template <typename Scalar>
struct DigitCapsWeights {
  Tensor<Scalar> weight;
  Tensor<Scalar> bias;  // [1, J, D, 1]
};

template <typename Scalar>
struct NamedTensor {
  std::string name;
  Tensor<Scalar>* tensor;
};

template <typename Scalar>
class CapsNetModel {
 public:
  explicit CapsNetModel(CapsNetConfig config) : config_(config) {
    config_.validate();
    const Index F = config_.conv_filters, k = config_.kernel, C = config_.primary_channels();
    conv_weight = Tensor<Scalar>(Shape{F, 1, k, k});
    conv_bias = Tensor<Scalar>(Shape{F});
    primary_weight = Tensor<Scalar>(Shape{C, F, k, k});
    primary_bias = Tensor<Scalar>(Shape{C});
    digit.weight = Tensor<Scalar>(Shape{config_.primary_caps_types,
                                        config_.weight_sharing ? 1 : config_.primary_positions(), config_.digit_caps,
                                        config_.digit_caps_dim, config_.primary_caps_dim});
    digit.bias = Tensor<Scalar>(Shape{1, config_.digit_caps, config_.digit_caps_dim, 1});
    fc1_weight = Tensor<Scalar>(Shape{config_.decoder_in(), config_.decoder_hidden1});
    fc1_bias = Tensor<Scalar>(Shape{config_.decoder_hidden1});
    fc2_weight = Tensor<Scalar>(Shape{config_.decoder_hidden1, config_.decoder_hidden2});
    fc2_bias = Tensor<Scalar>(Shape{config_.decoder_hidden2});
    fc3_weight = Tensor<Scalar>(Shape{config_.decoder_hidden2, config_.decoder_out});
    fc3_bias = Tensor<Scalar>(Shape{config_.decoder_out});
  }

  /// Seeded initialisation: N(0, 0.1) for DigitCaps transforms, zero routing
  /// bias, U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for conv and decoder tensors.
  static CapsNetModel initialized(CapsNetConfig config, std::uint64_t seed) {
    CapsNetModel model(config);
    model.initialize(seed);
    return model;
  }

  void initialize(std::uint64_t seed) {
    const Index k2 = config_.kernel * config_.kernel;
    auto uniform = [&](Tensor<Scalar>& t, std::uint64_t stream, Index fan_in) {
      Rng rng(derive_seed(seed, stream));
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(rng.uniform(-bound, bound));
    };
    uniform(conv_weight, 1, k2);
    uniform(conv_bias, 2, k2);
    uniform(primary_weight, 3, config_.conv_filters * k2);
    uniform(primary_bias, 4, config_.conv_filters * k2);
    {
      Rng rng(derive_seed(seed, 5));
      for (Index i = 0; i < digit.weight.size(); ++i) digit.weight[i] = static_cast<Scalar>(rng.normal(0.0, 0.1));
    }
    digit.bias.data().setZero();
    uniform(fc1_weight, 6, config_.decoder_in());
    uniform(fc1_bias, 7, config_.decoder_in());
    uniform(fc2_weight, 8, config_.decoder_hidden1);
    uniform(fc2_bias, 9, config_.decoder_hidden1);
    uniform(fc3_weight, 10, config_.decoder_hidden2);
    uniform(fc3_bias, 11, config_.decoder_hidden2);
  }

  const CapsNetConfig& config() const { return config_; }

  /// Every trainable tensor with a stable name, in a fixed order.
  std::vector<NamedTensor<Scalar>> parameters() {
    return {{"conv1.weight", &conv_weight},       {"conv1.bias", &conv_bias},
            {"primary.weight", &primary_weight},  {"primary.bias", &primary_bias},
            {"digit.weight", &digit.weight},      {"digit.bias", &digit.bias},
            {"decoder.fc1.weight", &fc1_weight},  {"decoder.fc1.bias", &fc1_bias},
            {"decoder.fc2.weight", &fc2_weight},  {"decoder.fc2.bias", &fc2_bias},
            {"decoder.fc3.weight", &fc3_weight},  {"decoder.fc3.bias", &fc3_bias}};
  }

  std::int64_t parameter_count() const {
    std::int64_t total = 0;
    for (const auto& p : const_cast<CapsNetModel*>(this)->parameters()) total += p.tensor->size();
    return total;
  }

  bool all_finite() const {
    for (const auto& p : const_cast<CapsNetModel*>(this)->parameters()) {
      if (!p.tensor->data().allFinite()) return false;
    }
    return true;
  }

  template <typename Other>
  CapsNetModel<Other> cast() const {
    CapsNetModel<Other> out(config_);
    auto src = const_cast<CapsNetModel*>(this)->parameters();
    auto dst = out.parameters();
    for (std::size_t i = 0; i < src.size(); ++i) *dst[i].tensor = src[i].tensor->template cast<Other>();
    return out;
  }

  Tensor<Scalar> conv_weight, conv_bias;
  Tensor<Scalar> primary_weight, primary_bias;
  DigitCapsWeights<Scalar> digit;
  Tensor<Scalar> fc1_weight, fc1_bias, fc2_weight, fc2_bias, fc3_weight, fc3_bias;

 private:
  CapsNetConfig config_;
};

/// Model tensors registered on a tape, either trainable or read-only.
template <typename Scalar>
struct BoundModel {
  CapsNetConfig config;
  Var<Scalar> conv_weight, conv_bias, primary_weight, primary_bias, digit_weight, digit_bias;
  Var<Scalar> fc1_weight, fc1_bias, fc2_weight, fc2_bias, fc3_weight, fc3_bias;
};

template <typename Scalar>
BoundModel<Scalar> bind(Tape<Scalar>& tape, CapsNetModel<Scalar>& model, bool trainable) {
  auto reg = [&](Tensor<Scalar>& t) { return trainable ? tape.parameter(t) : tape.constant_ref(t); };
  return {model.config(),          reg(model.conv_weight),  reg(model.conv_bias),  reg(model.primary_weight),
          reg(model.primary_bias), reg(model.digit.weight), reg(model.digit.bias), reg(model.fc1_weight),
          reg(model.fc1_bias),     reg(model.fc2_weight),   reg(model.fc2_bias),   reg(model.fc3_weight),
          reg(model.fc3_bias)};
}

template <typename Scalar>
struct RoutingResult {
  Var<Scalar> v;         // [N, J, D]
  Var<Scalar> coupling;  // [N, J, I], coefficients of the final iteration
};

/// Routing by agreement.
///
/// u_hat is [N, ..., J, D] with every axis between the batch and J flattened
/// into I input capsules. Logits start at zero; each iteration takes
/// c = softmax over the J output capsules, s_j = sum_i c_ij u_hat_j|i + bias_j,
/// v_j = squash(s_j), and all but the last add <u_hat_j|i, v_j> to the logits.
/// The loop is fully recorded, so gradients flow through every iteration.
template <typename Scalar>
RoutingResult<Scalar> dynamic_routing(const Var<Scalar>& u_hat, const Var<Scalar>& bias, int iterations) {
  if (iterations < 1) throw RangeError("routing needs at least one iteration");
  Tape<Scalar>& tape = u_hat.tape();
  const Shape& s = u_hat.shape();
  if (s.size() < 3) throw DimensionError("u_hat must be [N, ..., J, D], got " + to_string(s));
  const Index N = s.front(), J = s[s.size() - 2], D = s.back();
  const Index I = J * D == 0 || N == 0 ? 0 : shape_size(s) / (N * J * D);
  if (shape_size(bias.shape()) != J * D) {
    throw DimensionError("routing bias " + to_string(bias.shape()) + " does not match " + std::to_string(J) + "x" +
                         std::to_string(D) + " output capsules");
  }

  const auto predictions = permute(reshape(u_hat, {N, I, J, D}), {0, 2, 1, 3});  // [N, J, I, D]
  const auto b_out = reshape(bias, {1, J, D});
  auto logits = tape.constant(Tensor<Scalar>(Shape{N, J, I}));
  RoutingResult<Scalar> out;
  for (int it = 0; it < iterations; ++it) {
    out.coupling = softmax(logits, 1);
    const auto weighted = reshape(matmul(reshape(out.coupling, {N, J, 1, I}), predictions), {N, J, D});
    out.v = squash(add(weighted, b_out));
    if (it + 1 < iterations) {
      const auto agreement = matmul(predictions, reshape(out.v, {N, J, D, 1}));  // [N, J, I, 1]
      logits = add(logits, reshape(agreement, {N, J, I}));
    }
  }
  return out;
}

/// PrimaryCaps output: 8-dim capsules [N, types, positions, dim], squashed.
template <typename Scalar>
Var<Scalar> primary_capsules(const BoundModel<Scalar>& m, const Var<Scalar>& images) {
  const CapsNetConfig& c = m.config;
  const Shape& in = images.shape();
  if (in.size() != 4 || in[1] != 1 || in[2] != c.input_side || in[3] != c.input_side) {
    throw DimensionError("images must be [N,1," + std::to_string(c.input_side) + "," + std::to_string(c.input_side) +
                         "], got " + to_string(in));
  }
  const Index N = in[0];
  const auto features = relu(conv2d(images, m.conv_weight, m.conv_bias, 1));
  const auto maps = conv2d(features, m.primary_weight, m.primary_bias, c.primary_stride);
  // channel = type * dim + component
  const auto grouped = reshape(maps, {N, c.primary_caps_types, c.primary_caps_dim, c.primary_positions()});
  return squash(permute(grouped, {0, 1, 3, 2}));
}

/// Prediction vectors u_hat [N, types, positions, J, D] from primary capsules.
template <typename Scalar>
Var<Scalar> digit_predictions(const BoundModel<Scalar>& m, const Var<Scalar>& primary) {
  const CapsNetConfig& c = m.config;
  const Index N = primary.dim(0), T = c.primary_caps_types, P = c.primary_positions(), d = c.primary_caps_dim;
  const Index J = c.digit_caps, D = c.digit_caps_dim;
  const Index wp = m.digit_weight.dim(1);
  const auto w = reshape(m.digit_weight, {1, T, wp, J, D, d});
  const auto u = reshape(primary, {N, T, P, 1, d, 1});
  return reshape(matmul(w, u), {N, T, P, J, D});
}

/// Images [N,1,S,S] -> DigitCaps output v [N, J, D].
template <typename Scalar>
Var<Scalar> forward_encoder(const BoundModel<Scalar>& m, const Var<Scalar>& images) {
  const auto u_hat = digit_predictions(m, primary_capsules(m, images));
  return dynamic_routing(u_hat, m.digit_bias, m.config.routing_iterations).v;
}

/// Class decision: index of the longest capsule, lowest index on ties.
template <typename Scalar>
std::vector<Index> predict(const Tensor<Scalar>& v) {
  if (v.rank() != 3) throw DimensionError("predict expects [N, J, D], got " + to_string(v.shape()));
  const Index N = v.dim(0), J = v.dim(1), D = v.dim(2);
  std::vector<Index> out(static_cast<std::size_t>(N));
  for (Index n = 0; n < N; ++n) {
    Index best = 0;
    Scalar best_sq(-1);
    for (Index j = 0; j < J; ++j) {
      const Scalar sq = v.data().segment((n * J + j) * D, D).squaredNorm();
      if (sq > best_sq) {
        best_sq = sq;
        best = j;
      }
    }
    out[static_cast<std::size_t>(n)] = best;
  }
  return out;
}

/// sum_k T_k max(0, m+ - |v_k|)^2 + lambda (1 - T_k) max(0, |v_k| - m-)^2, averaged over the batch.
template <typename Scalar>
Var<Scalar> margin_loss(const Var<Scalar>& v, std::span<const Index> labels, const LossConfig& cfg = {}) {
  Tape<Scalar>& tape = v.tape();
  const Shape& s = v.shape();
  if (s.size() != 3) throw DimensionError("margin_loss expects [N, J, D], got " + to_string(s));
  const Index N = s[0], J = s[1];
  if (static_cast<Index>(labels.size()) != N) throw DimensionError("margin_loss: one label per sample required");
  Tensor<Scalar> present(Shape{N, J}), absent = Tensor<Scalar>::constant({N, J}, static_cast<Scalar>(cfg.lambda));
  for (Index n = 0; n < N; ++n) {
    const Index y = labels[static_cast<std::size_t>(n)];
    if (y < 0 || y >= J) throw RangeError("label " + std::to_string(y) + " outside [0, " + std::to_string(J) + ")");
    present.at(n, y) = Scalar(1);
    absent.at(n, y) = Scalar(0);
  }
  const auto lengths = norm(v);  // [N, J]
  const auto upper = square(relu(affine(lengths, Scalar(-1), static_cast<Scalar>(cfg.m_plus))));
  const auto lower = square(relu(affine(lengths, Scalar(1), static_cast<Scalar>(-cfg.m_minus))));
  const auto per_class = add(mul(upper, tape.constant(std::move(present))), mul(lower, tape.constant(std::move(absent))));
  return affine(sum(per_class), Scalar(1) / static_cast<Scalar>(N), Scalar(0));
}

enum class MaskMode { Train, Eval };

/// Capsule kept for reconstruction: the label in Train mode, the longest capsule in Eval mode
/// or whenever mask_by_max_always is set.
template <typename Scalar>
std::vector<Index> reconstruction_targets(const Tensor<Scalar>& v, std::span<const Index> labels, MaskMode mode,
                                          bool mask_by_max_always) {
  if (mode == MaskMode::Eval || mask_by_max_always) return predict(v);
  if (static_cast<Index>(labels.size()) != v.dim(0)) throw DimensionError("train-mode masking needs one label per sample");
  return {labels.begin(), labels.end()};
}

/// Decoder input: the full decoder sees all J*D values with every capsule but
/// the selected one zeroed; the reduced decoder sees only the selected D values.
template <typename Scalar>
Var<Scalar> decoder_input(const BoundModel<Scalar>& m, const Var<Scalar>& v, std::span<const Index> selected) {
  Tape<Scalar>& tape = v.tape();
  const Index N = v.dim(0), J = v.dim(1), D = v.dim(2);
  if (m.config.reduced_decoder) return select(v, selected);
  Tensor<Scalar> mask(Shape{N, J, 1});
  for (Index n = 0; n < N; ++n) mask.at(n, selected[static_cast<std::size_t>(n)], 0) = Scalar(1);
  return reshape(mul(v, tape.constant(std::move(mask))), {N, J * D});
}

template <typename Scalar>
Var<Scalar> dense(const Var<Scalar>& x, const Var<Scalar>& w, const Var<Scalar>& b) {
  return add(matmul(x, w), reshape(b, {1, b.dim(0)}));
}

/// Three affine layers, ReLU on the hidden layers and a sigmoid on the output: [N, in] -> [N, 784].
template <typename Scalar>
Var<Scalar> decode(const BoundModel<Scalar>& m, const Var<Scalar>& x) {
  const auto h1 = relu(dense(x, m.fc1_weight, m.fc1_bias));
  const auto h2 = relu(dense(h1, m.fc2_weight, m.fc2_bias));
  return sigmoid(dense(h2, m.fc3_weight, m.fc3_bias));
}

template <typename Scalar>
Var<Scalar> mask_and_decode(const BoundModel<Scalar>& m, const Var<Scalar>& v, std::span<const Index> labels,
                            MaskMode mode, bool mask_by_max_always = false) {
  const auto selected = reconstruction_targets(v.value(), labels, mode, mask_by_max_always);
  return decode(m, decoder_input(m, v, selected));
}

/// margin + weight * sum((reconstruction - image)^2), the squared error taken
/// per sample and averaged over the batch like the margin term.
template <typename Scalar>
Var<Scalar> total_loss(const Var<Scalar>& margin, const Var<Scalar>& reconstruction, const Var<Scalar>& images,
                       const LossConfig& cfg = {}) {
  const Index N = reconstruction.dim(0);
  const auto target = images.shape() == reconstruction.shape() ? images : reshape(images, {N, shape_size(images.shape()) / N});
  const Scalar weight = static_cast<Scalar>(cfg.reconstruction_weight) / static_cast<Scalar>(N);
  const auto rec = affine(sse(reconstruction, target), weight, Scalar(0));
  return add(margin, rec);
}

template <typename Scalar>
struct ForwardPass {
  Var<Scalar> v;
  Var<Scalar> reconstruction;
  Var<Scalar> margin;
  Var<Scalar> loss;
};

/// Encoder, margin loss, masked decoder and combined loss in one recording.
template <typename Scalar>
ForwardPass<Scalar> forward_loss(const BoundModel<Scalar>& m, const Var<Scalar>& images, std::span<const Index> labels,
                                 const LossConfig& loss_cfg = {}, bool mask_by_max_always = false) {
  ForwardPass<Scalar> out;
  out.v = forward_encoder(m, images);
  out.margin = margin_loss(out.v, labels, loss_cfg);
  out.reconstruction = mask_and_decode(m, out.v, labels, MaskMode::Train, mask_by_max_always);
  out.loss = total_loss(out.margin, out.reconstruction, images, loss_cfg);
  return out;
}

}  // namespace capstrain

#endif  // CAPSTRAIN_CAPSNET_HPP
