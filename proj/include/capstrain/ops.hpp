#ifndef CAPSTRAIN_OPS_HPP
#define CAPSTRAIN_OPS_HPP

// Differentiable tensor operations recorded on a Tape.
//
// Every function takes and returns Var handles; the backward rule of each op
// reads its inputs back from the tape, so nothing is copied unless the rule
// needs an intermediate (im2col columns, softmax output). Reductions always
// run in row-major sequential order, so results are bitwise reproducible for
// a given build.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "capstrain/errors.hpp"
#include "capstrain/tape.hpp"
#include "capstrain/tensor.hpp"

namespace capstrain {

/// Stabiliser inside the squash norm: |s| := sqrt(sum s^2 + eps).
inline constexpr double kSquashEpsilon = 1e-8;

namespace detail {

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using MatrixMap = Eigen::Map<RowMatrix<Scalar>>;
template <typename Scalar>
using ConstMatrixMap = Eigen::Map<const RowMatrix<Scalar>>;

template <typename Scalar>
Tape<Scalar>& same_tape(const Var<Scalar>& a, const Var<Scalar>& b) {
  Tape<Scalar>& t = a.tape();
  t.check(a);
  t.check(b);
  return t;
}

/// Numpy-style broadcast of two shapes (left-padded to equal rank), with
/// per-operand strides that are zero along broadcast axes.
struct Broadcast {
  Shape out;
  Shape stride_a;
  Shape stride_b;
  bool same = false;
};

inline Broadcast broadcast(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape pa(r - a.size(), 1), pb(r - b.size(), 1);
  pa.insert(pa.end(), a.begin(), a.end());
  pb.insert(pb.end(), b.begin(), b.end());
  Broadcast bc;
  bc.same = pa == pb;
  bc.out.resize(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1) {
      throw DimensionError("shapes " + to_string(a) + " and " + to_string(b) + " are not broadcastable");
    }
    bc.out[i] = pa[i] == 1 ? pb[i] : pa[i];
  }
  const Shape sa = strides_of(pa), sb = strides_of(pb);
  bc.stride_a.resize(r);
  bc.stride_b.resize(r);
  for (std::size_t i = 0; i < r; ++i) {
    bc.stride_a[i] = pa[i] == 1 ? 0 : sa[i];
    bc.stride_b[i] = pb[i] == 1 ? 0 : sb[i];
  }
  return bc;
}

/// Calls f(out_index, a_index, b_index) for every output element in row-major order.
template <typename F>
void broadcast_loop(const Broadcast& bc, F&& f) {
  const Index total = shape_size(bc.out);
  const std::size_t r = bc.out.size();
  std::vector<Index> idx(r, 0);
  Index ia = 0, ib = 0;
  for (Index o = 0; o < total; ++o) {
    f(o, ia, ib);
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      ia += bc.stride_a[d];
      ib += bc.stride_b[d];
      if (idx[d] < bc.out[d]) break;
      ia -= bc.stride_a[d] * bc.out[d];
      ib -= bc.stride_b[d] * bc.out[d];
      idx[d] = 0;
    }
  }
}

/// Applies an element-wise map with derivative dfdx(x, y) evaluated from input and output.
template <typename Scalar, typename F, typename D>
Var<Scalar> unary(const Var<Scalar>& x, F f, D dfdx) {
  Tape<Scalar>& tape = x.tape();
  const Tensor<Scalar>& in = tape.value(x);
  Tensor<Scalar> out(in.shape());
  for (Index i = 0; i < in.size(); ++i) out[i] = f(in[i]);
  const std::size_t xid = x.id();
  const std::size_t oid = tape.size();
  return tape.record(std::move(out), {xid}, [xid, oid, dfdx](const auto& g, Tape<Scalar>& t) {
    const Tensor<Scalar>& xv = t.value(xid);
    const Tensor<Scalar>& yv = t.value(oid);
    auto& dx = t.adjoint(xid);
    for (Index i = 0; i < g.size(); ++i) dx[i] += g[i] * dfdx(xv[i], yv[i]);
  });
}

}  // namespace detail

/// Same data under a new shape of equal size.
template <typename Scalar>
Var<Scalar> reshape(const Var<Scalar>& x, Shape shape) {
  Tape<Scalar>& tape = x.tape();
  const Tensor<Scalar>& in = tape.value(x);
  if (shape_size(shape) != in.size()) {
    throw DimensionError("cannot reshape " + to_string(in.shape()) + " to " + to_string(shape));
  }
  const std::size_t xid = x.id();
  return tape.record(Tensor<Scalar>(std::move(shape), in.data()), {xid},
                     [xid](const auto& g, Tape<Scalar>& t) { t.adjoint(xid) += g; });
}

/// Axis permutation: out.shape[i] = in.shape[axes[i]].
template <typename Scalar>
Var<Scalar> permute(const Var<Scalar>& x, std::vector<Index> axes) {
  Tape<Scalar>& tape = x.tape();
  const Tensor<Scalar>& in = tape.value(x);
  const std::size_t r = static_cast<std::size_t>(in.rank());
  if (axes.size() != r) throw DimensionError("permute: axis count does not match rank");
  std::vector<bool> seen(r, false);
  for (Index a : axes) {
    if (a < 0 || static_cast<std::size_t>(a) >= r || seen[static_cast<std::size_t>(a)]) {
      throw DimensionError("permute: axes are not a permutation");
    }
    seen[static_cast<std::size_t>(a)] = true;
  }
  Shape out_shape(r), src_stride(r);
  const Shape in_strides = strides_of(in.shape());
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = in.shape()[static_cast<std::size_t>(axes[i])];
    src_stride[i] = in_strides[static_cast<std::size_t>(axes[i])];
  }
  // map[o] = source offset of output element o
  auto map = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(in.size()));
  {
    detail::Broadcast walk{out_shape, src_stride, Shape(r, 0), false};
    detail::broadcast_loop(walk, [&](Index o, Index src, Index) { (*map)[static_cast<std::size_t>(o)] = src; });
  }
  Tensor<Scalar> out(out_shape);
  for (Index o = 0; o < out.size(); ++o) out[o] = in[(*map)[static_cast<std::size_t>(o)]];
  const std::size_t xid = x.id();
  return tape.record(std::move(out), {xid}, [xid, map](const auto& g, Tape<Scalar>& t) {
    auto& dx = t.adjoint(xid);
    for (Index o = 0; o < g.size(); ++o) dx[(*map)[static_cast<std::size_t>(o)]] += g[o];
  });
}

/// Element-wise a + b with broadcasting.
template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  Tape<Scalar>& tape = detail::same_tape(a, b);
  const Tensor<Scalar>& av = tape.value(a);
  const Tensor<Scalar>& bv = tape.value(b);
  auto bc = std::make_shared<detail::Broadcast>(detail::broadcast(av.shape(), bv.shape()));
  Tensor<Scalar> out(bc->out);
  if (bc->same) {
    out.data() = av.data() + bv.data();
  } else {
    detail::broadcast_loop(*bc, [&](Index o, Index ia, Index ib) { out[o] = av[ia] + bv[ib]; });
  }
  const std::size_t aid = a.id(), bid = b.id();
  return tape.record(std::move(out), {aid, bid}, [aid, bid, bc](const auto& g, Tape<Scalar>& t) {
    const bool ga = t.requires_grad(aid), gb = t.requires_grad(bid);
    if (bc->same) {
      if (ga) t.adjoint(aid) += g;
      if (gb) t.adjoint(bid) += g;
      return;
    }
    if (ga) {
      auto& da = t.adjoint(aid);
      detail::broadcast_loop(*bc, [&](Index o, Index ia, Index) { da[ia] += g[o]; });
    }
    if (gb) {
      auto& db = t.adjoint(bid);
      detail::broadcast_loop(*bc, [&](Index o, Index, Index ib) { db[ib] += g[o]; });
    }
  });
}

/// Element-wise a * b with broadcasting.
template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  Tape<Scalar>& tape = detail::same_tape(a, b);
  const Tensor<Scalar>& av = tape.value(a);
  const Tensor<Scalar>& bv = tape.value(b);
  auto bc = std::make_shared<detail::Broadcast>(detail::broadcast(av.shape(), bv.shape()));
  Tensor<Scalar> out(bc->out);
  if (bc->same) {
    out.data() = av.data().cwiseProduct(bv.data());
  } else {
    detail::broadcast_loop(*bc, [&](Index o, Index ia, Index ib) { out[o] = av[ia] * bv[ib]; });
  }
  const std::size_t aid = a.id(), bid = b.id();
  return tape.record(std::move(out), {aid, bid}, [aid, bid, bc](const auto& g, Tape<Scalar>& t) {
    const Tensor<Scalar>& av = t.value(aid);
    const Tensor<Scalar>& bv = t.value(bid);
    if (t.requires_grad(aid)) {
      auto& da = t.adjoint(aid);
      detail::broadcast_loop(*bc, [&](Index o, Index ia, Index ib) { da[ia] += g[o] * bv[ib]; });
    }
    if (t.requires_grad(bid)) {
      auto& db = t.adjoint(bid);
      detail::broadcast_loop(*bc, [&](Index o, Index ia, Index ib) { db[ib] += g[o] * av[ia]; });
    }
  });
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  Tape<Scalar>& tape = detail::same_tape(a, b);
  const Tensor<Scalar>& bv = tape.value(b);
  Tensor<Scalar> minus_one = Tensor<Scalar>::constant(Shape(static_cast<std::size_t>(bv.rank()), 1), Scalar(-1));
  return add(a, mul(b, tape.constant(std::move(minus_one))));
}

/// scale * x + shift, element-wise.
template <typename Scalar>
Var<Scalar> affine(const Var<Scalar>& x, Scalar scale, Scalar shift) {
  return detail::unary(
      x, [=](Scalar v) { return scale * v + shift; }, [=](Scalar, Scalar) { return scale; });
}

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& x) {
  return detail::unary(
      x, [](Scalar v) { return v > Scalar(0) ? v : Scalar(0); },
      [](Scalar v, Scalar) { return v > Scalar(0) ? Scalar(1) : Scalar(0); });
}

template <typename Scalar>
Var<Scalar> sigmoid(const Var<Scalar>& x) {
  return detail::unary(
      x, [](Scalar v) { return Scalar(1) / (Scalar(1) + std::exp(-v)); },
      [](Scalar, Scalar y) { return y * (Scalar(1) - y); });
}

template <typename Scalar>
Var<Scalar> square(const Var<Scalar>& x) {
  return detail::unary(
      x, [](Scalar v) { return v * v; }, [](Scalar v, Scalar) { return Scalar(2) * v; });
}

/// Sum of all elements as a rank-0 tensor.
template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& x) {
  Tape<Scalar>& tape = x.tape();
  const Tensor<Scalar>& in = tape.value(x);
  Scalar acc(0);
  for (Index i = 0; i < in.size(); ++i) acc += in[i];
  const std::size_t xid = x.id();
  return tape.record(Tensor<Scalar>::scalar(acc), {xid},
                     [xid](const auto& g, Tape<Scalar>& t) { t.adjoint(xid).array() += g[0]; });
}

/// Sum of squared differences between two tensors of equal shape.
template <typename Scalar>
Var<Scalar> sse(const Var<Scalar>& a, const Var<Scalar>& b) {
  Tape<Scalar>& tape = detail::same_tape(a, b);
  const Tensor<Scalar>& av = tape.value(a);
  const Tensor<Scalar>& bv = tape.value(b);
  if (av.shape() != bv.shape()) {
    throw DimensionError("sse: shapes " + to_string(av.shape()) + " and " + to_string(bv.shape()) + " differ");
  }
  Scalar acc(0);
  for (Index i = 0; i < av.size(); ++i) {
    const Scalar d = av[i] - bv[i];
    acc += d * d;
  }
  const std::size_t aid = a.id(), bid = b.id();
  return tape.record(Tensor<Scalar>::scalar(acc), {aid, bid}, [aid, bid](const auto& g, Tape<Scalar>& t) {
    const auto diff = (t.value(aid).data() - t.value(bid).data()).eval();
    if (t.requires_grad(aid)) t.adjoint(aid) += Scalar(2) * g[0] * diff;
    if (t.requires_grad(bid)) t.adjoint(bid) -= Scalar(2) * g[0] * diff;
  });
}

/// Batched matrix product over the two trailing axes; leading axes broadcast
/// (extent equal or 1, missing leading axes count as 1).
template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
  Tape<Scalar>& tape = detail::same_tape(a, b);
  const Tensor<Scalar>& av = tape.value(a);
  const Tensor<Scalar>& bv = tape.value(b);
  if (av.rank() < 2 || bv.rank() < 2) throw DimensionError("matmul needs operands of rank >= 2");
  const Index m = av.dim(-2), k = av.dim(-1), k2 = bv.dim(-2), n = bv.dim(-1);
  if (k != k2) {
    throw DimensionError("matmul inner extents differ: " + to_string(av.shape()) + " x " + to_string(bv.shape()));
  }
  const Shape lead_a(av.shape().begin(), av.shape().end() - 2);
  const Shape lead_b(bv.shape().begin(), bv.shape().end() - 2);
  auto bc = std::make_shared<detail::Broadcast>(detail::broadcast(lead_a, lead_b));
  Shape out_shape = bc->out;
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor<Scalar> out(out_shape);
  const Scalar* pa = av.ptr();
  const Scalar* pb = bv.ptr();
  Scalar* pc = out.ptr();
  detail::broadcast_loop(*bc, [&](Index o, Index ia, Index ib) {
    detail::MatrixMap<Scalar> C(pc + o * m * n, m, n);
    C.noalias() = detail::ConstMatrixMap<Scalar>(pa + ia * m * k, m, k) *
                  detail::ConstMatrixMap<Scalar>(pb + ib * k * n, k, n);
  });
  const std::size_t aid = a.id(), bid = b.id();
  return tape.record(std::move(out), {aid, bid}, [aid, bid, bc, m, k, n](const auto& g, Tape<Scalar>& t) {
    const Scalar* pa = t.value(aid).ptr();
    const Scalar* pb = t.value(bid).ptr();
    const Scalar* pg = g.data();
    if (t.requires_grad(aid)) {
      Scalar* da = t.adjoint(aid).data();
      detail::broadcast_loop(*bc, [&](Index o, Index ia, Index ib) {
        detail::MatrixMap<Scalar>(da + ia * m * k, m, k).noalias() +=
            detail::ConstMatrixMap<Scalar>(pg + o * m * n, m, n) *
            detail::ConstMatrixMap<Scalar>(pb + ib * k * n, k, n).transpose();
      });
    }
    if (t.requires_grad(bid)) {
      Scalar* db = t.adjoint(bid).data();
      detail::broadcast_loop(*bc, [&](Index o, Index ia, Index ib) {
        detail::MatrixMap<Scalar>(db + ib * k * n, k, n).noalias() +=
            detail::ConstMatrixMap<Scalar>(pa + ia * m * k, m, k).transpose() *
            detail::ConstMatrixMap<Scalar>(pg + o * m * n, m, n);
      });
    }
  });
}

namespace detail {

struct ConvGeometry {
  Index batch, channels, height, width, filters, kernel, stride, out_h, out_w;
  Index patch() const { return channels * kernel * kernel; }
  Index positions() const { return out_h * out_w; }
};

template <typename Scalar>
ConvGeometry conv_geometry(const Tensor<Scalar>& input, const Tensor<Scalar>& kernel, const Tensor<Scalar>& bias,
                           Index stride) {
  if (input.rank() != 4) throw DimensionError("conv2d input must be [N,C,H,W], got " + to_string(input.shape()));
  if (kernel.rank() != 4) throw DimensionError("conv2d kernel must be [F,C,k,k], got " + to_string(kernel.shape()));
  if (stride < 1) throw DimensionError("conv2d stride must be positive");
  const Index k = kernel.dim(2);
  if (kernel.dim(3) != k) throw DimensionError("conv2d kernel must be square, got " + to_string(kernel.shape()));
  if (kernel.dim(1) != input.dim(1)) {
    throw DimensionError("conv2d channel mismatch: input " + to_string(input.shape()) + ", kernel " +
                         to_string(kernel.shape()));
  }
  if (bias.rank() != 1 || bias.dim(0) != kernel.dim(0)) {
    throw DimensionError("conv2d bias must be [" + std::to_string(kernel.dim(0)) + "], got " + to_string(bias.shape()));
  }
  if (input.dim(2) < k || input.dim(3) < k) {
    throw DimensionError("conv2d kernel " + std::to_string(k) + " larger than input " + to_string(input.shape()));
  }
  return {input.dim(0), input.dim(1), input.dim(2), input.dim(3), kernel.dim(0), k, stride,
          (input.dim(2) - k) / stride + 1, (input.dim(3) - k) / stride + 1};
}

/// Unrolls one image into a [positions, C*k*k] row-major patch matrix.
template <typename Scalar>
void im2col(const ConvGeometry& g, const Scalar* image, Scalar* cols) {
  for (Index oy = 0; oy < g.out_h; ++oy) {
    for (Index ox = 0; ox < g.out_w; ++ox) {
      Scalar* row = cols + (oy * g.out_w + ox) * g.patch();
      for (Index c = 0; c < g.channels; ++c) {
        for (Index ky = 0; ky < g.kernel; ++ky) {
          const Scalar* src = image + (c * g.height + oy * g.stride + ky) * g.width + ox * g.stride;
          for (Index kx = 0; kx < g.kernel; ++kx) *row++ = src[kx];
        }
      }
    }
  }
}

template <typename Scalar>
void col2im_add(const ConvGeometry& g, const Scalar* cols, Scalar* image) {
  for (Index oy = 0; oy < g.out_h; ++oy) {
    for (Index ox = 0; ox < g.out_w; ++ox) {
      const Scalar* row = cols + (oy * g.out_w + ox) * g.patch();
      for (Index c = 0; c < g.channels; ++c) {
        for (Index ky = 0; ky < g.kernel; ++ky) {
          Scalar* dst = image + (c * g.height + oy * g.stride + ky) * g.width + ox * g.stride;
          for (Index kx = 0; kx < g.kernel; ++kx) dst[kx] += *row++;
        }
      }
    }
  }
}

}  // namespace detail

/// Valid (unpadded) 2-D cross-correlation: [N,C,H,W] * [F,C,k,k] + [F] -> [N,F,H',W'],
/// H' = floor((H-k)/stride) + 1.
///
/// Each output is accumulated over (c, ky, kx) in row-major order starting from
/// zero, then the bias is added, which is the summation order of
/// reference::conv2d; the two agree bit for bit.
template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& input, const Var<Scalar>& kernel, const Var<Scalar>& bias, Index stride) {
  Tape<Scalar>& tape = detail::same_tape(input, kernel);
  tape.check(bias);
  const Tensor<Scalar>& x = tape.value(input);
  const Tensor<Scalar>& w = tape.value(kernel);
  const Tensor<Scalar>& b = tape.value(bias);
  const detail::ConvGeometry geo = detail::conv_geometry(x, w, b, stride);
  const Index F = geo.filters, P = geo.positions(), J = geo.patch();

  // kernel transposed to [J, F] so the inner loop runs over contiguous filters
  const detail::RowMatrix<Scalar> kt = detail::ConstMatrixMap<Scalar>(w.ptr(), F, J).transpose();
  const bool keep_cols = tape.requires_grad(kernel);
  auto cols = std::make_shared<std::vector<Scalar>>(static_cast<std::size_t>((keep_cols ? geo.batch : 1) * P * J));
  constexpr Index kBlock = 4;  // positions sharing each kernel row load
  std::vector<Scalar> acc(static_cast<std::size_t>(kBlock * F));
  Tensor<Scalar> out(Shape{geo.batch, F, geo.out_h, geo.out_w});

  for (Index n = 0; n < geo.batch; ++n) {
    Scalar* c = cols->data() + (keep_cols ? n * P * J : 0);
    detail::im2col(geo, x.ptr() + n * geo.channels * geo.height * geo.width, c);
    Scalar* o = out.ptr() + n * F * P;
    for (Index p0 = 0; p0 < P; p0 += kBlock) {
      const Index nb = std::min(kBlock, P - p0);
      std::fill(acc.begin(), acc.end(), Scalar(0));
      if (nb == kBlock) {
        const Scalar* r0 = c + p0 * J;
        const Scalar *r1 = r0 + J, *r2 = r1 + J, *r3 = r2 + J;
        Scalar* __restrict a0 = acc.data();
        Scalar* __restrict a1 = a0 + F;
        Scalar* __restrict a2 = a1 + F;
        Scalar* __restrict a3 = a2 + F;
        for (Index j = 0; j < J; ++j) {
          const Scalar v0 = r0[j], v1 = r1[j], v2 = r2[j], v3 = r3[j];
          const Scalar* __restrict kr = kt.data() + j * F;
          for (Index f = 0; f < F; ++f) {
            const Scalar k = kr[f];
            a0[f] += v0 * k;
            a1[f] += v1 * k;
            a2[f] += v2 * k;
            a3[f] += v3 * k;
          }
        }
      } else {
        for (Index q = 0; q < nb; ++q) {
          const Scalar* row = c + (p0 + q) * J;
          Scalar* ac = acc.data() + q * F;
          for (Index j = 0; j < J; ++j) {
            const Scalar a = row[j];
            const Scalar* kr = kt.data() + j * F;
            for (Index f = 0; f < F; ++f) ac[f] += a * kr[f];
          }
        }
      }
      for (Index q = 0; q < nb; ++q)
        for (Index f = 0; f < F; ++f) o[f * P + p0 + q] = acc[static_cast<std::size_t>(q * F + f)] + b[f];
    }
  }
  if (!keep_cols) cols.reset();

  const std::size_t xid = input.id(), wid = kernel.id(), bid = bias.id();
  return tape.record(std::move(out), {xid, wid, bid}, [xid, wid, bid, geo, cols](const auto& g, Tape<Scalar>& t) {
    const Index F = geo.filters, P = geo.positions(), J = geo.patch();
    if (t.requires_grad(bid)) {
      auto& db = t.adjoint(bid);
      for (Index n = 0; n < geo.batch; ++n) {
        for (Index f = 0; f < F; ++f) db[f] += g.segment(n * F * P + f * P, P).sum();
      }
    }
    if (t.requires_grad(wid)) {
      detail::MatrixMap<Scalar> dw(t.adjoint(wid).data(), F, J);
      for (Index n = 0; n < geo.batch; ++n) {
        dw.noalias() += detail::ConstMatrixMap<Scalar>(g.data() + n * F * P, F, P) *
                        detail::ConstMatrixMap<Scalar>(cols->data() + n * P * J, P, J);
      }
    }
    if (t.requires_grad(xid)) {
      const detail::ConstMatrixMap<Scalar> w(t.value(wid).ptr(), F, J);
      Scalar* dx = t.adjoint(xid).data();
      detail::RowMatrix<Scalar> dcols(P, J);
      for (Index n = 0; n < geo.batch; ++n) {
        dcols.noalias() = detail::ConstMatrixMap<Scalar>(g.data() + n * F * P, F, P).transpose() * w;
        detail::col2im_add(geo, dcols.data(), dx + n * geo.channels * geo.height * geo.width);
      }
    }
  });
}

/// Capsule nonlinearity along the last axis: v = |s|^2/(1+|s|^2) * s/|s|, with
/// the denominator norm taken as sqrt(|s|^2 + eps) so that squash(0) = 0 and
/// the derivative stays finite.
template <typename Scalar>
Var<Scalar> squash(const Var<Scalar>& s) {
  Tape<Scalar>& tape = s.tape();
  const Tensor<Scalar>& in = tape.value(s);
  if (in.rank() < 1) throw DimensionError("squash needs rank >= 1");
  const Index d = in.dim(-1);
  const Index rows = d == 0 ? 0 : in.size() / d;
  const Scalar eps = static_cast<Scalar>(kSquashEpsilon);
  Tensor<Scalar> out(in.shape());
  for (Index r = 0; r < rows; ++r) {
    const auto seg = in.data().segment(r * d, d);
    Scalar q(0);
    for (Index i = 0; i < d; ++i) q += seg[i] * seg[i];
    const Scalar factor = q / ((Scalar(1) + q) * std::sqrt(q + eps));
    out.data().segment(r * d, d) = factor * seg;
  }
  const std::size_t sid = s.id();
  return tape.record(std::move(out), {sid}, [sid, d, rows, eps](const auto& g, Tape<Scalar>& t) {
    const Tensor<Scalar>& in = t.value(sid);
    auto& ds = t.adjoint(sid);
    for (Index r = 0; r < rows; ++r) {
      const auto seg = in.data().segment(r * d, d);
      const auto gseg = g.segment(r * d, d);
      Scalar q(0), dot(0);
      for (Index i = 0; i < d; ++i) {
        q += seg[i] * seg[i];
        dot += seg[i] * gseg[i];
      }
      const Scalar root = std::sqrt(q + eps);
      const Scalar base = Scalar(1) / ((Scalar(1) + q) * root);
      const Scalar factor = q * base;
      const Scalar dfactor = base * (Scalar(1) - q / (Scalar(1) + q) - q / (Scalar(2) * (q + eps)));
      ds.segment(r * d, d) += factor * gseg + (Scalar(2) * dfactor * dot) * seg;
    }
  });
}

/// Softmax along one axis, stabilised by subtracting the slice maximum.
template <typename Scalar>
Var<Scalar> softmax(const Var<Scalar>& x, Index axis) {
  Tape<Scalar>& tape = x.tape();
  const Tensor<Scalar>& in = tape.value(x);
  const Index r = in.rank();
  const Index a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw DimensionError("softmax axis " + std::to_string(axis) + " invalid for " + to_string(in.shape()));
  const Index len = in.dim(a);
  Index outer = 1, inner = 1;
  for (Index i = 0; i < a; ++i) outer *= in.dim(i);
  for (Index i = a + 1; i < r; ++i) inner *= in.dim(i);
  Tensor<Scalar> out(in.shape());
  for (Index o = 0; o < outer; ++o) {
    for (Index i = 0; i < inner; ++i) {
      const Index base = o * len * inner + i;
      Scalar mx = in[base];
      for (Index l = 1; l < len; ++l) mx = std::max(mx, in[base + l * inner]);
      Scalar total(0);
      for (Index l = 0; l < len; ++l) {
        const Scalar e = std::exp(in[base + l * inner] - mx);
        out[base + l * inner] = e;
        total += e;
      }
      for (Index l = 0; l < len; ++l) out[base + l * inner] /= total;
    }
  }
  const std::size_t xid = x.id();
  const std::size_t oid = tape.size();
  return tape.record(std::move(out), {xid}, [xid, oid, outer, inner, len](const auto& g, Tape<Scalar>& t) {
    const Tensor<Scalar>& y = t.value(oid);
    auto& dx = t.adjoint(xid);
    for (Index o = 0; o < outer; ++o) {
      for (Index i = 0; i < inner; ++i) {
        const Index base = o * len * inner + i;
        Scalar dot(0);
        for (Index l = 0; l < len; ++l) dot += g[base + l * inner] * y[base + l * inner];
        for (Index l = 0; l < len; ++l) {
          const Index e = base + l * inner;
          dx[e] += y[e] * (g[e] - dot);
        }
      }
    }
  });
}

/// Euclidean norm along the last axis; the gradient at a zero vector is taken as zero.
template <typename Scalar>
Var<Scalar> norm(const Var<Scalar>& x) {
  Tape<Scalar>& tape = x.tape();
  const Tensor<Scalar>& in = tape.value(x);
  if (in.rank() < 1) throw DimensionError("norm needs rank >= 1");
  const Index d = in.dim(-1);
  Shape out_shape(in.shape().begin(), in.shape().end() - 1);
  Tensor<Scalar> out(out_shape);
  for (Index r = 0; r < out.size(); ++r) {
    Scalar q(0);
    for (Index i = 0; i < d; ++i) q += in[r * d + i] * in[r * d + i];
    out[r] = std::sqrt(q);
  }
  const std::size_t xid = x.id();
  const std::size_t oid = tape.size();
  return tape.record(std::move(out), {xid}, [xid, oid, d](const auto& g, Tape<Scalar>& t) {
    const Tensor<Scalar>& in = t.value(xid);
    const Tensor<Scalar>& nv = t.value(oid);
    auto& dx = t.adjoint(xid);
    for (Index r = 0; r < nv.size(); ++r) {
      if (nv[r] > Scalar(0)) dx.segment(r * d, d) += (g[r] / nv[r]) * in.data().segment(r * d, d);
    }
  });
}

/// Picks, for every sample n, the slice x[n, index[n], ...]; [N,K,...] -> [N,...].
template <typename Scalar>
Var<Scalar> select(const Var<Scalar>& x, std::span<const Index> index) {
  Tape<Scalar>& tape = x.tape();
  const Tensor<Scalar>& in = tape.value(x);
  if (in.rank() < 2) throw DimensionError("select needs rank >= 2");
  const Index n = in.dim(0), k = in.dim(1);
  if (static_cast<Index>(index.size()) != n) throw DimensionError("select: one index per sample required");
  const Index inner = k == 0 ? 0 : in.size() / (n * k);
  Shape out_shape{n};
  out_shape.insert(out_shape.end(), in.shape().begin() + 2, in.shape().end());
  Tensor<Scalar> out(out_shape);
  auto idx = std::make_shared<std::vector<Index>>(index.begin(), index.end());
  for (Index s = 0; s < n; ++s) {
    const Index pick = (*idx)[static_cast<std::size_t>(s)];
    if (pick < 0 || pick >= k) throw DimensionError("select index out of range");
    out.data().segment(s * inner, inner) = in.data().segment((s * k + pick) * inner, inner);
  }
  const std::size_t xid = x.id();
  return tape.record(std::move(out), {xid}, [xid, idx, k, inner](const auto& g, Tape<Scalar>& t) {
    auto& dx = t.adjoint(xid);
    for (std::size_t s = 0; s < idx->size(); ++s) {
      const Index n = static_cast<Index>(s);
      dx.segment((n * k + (*idx)[s]) * inner, inner) += g.segment(n * inner, inner);
    }
  });
}

namespace reference {

/// Six-loop convolution used as the oracle for conv2d.
template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& input, const Tensor<Scalar>& kernel, const Tensor<Scalar>& bias,
                      Index stride) {
  const detail::ConvGeometry g = detail::conv_geometry(input, kernel, bias, stride);
  Tensor<Scalar> out(Shape{g.batch, g.filters, g.out_h, g.out_w});
  for (Index n = 0; n < g.batch; ++n)
    for (Index f = 0; f < g.filters; ++f)
      for (Index oy = 0; oy < g.out_h; ++oy)
        for (Index ox = 0; ox < g.out_w; ++ox) {
          Scalar acc(0);
          for (Index c = 0; c < g.channels; ++c)
            for (Index ky = 0; ky < g.kernel; ++ky)
              for (Index kx = 0; kx < g.kernel; ++kx)
                acc += input.at(n, c, oy * g.stride + ky, ox * g.stride + kx) * kernel.at(f, c, ky, kx);
          out.at(n, f, oy, ox) = acc + bias[f];
        }
  return out;
}

}  // namespace reference

}  // namespace capstrain

#endif  // CAPSTRAIN_OPS_HPP
