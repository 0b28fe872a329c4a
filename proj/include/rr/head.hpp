// SPDX-License-Identifier: Apache-2.0
#pragma once

// Trainable projection head on the image side:
//
//   a   = W1 v + b1                (h)
//   u   = [v] + W2 relu(a) + b2    (d; v added when residual is set)
//   out = u / |u|
//
// All math in double. A residual head with W2 = 0, b2 = 0 is the identity on
// unit vectors, which is how init_head() starts.

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "rr/detail/io.hpp"
#include "rr/error.hpp"
#include "rr/parallel.hpp"
#include "rr/random.hpp"

namespace rr {

/// Weights of the projection head. W1 is h x d, W2 is d x h, both row-major.
struct ProjectionHead {
  std::size_t d = 0;
  std::size_t h = 0;
  std::vector<double> w1, b1, w2, b2;
  bool residual = true;

  friend bool operator==(const ProjectionHead&, const ProjectionHead&) = default;
};

/// Same shapes as the head's weights.
struct HeadGradients {
  std::size_t d = 0;
  std::size_t h = 0;
  std::vector<double> w1, b1, w2, b2;

  friend bool operator==(const HeadGradients&, const HeadGradients&) = default;

  HeadGradients& operator+=(const HeadGradients& o) {
    require(o.d == d && o.h == h, Errc::ShapeMismatch, "adding gradients of different shapes");
    for (std::size_t i = 0; i < w1.size(); ++i) w1[i] += o.w1[i];
    for (std::size_t i = 0; i < b1.size(); ++i) b1[i] += o.b1[i];
    for (std::size_t i = 0; i < w2.size(); ++i) w2[i] += o.w2[i];
    for (std::size_t i = 0; i < b2.size(); ++i) b2[i] += o.b2[i];
    return *this;
  }
};

inline ProjectionHead zero_head(std::size_t d, std::size_t h, bool residual = true) {
  require(d >= 1 && h >= 1, Errc::InvalidArgument, "head dims must be >= 1");
  return {d, h, std::vector<double>(h * d), std::vector<double>(h), std::vector<double>(d * h),
          std::vector<double>(d), residual};
}

inline HeadGradients zero_gradients(const ProjectionHead& head) {
  return {head.d, head.h, std::vector<double>(head.w1.size()), std::vector<double>(head.b1.size()),
          std::vector<double>(head.w2.size()), std::vector<double>(head.b2.size())};
}

/// W1 ~ U(-1/sqrt(d), 1/sqrt(d)); every other weight zero; residual on.
inline ProjectionHead init_head(std::size_t d, std::size_t h, std::uint64_t seed) {
  auto head = zero_head(d, h, true);
  Rng rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  for (auto& w : head.w1) w = rng.uniform(-bound, bound);
  return head;
}

/// Mutable views of the four weight tensors, in checkpoint order.
inline std::array<std::span<double>, 4> tensors(ProjectionHead& p) { return {p.w1, p.b1, p.w2, p.b2}; }
inline std::array<std::span<double>, 4> tensors(HeadGradients& g) { return {g.w1, g.b1, g.w2, g.b2}; }
inline std::array<std::span<const double>, 4> tensors(const ProjectionHead& p) { return {p.w1, p.b1, p.w2, p.b2}; }
inline std::array<std::span<const double>, 4> tensors(const HeadGradients& g) { return {g.w1, g.b1, g.w2, g.b2}; }

inline bool all_finite(const ProjectionHead& p) {
  for (auto t : tensors(p))
    for (double x : t)
      if (!std::isfinite(x)) return false;
  return true;
}

/// Intermediate values of one forward pass, kept for backward().
struct ForwardTrace {
  std::vector<double> input;
  std::vector<double> pre;     // W1 v + b1
  std::vector<double> hidden;  // relu(pre)
  std::vector<double> out;     // unit-norm output
  double norm = 0.0;           // |u| before normalization
};

inline ForwardTrace forward_trace(const ProjectionHead& head, std::span<const double> v) {
  if (v.size() != head.d)
    fail(Errc::DimMismatch, "head expects dim " + std::to_string(head.d) + ", got " + std::to_string(v.size()));
  ForwardTrace t;
  t.input.assign(v.begin(), v.end());
  t.pre.resize(head.h);
  t.hidden.resize(head.h);
  for (std::size_t j = 0; j < head.h; ++j) {
    double s = head.b1[j];
    for (std::size_t k = 0; k < head.d; ++k) s += head.w1[j * head.d + k] * v[k];
    t.pre[j] = s;
    t.hidden[j] = s > 0.0 ? s : 0.0;
  }
  std::vector<double> u(head.d);
  double sq = 0.0;
  for (std::size_t i = 0; i < head.d; ++i) {
    double s = head.b2[i];
    for (std::size_t j = 0; j < head.h; ++j) s += head.w2[i * head.h + j] * t.hidden[j];
    if (head.residual) s += v[i];
    u[i] = s;
    sq += s * s;
  }
  // Overflowing weights would otherwise normalize to a silent zero vector.
  if (!std::isfinite(sq)) fail(Errc::NonFiniteOutput, "head output norm is not finite");
  if (sq == 0.0) fail(Errc::ZeroVector, "head output is the zero vector");
  t.norm = std::sqrt(sq);
  t.out.resize(head.d);
  for (std::size_t i = 0; i < head.d; ++i) t.out[i] = u[i] / t.norm;
  return t;
}

inline std::vector<double> forward(const ProjectionHead& head, std::span<const double> v) {
  return forward_trace(head, v).out;
}

inline std::vector<double> forward(const ProjectionHead& head, std::span<const float> v) {
  std::vector<double> d(v.begin(), v.end());
  return forward(head, std::span<const double>(d));
}

/// forward() over every row of a row-major float matrix, in double.
inline std::vector<double> project_rows(const ProjectionHead& head, std::span<const float> rows) {
  const std::size_t n = rows.size() / head.d;
  std::vector<double> out(rows.size());
  parallel_for(n, [&](std::size_t r) {
    auto y = forward(head, rows.subspan(r * head.d, head.d));
    std::copy(y.begin(), y.end(), out.begin() + static_cast<std::ptrdiff_t>(r * head.d));
  }, 32);
  return out;
}

/// Adds d<upstream, out>/d(weights) for one traced sample into grads.
inline void accumulate_backward(const ProjectionHead& head, const ForwardTrace& t, std::span<const double> upstream,
                                HeadGradients& grads) {
  if (upstream.size() != head.d) fail(Errc::ShapeMismatch, "upstream gradient has the wrong dim");
  // Normalization Jacobian: du = (g - out <out, g>) / |u|.
  double proj = 0.0;
  for (std::size_t i = 0; i < head.d; ++i) proj += t.out[i] * upstream[i];
  std::vector<double> du(head.d);
  for (std::size_t i = 0; i < head.d; ++i) du[i] = (upstream[i] - t.out[i] * proj) / t.norm;

  std::vector<double> dpre(head.h, 0.0);
  for (std::size_t i = 0; i < head.d; ++i) {
    grads.b2[i] += du[i];
    for (std::size_t j = 0; j < head.h; ++j) {
      grads.w2[i * head.h + j] += du[i] * t.hidden[j];
      dpre[j] += head.w2[i * head.h + j] * du[i];
    }
  }
  for (std::size_t j = 0; j < head.h; ++j) {
    if (!(t.pre[j] > 0.0)) continue;
    grads.b1[j] += dpre[j];
    for (std::size_t k = 0; k < head.d; ++k) grads.w1[j * head.d + k] += dpre[j] * t.input[k];
  }
}

/// Gradient of sum_i <upstream_i, forward(inputs_i)> w.r.t. the weights.
/// Per-sample gradients may be computed in parallel; they are summed in
/// ascending sample order.
inline HeadGradients backward(const ProjectionHead& head, std::span<const std::vector<double>> inputs,
                              std::span<const std::vector<double>> upstream) {
  if (inputs.size() != upstream.size())
    fail(Errc::ShapeMismatch, std::to_string(inputs.size()) + " inputs vs " + std::to_string(upstream.size()) +
                                  " upstream gradients");
  for (std::size_t i = 0; i < inputs.size(); ++i)
    if (inputs[i].size() != head.d || upstream[i].size() != head.d)
      fail(Errc::ShapeMismatch, "sample " + std::to_string(i) + " has the wrong dim");

  std::vector<HeadGradients> per(inputs.size());
  parallel_for(inputs.size(), [&](std::size_t i) {
    per[i] = zero_gradients(head);
    accumulate_backward(head, forward_trace(head, inputs[i]), upstream[i], per[i]);
  }, 8);
  auto total = zero_gradients(head);
  for (const auto& g : per) total += g;
  return total;
}

// ---------------------------------------------------------------------------
// RRPH checkpoint: "RRPH", u8 version, u32 d, u32 h, u8 flags (bit 0 =
// residual), 3 zero bytes, then float64 W1, b1, W2, b2.

inline constexpr std::array<char, 4> kHeadMagic{'R', 'R', 'P', 'H'};
inline constexpr std::uint8_t kHeadVersion = 1;
inline constexpr std::size_t kHeadHeaderSize = 17;

inline detail::Bytes encode_head(const ProjectionHead& head) {
  detail::ByteWriter w;
  w.raw(kHeadMagic.data(), 4);
  w.u8(kHeadVersion);
  w.le<std::uint32_t>(static_cast<std::uint32_t>(head.d));
  w.le<std::uint32_t>(static_cast<std::uint32_t>(head.h));
  w.u8(head.residual ? 1 : 0);
  w.zeros(3);
  for (auto t : tensors(head))
    for (double x : t) w.le<double>(x);
  return w.take();
}

inline ProjectionHead decode_head(const detail::Bytes& bytes, const std::string& what) {
  detail::ByteReader r(bytes, what);
  std::array<char, 4> magic{};
  r.raw(magic.data(), 4);
  if (magic != kHeadMagic) fail(Errc::BadMagic, what + ": not an RRPH checkpoint");
  const auto version = r.u8();
  if (version != kHeadVersion) fail(Errc::VersionUnsupported, what + ": RRPH version " + std::to_string(version));
  const auto d = r.le<std::uint32_t>();
  const auto h = r.le<std::uint32_t>();
  const auto flags = r.u8();
  r.u8(), r.u8(), r.u8();
  if (d == 0 || h == 0) fail(Errc::ShapeMismatch, what + ": zero head dimension");
  auto head = zero_head(d, h, (flags & 1) != 0);
  const std::size_t expected = 8 * (head.w1.size() + head.b1.size() + head.w2.size() + head.b2.size());
  r.need(expected);
  if (r.remaining() != expected)
    fail(Errc::ShapeMismatch, what + ": " + std::to_string(r.remaining() - expected) + " trailing bytes");
  for (auto t : tensors(head))
    for (double& x : t) x = r.le<double>();
  if (!all_finite(head)) fail(Errc::MalformedRecord, what + ": non-finite weights");
  return head;
}

inline void save_head(const ProjectionHead& head, const std::filesystem::path& path) {
  detail::write_file_atomic(path, encode_head(head));
}

inline ProjectionHead load_head(const std::filesystem::path& path) {
  return decode_head(detail::read_file(path), path.string());
}

}  // namespace rr
