// SPDX-License-Identifier: Apache-2.0
#pragma once

// Immutable unit-norm embedding stores, the "REMB" file format and exact
// cosine top-k search.
//
// REMB layout (little-endian):
//   0..3   magic "REMB"
//   4      version (1)
//   5..7   reserved (zero for plain stores; the projection cache keeps a
//          content hash here)
//   8..15  u64 count
//   16..19 u32 dim
//   20..   count*dim float32, row-major
//
// A store's metadata lives in a JSON Lines sidecar next to the vectors
// (see meta_path()), one {"row","id","label","caption"} object per row.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "rr/detail/io.hpp"
#include "rr/error.hpp"
#include "rr/parallel.hpp"

namespace rr {

inline constexpr std::array<char, 4> kRembMagic{'R', 'E', 'M', 'B'};
inline constexpr std::uint8_t kRembVersion = 1;
inline constexpr std::size_t kRembHeaderSize = 20;
inline constexpr double kNormTolerance = 1e-5;

struct RowMeta {
  std::string id;
  std::optional<std::string> label;
  std::optional<std::string> caption;

  friend bool operator==(const RowMeta&, const RowMeta&) = default;
};

/// Raw contents of a REMB file, before any store-level validation.
struct RembFile {
  std::uint32_t dim = 0;
  std::uint64_t count = 0;
  std::array<std::uint8_t, 3> reserved{};
  std::vector<float> data;
};

/// Returns the first row whose L2 norm is off by more than kNormTolerance.
inline std::optional<std::size_t> find_norm_violation(std::span<const float> data, std::size_t dim) {
  const std::size_t n = dim ? data.size() / dim : 0;
  for (std::size_t r = 0; r < n; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < dim; ++c) s += double(data[r * dim + c]) * double(data[r * dim + c]);
    const double norm = std::sqrt(s);
    if (!(std::abs(norm - 1.0) <= kNormTolerance)) return r;
  }
  return std::nullopt;
}

inline void check_unit_rows(std::span<const float> data, std::size_t dim, const std::string& what) {
  if (auto bad = find_norm_violation(data, dim))
    fail(Errc::NormViolation, what + ": row " + std::to_string(*bad) + " is not unit norm");
}

class EmbeddingStore {
 public:
  EmbeddingStore() = default;

  /// Validating constructor. An empty meta vector assigns ids "0".."n-1".
  EmbeddingStore(std::size_t dim, std::vector<float> vectors, std::vector<RowMeta> meta = {},
                 std::optional<std::string> encoder = std::nullopt)
      : dim_(dim), vectors_(std::move(vectors)), meta_(std::move(meta)), encoder_(std::move(encoder)) {
    require(dim_ >= 1, Errc::InvalidArgument, "store dim must be >= 1");
    require(vectors_.size() % dim_ == 0, Errc::ShapeMismatch,
            "vector payload of " + std::to_string(vectors_.size()) + " floats is not a multiple of dim " +
                std::to_string(dim_));
    const std::size_t n = vectors_.size() / dim_;
    if (meta_.empty() && n > 0) {
      meta_.resize(n);
      for (std::size_t i = 0; i < n; ++i) meta_[i].id = std::to_string(i);
    }
    require(meta_.size() == n, Errc::MetaMismatch,
            "meta has " + std::to_string(meta_.size()) + " rows, store has " + std::to_string(n));
    std::unordered_set<std::string> seen;
    for (std::size_t i = 0; i < n; ++i)
      require(seen.insert(meta_[i].id).second, Errc::MetaMismatch, "duplicate id '" + meta_[i].id + "'");
    check_unit_rows(vectors_, dim_, "store");
  }

  std::size_t dim() const { return dim_; }
  std::size_t count() const { return dim_ ? vectors_.size() / dim_ : 0; }
  bool empty() const { return count() == 0; }
  std::span<const float> vectors() const { return vectors_; }
  std::span<const float> row(std::size_t i) const { return {vectors_.data() + i * dim_, dim_}; }
  const std::vector<RowMeta>& meta() const { return meta_; }
  const RowMeta& meta(std::size_t i) const { return meta_[i]; }
  const std::optional<std::string>& encoder() const { return encoder_; }

  std::optional<std::size_t> find_id(const std::string& id) const {
    for (std::size_t i = 0; i < meta_.size(); ++i)
      if (meta_[i].id == id) return i;
    return std::nullopt;
  }

  friend bool operator==(const EmbeddingStore& a, const EmbeddingStore& b) {
    return a.dim_ == b.dim_ && a.meta_ == b.meta_ && a.encoder_ == b.encoder_ &&
           a.vectors_.size() == b.vectors_.size() &&
           std::equal(a.vectors_.begin(), a.vectors_.end(), b.vectors_.begin(),
                      [](float x, float y) { return std::bit_cast<std::uint32_t>(x) == std::bit_cast<std::uint32_t>(y); });
  }

 private:
  std::size_t dim_ = 0;
  std::vector<float> vectors_;
  std::vector<RowMeta> meta_;
  std::optional<std::string> encoder_;
};

struct Hit {
  std::size_t row = 0;
  float score = 0.0f;

  friend bool operator==(const Hit&, const Hit&) = default;
};

/// Ranked hits: scores non-increasing, equal scores by ascending row.
struct RetrievalResult {
  std::vector<Hit> entries;

  bool empty() const { return entries.empty(); }
  const Hit& top() const { return entries.front(); }
  friend bool operator==(const RetrievalResult&, const RetrievalResult&) = default;
};

// ---------------------------------------------------------------------------
// Vector math

inline std::vector<double> normalize(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  if (!(s > 0.0)) fail(Errc::ZeroVector, "cannot normalize a zero vector");
  const double inv = 1.0 / std::sqrt(s);
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] * inv;
  return out;
}

/// Float vectors are normalized in double precision, then rounded.
inline std::vector<float> normalize(std::span<const float> v) {
  std::vector<double> d(v.begin(), v.end());
  auto n = normalize(std::span<const double>(d));
  return {n.begin(), n.end()};
}

inline std::vector<float> normalize(std::initializer_list<float> v) {
  return normalize(std::span<const float>(v.begin(), v.size()));
}

/// Dot product accumulated in double, in index order.
inline double dot64(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += double(a[i]) * double(b[i]);
  return s;
}

/// Cosine similarity of unit vectors (their dot product), rounded to float.
inline float cosine(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size())
    fail(Errc::DimMismatch, "cosine of dims " + std::to_string(a.size()) + " and " + std::to_string(b.size()));
  return static_cast<float>(dot64(a, b));
}

// ---------------------------------------------------------------------------
// Search

inline bool ranks_before(const Hit& a, const Hit& b) {
  return a.score > b.score || (a.score == b.score && a.row < b.row);
}

/// Exact top-k over a row-major float matrix. Scores are computed
/// independently per row (optionally across threads) and ranked in a
/// single sequential pass, so the output never depends on thread count.
inline RetrievalResult top_k_rows(std::span<const float> rows, std::size_t dim, std::span<const float> query,
                                  std::size_t k, std::span<const std::size_t> exclude = {}) {
  require(k >= 1, Errc::InvalidArgument, "k must be >= 1");
  if (query.size() != dim)
    fail(Errc::DimMismatch, "query dim " + std::to_string(query.size()) + " vs store dim " + std::to_string(dim));
  const std::size_t n = rows.size() / dim;

  std::vector<float> scores(n);
  parallel_for(n, [&](std::size_t r) { scores[r] = static_cast<float>(dot64(rows.subspan(r * dim, dim), query)); }, 256);

  std::vector<char> excluded(n, 0);
  for (auto r : exclude)
    if (r < n) excluded[r] = 1;

  std::vector<Hit> cand;
  cand.reserve(n);
  for (std::size_t r = 0; r < n; ++r)
    if (!excluded[r]) cand.push_back({r, scores[r]});
  if (cand.empty()) fail(Errc::EmptyCandidateSet, "no rows left to rank");

  const std::size_t take = std::min(k, cand.size());
  std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(take), cand.end(), ranks_before);
  cand.resize(take);
  return {std::move(cand)};
}

inline RetrievalResult top_k(const EmbeddingStore& store, std::span<const float> query, std::size_t k,
                             std::span<const std::size_t> exclude = {}) {
  return top_k_rows(store.vectors(), store.dim(), query, k, exclude);
}

// ---------------------------------------------------------------------------
// Files

inline std::filesystem::path meta_path(const std::filesystem::path& emb) {
  auto p = emb;
  p.replace_extension(".jsonl");
  return p;
}

inline detail::Bytes encode_remb(std::size_t dim, std::span<const float> data,
                                 std::array<std::uint8_t, 3> reserved = {}) {
  detail::ByteWriter w;
  w.raw(kRembMagic.data(), 4);
  w.u8(kRembVersion);
  for (auto b : reserved) w.u8(b);
  w.le<std::uint64_t>(dim ? data.size() / dim : 0);
  w.le<std::uint32_t>(static_cast<std::uint32_t>(dim));
  for (float f : data) w.le<float>(f);
  return w.take();
}

inline RembFile decode_remb(const detail::Bytes& bytes, const std::string& what) {
  detail::ByteReader r(bytes, what);
  std::array<char, 4> magic{};
  r.raw(magic.data(), 4);
  if (magic != kRembMagic) fail(Errc::BadMagic, what + ": not a REMB file");
  RembFile f;
  const auto version = r.u8();
  if (version != kRembVersion) fail(Errc::VersionUnsupported, what + ": REMB version " + std::to_string(version));
  for (auto& b : f.reserved) b = r.u8();
  f.count = r.le<std::uint64_t>();
  f.dim = r.le<std::uint32_t>();
  if (f.dim == 0) fail(Errc::MalformedRecord, what + ": dim is 0");
  const std::uint64_t floats = f.count * f.dim;
  if (f.count != 0 && floats / f.count != f.dim) fail(Errc::MalformedRecord, what + ": header size overflow");
  if (r.remaining() != floats * 4)
    fail(Errc::TruncatedFile, what + ": payload is " + std::to_string(r.remaining()) + " bytes, header implies " +
                                  std::to_string(floats * 4));
  f.data.resize(floats);
  for (auto& x : f.data) x = r.le<float>();
  return f;
}

inline RembFile read_remb(const std::filesystem::path& path) {
  return decode_remb(detail::read_file(path), path.string());
}

inline void write_remb(const std::filesystem::path& path, std::size_t dim, std::span<const float> data,
                       std::array<std::uint8_t, 3> reserved = {}) {
  detail::write_file_atomic(path, encode_remb(dim, data, reserved));
}

namespace detail {

inline std::optional<std::string> opt_string(const nlohmann::json& j, const char* key, const std::string& what) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return std::nullopt;
  if (!it->is_string()) fail(Errc::MalformedRecord, what + ": '" + key + "' must be a string or null");
  return it->get<std::string>();
}

/// Parses non-blank JSONL lines; each callback receives (json, line number).
template <typename Fn>
void for_each_jsonl(const std::string& text, const std::string& what, Fn&& fn) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      fail(Errc::MalformedRecord, what + ":" + std::to_string(lineno) + ": " + e.what());
    }
    if (!j.is_object()) fail(Errc::MalformedRecord, what + ":" + std::to_string(lineno) + ": not an object");
    try {
      fn(j, lineno);
    } catch (const nlohmann::json::exception& e) {
      fail(Errc::MalformedRecord, what + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

}  // namespace detail

inline std::string encode_meta(const EmbeddingStore& s) {
  std::string out;
  if (s.encoder()) {
    nlohmann::ordered_json j;
    j["row"] = -1;
    j["encoder"] = *s.encoder();
    out += j.dump() + "\n";
  }
  for (std::size_t i = 0; i < s.count(); ++i) {
    const auto& m = s.meta(i);
    nlohmann::ordered_json j;
    j["row"] = i;
    j["id"] = m.id;
    j["label"] = m.label ? nlohmann::ordered_json(*m.label) : nlohmann::ordered_json(nullptr);
    j["caption"] = m.caption ? nlohmann::ordered_json(*m.caption) : nlohmann::ordered_json(nullptr);
    out += j.dump() + "\n";
  }
  return out;
}

struct ParsedMeta {
  std::vector<RowMeta> rows;
  std::optional<std::string> encoder;
};

/// A {"row": -1, "encoder": ...} record names the encoder that produced the
/// vectors; every other record must carry the next row index.
inline ParsedMeta decode_meta(const std::string& text, const std::string& what) {
  ParsedMeta out;
  detail::for_each_jsonl(text, what, [&](const nlohmann::json& j, std::size_t lineno) {
    const auto row = j.at("row").get<std::int64_t>();
    if (row == -1) {
      out.encoder = detail::opt_string(j, "encoder", what);
      return;
    }
    if (row != static_cast<std::int64_t>(out.rows.size()))
      fail(Errc::MetaMismatch, what + ":" + std::to_string(lineno) + ": expected row " +
                                   std::to_string(out.rows.size()) + ", got " + std::to_string(row));
    RowMeta m;
    m.id = j.at("id").get<std::string>();
    m.label = detail::opt_string(j, "label", what);
    m.caption = detail::opt_string(j, "caption", what);
    out.rows.push_back(std::move(m));
  });
  return out;
}

inline EmbeddingStore load_store(const std::filesystem::path& path) {
  auto file = read_remb(path);
  check_unit_rows(file.data, file.dim, path.string());
  const auto mpath = meta_path(path);
  auto meta = decode_meta(detail::read_text(mpath), mpath.string());
  if (meta.rows.size() != file.count)
    fail(Errc::MetaMismatch, mpath.string() + ": " + std::to_string(meta.rows.size()) + " records for " +
                                 std::to_string(file.count) + " rows");
  return EmbeddingStore(file.dim, std::move(file.data), std::move(meta.rows), std::move(meta.encoder));
}

inline void save_store(const EmbeddingStore& store, const std::filesystem::path& path) {
  write_remb(path, store.dim(), store.vectors());
  detail::write_text_atomic(meta_path(path), encode_meta(store));
}

}  // namespace rr
