// SPDX-License-Identifier: Apache-2.0
#pragma once

// Retrieval under the three retriever variants and the generation manifest
// handed to an external generator.
//
// zero   : raw cosine search over the database.
// normal : database rows projected by a head trained with in-batch negatives.
// real   : same, head trained with in-batch plus reflective negatives.
//
// Queries are never projected; only the image side has a trainable head.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "rr/detail/io.hpp"
#include "rr/error.hpp"
#include "rr/head.hpp"
#include "rr/log.hpp"
#include "rr/store.hpp"

namespace rr {

enum class VariantKind { zero, normal, real };

inline std::string_view to_string(VariantKind v) {
  switch (v) {
    case VariantKind::zero: return "zero";
    case VariantKind::normal: return "normal";
    case VariantKind::real: return "real";
  }
  return "?";
}

inline VariantKind parse_variant(std::string_view s) {
  if (s == "zero") return VariantKind::zero;
  if (s == "normal") return VariantKind::normal;
  if (s == "real") return VariantKind::real;
  fail(Errc::InvalidArgument, "unknown variant '" + std::string(s) + "' (expected zero, normal or real)");
}

struct RetrieverVariant {
  VariantKind kind = VariantKind::zero;
  std::optional<std::filesystem::path> checkpoint;  // required for normal and real
};

/// Database rows mapped through the head, rounded to float32 like any store.
inline EmbeddingStore project_store(const EmbeddingStore& db, const ProjectionHead& head) {
  if (db.dim() != head.d) fail(Errc::DimMismatch, "db dim differs from head dim");
  const auto projected = project_rows(head, db.vectors());
  return EmbeddingStore(db.dim(), std::vector<float>(projected.begin(), projected.end()), db.meta(), db.encoder());
}

inline std::filesystem::path projection_cache_path(const std::filesystem::path& checkpoint) {
  auto p = checkpoint;
  p += ".proj.emb";
  return p;
}

/// 24-bit key of (checkpoint bytes, database vectors), kept in the cache
/// file's reserved header bytes.
inline std::array<std::uint8_t, 3> projection_cache_key(const detail::Bytes& checkpoint, const EmbeddingStore& db) {
  auto h = detail::fnv1a(checkpoint.data(), checkpoint.size());
  const auto db_bytes = encode_remb(db.dim(), db.vectors());
  h = detail::fnv1a(db_bytes.data(), db_bytes.size(), h);
  const auto folded = static_cast<std::uint32_t>(h ^ (h >> 24) ^ (h >> 48));
  return {static_cast<std::uint8_t>(folded), static_cast<std::uint8_t>(folded >> 8),
          static_cast<std::uint8_t>(folded >> 16)};
}

/// Projected database for a checkpoint, reusing <checkpoint>.proj.emb when
/// its key matches and rebuilding it otherwise.
inline EmbeddingStore load_projected_store(const EmbeddingStore& db, const std::filesystem::path& checkpoint) {
  if (!std::filesystem::exists(checkpoint)) fail(Errc::CheckpointMissing, checkpoint.string());
  const auto ckpt_bytes = detail::read_file(checkpoint);
  const auto head = decode_head(ckpt_bytes, checkpoint.string());
  const auto key = projection_cache_key(ckpt_bytes, db);
  const auto cache = projection_cache_path(checkpoint);

  if (std::filesystem::exists(cache)) {
    try {
      auto f = read_remb(cache);
      if (f.reserved == key && f.dim == db.dim() && f.count == db.count())
        return EmbeddingStore(db.dim(), std::move(f.data), db.meta(), db.encoder());
      log(LogLevel::Info, "projection cache " + cache.string() + " is stale; rebuilding");
    } catch (const Error& e) {
      log(LogLevel::Warn, "ignoring unreadable projection cache: " + std::string(e.what()));
    }
  }
  auto projected = project_store(db, head);
  write_remb(cache, projected.dim(), projected.vectors(), key);
  return projected;
}

/// A database prepared for one variant; build once, query many times.
class Retriever {
 public:
  Retriever(const EmbeddingStore& db, const RetrieverVariant& variant) : kind_(variant.kind) {
    if (kind_ == VariantKind::zero) {
      store_ = db;
      return;
    }
    if (!variant.checkpoint)
      fail(Errc::CheckpointMissing, std::string(to_string(kind_)) + " variant needs a checkpoint");
    store_ = load_projected_store(db, *variant.checkpoint);
  }

  /// In-memory variant from a head (no cache file).
  Retriever(const EmbeddingStore& db, VariantKind kind, const ProjectionHead& head)
      : kind_(kind), store_(kind == VariantKind::zero ? db : project_store(db, head)) {}

  RetrievalResult retrieve(std::span<const float> query, std::size_t k = 1) const {
    return top_k(store_, query, k);
  }

  VariantKind kind() const { return kind_; }
  const EmbeddingStore& searched() const { return store_; }

 private:
  VariantKind kind_;
  EmbeddingStore store_;
};

inline RetrievalResult retrieve(std::span<const float> query, const EmbeddingStore& db,
                                const RetrieverVariant& variant, std::size_t k = 1) {
  return Retriever(db, variant).retrieve(query, k);
}

// ---------------------------------------------------------------------------
// Generation manifest: one
//   {"prompt_id","prompt_text","k","retrieved":[{"db_id","score"}]}
// object per line. Scores are written as the exact double value of the
// float32 score, so parsing back reproduces them bit for bit.

struct ManifestEntry {
  std::string db_id;
  float score = 0.0f;

  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

struct ManifestRecord {
  std::string prompt_id;
  std::optional<std::string> prompt_text;
  std::size_t k = 1;
  std::vector<ManifestEntry> retrieved;

  friend bool operator==(const ManifestRecord&, const ManifestRecord&) = default;
};

using GenerationManifest = std::vector<ManifestRecord>;

struct ManifestPrompt {
  std::string prompt_id;
  std::optional<std::string> prompt_text;
};

/// k == 0 records each result's own length.
inline GenerationManifest build_manifest(std::span<const ManifestPrompt> prompts,
                                         std::span<const RetrievalResult> results, const EmbeddingStore& db,
                                         std::size_t k = 0) {
  if (prompts.size() != results.size())
    fail(Errc::LengthMismatch, std::to_string(prompts.size()) + " prompts vs " + std::to_string(results.size()) +
                                   " results");
  GenerationManifest out;
  out.reserve(prompts.size());
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    ManifestRecord rec{prompts[i].prompt_id, prompts[i].prompt_text, k ? k : results[i].entries.size(), {}};
    for (const auto& hit : results[i].entries) {
      if (hit.row >= db.count()) fail(Errc::IdLookupFailure, "row " + std::to_string(hit.row) + " not in database");
      rec.retrieved.push_back({db.meta(hit.row).id, hit.score});
    }
    out.push_back(std::move(rec));
  }
  return out;
}

inline std::string encode_manifest(const GenerationManifest& m) {
  std::string out;
  for (const auto& r : m) {
    nlohmann::ordered_json j;
    j["prompt_id"] = r.prompt_id;
    j["prompt_text"] = r.prompt_text ? nlohmann::ordered_json(*r.prompt_text) : nlohmann::ordered_json(nullptr);
    j["k"] = r.k;
    auto arr = nlohmann::ordered_json::array();
    for (const auto& e : r.retrieved) {
      nlohmann::ordered_json x;
      x["db_id"] = e.db_id;
      x["score"] = static_cast<double>(e.score);
      arr.push_back(std::move(x));
    }
    j["retrieved"] = std::move(arr);
    out += j.dump() + "\n";
  }
  return out;
}

inline GenerationManifest decode_manifest(const std::string& text, const std::string& what) {
  GenerationManifest out;
  detail::for_each_jsonl(text, what, [&](const nlohmann::json& j, std::size_t lineno) {
    ManifestRecord r;
    r.prompt_id = j.at("prompt_id").get<std::string>();
    r.prompt_text = detail::opt_string(j, "prompt_text", what);
    const auto k = j.at("k").get<std::int64_t>();
    if (k < 1) fail(Errc::MalformedRecord, what + ":" + std::to_string(lineno) + ": k must be >= 1");
    r.k = static_cast<std::size_t>(k);
    for (const auto& x : j.at("retrieved")) {
      r.retrieved.push_back({x.at("db_id").get<std::string>(), static_cast<float>(x.at("score").get<double>())});
    }
    for (std::size_t i = 1; i < r.retrieved.size(); ++i)
      if (r.retrieved[i].score > r.retrieved[i - 1].score)
        fail(Errc::MalformedRecord, what + ":" + std::to_string(lineno) + ": scores not in descending order");
    out.push_back(std::move(r));
  });
  return out;
}

inline void emit_manifest(std::span<const ManifestPrompt> prompts, std::span<const RetrievalResult> results,
                          const EmbeddingStore& db, const std::filesystem::path& path, std::size_t k = 0) {
  detail::write_text_atomic(path, encode_manifest(build_manifest(prompts, results, db, k)));
}

inline GenerationManifest load_manifest(const std::filesystem::path& path) {
  return decode_manifest(detail::read_text(path), path.string());
}

}  // namespace rr
