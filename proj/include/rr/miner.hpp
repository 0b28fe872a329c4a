// SPDX-License-Identifier: Apache-2.0
#pragma once

// Self-reflective negative mining: for each training prompt, the database row
// closest to what the generator actually produced (excluding the prompt's
// own ground-truth image) becomes that prompt's reflective negative.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "rr/detail/io.hpp"
#include "rr/error.hpp"
#include "rr/parallel.hpp"
#include "rr/store.hpp"

namespace rr {

struct PromptPair {
  std::string prompt_id;
  std::vector<float> query;      // text-side embedding
  std::size_t positive_row = 0;  // ground-truth row in the database
  std::vector<float> generated;  // embedding of the generator's output
  std::optional<std::string> prompt_text;

  friend bool operator==(const PromptPair&, const PromptPair&) = default;
};

/// Prompts with their query, ground-truth and generated embeddings.
struct GeneratedEmbeddingSet {
  std::size_t dim = 0;
  std::vector<PromptPair> prompts;

  std::size_t size() const { return prompts.size(); }
  bool empty() const { return prompts.empty(); }
  friend bool operator==(const GeneratedEmbeddingSet&, const GeneratedEmbeddingSet&) = default;
};

/// Checks unique ids, dims, unit norms and (when db_count is given) ranges.
inline void validate(const GeneratedEmbeddingSet& g, std::optional<std::size_t> db_count = std::nullopt) {
  std::unordered_set<std::string> ids;
  for (std::size_t i = 0; i < g.prompts.size(); ++i) {
    const auto& p = g.prompts[i];
    require(ids.insert(p.prompt_id).second, Errc::MalformedRecord, "duplicate prompt_id '" + p.prompt_id + "'");
    if (p.query.size() != g.dim || p.generated.size() != g.dim)
      fail(Errc::DimMismatch, "prompt '" + p.prompt_id + "' has vectors of the wrong dim");
    if (db_count && p.positive_row >= *db_count)
      fail(Errc::MalformedRecord, "prompt '" + p.prompt_id + "' positive_row " + std::to_string(p.positive_row) +
                                      " out of range");
    if (find_norm_violation(p.query, g.dim)) fail(Errc::NormViolation, "query of prompt " + std::to_string(i));
    if (find_norm_violation(p.generated, g.dim))
      fail(Errc::NormViolation, "generated embedding of prompt " + std::to_string(i));
  }
}

struct MinedNegative {
  std::size_t negative_row = 0;
  float score = 0.0f;

  friend bool operator==(const MinedNegative&, const MinedNegative&) = default;
};

/// prompt_id -> mined negative. Ordered so serialization is deterministic.
using ReflectiveAssignment = std::map<std::string, MinedNegative>;

inline MinedNegative mine_one(std::span<const float> db_rows, std::size_t dim, std::span<const float> generated,
                              std::size_t positive_row) {
  const std::size_t exclude[] = {positive_row};
  const auto best = top_k_rows(db_rows, dim, generated, 1, exclude).top();
  return {best.row, best.score};
}

/// Mines against an arbitrary row matrix with the same row indexing as the
/// database (e.g. head-projected database rows when re-mining per epoch).
inline ReflectiveAssignment mine_reflective_rows(const GeneratedEmbeddingSet& gen, std::span<const float> db_rows,
                                                 std::size_t dim) {
  if (gen.dim != dim) fail(Errc::DimMismatch, "generated dim " + std::to_string(gen.dim) + " vs db dim " + std::to_string(dim));
  const std::size_t n = dim ? db_rows.size() / dim : 0;
  if (n == 0) fail(Errc::EmptyDatabase, "database has no rows");
  if (n == 1 && !gen.empty()) fail(Errc::SingletonDatabase, "the only database row is every prompt's positive");
  for (const auto& p : gen.prompts)
    if (p.positive_row >= n)
      fail(Errc::MalformedRecord, "prompt '" + p.prompt_id + "' positive_row out of range");

  std::vector<MinedNegative> mined(gen.size());
  parallel_for(gen.size(), [&](std::size_t i) {
    const auto& p = gen.prompts[i];
    mined[i] = mine_one(db_rows, dim, p.generated, p.positive_row);
  }, 4);

  ReflectiveAssignment out;
  for (std::size_t i = 0; i < gen.size(); ++i) out.emplace(gen.prompts[i].prompt_id, mined[i]);
  return out;
}

inline ReflectiveAssignment mine_reflective(const GeneratedEmbeddingSet& gen, const EmbeddingStore& db) {
  return mine_reflective_rows(gen, db.vectors(), db.dim());
}

// ---------------------------------------------------------------------------
// Assignment file: one {"prompt_id","negative_row","score"} object per line.

inline std::string encode_assignment(const ReflectiveAssignment& a) {
  std::string out;
  for (const auto& [id, m] : a) {
    nlohmann::ordered_json j;
    j["prompt_id"] = id;
    j["negative_row"] = m.negative_row;
    j["score"] = static_cast<double>(m.score);
    out += j.dump() + "\n";
  }
  return out;
}

inline ReflectiveAssignment decode_assignment(const std::string& text, const std::string& what) {
  ReflectiveAssignment out;
  detail::for_each_jsonl(text, what, [&](const nlohmann::json& j, std::size_t lineno) {
    auto id = j.at("prompt_id").get<std::string>();
    const auto row = j.at("negative_row").get<std::int64_t>();
    if (row < 0) fail(Errc::MalformedRecord, what + ":" + std::to_string(lineno) + ": negative_row < 0");
    const auto score = static_cast<float>(j.at("score").get<double>());
    if (!out.emplace(std::move(id), MinedNegative{static_cast<std::size_t>(row), score}).second)
      fail(Errc::MalformedRecord, what + ":" + std::to_string(lineno) + ": duplicate prompt_id");
  });
  return out;
}

inline void save_assignment(const ReflectiveAssignment& a, const std::filesystem::path& path) {
  detail::write_text_atomic(path, encode_assignment(a));
}

inline ReflectiveAssignment load_assignment(const std::filesystem::path& path) {
  return decode_assignment(detail::read_text(path), path.string());
}

// ---------------------------------------------------------------------------
// Generated-set files, addressed by a prefix P:
//   P.gen.emb     REMB, generated embeddings
//   P.query.emb   REMB, text-query embeddings (same row order)
//   P.query.jsonl store sidecar for the queries (id = prompt_id)
//   P.jsonl       {"row","prompt_id","positive_row"} per row

struct GeneratedSetPaths {
  std::filesystem::path generated, queries, records;
};

inline GeneratedSetPaths generated_set_paths(const std::filesystem::path& prefix) {
  auto with = [&](const char* suffix) {
    auto p = prefix;
    p += suffix;
    return p;
  };
  return {with(".gen.emb"), with(".query.emb"), with(".jsonl")};
}

inline void save_generated_set(const GeneratedEmbeddingSet& g, const std::filesystem::path& prefix) {
  const auto paths = generated_set_paths(prefix);
  std::vector<float> gen, qry;
  std::vector<RowMeta> qmeta;
  std::string records;
  for (std::size_t i = 0; i < g.size(); ++i) {
    const auto& p = g.prompts[i];
    gen.insert(gen.end(), p.generated.begin(), p.generated.end());
    qry.insert(qry.end(), p.query.begin(), p.query.end());
    qmeta.push_back({p.prompt_id, std::nullopt, p.prompt_text});
    nlohmann::ordered_json j;
    j["row"] = i;
    j["prompt_id"] = p.prompt_id;
    j["positive_row"] = p.positive_row;
    records += j.dump() + "\n";
  }
  write_remb(paths.generated, g.dim, gen);
  save_store(EmbeddingStore(g.dim, std::move(qry), std::move(qmeta)), paths.queries);
  detail::write_text_atomic(paths.records, records);
}

inline GeneratedEmbeddingSet load_generated_set(const std::filesystem::path& prefix) {
  const auto paths = generated_set_paths(prefix);
  auto gen = read_remb(paths.generated);
  auto qry = read_remb(paths.queries);
  if (gen.dim != qry.dim) fail(Errc::DimMismatch, "generated and query files disagree on dim");
  if (gen.count != qry.count) fail(Errc::MetaMismatch, "generated and query files disagree on row count");

  std::vector<std::optional<std::string>> texts(qry.count);
  const auto qmeta_path = meta_path(paths.queries);
  if (std::filesystem::exists(qmeta_path)) {
    auto qm = decode_meta(detail::read_text(qmeta_path), qmeta_path.string());
    if (qm.rows.size() == texts.size())
      for (std::size_t i = 0; i < texts.size(); ++i) texts[i] = qm.rows[i].caption;
  }

  GeneratedEmbeddingSet out;
  out.dim = gen.dim;
  const auto what = paths.records.string();
  detail::for_each_jsonl(detail::read_text(paths.records), what, [&](const nlohmann::json& j, std::size_t lineno) {
    const auto row = j.at("row").get<std::int64_t>();
    if (row != static_cast<std::int64_t>(out.prompts.size()))
      fail(Errc::MetaMismatch, what + ":" + std::to_string(lineno) + ": rows out of order");
    if (out.prompts.size() >= gen.count) fail(Errc::MetaMismatch, what + ": more records than vectors");
    const auto pos = j.at("positive_row").get<std::int64_t>();
    if (pos < 0) fail(Errc::MalformedRecord, what + ":" + std::to_string(lineno) + ": positive_row < 0");
    const std::size_t r = out.prompts.size();
    PromptPair p;
    p.prompt_id = j.at("prompt_id").get<std::string>();
    p.positive_row = static_cast<std::size_t>(pos);
    p.query.assign(qry.data.begin() + r * qry.dim, qry.data.begin() + (r + 1) * qry.dim);
    p.generated.assign(gen.data.begin() + r * gen.dim, gen.data.begin() + (r + 1) * gen.dim);
    p.prompt_text = texts[r];
    out.prompts.push_back(std::move(p));
  });
  if (out.prompts.size() != gen.count)
    fail(Errc::MetaMismatch, what + ": " + std::to_string(out.prompts.size()) + " records for " +
                                 std::to_string(gen.count) + " vectors");
  validate(out);
  return out;
}

}  // namespace rr
