// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "rr/pipeline.hpp"
#include "rr/synthbench.hpp"
#include "test_util.hpp"

namespace rr {
namespace {

using testing::random_head;
using testing::random_store;
using testing::random_unit;
using testing::TempDir;

Errc error_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected rr::Error";
  return Errc::InvalidArgument;
}

EmbeddingStore basis() {
  return EmbeddingStore(3, {1, 0, 0, 0, 1, 0, 0, 0, 1}, {{"a", {}, {}}, {"b", {}, {}}, {"c", {}, {}}});
}

TEST(Variant, ParseNames) {
  EXPECT_EQ(parse_variant("zero"), VariantKind::zero);
  EXPECT_EQ(parse_variant("normal"), VariantKind::normal);
  EXPECT_EQ(parse_variant("real"), VariantKind::real);
  EXPECT_EQ(error_of([] { parse_variant("other"); }), Errc::InvalidArgument);
}

TEST(Retrieve, ZeroVariantOnBasis) {
  const std::vector<float> q{0.0f, 0.6f, 0.8f};
  auto r = retrieve(q, basis(), {}, 1);
  ASSERT_EQ(r.entries.size(), 1u);
  EXPECT_EQ(r.top().row, 2u);
  EXPECT_FLOAT_EQ(r.top().score, 0.8f);
  auto r2 = retrieve(q, basis(), {}, 2);
  EXPECT_EQ(r2.entries[1].row, 1u);
}

TEST(Retrieve, TrainedVariantsNeedCheckpoint) {
  const std::vector<float> q{1, 0, 0};
  EXPECT_EQ(error_of([&] { retrieve(q, basis(), {VariantKind::real, std::nullopt}); }), Errc::CheckpointMissing);
  EXPECT_EQ(error_of([&] { retrieve(q, basis(), {VariantKind::normal, "/nonexistent/e.rrph"}); }),
            Errc::CheckpointMissing);
}

TEST(Retrieve, FreshHeadMatchesZeroVariant) {
  TempDir dir;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto db = random_store(seed, 300, 24);
    save_head(init_head(24, 24, seed), dir / "h.rrph");
    Retriever zero(db, RetrieverVariant{});
    Retriever real(db, RetrieverVariant{VariantKind::real, dir / "h.rrph"});
    std::filesystem::remove(projection_cache_path(dir / "h.rrph"));
    Rng rng({seed, 1});
    for (int t = 0; t < 5; ++t) {
      auto q = random_unit(rng, 24);
      auto a = zero.retrieve(q, 10), b = real.retrieve(q, 10);
      for (std::size_t i = 0; i < 10; ++i) {
        EXPECT_EQ(a.entries[i].row, b.entries[i].row);
        EXPECT_NEAR(a.entries[i].score, b.entries[i].score, 1e-6);
      }
    }
  }
}

TEST(Retrieve, TrainedHeadChangesSomeRanking) {
  SynthSpec spec;
  spec.seed = 1;
  auto data = synth_generate(spec);
  auto assign = mine_reflective(data.pairs, data.db);
  auto report = train(data.db, data.pairs, &assign, init_head(spec.d, spec.d, 0), {}, ablation_trainer_config(0));
  Retriever zero(data.db, VariantKind::zero, report.head);
  Retriever real(data.db, VariantKind::real, report.head);
  std::size_t differing = 0;
  for (const auto& p : data.heldout.prompts)
    differing += zero.retrieve(p.query).top().row != real.retrieve(p.query).top().row;
  EXPECT_GE(differing, 1u);
}

// --- projection cache ------------------------------------------------------

TEST(ProjectionCache, MatchesPerRowForward) {
  TempDir dir;
  auto db = random_store(7, 120, 16);
  auto head = random_head(7, 16, 16);
  save_head(head, dir / "h.rrph");
  auto projected = load_projected_store(db, dir / "h.rrph");
  ASSERT_EQ(projected.count(), db.count());
  for (std::size_t r = 0; r < db.count(); ++r) {
    const std::vector<double> in(db.row(r).begin(), db.row(r).end());
    auto out = forward(head, in);
    for (std::size_t c = 0; c < 16; ++c) EXPECT_EQ(projected.row(r)[c], static_cast<float>(out[c]));
  }
  // In-memory projection is the same store.
  EXPECT_EQ(project_store(db, head), projected);
  EXPECT_EQ(projected.meta(), db.meta());
}

TEST(ProjectionCache, ReusedWhenKeyMatches) {
  TempDir dir;
  auto db = random_store(8, 50, 8);
  save_head(random_head(8, 8, 8), dir / "h.rrph");
  auto first = load_projected_store(db, dir / "h.rrph");
  const auto cache = projection_cache_path(dir / "h.rrph");
  EXPECT_EQ(cache.filename(), "h.rrph.proj.emb");
  ASSERT_TRUE(std::filesystem::exists(cache));

  // Plant a recognizable row under the same key: it must be served back.
  auto f = read_remb(cache);
  std::fill(f.data.begin(), f.data.begin() + 8, 0.0f);
  f.data[0] = 1.0f;
  write_remb(cache, f.dim, f.data, f.reserved);
  auto second = load_projected_store(db, dir / "h.rrph");
  EXPECT_EQ(second.row(0)[0], 1.0f);
}

TEST(ProjectionCache, RebuiltWhenStale) {
  TempDir dir;
  auto db = random_store(9, 50, 8);
  save_head(random_head(9, 8, 8), dir / "h.rrph");
  load_projected_store(db, dir / "h.rrph");
  auto head2 = random_head(10, 8, 8);
  save_head(head2, dir / "h.rrph");
  EXPECT_EQ(load_projected_store(db, dir / "h.rrph"), project_store(db, head2));

  // A different database also invalidates.
  auto db2 = random_store(11, 50, 8);
  EXPECT_EQ(load_projected_store(db2, dir / "h.rrph"), project_store(db2, head2));

  // Garbage in the cache file is ignored.
  detail::write_text_atomic(projection_cache_path(dir / "h.rrph"), "junk");
  EXPECT_EQ(load_projected_store(db2, dir / "h.rrph"), project_store(db2, head2));
}

TEST(ProjectionCache, DimMismatch) {
  TempDir dir;
  save_head(random_head(1, 6, 6), dir / "h.rrph");
  EXPECT_EQ(error_of([&] { load_projected_store(random_store(1, 5, 8), dir / "h.rrph"); }), Errc::DimMismatch);
}

// --- manifest --------------------------------------------------------------

TEST(Manifest, OneRecordFormat) {
  const std::vector<ManifestPrompt> prompts{{"p1", "a cat"}};
  const std::vector<RetrievalResult> results{RetrievalResult{{{1, 0.5f}, {0, 0.25f}}}};
  auto m = build_manifest(prompts, results, basis(), 2);
  EXPECT_EQ(encode_manifest(m),
            "{\"prompt_id\":\"p1\",\"prompt_text\":\"a cat\",\"k\":2,\"retrieved\":[{\"db_id\":\"b\",\"score\":0.5},"
            "{\"db_id\":\"a\",\"score\":0.25}]}\n");
}

TEST(Manifest, EmptyPromptListIsEmptyFile) {
  TempDir dir;
  emit_manifest({}, {}, basis(), dir / "m.jsonl");
  EXPECT_EQ(detail::read_text(dir / "m.jsonl"), "");
  EXPECT_TRUE(load_manifest(dir / "m.jsonl").empty());
}

TEST(Manifest, TopTwoOnBasis) {
  const std::vector<float> q{0.0f, 0.6f, 0.8f};
  const std::vector<ManifestPrompt> prompts{{"q", std::nullopt}};
  const std::vector<RetrievalResult> results{retrieve(q, basis(), {}, 2)};
  auto m = build_manifest(prompts, results, basis(), 2);
  ASSERT_EQ(m[0].retrieved.size(), 2u);
  EXPECT_EQ(m[0].retrieved[0].db_id, "c");
  EXPECT_EQ(m[0].retrieved[1].db_id, "b");
  EXPECT_GE(m[0].retrieved[0].score, m[0].retrieved[1].score);
}

TEST(Manifest, SeededRoundTripIsBitExact) {
  TempDir dir;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto db = random_store(seed, 80, 12, true);
    Rng rng({seed, 3});
    std::vector<ManifestPrompt> prompts;
    std::vector<RetrievalResult> results;
    for (int i = 0; i < 10; ++i) {
      prompts.push_back({"prompt-" + std::to_string(i),
                         i % 3 ? std::optional<std::string>("text \"" + std::to_string(i) + "\"\n") : std::nullopt});
      results.push_back(top_k(db, random_unit(rng, 12), 1 + i % 4));
    }
    emit_manifest(prompts, results, db, dir / "m.jsonl");
    auto back = load_manifest(dir / "m.jsonl");
    EXPECT_EQ(back, build_manifest(prompts, results, db));
    for (std::size_t i = 0; i < back.size(); ++i)
      for (std::size_t j = 0; j < back[i].retrieved.size(); ++j)
        EXPECT_EQ(std::bit_cast<std::uint32_t>(back[i].retrieved[j].score),
                  std::bit_cast<std::uint32_t>(results[i].entries[j].score));
  }
}

TEST(Manifest, Errors) {
  const std::vector<ManifestPrompt> prompts{{"p", {}}};
  EXPECT_EQ(error_of([&] { build_manifest(prompts, {}, basis()); }), Errc::LengthMismatch);
  const std::vector<RetrievalResult> bad{RetrievalResult{{{7, 0.1f}}}};
  EXPECT_EQ(error_of([&] { build_manifest(prompts, bad, basis()); }), Errc::IdLookupFailure);
  EXPECT_EQ(error_of([] { decode_manifest("{\"prompt_id\":\"p\",\"k\":0,\"retrieved\":[]}\n", "t"); }),
            Errc::MalformedRecord);
  EXPECT_EQ(error_of([] {
              decode_manifest("{\"prompt_id\":\"p\",\"k\":2,\"retrieved\":[{\"db_id\":\"a\",\"score\":0.1},"
                              "{\"db_id\":\"b\",\"score\":0.2}]}\n",
                              "t");
            }),
            Errc::MalformedRecord);
}

}  // namespace
}  // namespace rr
