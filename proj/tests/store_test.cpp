// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <fstream>
#include <map>
#include <set>

#include "rr/store.hpp"
#include "test_util.hpp"

namespace rr {
namespace {

using testing::random_store;
using testing::TempDir;

EmbeddingStore basis3() {
  return EmbeddingStore(3, {1, 0, 0, 0, 1, 0, 0.6f, 0.8f, 0});
}

void write_raw(const std::filesystem::path& p, const detail::Bytes& b) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

void write_meta_for(const std::filesystem::path& emb, std::size_t n) {
  std::ofstream out(meta_path(emb));
  for (std::size_t i = 0; i < n; ++i)
    out << R"({"row":)" << i << R"(,"id":"r)" << i << R"(","label":null,"caption":null})" << '\n';
}

Errc error_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected rr::Error";
  return Errc::InvalidArgument;
}

// --- normalize / cosine ----------------------------------------------------

TEST(Normalize, ThreeFourFive) {
  const std::vector<double> v{3, 4};
  auto n = normalize(std::span<const double>(v));
  EXPECT_DOUBLE_EQ(n[0], 0.6);
  EXPECT_DOUBLE_EQ(n[1], 0.8);
}

TEST(Normalize, AlreadyUnitIsUnchanged) {
  const std::vector<double> v{1, 0, 0};
  EXPECT_EQ(normalize(std::span<const double>(v)), v);
}

TEST(Normalize, ZeroVectorFails) {
  const std::vector<double> v{0, 0};
  EXPECT_EQ(error_of([&] { normalize(std::span<const double>(v)); }), Errc::ZeroVector);
}

TEST(Normalize, OutputIsUnitWithinTolerance) {
  Rng rng(11);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> v(1 + rng.below(64));
    for (auto& x : v) x = rng.normal() * std::pow(10.0, rng.uniform(-6, 6));
    auto n = normalize(std::span<const double>(v));
    double s = 0;
    for (double x : n) s += x * x;
    EXPECT_NEAR(std::sqrt(s), 1.0, 1e-7);
    // direction preserved
    double d = 0, vn = 0;
    for (std::size_t i = 0; i < v.size(); ++i) d += v[i] * n[i], vn += v[i] * v[i];
    EXPECT_NEAR(d / std::sqrt(vn), 1.0, 1e-12);
  }
}

TEST(Cosine, AnalyticValues) {
  const std::vector<float> e1{1, 0, 0}, e2{0, 1, 0}, v{0.6f, 0.8f, 0};
  EXPECT_EQ(cosine(e1, e1), 1.0f);
  EXPECT_EQ(cosine(e1, e2), 0.0f);
  EXPECT_EQ(cosine(v, e1), 0.6f);
}

TEST(Cosine, DimMismatch) {
  const std::vector<float> a{1, 0}, b{1, 0, 0};
  EXPECT_EQ(error_of([&] { cosine(a, b); }), Errc::DimMismatch);
}

TEST(Cosine, SymmetricAndBounded) {
  Rng rng(5);
  for (int t = 0; t < 500; ++t) {
    auto a = testing::random_unit(rng, 48), b = testing::random_unit(rng, 48);
    EXPECT_NEAR(cosine(a, b), cosine(b, a), 1e-12);
    EXPECT_LE(std::abs(cosine(a, b)), 1.0f + 1e-6f);
  }
}

// --- store construction ----------------------------------------------------

TEST(EmbeddingStore, RejectsNonUnitRows) {
  EXPECT_EQ(error_of([] { EmbeddingStore(3, {1, 1, 0}); }), Errc::NormViolation);
}

TEST(EmbeddingStore, RejectsDuplicateIds) {
  EXPECT_EQ(error_of([] { EmbeddingStore(1, {1, 1}, {{"a", {}, {}}, {"a", {}, {}}}); }), Errc::MetaMismatch);
}

TEST(EmbeddingStore, DefaultIdsAreRowIndices) {
  auto s = basis3();
  EXPECT_EQ(s.count(), 3u);
  EXPECT_EQ(s.meta(2).id, "2");
}

// --- files -----------------------------------------------------------------

TEST(StoreFile, RoundTripSmall) {
  TempDir dir;
  const auto p = dir / "two.emb";
  save_store(EmbeddingStore(3, {1, 0, 0, 0, 1, 0}), p);
  auto s = load_store(p);
  EXPECT_EQ(s.count(), 2u);
  EXPECT_EQ(s.dim(), 3u);
}

TEST(StoreFile, EmptyStoreIsHeaderOnly) {
  TempDir dir;
  const auto p = dir / "empty.emb";
  save_store(EmbeddingStore(8, {}), p);
  const auto bytes = detail::read_file(p);
  ASSERT_EQ(bytes.size(), kRembHeaderSize);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "REMB");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[16], 8);
  auto s = load_store(p);
  EXPECT_EQ(s.count(), 0u);
  EXPECT_EQ(s.dim(), 8u);
  EXPECT_EQ(detail::read_text(meta_path(p)), "");
}

TEST(StoreFile, SingleRowLayout) {
  TempDir dir;
  const auto p = dir / "one.emb";
  save_store(EmbeddingStore(2, {1, 0}), p);
  const detail::Bytes expected{'R', 'E', 'M', 'B', 1, 0, 0, 0,  // magic, version, reserved
                               1, 0, 0, 0, 0, 0, 0, 0,           // count
                               2, 0, 0, 0,                       // dim
                               0, 0, 0x80, 0x3f,                 // 1.0f
                               0, 0, 0, 0};                      // 0.0f
  EXPECT_EQ(detail::read_file(p), expected);
  EXPECT_EQ(detail::read_text(meta_path(p)), "{\"row\":0,\"id\":\"0\",\"label\":null,\"caption\":null}\n");
}

TEST(StoreFile, BadMagic) {
  TempDir dir;
  auto bytes = encode_remb(3, std::vector<float>{1, 0, 0});
  bytes[0] = 'X';
  write_raw(dir / "x.emb", bytes);
  write_meta_for(dir / "x.emb", 1);
  EXPECT_EQ(error_of([&] { load_store(dir / "x.emb"); }), Errc::BadMagic);
}

TEST(StoreFile, VersionUnsupported) {
  TempDir dir;
  auto bytes = encode_remb(3, std::vector<float>{1, 0, 0});
  bytes[4] = 2;
  write_raw(dir / "v.emb", bytes);
  write_meta_for(dir / "v.emb", 1);
  EXPECT_EQ(error_of([&] { load_store(dir / "v.emb"); }), Errc::VersionUnsupported);
}

TEST(StoreFile, Truncated) {
  TempDir dir;
  auto bytes = encode_remb(3, std::vector<float>{1, 0, 0, 0, 1, 0});
  bytes.resize(bytes.size() - 1);
  write_raw(dir / "t.emb", bytes);
  write_meta_for(dir / "t.emb", 2);
  EXPECT_EQ(error_of([&] { load_store(dir / "t.emb"); }), Errc::TruncatedFile);
  bytes.resize(10);
  write_raw(dir / "t.emb", bytes);
  EXPECT_EQ(error_of([&] { load_store(dir / "t.emb"); }), Errc::TruncatedFile);
}

TEST(StoreFile, NormCheckedOnLoad) {
  TempDir dir;
  write_raw(dir / "ok.emb", encode_remb(3, std::vector<float>{0.6f, 0.8f, 0}));
  write_meta_for(dir / "ok.emb", 1);
  EXPECT_NO_THROW(load_store(dir / "ok.emb"));

  write_raw(dir / "bad.emb", encode_remb(3, std::vector<float>{1, 0, 0, 1, 1, 0}));
  write_meta_for(dir / "bad.emb", 2);
  try {
    load_store(dir / "bad.emb");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::NormViolation);
    EXPECT_NE(std::string(e.what()).find("row 1"), std::string::npos);
  }
}

TEST(StoreFile, MetaCountMismatch) {
  TempDir dir;
  write_raw(dir / "m.emb", encode_remb(3, std::vector<float>{1, 0, 0, 0, 1, 0}));
  write_meta_for(dir / "m.emb", 1);
  EXPECT_EQ(error_of([&] { load_store(dir / "m.emb"); }), Errc::MetaMismatch);
}

TEST(StoreFile, EncoderRecordIsSkippedAndPreserved) {
  TempDir dir;
  const auto p = dir / "enc.emb";
  write_raw(p, encode_remb(2, std::vector<float>{1, 0}));
  {
    std::ofstream out(meta_path(p));
    out << R"({"row":-1,"encoder":"clip-vit-b32"})" << '\n'
        << R"({"row":0,"id":"a/b.jpg","label":"b","caption":null})" << '\n';
  }
  auto s = load_store(p);
  EXPECT_EQ(s.count(), 1u);
  EXPECT_EQ(s.encoder(), std::optional<std::string>("clip-vit-b32"));
  EXPECT_EQ(s.meta(0).label, std::optional<std::string>("b"));

  const auto q = dir / "enc2.emb";
  save_store(s, q);
  EXPECT_EQ(detail::read_text(meta_path(p)), detail::read_text(meta_path(q)));
}

TEST(StoreFile, SeededRoundTripIsByteExact) {
  TempDir dir;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto s = random_store(seed, 1 + seed * 7, 1 + seed % 9, true);
    save_store(s, dir / "a.emb");
    auto loaded = load_store(dir / "a.emb");
    EXPECT_EQ(loaded, s);
    save_store(loaded, dir / "b.emb");
    EXPECT_TRUE(testing::same_bytes(dir / "a.emb", dir / "b.emb"));
    EXPECT_TRUE(testing::same_bytes(meta_path(dir / "a.emb"), meta_path(dir / "b.emb")));
  }
}

// --- top_k -----------------------------------------------------------------

TEST(TopK, AnalyticRanking) {
  auto s = basis3();
  const std::vector<float> q{1, 0, 0};
  auto r = top_k(s, q, 3);
  ASSERT_EQ(r.entries.size(), 3u);
  EXPECT_EQ(r.entries[0], (Hit{0, 1.0f}));
  EXPECT_EQ(r.entries[1], (Hit{2, 0.6f}));
  EXPECT_EQ(r.entries[2], (Hit{1, 0.0f}));
}

TEST(TopK, ExclusionForcesSecondBest) {
  auto s = basis3();
  const std::vector<float> q{1, 0, 0};
  const std::size_t ex[] = {0};
  auto r = top_k(s, q, 1, ex);
  ASSERT_EQ(r.entries.size(), 1u);
  EXPECT_EQ(r.top(), (Hit{2, 0.6f}));
}

TEST(TopK, Errors) {
  auto s = basis3();
  const std::vector<float> q2{1, 0};
  EXPECT_EQ(error_of([&] { top_k(s, q2, 1); }), Errc::DimMismatch);
  const std::vector<float> q{1, 0, 0};
  const std::size_t all[] = {0, 1, 2};
  EXPECT_EQ(error_of([&] { top_k(s, q, 1, all); }), Errc::EmptyCandidateSet);
  EXPECT_EQ(error_of([&] { top_k(EmbeddingStore(3, {}), q, 1); }), Errc::EmptyCandidateSet);
}

TEST(TopK, TiesByAscendingRow) {
  EmbeddingStore s(2, {0, 1, 1, 0, 0, 1, 1, 0});
  const std::vector<float> q{1, 0};
  auto r = top_k(s, q, 4);
  std::vector<std::size_t> rows;
  for (auto& h : r.entries) rows.push_back(h.row);
  EXPECT_EQ(rows, (std::vector<std::size_t>{1, 3, 0, 2}));
}

// Independent full scan: score every row, sort everything.
RetrievalResult full_scan(const EmbeddingStore& s, std::span<const float> q, std::size_t k) {
  std::vector<Hit> all;
  for (std::size_t r = 0; r < s.count(); ++r) {
    double acc = 0;
    for (std::size_t c = 0; c < s.dim(); ++c) acc += double(s.row(r)[c]) * double(q[c]);
    all.push_back({r, static_cast<float>(acc)});
  }
  std::stable_sort(all.begin(), all.end(), [](const Hit& a, const Hit& b) { return a.score > b.score; });
  all.resize(std::min(k, all.size()));
  return {all};
}

TEST(TopK, MatchesFullScanOracle) {
  auto s = random_store(1234, 1000, 64);
  Rng rng(99);
  for (int i = 0; i < 100; ++i) {
    auto q = testing::random_unit(rng, 64);
    const std::size_t k = 1 + rng.below(20);
    EXPECT_EQ(top_k(s, q, k), full_scan(s, q, k));
  }
}

TEST(TopK, IndependentOfThreadCount) {
  auto s = random_store(77, 3000, 16);
  Rng rng(3);
  auto q = testing::random_unit(rng, 16);
  set_max_threads(1);
  auto a = top_k(s, q, 50);
  set_max_threads(4);
  auto b = top_k(s, q, 50);
  set_max_threads(1);
  EXPECT_EQ(a, b);
}

TEST(TopK, KEqualsNReturnsEveryRowOnce) {
  auto s = random_store(8, 257, 12);
  Rng rng(1);
  auto r = top_k(s, testing::random_unit(rng, 12), 257);
  std::set<std::size_t> rows;
  for (auto& h : r.entries) rows.insert(h.row);
  EXPECT_EQ(rows.size(), 257u);
  for (std::size_t i = 1; i < r.entries.size(); ++i) EXPECT_TRUE(ranks_before(r.entries[i - 1], r.entries[i]));
}

TEST(TopK, PermutationProperty) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto s = random_store(seed, 200, 8, true);
    Rng rng({seed, 1});
    std::vector<std::size_t> perm(s.count());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    rng.shuffle(std::span<std::size_t>(perm));
    std::vector<float> rows;
    std::vector<RowMeta> meta;
    for (auto p : perm) {
      rows.insert(rows.end(), s.row(p).begin(), s.row(p).end());
      meta.push_back(s.meta(p));
    }
    EmbeddingStore shuffled(s.dim(), rows, meta);

    auto q = testing::random_unit(rng, 8);
    auto a = top_k(s, q, 25), b = top_k(shuffled, q, 25);
    // Compare per distinct score: the set of ids must agree. Boundary ties
    // at the k-th score may legitimately differ, so drop the last score.
    auto group = [](const EmbeddingStore& st, const RetrievalResult& r) {
      std::map<float, std::set<std::string>> g;
      for (auto& h : r.entries) g[h.score].insert(st.meta(h.row).id);
      g.erase(r.entries.back().score);
      return g;
    };
    EXPECT_EQ(group(s, a), group(shuffled, b));
    for (std::size_t i = 0; i < a.entries.size(); ++i) EXPECT_EQ(a.entries[i].score, b.entries[i].score);
  }
}

}  // namespace
}  // namespace rr
