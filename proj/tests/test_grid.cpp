#include "popmap/grid.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <random>

using namespace popmap;

namespace {

PopulationGrid grid_of(std::size_t w, std::size_t h, std::vector<double> v) {
    PopulationGrid g(w, h);
    g.values = std::move(v);
    return g;
}

RegionMap regions_of(std::size_t w, std::size_t h, std::vector<std::int32_t> v) {
    RegionMap r(w, h);
    r.values = std::move(v);
    return r;
}

// Cell-by-cell loop, no chunking or dense tables.
std::map<std::int64_t, double> naive_sums(const PopulationGrid& g, const RegionMap& r) {
    std::map<std::int64_t, double> out;
    for (std::size_t row = 0; row < g.height; ++row)
        for (std::size_t col = 0; col < g.width; ++col)
            if (r(row, col) != kOutside) out[r(row, col)] += g(row, col);
    return out;
}

} // namespace

TEST(Aggregate, SumsPerRegion) {
    auto sums = aggregate_by_region(grid_of(2, 2, {1, 2, 3, 4}), regions_of(2, 2, {0, 0, 1, 1}));
    EXPECT_EQ(sums, (std::map<std::int64_t, double>{{0, 3.0}, {1, 7.0}}));
}

TEST(Aggregate, SingleRegion) {
    PopulationGrid g(3, 2, 7.0);
    auto sums = aggregate_by_region(g, RegionMap(3, 2, 5));
    ASSERT_EQ(sums.size(), 1u);
    EXPECT_DOUBLE_EQ(sums.at(5), 42.0);
}

TEST(Aggregate, MatchesLoopOracle) {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u(0.0, 100.0);
    std::uniform_int_distribution<int> id(-1, 6);
    PopulationGrid g(16, 16);
    RegionMap r(16, 16);
    for (auto& v : g.values) v = u(rng);
    for (auto& v : r.values) v = id(rng);
    auto got = aggregate_by_region(g, r);
    auto want = naive_sums(g, r);
    ASSERT_EQ(got.size(), want.size());
    for (const auto& [k, v] : want) EXPECT_NEAR(got.at(k), v, 1e-9);
}

TEST(Aggregate, SparseIdsUseMapPath) {
    auto r = regions_of(2, 2, {0, 5000000, 5000000, kOutside});
    auto sums = aggregate_by_region(grid_of(2, 2, {1, 2, 3, 4}), r);
    EXPECT_EQ(sums, (std::map<std::int64_t, double>{{0, 1.0}, {5000000, 5.0}}));
}

TEST(Aggregate, OutsideCellsIgnoredAndAbsentIdsAbsent) {
    auto sums = aggregate_by_region(grid_of(3, 1, {9, 1, 2}), regions_of(3, 1, {kOutside, 4, 4}));
    EXPECT_EQ(sums, (std::map<std::int64_t, double>{{4, 3.0}}));
}

TEST(Aggregate, DimensionMismatchNamesBothShapes) {
    try {
        aggregate_by_region(PopulationGrid(2, 3), RegionMap(3, 2));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::dimension_mismatch);
        EXPECT_NE(std::string(e.what()).find("2x3"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("3x2"), std::string::npos);
    }
}

TEST(Aggregate, Linear) {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0.0, 10.0);
    std::uniform_int_distribution<int> id(0, 4);
    for (int trial = 0; trial < 20; ++trial) {
        PopulationGrid g1(9, 7), g2(9, 7), mix(9, 7);
        RegionMap r(9, 7);
        for (auto& v : r.values) v = id(rng);
        const double a = u(rng);
        for (std::size_t i = 0; i < g1.size(); ++i) {
            g1.values[i] = u(rng);
            g2.values[i] = u(rng);
            mix.values[i] = a * g1.values[i] + g2.values[i];
        }
        auto s1 = aggregate_by_region(g1, r), s2 = aggregate_by_region(g2, r), sm = aggregate_by_region(mix, r);
        for (const auto& [k, v] : sm) EXPECT_NEAR(v, a * s1.at(k) + s2.at(k), 1e-9 * (1.0 + std::abs(v)));
    }
}

TEST(Adjust, ProportionalSplit) {
    CensusTable c;
    c.add(1, -1, 100);
    auto out = dasymetric_adjust(grid_of(2, 1, {1, 3}), regions_of(2, 1, {1, 1}), c);
    EXPECT_DOUBLE_EQ(out.values[0], 25.0);
    EXPECT_DOUBLE_EQ(out.values[1], 75.0);
}

TEST(Adjust, ZeroMassFallbackOverBuiltCells) {
    CensusTable c;
    c.add(1, -1, 10);
    BuildingGrid b(3, 1);
    b.values = {2, 0, 1};
    std::vector<ZeroMassRegion> fallbacks;
    auto out = dasymetric_adjust(PopulationGrid(3, 1, 0.0), RegionMap(3, 1, 1), c, &b, &fallbacks);
    EXPECT_EQ(out.values, (std::vector<double>{5, 0, 5}));
    ASSERT_EQ(fallbacks.size(), 1u);
    EXPECT_EQ(fallbacks[0].region_id, 1);
    EXPECT_TRUE(fallbacks[0].used_built_cells);
    EXPECT_EQ(fallbacks[0].cells_used, 2u);
}

TEST(Adjust, ZeroMassFallbackOverAllCellsWithoutBuildings) {
    CensusTable c;
    c.add(1, -1, 9);
    BuildingGrid b(3, 1, 0.0f);
    std::vector<ZeroMassRegion> fallbacks;
    auto out = dasymetric_adjust(PopulationGrid(3, 1, 0.0), RegionMap(3, 1, 1), c, &b, &fallbacks);
    EXPECT_EQ(out.values, (std::vector<double>{3, 3, 3}));
    ASSERT_EQ(fallbacks.size(), 1u);
    EXPECT_FALSE(fallbacks[0].used_built_cells);
}

TEST(Adjust, ZeroCountZeroMassStaysZero) {
    CensusTable c;
    c.add(1, -1, 0);
    auto out = dasymetric_adjust(PopulationGrid(2, 1, 0.0), RegionMap(2, 1, 1), c);
    EXPECT_EQ(out.values, (std::vector<double>{0, 0}));
}

TEST(Adjust, MissingCensusRowIsError) {
    CensusTable c;
    c.add(1, -1, 5);
    try {
        dasymetric_adjust(grid_of(2, 1, {1, 1}), regions_of(2, 1, {1, 2}), c);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::missing_region);
    }
}

TEST(Adjust, NegativeRawRejected) {
    CensusTable c;
    c.add(1, -1, 5);
    EXPECT_THROW(dasymetric_adjust(grid_of(2, 1, {1, -1}), RegionMap(2, 1, 1), c), Error);
}

class AdjustProperty : public ::testing::TestWithParam<int> {};

TEST_P(AdjustProperty, ConservesMassAndIsIdempotent) {
    std::mt19937_64 rng(static_cast<std::uint64_t>(GetParam()));
    std::uniform_real_distribution<double> u(0.0, 50.0);
    std::uniform_int_distribution<int> id(-1, 2);
    PopulationGrid raw(12, 10);
    RegionMap r(12, 10);
    BuildingGrid b(12, 10);
    for (std::size_t i = 0; i < raw.size(); ++i) {
        r.values[i] = id(rng);
        b.values[i] = static_cast<float>(rng() % 3);
        // Region 2 is left with zero raw mass to exercise the fallback.
        raw.values[i] = r.values[i] == 2 ? 0.0 : u(rng) * (rng() % 2);
    }
    CensusTable c;
    for (int k = 0; k < 3; ++k) c.add(k, -1, 1000.0 * (k + 1) + u(rng));
    auto once = dasymetric_adjust(raw, r, c, &b);
    auto sums = aggregate_by_region(once, r);
    for (const auto& [k, v] : sums) EXPECT_NEAR(v, c.count(k), 1e-6 * c.count(k));
    for (std::size_t i = 0; i < r.size(); ++i)
        if (r.values[i] == kOutside) {
            EXPECT_EQ(once.values[i], 0.0);
        }
    auto twice = dasymetric_adjust(once, r, c, &b);
    for (std::size_t i = 0; i < once.size(); ++i) EXPECT_NEAR(twice.values[i], once.values[i], 1e-12 * (1.0 + once.values[i]));
}

INSTANTIATE_TEST_SUITE_P(Seeds, AdjustProperty, ::testing::Range(0, 10));

TEST(BuiltMask, Scan) {
    BuildingGrid b(2, 2);
    b.values = {0, 1, 2, 0};
    EXPECT_EQ(built_mask(b), (std::vector<std::size_t>{1, 2}));
    EXPECT_TRUE(built_mask(BuildingGrid(4, 4, 0.0f)).empty());
}

TEST(BuiltMask, PartitionMatchesDoubleScan) {
    std::mt19937_64 rng(5);
    BuildingGrid b(64, 64);
    for (auto& v : b.values) v = (rng() % 10 == 0) ? static_cast<float>(1 + rng() % 4) : 0.0f;
    auto mask = built_mask(b);
    std::vector<std::size_t> built, empty;
    for (std::size_t i = 0; i < b.size(); ++i) (b.values[i] > 0 ? built : empty).push_back(i);
    EXPECT_EQ(mask, built);
    EXPECT_EQ(mask.size() + empty.size(), b.size());
    EXPECT_TRUE(std::is_sorted(mask.begin(), mask.end()));
}

TEST(Census, Invariants) {
    CensusTable c;
    c.add(3, -1, 1.5);
    EXPECT_THROW(c.add(3, -1, 2.0), Error);
    EXPECT_THROW(c.add(4, -1, -5.0), Error);
    EXPECT_THROW(c.add(5, -1, std::nan("")), Error);
    EXPECT_EQ(c.size(), 1u);
}

TEST(Census, HierarchyTolerance) {
    CensusTable fine, coarse;
    fine.add(1, 100, 10);
    fine.add(2, 100, 20);
    coarse.add(100, -1, 30.4);
    EXPECT_NO_THROW(check_hierarchy(fine, coarse));
    CensusTable bad;
    bad.add(100, -1, 31);
    try {
        check_hierarchy(fine, bad);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::census_inconsistency);
    }
}

TEST(Covariates, StackInvariants) {
    CovariateStack s(2, 2);
    s.add_layer("a", {1, 2, 3, 4});
    EXPECT_THROW(s.add_layer("a", {1, 2, 3, 4}), Error);
    EXPECT_THROW(s.add_layer("", {1, 2, 3, 4}), Error);
    EXPECT_THROW(s.add_layer("b", {1, 2, 3}), Error);
    EXPECT_EQ(s.find("a"), std::optional<std::size_t>(0));
    EXPECT_FALSE(s.find("b"));
}
