#pragma once

// Raster and census data model plus the region-level primitives every
// method builds on: aggregation, dasymetric rescaling and the built mask.
//
// Grids are abstract row-major rasters. Region maps use -1 for cells
// outside the study area; such cells never carry population and are
// skipped by every sum.

#include "popmap/error.hpp"
#include "popmap/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace popmap {

inline constexpr std::int32_t kOutside = -1;

template <class T>
struct Grid {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<T> values;

    Grid() = default;
    Grid(std::size_t w, std::size_t h, T fill = T{})
        : width(w), height(h), values(w * h, fill) {}

    std::size_t size() const { return values.size(); }
    T& operator()(std::size_t row, std::size_t col) { return values[row * width + col]; }
    const T& operator()(std::size_t row, std::size_t col) const { return values[row * width + col]; }

    bool operator==(const Grid&) const = default;
};

using BuildingGrid = Grid<float>;
using RegionMap = Grid<std::int32_t>;
// Population is held in double so rescaling and equivalence checks are exact
// to well below a person; files store it as f32.
using PopulationGrid = Grid<double>;

inline std::string shape_string(std::size_t w, std::size_t h) {
    return std::to_string(w) + "x" + std::to_string(h);
}

template <class A, class B>
void require_same_shape(const Grid<A>& a, const Grid<B>& b, std::string_view what) {
    if (a.width != b.width || a.height != b.height) {
        throw Error(ErrorCode::dimension_mismatch,
                    std::string(what) + ": " + shape_string(a.width, a.height) + " vs " +
                        shape_string(b.width, b.height));
    }
}

// ============================================================================
// Covariates
// ============================================================================

struct CovariateLayer {
    std::string name;
    std::vector<float> values; // NaN = nodata

    bool operator==(const CovariateLayer&) const = default;
};

class CovariateStack {
public:
    CovariateStack() = default;
    CovariateStack(std::size_t width, std::size_t height) : width_(width), height_(height) {}

    std::size_t width() const { return width_; }
    std::size_t height() const { return height_; }
    std::size_t cells() const { return width_ * height_; }
    std::size_t layer_count() const { return layers_.size(); }

    const std::vector<CovariateLayer>& layers() const { return layers_; }
    const CovariateLayer& layer(std::size_t i) const { return layers_.at(i); }
    CovariateLayer& layer(std::size_t i) { return layers_.at(i); }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        for (const auto& l : layers_) out.push_back(l.name);
        return out;
    }

    std::optional<std::size_t> find(std::string_view name) const {
        for (std::size_t i = 0; i < layers_.size(); ++i)
            if (layers_[i].name == name) return i;
        return std::nullopt;
    }

    void add_layer(std::string name, std::vector<float> values) {
        if (name.empty()) throw Error(ErrorCode::invalid_argument, "covariate layer name is empty");
        if (find(name)) throw Error(ErrorCode::invalid_argument, "duplicate covariate layer '" + name + "'");
        if (values.size() != cells()) {
            throw Error(ErrorCode::dimension_mismatch,
                        "layer '" + name + "' has " + std::to_string(values.size()) +
                            " cells, stack is " + shape_string(width_, height_));
        }
        layers_.push_back({std::move(name), std::move(values)});
    }

    bool operator==(const CovariateStack&) const = default;

private:
    std::size_t width_ = 0;
    std::size_t height_ = 0;
    std::vector<CovariateLayer> layers_;
};

// ============================================================================
// Census
// ============================================================================

struct CensusEntry {
    std::int64_t parent_id = -1;
    double count = 0.0;

    bool operator==(const CensusEntry&) const = default;
};

// Rows keyed by region id; iteration is always in ascending id order.
class CensusTable {
public:
    void add(std::int64_t region_id, std::int64_t parent_id, double count) {
        if (!(count >= 0.0) || !std::isfinite(count)) {
            throw Error(ErrorCode::negative_count,
                        "region " + std::to_string(region_id) + " has invalid count " + std::to_string(count));
        }
        if (!rows_.emplace(region_id, CensusEntry{parent_id, count}).second) {
            throw Error(ErrorCode::duplicate_region, "duplicate region_id " + std::to_string(region_id));
        }
    }

    bool contains(std::int64_t id) const { return rows_.count(id) != 0; }
    const CensusEntry& at(std::int64_t id) const {
        auto it = rows_.find(id);
        if (it == rows_.end())
            throw Error(ErrorCode::missing_region, "region " + std::to_string(id) + " not in census");
        return it->second;
    }
    double count(std::int64_t id) const { return at(id).count; }
    std::size_t size() const { return rows_.size(); }
    bool empty() const { return rows_.empty(); }

    const std::map<std::int64_t, CensusEntry>& rows() const { return rows_; }

    std::vector<std::int64_t> ids() const {
        std::vector<std::int64_t> out;
        out.reserve(rows_.size());
        for (const auto& [id, _] : rows_) out.push_back(id);
        return out;
    }

    double total() const {
        double s = 0.0;
        for (const auto& [_, e] : rows_) s += e.count;
        return s;
    }

    // Keeps only the listed ids (missing ids are ignored).
    CensusTable subset(const std::vector<std::int64_t>& keep) const {
        CensusTable out;
        for (auto id : keep) {
            auto it = rows_.find(id);
            if (it != rows_.end()) out.rows_.emplace(id, it->second);
        }
        return out;
    }

    bool operator==(const CensusTable&) const = default;

private:
    std::map<std::int64_t, CensusEntry> rows_;
};

// Child rows of `fine` must sum to their parent's count in `coarse` within
// `tolerance` persons. Throws census_inconsistency naming the first parent
// that fails, or missing_region for a dangling parent id.
inline void check_hierarchy(const CensusTable& fine, const CensusTable& coarse, double tolerance = 0.5) {
    std::map<std::int64_t, double> child_sums;
    for (const auto& [id, e] : fine.rows()) {
        if (!coarse.contains(e.parent_id)) {
            throw Error(ErrorCode::missing_region, "fine region " + std::to_string(id) + " has parent " +
                                                       std::to_string(e.parent_id) + " absent from coarse census");
        }
        child_sums[e.parent_id] += e.count;
    }
    for (const auto& [id, e] : coarse.rows()) {
        double s = child_sums.count(id) ? child_sums[id] : 0.0;
        if (std::abs(s - e.count) > tolerance) {
            throw Error(ErrorCode::census_inconsistency,
                        "coarse region " + std::to_string(id) + ": count " + std::to_string(e.count) +
                            " but children sum to " + std::to_string(s));
        }
    }
}

// ============================================================================
// Region primitives
// ============================================================================

namespace detail {

// Accumulates per-region sums with a dense table when the id range allows,
// row chunks reduced in chunk order.
template <class T, class Value>
std::map<std::int64_t, double> region_sums(const RegionMap& regions, Value&& value_at) {
    std::int32_t lo = std::numeric_limits<std::int32_t>::max();
    std::int32_t hi = std::numeric_limits<std::int32_t>::min();
    for (auto id : regions.values) {
        if (id == kOutside) continue;
        lo = std::min(lo, id);
        hi = std::max(hi, id);
    }
    std::map<std::int64_t, double> out;
    if (lo > hi) return out;

    const std::size_t range = static_cast<std::size_t>(static_cast<std::int64_t>(hi) - lo) + 1;
    const std::size_t n = regions.size();
    constexpr std::size_t kChunk = 1 << 16;
    const std::size_t chunks = chunk_count(n, kChunk);

    if (range <= (1u << 20)) {
        std::vector<std::vector<double>> partial(chunks);
        std::vector<std::vector<char>> seen(chunks);
        parallel_chunks(n, kChunk, [&](std::size_t c, std::size_t b, std::size_t e) {
            auto& sums = partial[c];
            auto& hit = seen[c];
            sums.assign(range, 0.0);
            hit.assign(range, 0);
            for (std::size_t i = b; i < e; ++i) {
                auto id = regions.values[i];
                if (id == kOutside) continue;
                std::size_t k = static_cast<std::size_t>(id - lo);
                sums[k] += static_cast<double>(value_at(i));
                hit[k] = 1;
            }
        });
        std::vector<double> total(range, 0.0);
        std::vector<char> any(range, 0);
        for (std::size_t c = 0; c < chunks; ++c) {
            for (std::size_t k = 0; k < range; ++k) {
                total[k] += partial[c][k];
                any[k] |= seen[c][k];
            }
        }
        for (std::size_t k = 0; k < range; ++k)
            if (any[k]) out[static_cast<std::int64_t>(lo) + static_cast<std::int64_t>(k)] = total[k];
        return out;
    }

    std::vector<std::map<std::int64_t, double>> partial(chunks);
    parallel_chunks(n, kChunk, [&](std::size_t c, std::size_t b, std::size_t e) {
        for (std::size_t i = b; i < e; ++i) {
            auto id = regions.values[i];
            if (id != kOutside) partial[c][id] += static_cast<double>(value_at(i));
        }
    });
    for (const auto& p : partial)
        for (const auto& [id, v] : p) out[id] += v;
    return out;
}

} // namespace detail

// Sum of grid values per region id present in `regions`.
template <class T>
std::map<std::int64_t, double> aggregate_by_region(const Grid<T>& grid, const RegionMap& regions) {
    require_same_shape(grid, regions, "aggregate_by_region");
    return detail::region_sums<T>(regions, [&](std::size_t i) { return grid.values[i]; });
}

// Flat indices of cells holding at least one building, ascending.
inline std::vector<std::size_t> built_mask(const BuildingGrid& buildings) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < buildings.size(); ++i)
        if (buildings.values[i] > 0.0f) out.push_back(i);
    return out;
}

// A region whose raw mass was zero while its census count was positive.
struct ZeroMassRegion {
    std::int64_t region_id = 0;
    double count = 0.0;
    std::size_t cells_used = 0;
    bool used_built_cells = false;
};

// Rescales `raw` inside every region so that it sums to the census count.
//
// A region with zero raw mass and a positive count is filled uniformly over
// its built cells (when `buildings` is given and it has any), otherwise over
// all of its cells; each such region is appended to `fallbacks`.
inline PopulationGrid dasymetric_adjust(const PopulationGrid& raw, const RegionMap& regions,
                                        const CensusTable& census, const BuildingGrid* buildings = nullptr,
                                        std::vector<ZeroMassRegion>* fallbacks = nullptr) {
    require_same_shape(raw, regions, "dasymetric_adjust");
    if (buildings) require_same_shape(*buildings, regions, "dasymetric_adjust buildings");
    for (double v : raw.values) {
        if (!(v >= 0.0) || !std::isfinite(v))
            throw Error(ErrorCode::invalid_argument, "dasymetric_adjust: raw grid holds a negative or non-finite value");
    }

    const auto sums = aggregate_by_region(raw, regions);
    std::map<std::int64_t, double> scale;
    std::map<std::int64_t, double> uniform_share;
    std::map<std::int64_t, bool> uniform_built_only;
    for (const auto& [id, s] : sums) {
        if (!census.contains(id))
            throw Error(ErrorCode::missing_region, "region " + std::to_string(id) + " in raster but not in census");
        double c = census.count(id);
        if (s > 0.0) {
            scale[id] = c / s;
        } else if (c > 0.0) {
            uniform_share[id] = 0.0;
        } else {
            scale[id] = 0.0;
        }
    }

    if (!uniform_share.empty()) {
        std::map<std::int64_t, std::size_t> built_cells, all_cells;
        for (std::size_t i = 0; i < regions.size(); ++i) {
            auto id = regions.values[i];
            if (id == kOutside || !uniform_share.count(id)) continue;
            ++all_cells[id];
            if (buildings && buildings->values[i] > 0.0f) ++built_cells[id];
        }
        for (auto& [id, share] : uniform_share) {
            const bool built = built_cells[id] > 0;
            const std::size_t n = built ? built_cells[id] : all_cells[id];
            share = census.count(id) / static_cast<double>(n);
            uniform_built_only[id] = built;
            if (fallbacks) fallbacks->push_back({id, census.count(id), n, built});
        }
    }

    PopulationGrid out(raw.width, raw.height, 0.0);
    for (std::size_t i = 0; i < raw.size(); ++i) {
        auto id = regions.values[i];
        if (id == kOutside) continue;
        if (auto it = scale.find(id); it != scale.end()) {
            out.values[i] = raw.values[i] * it->second;
        } else {
            bool built_only = uniform_built_only[id];
            if (!built_only || buildings->values[i] > 0.0f) out.values[i] = uniform_share[id];
        }
    }
    return out;
}

} // namespace popmap
