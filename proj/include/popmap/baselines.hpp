#pragma once

// Learning-free disaggregation: building-count weights and a feature-space
// Markov random field solved with iterated conditional modes (ICM).

#include "popmap/error.hpp"
#include "popmap/grid.hpp"
#include "popmap/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace popmap {

// Census counts spread in proportion to building counts.
inline PopulationGrid building_disaggregate(const BuildingGrid& buildings, const RegionMap& regions,
                                            const CensusTable& census,
                                            std::vector<ZeroMassRegion>* fallbacks = nullptr) {
    require_same_shape(buildings, regions, "building_disaggregate");
    PopulationGrid raw(buildings.width, buildings.height);
    for (std::size_t i = 0; i < buildings.size(); ++i) raw.values[i] = buildings.values[i];
    return dasymetric_adjust(raw, regions, census, &buildings, fallbacks);
}

// Name of the pseudo-layer that refers to the building grid itself.
inline constexpr std::string_view kBuildingFeature = "buildings";

struct MrfConfig {
    double lambda = 1.0;
    std::size_t k = 8;
    std::vector<std::string> features{"buildings", "mean_building_area", "nightlights"};
    std::size_t max_sweeps = 100;
    double tolerance = 1e-5; // relative energy improvement per sweep
    double step = 0.01;      // multiplicative move size
    std::size_t recompute_every = 10;

    void validate() const {
        if (!(lambda > 0.0)) throw Error(ErrorCode::invalid_argument, "mrf: lambda must be > 0");
        if (k < 1) throw Error(ErrorCode::invalid_argument, "mrf: k must be >= 1");
        if (!(step > 0.0 && step < 1.0)) throw Error(ErrorCode::invalid_argument, "mrf: step factor must lie in (0,1)");
        if (features.empty()) throw Error(ErrorCode::invalid_argument, "mrf: no feature layers");
        if (!(tolerance >= 0.0)) throw Error(ErrorCode::invalid_argument, "mrf: tolerance must be >= 0");
    }
};

// Directed k-nearest-neighbour graph over built cells. Node n is the cell
// `cells[n]`; nodes are in ascending cell order.
struct KnnGraph {
    std::vector<std::size_t> cells;
    std::vector<std::vector<std::size_t>> neighbors;

    std::size_t size() const { return cells.size(); }
};

// Exact k-NN on `points` (row-major, n x dim): Euclidean distance, ties
// broken by lower index, no self loops.
inline std::vector<std::vector<std::size_t>> exact_knn(std::span<const double> points, std::size_t n,
                                                       std::size_t dim, std::size_t k) {
    std::vector<std::vector<std::size_t>> out(n);
    const std::size_t kk = std::min(k, n - 1);
    parallel_chunks(n, 64, [&](std::size_t, std::size_t b, std::size_t e) {
        std::vector<std::pair<double, std::size_t>> cand;
        cand.reserve(n);
        for (std::size_t i = b; i < e; ++i) {
            cand.clear();
            const double* pi = points.data() + i * dim;
            for (std::size_t j = 0; j < n; ++j) {
                if (j == i) continue;
                const double* pj = points.data() + j * dim;
                double d = 0.0;
                for (std::size_t t = 0; t < dim; ++t) d += (pi[t] - pj[t]) * (pi[t] - pj[t]);
                cand.emplace_back(d, j);
            }
            std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(kk), cand.end());
            out[i].reserve(kk);
            for (std::size_t t = 0; t < kk; ++t) out[i].push_back(cand[t].second);
        }
    });
    return out;
}

// Graph over built cells (inside `regions` when given) using z-scored
// feature layers; "buildings" names the building grid.
inline KnnGraph build_knn_graph(const CovariateStack& stack, const BuildingGrid& buildings, const MrfConfig& cfg,
                                const RegionMap* regions = nullptr) {
    cfg.validate();
    if (stack.width() != buildings.width || stack.height() != buildings.height)
        throw Error(ErrorCode::dimension_mismatch, "build_knn_graph: covariates vs buildings shape");
    std::vector<const float*> layers;
    for (const auto& name : cfg.features) {
        if (name == kBuildingFeature) {
            layers.push_back(buildings.values.data());
        } else if (auto idx = stack.find(name)) {
            layers.push_back(stack.layer(*idx).values.data());
        } else {
            throw Error(ErrorCode::unknown_layer, "mrf feature '" + name + "' is not a covariate layer");
        }
    }

    KnnGraph g;
    for (auto i : built_mask(buildings))
        if (!regions || regions->values[i] != kOutside) g.cells.push_back(i);
    const std::size_t n = g.cells.size();
    if (n < 2) throw Error(ErrorCode::invalid_argument, "build_knn_graph: need at least 2 built cells, have " + std::to_string(n));

    const std::size_t dim = layers.size();
    std::vector<double> pts(n * dim);
    for (std::size_t t = 0; t < dim; ++t) {
        double sum = 0.0;
        std::size_t cnt = 0;
        for (auto c : g.cells)
            if (!std::isnan(layers[t][c])) sum += layers[t][c], ++cnt;
        double mean = cnt ? sum / static_cast<double>(cnt) : 0.0;
        double ss = 0.0;
        for (auto c : g.cells)
            if (!std::isnan(layers[t][c])) ss += (layers[t][c] - mean) * (layers[t][c] - mean);
        double sd = cnt ? std::sqrt(ss / static_cast<double>(cnt)) : 0.0;
        if (!(sd > 0.0)) sd = 1.0;
        for (std::size_t j = 0; j < n; ++j) {
            float v = layers[t][g.cells[j]];
            pts[j * dim + t] = std::isnan(v) ? 0.0 : (v - mean) / sd;
        }
    }
    g.neighbors = exact_knn(pts, n, dim, cfg.k);
    return g;
}

// Pairwise term over directed edges plus lambda times the census mismatch of
// every region owning at least one node.
inline double mrf_energy(std::span<const double> p, const KnnGraph& graph, std::span<const std::int64_t> node_region,
                         const CensusTable& census, double lambda) {
    double pair = 0.0;
    for (std::size_t i = 0; i < graph.size(); ++i)
        for (auto k : graph.neighbors[i]) pair += std::abs(p[i] - p[k]);
    std::map<std::int64_t, double> sums;
    for (std::size_t i = 0; i < graph.size(); ++i) sums[node_region[i]] += p[i];
    double data = 0.0;
    for (const auto& [id, s] : sums) data += std::abs(census.count(id) - s);
    return pair + lambda * data;
}

struct MrfResult {
    PopulationGrid grid;
    std::vector<double> energy; // initial energy, then one entry per sweep
    std::size_t sweeps = 0;
    bool converged = false;
    double max_drift = 0.0; // relative gap between incremental and recomputed energy
};

// ICM from a given start: raster-order sweeps with immediate updates, each
// cell trying p*(1+step) and p/(1+step) and keeping the lowest energy (ties
// keep the current value).
inline MrfResult mrf_icm(std::vector<double> p, const KnnGraph& graph, std::span<const std::int64_t> node_region,
                         const CensusTable& census, const MrfConfig& cfg, std::size_t width, std::size_t height) {
    cfg.validate();
    const std::size_t n = graph.size();
    std::vector<std::vector<std::size_t>> incoming(n);
    for (std::size_t i = 0; i < n; ++i)
        for (auto k : graph.neighbors[i]) incoming[k].push_back(i);

    std::map<std::int64_t, double> region_sum;
    for (std::size_t i = 0; i < n; ++i) region_sum[node_region[i]] += p[i];
    std::vector<double*> sum_of(n);
    std::vector<double> count_of(n);
    for (std::size_t i = 0; i < n; ++i) {
        sum_of[i] = &region_sum[node_region[i]];
        count_of[i] = census.count(node_region[i]);
    }

    MrfResult res;
    double energy = mrf_energy(p, graph, node_region, census, cfg.lambda);
    res.energy.push_back(energy);
    const double up_factor = 1.0 + cfg.step;

    auto delta_for = [&](std::size_t i, double next) {
        const double cur = p[i];
        double d = 0.0;
        for (auto k : graph.neighbors[i]) d += std::abs(next - p[k]) - std::abs(cur - p[k]);
        for (auto j : incoming[i]) d += std::abs(p[j] - next) - std::abs(p[j] - cur);
        const double s = *sum_of[i];
        d += cfg.lambda * (std::abs(count_of[i] - (s - cur + next)) - std::abs(count_of[i] - s));
        return d;
    };

    for (std::size_t sweep = 1; sweep <= cfg.max_sweeps; ++sweep) {
        const double before = energy;
        const double threshold = 1e-12 * std::max(1.0, std::abs(energy));
        std::size_t moves = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const double cur = p[i];
            if (cur == 0.0) continue;
            const double up = cur * up_factor, down = cur / up_factor;
            const double d_up = delta_for(i, up);
            const double d_down = delta_for(i, down);
            double best = 0.0, next = cur;
            if (d_up < -threshold) best = d_up, next = up;
            if (d_down < -threshold && d_down < best) best = d_down, next = down;
            if (next != cur) {
                *sum_of[i] += next - cur;
                p[i] = next;
                energy += best;
                ++moves;
            }
        }
        if (cfg.recompute_every && sweep % cfg.recompute_every == 0) {
            const double full = mrf_energy(p, graph, node_region, census, cfg.lambda);
            res.max_drift = std::max(res.max_drift, std::abs(full - energy) / std::max(1.0, std::abs(full)));
            energy = full;
            for (auto& [id, s] : region_sum) s = 0.0;
            for (std::size_t i = 0; i < n; ++i) *sum_of[i] += p[i];
        }
        if (energy > before + 1e-9 * std::max(1.0, std::abs(before)))
            throw Error(ErrorCode::numeric_failure, "ICM energy increased in sweep " + std::to_string(sweep));
        res.energy.push_back(energy);
        res.sweeps = sweep;
        const double rel = (before - energy) / std::max(std::abs(before), 1e-300);
        if (moves == 0 || rel < cfg.tolerance) {
            res.converged = true;
            break;
        }
    }

    res.grid = PopulationGrid(width, height, 0.0);
    for (std::size_t i = 0; i < n; ++i) res.grid.values[graph.cells[i]] = p[i];
    return res;
}

// MRF disaggregation started from building-count disaggregation.
inline MrfResult mrf_disaggregate(const CovariateStack& stack, const BuildingGrid& buildings, const RegionMap& regions,
                                  const CensusTable& census, const MrfConfig& cfg) {
    require_same_shape(buildings, regions, "mrf_disaggregate");
    const KnnGraph graph = build_knn_graph(stack, buildings, cfg, &regions);
    const PopulationGrid init = building_disaggregate(buildings, regions, census);
    std::vector<double> p(graph.size());
    std::vector<std::int64_t> node_region(graph.size());
    for (std::size_t i = 0; i < graph.size(); ++i) {
        p[i] = init.values[graph.cells[i]];
        node_region[i] = regions.values[graph.cells[i]];
    }
    return mrf_icm(std::move(p), graph, node_region, census, cfg, buildings.width, buildings.height);
}

} // namespace popmap
