#pragma once

// Seeded synthetic worlds with known per-cell population. Covariates are
// low-frequency cosine mixtures, buildings are Poisson counts around urban
// blobs, regions are Voronoi cells, and true occupancy is
// softplus(bias + w . x) of the raw covariate values.

#include "popmap/error.hpp"
#include "popmap/eval.hpp"
#include "popmap/grid.hpp"
#include "popmap/io.hpp"
#include "popmap/model.hpp"

#include <cmath>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <span>
#include <random>
#include <string>
#include <vector>

namespace popmap {

inline std::vector<std::string> default_synth_covariates() {
    return {"nightlights", "mean_building_area", "settlement", "dist_roads", "dist_water", "elevation"};
}

struct SynthSpec {
    std::string name = "synth";
    std::size_t width = 96;
    std::size_t height = 96;
    std::size_t n_covariates = 6;
    std::size_t n_fine_regions = 64;
    std::size_t n_coarse_regions = 8;
    // occupancy = softplus(bias + sum_k weights[k] * covariate_k)
    double bias = 1.0;
    std::vector<double> weights{0.3, 0.2, 0.12, -0.15, -0.1, 0.06};
    std::size_t waves_per_field = 4;
    double max_frequency = 2.5;   // cycles across the grid
    std::size_t n_blobs = 6;
    double blob_peak = 6.0;       // expected buildings at a blob centre
    double blob_radius = 0.08;    // std of a blob, as a fraction of the grid side
    double background = 0.6;      // expected buildings per cell away from blobs
    double noise = 0.0;           // relative std of multiplicative census noise
    std::uint64_t seed = 0;

    std::vector<std::string> covariate_names() const {
        auto names = default_synth_covariates();
        names.resize(n_covariates);
        for (std::size_t k = 6; k < n_covariates; ++k) names[k] = "covariate_" + std::to_string(k + 1);
        return names;
    }

    void validate() const {
        if (width == 0 || height == 0) throw Error(ErrorCode::invalid_argument, "synth: empty grid");
        if (n_covariates == 0) throw Error(ErrorCode::invalid_argument, "synth: need at least one covariate");
        if (weights.size() != n_covariates)
            throw Error(ErrorCode::invalid_argument, "synth: " + std::to_string(weights.size()) + " weights for " +
                                                         std::to_string(n_covariates) + " covariates");
        if (n_fine_regions == 0 || n_coarse_regions == 0) throw Error(ErrorCode::invalid_argument, "synth: need regions");
        if (n_coarse_regions > n_fine_regions)
            throw Error(ErrorCode::invalid_argument, "synth: more coarse regions than fine regions");
        if (n_fine_regions > width * height)
            throw Error(ErrorCode::invalid_argument, "synth: " + std::to_string(n_fine_regions) + " regions exceed " +
                                                         std::to_string(width * height) + " cells");
        if (!(background >= 0.0) || !(blob_peak >= 0.0) || !(blob_radius > 0.0))
            throw Error(ErrorCode::invalid_argument, "synth: building intensity parameters must be non-negative");
        if (!(noise >= 0.0)) throw Error(ErrorCode::invalid_argument, "synth: noise must be >= 0");
    }
};

// A world whose occupancy varies about three times more than the default.
inline SynthSpec heterogeneous_synth_spec(std::uint64_t seed = 0) {
    SynthSpec s;
    s.name = "synth_hetero";
    s.weights = {0.9, 0.6, 0.36, -0.45, -0.3, 0.18};
    s.seed = seed;
    return s;
}

struct GroundTruth {
    PopulationGrid population;
    PopulationGrid occupancy;
};

struct SynthWorld {
    Dataset dataset;
    GroundTruth truth;
};

inline double synth_occupancy(const SynthSpec& spec, std::span<const double> x) {
    double z = spec.bias;
    for (std::size_t k = 0; k < x.size(); ++k) z += spec.weights[k] * x[k];
    return softplus(z);
}

inline SynthWorld generate(const SynthSpec& spec) {
    spec.validate();
    const std::size_t w = spec.width, h = spec.height, n = w * h;
    std::mt19937_64 rng(spec.seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double two_pi = 2.0 * std::numbers::pi;

    SynthWorld world;
    Dataset& d = world.dataset;
    d.name = spec.name;
    d.covariates = CovariateStack(w, h);

    // Each field has unit variance: waves of amplitude sqrt(2/M).
    const auto names = spec.covariate_names();
    std::vector<std::vector<double>> fields(spec.n_covariates, std::vector<double>(n));
    const double amp = std::sqrt(2.0 / static_cast<double>(spec.waves_per_field));
    for (std::size_t k = 0; k < spec.n_covariates; ++k) {
        for (std::size_t m = 0; m < spec.waves_per_field; ++m) {
            const double fx = (2.0 * unit(rng) - 1.0) * spec.max_frequency;
            const double fy = (2.0 * unit(rng) - 1.0) * spec.max_frequency;
            const double phase = two_pi * unit(rng);
            for (std::size_t r = 0; r < h; ++r)
                for (std::size_t c = 0; c < w; ++c) {
                    const double u = (static_cast<double>(c) + 0.5) / static_cast<double>(w);
                    const double v = (static_cast<double>(r) + 0.5) / static_cast<double>(h);
                    fields[k][r * w + c] += amp * std::cos(two_pi * (fx * u + fy * v) + phase);
                }
        }
        // Store the f32 value and generate truth from it, so the world is
        // exactly what a reader of the files sees.
        std::vector<float> stored(n);
        for (std::size_t i = 0; i < n; ++i) {
            stored[i] = static_cast<float>(fields[k][i]);
            fields[k][i] = stored[i];
        }
        d.covariates.add_layer(names[k], std::move(stored));
        d.normalization.push_back(Normalization::zscore);
    }

    // Buildings.
    struct Blob {
        double x, y;
    };
    std::vector<Blob> blobs(spec.n_blobs);
    for (auto& b : blobs) b = {unit(rng), unit(rng)};
    d.buildings = BuildingGrid(w, h, 0.0f);
    const double side = static_cast<double>(std::max(w, h));
    const double sigma = spec.blob_radius;
    for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c) {
            const double u = (static_cast<double>(c) + 0.5) / side;
            const double v = (static_cast<double>(r) + 0.5) / side;
            double lambda = spec.background;
            for (const auto& b : blobs) {
                const double dx = u - b.x * static_cast<double>(w) / side, dy = v - b.y * static_cast<double>(h) / side;
                lambda += spec.blob_peak * std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
            }
            std::poisson_distribution<int> pois(lambda);
            d.buildings(r, c) = lambda > 0.0 ? static_cast<float>(pois(rng)) : 0.0f;
        }

    // Truth.
    world.truth.occupancy = PopulationGrid(w, h);
    world.truth.population = PopulationGrid(w, h);
    std::vector<double> x(spec.n_covariates);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < spec.n_covariates; ++k) x[k] = fields[k][i];
        const double occ = synth_occupancy(spec, x);
        world.truth.occupancy.values[i] = occ;
        world.truth.population.values[i] = occ * d.buildings.values[i];
    }

    // Voronoi regions over distinct seed cells; coarse seeds are the first
    // fine seeds, so every coarse region owns at least its own fine region.
    std::vector<std::size_t> seed_cells(n);
    std::iota(seed_cells.begin(), seed_cells.end(), std::size_t{0});
    for (std::size_t i = 0; i < spec.n_fine_regions; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, n - 1);
        std::swap(seed_cells[i], seed_cells[pick(rng)]);
    }
    seed_cells.resize(spec.n_fine_regions);
    auto sq_dist = [&](std::size_t a, std::size_t b) {
        const double dr = static_cast<double>(a / w) - static_cast<double>(b / w);
        const double dc = static_cast<double>(a % w) - static_cast<double>(b % w);
        return dr * dr + dc * dc;
    };
    std::vector<std::int32_t> fine_to_coarse(spec.n_fine_regions);
    for (std::size_t f = 0; f < spec.n_fine_regions; ++f) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < spec.n_coarse_regions; ++c)
            if (sq_dist(seed_cells[f], seed_cells[c]) < sq_dist(seed_cells[f], seed_cells[best])) best = c;
        fine_to_coarse[f] = static_cast<std::int32_t>(best + 1);
    }
    d.fine_regions = RegionMap(w, h);
    RegionMap coarse(w, h);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t best = 0;
        double best_d = sq_dist(i, seed_cells[0]);
        for (std::size_t f = 1; f < spec.n_fine_regions; ++f) {
            const double dd = sq_dist(i, seed_cells[f]);
            if (dd < best_d) best_d = dd, best = f;
        }
        d.fine_regions.values[i] = static_cast<std::int32_t>(best + 1);
        coarse.values[i] = fine_to_coarse[best];
    }

    // Census: fine sums (optionally perturbed), coarse = sums of fine.
    const auto fine_sums = aggregate_by_region(world.truth.population, d.fine_regions);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::vector<double> coarse_sums(spec.n_coarse_regions, 0.0);
    for (std::size_t f = 0; f < spec.n_fine_regions; ++f) {
        const auto id = static_cast<std::int64_t>(f + 1);
        auto it = fine_sums.find(id);
        double count = it == fine_sums.end() ? 0.0 : it->second;
        if (spec.noise > 0.0) count = std::max(0.0, count * (1.0 + spec.noise * gauss(rng)));
        d.fine_census.add(id, fine_to_coarse[f], count);
        coarse_sums[static_cast<std::size_t>(fine_to_coarse[f] - 1)] += count;
    }
    CensusTable coarse_census;
    for (std::size_t c = 0; c < spec.n_coarse_regions; ++c)
        coarse_census.add(static_cast<std::int64_t>(c + 1), -1, coarse_sums[c]);
    d.coarse_regions = std::move(coarse);
    d.coarse_census = std::move(coarse_census);
    return world;
}

struct OracleReport {
    double cell_mae = 0.0;
    MetricsReport fine;
};

// Compares a predicted grid against the known truth, per cell and on fine
// regions.
inline OracleReport oracle_metrics(const PopulationGrid& predicted, const SynthWorld& world) {
    require_same_shape(predicted, world.truth.population, "oracle_metrics");
    OracleReport r;
    double s = 0.0;
    for (std::size_t i = 0; i < predicted.size(); ++i) s += std::abs(predicted.values[i] - world.truth.population.values[i]);
    r.cell_mae = s / static_cast<double>(predicted.size());
    r.fine = compute_metrics(totals_for_census(predicted, world.dataset.fine_regions, world.dataset.fine_census),
                             world.dataset.fine_census);
    return r;
}

// Writes the dataset plus truth_population.pgrd and truth_occupancy.pgrd;
// returns the manifest path.
inline fs::path save_world(const SynthWorld& world, const fs::path& dir) {
    fs::path manifest = save_dataset(world.dataset, dir);
    save_grid(world.truth.population, dir / "truth_population.pgrd");
    save_grid(world.truth.occupancy, dir / "truth_occupancy.pgrd");
    return manifest;
}

} // namespace popmap
