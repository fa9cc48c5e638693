#pragma once

// Evaluation harness: region-level metrics, coarse-boundary folds, the
// coarse / fine / transfer / pooled protocols and permutation importance.

#include "popmap/baselines.hpp"
#include "popmap/error.hpp"
#include "popmap/grid.hpp"
#include "popmap/io.hpp"
#include "popmap/model.hpp"
#include "popmap/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

namespace popmap {

// ============================================================================
// Metrics
// ============================================================================

struct MetricsReport {
    double r2 = 0.0;
    double mae = 0.0;
    double mape = 0.0;          // percent, over regions with a positive count
    std::size_t n_regions = 0;
    std::size_t n_excluded_mape = 0;
    double mean_truth = 0.0;
    std::string r2_note;        // set when R^2 is undefined (NaN)
};

// R^2, MAE and MAPE of predicted region totals against census counts. The
// key sets must be identical.
inline MetricsReport compute_metrics(const std::map<std::int64_t, double>& predicted, const CensusTable& truth) {
    if (predicted.size() != truth.size())
        throw Error(ErrorCode::invalid_argument, "compute_metrics: " + std::to_string(predicted.size()) +
                                                     " predictions vs " + std::to_string(truth.size()) + " census rows");
    for (const auto& [id, _] : predicted)
        if (!truth.contains(id)) throw Error(ErrorCode::invalid_argument, "compute_metrics: region " + std::to_string(id) + " not in truth");
    if (truth.empty()) throw Error(ErrorCode::invalid_argument, "compute_metrics: no regions");

    MetricsReport m;
    m.n_regions = truth.size();
    m.mean_truth = truth.total() / static_cast<double>(m.n_regions);
    double ss_res = 0.0, ss_tot = 0.0, abs_sum = 0.0, pct_sum = 0.0;
    for (const auto& [id, e] : truth.rows()) {
        const double c = e.count, chat = predicted.at(id);
        ss_res += (c - chat) * (c - chat);
        ss_tot += (c - m.mean_truth) * (c - m.mean_truth);
        abs_sum += std::abs(c - chat);
        if (c > 0.0) pct_sum += std::abs((c - chat) / c);
        else ++m.n_excluded_mape;
    }
    m.mae = abs_sum / static_cast<double>(m.n_regions);
    const std::size_t n_pct = m.n_regions - m.n_excluded_mape;
    m.mape = n_pct ? 100.0 * pct_sum / static_cast<double>(n_pct) : std::numeric_limits<double>::quiet_NaN();
    if (ss_tot > 0.0) {
        m.r2 = 1.0 - ss_res / ss_tot;
    } else {
        m.r2 = std::numeric_limits<double>::quiet_NaN();
        m.r2_note = "constant truth vector, R^2 undefined";
    }
    return m;
}

// Region totals of `grid` for every census row (zero where the region holds
// no cells).
template <class T>
std::map<std::int64_t, double> totals_for_census(const Grid<T>& grid, const RegionMap& regions, const CensusTable& census) {
    const auto agg = aggregate_by_region(grid, regions);
    std::map<std::int64_t, double> out;
    for (const auto& [id, _] : census.rows()) {
        auto it = agg.find(id);
        out[id] = it == agg.end() ? 0.0 : it->second;
    }
    return out;
}

// ============================================================================
// Folds
// ============================================================================

struct FoldRoles {
    std::size_t test = 0;
    std::size_t val = 1;
};

struct FoldPlan {
    std::size_t n_folds = 5;
    std::map<std::int64_t, std::size_t> coarse_fold;

    std::size_t fold_of_coarse(std::int64_t id) const {
        auto it = coarse_fold.find(id);
        if (it == coarse_fold.end()) throw Error(ErrorCode::missing_region, "coarse region " + std::to_string(id) + " has no fold");
        return it->second;
    }
    std::size_t fold_of_fine(std::int64_t fine_id, const CensusTable& fine) const {
        return fold_of_coarse(fine.at(fine_id).parent_id);
    }
    // Rotation r: test fold r, validation fold r+1, the rest train.
    FoldRoles roles(std::size_t rotation) const { return {rotation % n_folds, (rotation + 1) % n_folds}; }

    bool operator==(const FoldPlan&) const = default;
};

inline FoldPlan make_folds(const CensusTable& coarse, std::size_t n_folds, std::uint64_t seed) {
    if (n_folds < 2) throw Error(ErrorCode::invalid_argument, "make_folds: need at least 2 folds");
    if (coarse.size() < n_folds) {
        throw Error(ErrorCode::invalid_argument, "make_folds: " + std::to_string(coarse.size()) + " coarse regions for " +
                                                     std::to_string(n_folds) + " folds");
    }
    auto ids = coarse.ids();
    std::mt19937_64 rng(seed);
    std::shuffle(ids.begin(), ids.end(), rng);
    FoldPlan plan;
    plan.n_folds = n_folds;
    for (std::size_t i = 0; i < ids.size(); ++i) plan.coarse_fold[ids[i]] = i % n_folds;
    return plan;
}

// ============================================================================
// Protocols
// ============================================================================

enum class Protocol { coarse, fine, transfer, pooled };

inline std::string_view protocol_name(Protocol p) {
    switch (p) {
    case Protocol::coarse: return "coarse";
    case Protocol::fine: return "fine";
    case Protocol::transfer: return "transfer";
    case Protocol::pooled: return "pooled";
    }
    return "?";
}

inline Protocol parse_protocol(std::string_view s) {
    if (s == "coarse") return Protocol::coarse;
    if (s == "fine") return Protocol::fine;
    if (s == "transfer") return Protocol::transfer;
    if (s == "pooled") return Protocol::pooled;
    throw Error(ErrorCode::usage, "unknown protocol '" + std::string(s) + "'");
}

struct ProtocolConfig {
    Protocol protocol = Protocol::coarse;
    TrainConfig train;
    std::size_t n_folds = 5;
    std::uint64_t seed = 0;
    std::vector<std::size_t> rotations; // empty = all folds
    std::string holdout;                // transfer: dataset name, empty = last
    std::size_t transfer_repeats = 5;
    double val_fraction = 0.2;
};

// What a method sees in one rotation.
struct RotationContext {
    std::size_t rotation = 0;
    std::uint64_t seed = 0;
    std::vector<SplitSpec> splits;            // supervision per training dataset
    std::vector<const Dataset*> targets;      // datasets to predict
};

// Produces one raw population grid per target dataset.
using Predictor = std::function<std::vector<PopulationGrid>(const RotationContext&)>;

struct RegionResult {
    std::string dataset;
    std::int64_t region_id = 0;
    double truth = 0.0;
    double predicted = 0.0;
};

struct RotationReport {
    std::size_t rotation = 0;
    std::uint64_t seed = 0;
    MetricsReport metrics;
    std::vector<RegionResult> regions;
};

struct ProtocolReport {
    Protocol protocol = Protocol::coarse;
    std::vector<RotationReport> rotations;
    MetricsReport pooled;
    MetricsReport mean, stddev;
};

// The learned occupancy model as a Predictor.
inline Predictor model_predictor(TrainConfig cfg) {
    return [cfg](const RotationContext& ctx) {
        TrainConfig c = cfg;
        c.seed = ctx.seed;
        FitResult fitted = fit(ctx.splits, c);
        std::vector<PopulationGrid> out;
        for (const auto* d : ctx.targets)
            out.push_back(predict_population(fitted.params, d->covariates, d->buildings, &d->fine_regions));
        return out;
    };
}

// Building counts as raw weights.
inline Predictor building_predictor() {
    return [](const RotationContext& ctx) {
        std::vector<PopulationGrid> out;
        for (const auto* d : ctx.targets) {
            PopulationGrid g(d->width(), d->height(), 0.0);
            for (std::size_t i = 0; i < g.size(); ++i)
                if (d->fine_regions.values[i] != kOutside) g.values[i] = d->buildings.values[i];
            out.push_back(std::move(g));
        }
        return out;
    };
}

// MRF disaggregation against the supervision-level census of each target.
inline Predictor mrf_predictor(MrfConfig cfg, Level level) {
    return [cfg, level](const RotationContext& ctx) {
        std::vector<PopulationGrid> out;
        for (const auto* d : ctx.targets)
            out.push_back(mrf_disaggregate(d->covariates, d->buildings, d->regions(level), d->census(level), cfg).grid);
        return out;
    };
}

namespace detail {

inline MetricsReport mean_of(const std::vector<RotationReport>& rs, bool stddev) {
    MetricsReport m;
    const double n = static_cast<double>(rs.size());
    auto stat = [&](auto get) {
        double mean = 0.0;
        for (const auto& r : rs) mean += get(r.metrics);
        mean /= n;
        if (!stddev) return mean;
        double ss = 0.0;
        for (const auto& r : rs) ss += (get(r.metrics) - mean) * (get(r.metrics) - mean);
        return std::sqrt(ss / n);
    };
    m.r2 = stat([](const MetricsReport& x) { return x.r2; });
    m.mae = stat([](const MetricsReport& x) { return x.mae; });
    m.mape = stat([](const MetricsReport& x) { return x.mape; });
    m.n_regions = rs.empty() ? 0 : rs.front().metrics.n_regions;
    return m;
}

inline MetricsReport metrics_of(const std::vector<RegionResult>& rows) {
    // Keys must be unique across datasets; index rows positionally.
    std::map<std::int64_t, double> pred;
    CensusTable truth;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        pred[static_cast<std::int64_t>(i)] = rows[i].predicted;
        truth.add(static_cast<std::int64_t>(i), -1, rows[i].truth);
    }
    return compute_metrics(pred, truth);
}

// Evaluates adjusted (or raw) predictions on the fine regions accepted by
// `keep`.
template <class Keep>
std::vector<RegionResult> evaluate_fine(const Dataset& d, const PopulationGrid& raw, bool adjust, Keep&& keep) {
    PopulationGrid grid = raw;
    if (adjust && d.has_coarse()) grid = dasymetric_adjust(raw, *d.coarse_regions, *d.coarse_census, &d.buildings);
    const auto totals = totals_for_census(grid, d.fine_regions, d.fine_census);
    std::vector<RegionResult> out;
    for (const auto& [id, e] : d.fine_census.rows())
        if (keep(id)) out.push_back({d.name, id, e.count, totals.at(id)});
    return out;
}

} // namespace detail

// Runs an evaluation protocol.
//
// coarse: supervise with coarse counts of the train folds, adjust with
//         coarse counts, score fine regions of the test fold.
// fine:   same geography, supervised with fine counts.
// pooled: the fine protocol over several datasets trained jointly.
// transfer: train on every dataset but the held-out one (80/20 region
//         split), score raw predictions on the held-out fine regions,
//         repeated over seeds.
inline ProtocolReport run_protocol(const std::vector<const Dataset*>& datasets, const ProtocolConfig& cfg,
                                   const Predictor& predictor) {
    if (datasets.empty()) throw Error(ErrorCode::invalid_argument, "run_protocol: no datasets");
    ProtocolReport report;
    report.protocol = cfg.protocol;
    std::vector<RegionResult> all_test;

    if (cfg.protocol == Protocol::transfer) {
        if (datasets.size() < 2) throw Error(ErrorCode::invalid_argument, "transfer protocol needs at least two datasets");
        std::size_t held = datasets.size() - 1;
        if (!cfg.holdout.empty()) {
            auto it = std::find_if(datasets.begin(), datasets.end(), [&](const Dataset* d) { return d->name == cfg.holdout; });
            if (it == datasets.end()) throw Error(ErrorCode::invalid_argument, "transfer: no dataset named '" + cfg.holdout + "'");
            held = static_cast<std::size_t>(it - datasets.begin());
        }
        for (std::size_t rep = 0; rep < cfg.transfer_repeats; ++rep) {
            RotationContext ctx;
            ctx.rotation = rep;
            ctx.seed = cfg.seed + rep;
            std::mt19937_64 rng(ctx.seed);
            for (std::size_t i = 0; i < datasets.size(); ++i) {
                if (i == held) continue;
                auto ids = datasets[i]->fine_census.ids();
                std::shuffle(ids.begin(), ids.end(), rng);
                std::size_t n_val = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(cfg.val_fraction * static_cast<double>(ids.size()))));
                if (n_val >= ids.size()) throw Error(ErrorCode::invalid_argument, "transfer: dataset '" + datasets[i]->name + "' too small to split");
                SplitSpec s{datasets[i], Level::fine, {ids.begin() + static_cast<std::ptrdiff_t>(n_val), ids.end()},
                            {ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_val)}};
                std::sort(s.train.begin(), s.train.end());
                std::sort(s.val.begin(), s.val.end());
                ctx.splits.push_back(std::move(s));
            }
            ctx.targets = {datasets[held]};
            auto grids = predictor(ctx);
            RotationReport rr;
            rr.rotation = rep;
            rr.seed = ctx.seed;
            rr.regions = detail::evaluate_fine(*datasets[held], grids.at(0), false, [](std::int64_t) { return true; });
            rr.metrics = detail::metrics_of(rr.regions);
            report.rotations.push_back(std::move(rr));
        }
        report.pooled = report.rotations.front().metrics;
        report.mean = detail::mean_of(report.rotations, false);
        report.stddev = detail::mean_of(report.rotations, true);
        return report;
    }

    if ((cfg.protocol == Protocol::coarse || cfg.protocol == Protocol::fine) && datasets.size() != 1)
        throw Error(ErrorCode::invalid_argument, std::string(protocol_name(cfg.protocol)) + " protocol takes exactly one dataset");
    const Level level = cfg.protocol == Protocol::coarse ? Level::coarse : Level::fine;

    std::vector<FoldPlan> plans;
    for (const auto* d : datasets) {
        if (!d->has_coarse()) throw Error(ErrorCode::missing_region, "dataset '" + d->name + "' needs coarse census for folds");
        plans.push_back(make_folds(*d->coarse_census, cfg.n_folds, cfg.seed));
    }
    std::vector<std::size_t> rotations = cfg.rotations;
    if (rotations.empty())
        for (std::size_t r = 0; r < cfg.n_folds; ++r) rotations.push_back(r);

    for (auto rot : rotations) {
        RotationContext ctx;
        ctx.rotation = rot;
        ctx.seed = cfg.seed + rot;
        for (std::size_t i = 0; i < datasets.size(); ++i) {
            const Dataset& d = *datasets[i];
            const FoldRoles roles = plans[i].roles(rot);
            SplitSpec s{&d, level, {}, {}};
            for (const auto& [id, e] : d.census(level).rows()) {
                const std::size_t f = level == Level::coarse ? plans[i].fold_of_coarse(id) : plans[i].fold_of_fine(id, d.fine_census);
                if (f == roles.test) continue;
                (f == roles.val ? s.val : s.train).push_back(id);
            }
            ctx.splits.push_back(std::move(s));
            ctx.targets.push_back(&d);
        }
        auto grids = predictor(ctx);
        RotationReport rr;
        rr.rotation = rot;
        rr.seed = ctx.seed;
        for (std::size_t i = 0; i < datasets.size(); ++i) {
            const Dataset& d = *datasets[i];
            const std::size_t test = plans[i].roles(rot).test;
            auto rows = detail::evaluate_fine(d, grids.at(i), true,
                                              [&](std::int64_t id) { return plans[i].fold_of_fine(id, d.fine_census) == test; });
            rr.regions.insert(rr.regions.end(), rows.begin(), rows.end());
        }
        rr.metrics = detail::metrics_of(rr.regions);
        all_test.insert(all_test.end(), rr.regions.begin(), rr.regions.end());
        report.rotations.push_back(std::move(rr));
    }
    report.pooled = detail::metrics_of(all_test);
    report.mean = detail::mean_of(report.rotations, false);
    report.stddev = detail::mean_of(report.rotations, true);
    return report;
}

inline ProtocolReport run_protocol(const std::vector<const Dataset*>& datasets, const ProtocolConfig& cfg) {
    return run_protocol(datasets, cfg, model_predictor(cfg.train));
}

inline std::string encode_summary_csv(const ProtocolReport& r, std::string_view label) {
    std::string out = "protocol,rotation,r2,mae,mape,n_regions,n_excluded_mape,seed\n";
    auto row = [&](const std::string& rot, const MetricsReport& m, std::uint64_t seed) {
        out += std::string(label) + "," + rot + "," + format_double(m.r2) + "," + format_double(m.mae) + "," +
               format_double(m.mape) + "," + std::to_string(m.n_regions) + "," + std::to_string(m.n_excluded_mape) +
               "," + std::to_string(seed) + "\n";
    };
    for (const auto& rr : r.rotations) row(std::to_string(rr.rotation), rr.metrics, rr.seed);
    const std::uint64_t s0 = r.rotations.empty() ? 0 : r.rotations.front().seed;
    if (r.protocol != Protocol::transfer) row("pooled", r.pooled, s0);
    row("mean", r.mean, s0);
    row("std", r.stddev, s0);
    return out;
}

inline std::string encode_regions_csv(const std::vector<RegionResult>& rows) {
    std::string out = "dataset,region_id,truth,predicted\n";
    for (const auto& r : rows)
        out += r.dataset + "," + std::to_string(r.region_id) + "," + format_double(r.truth) + "," + format_double(r.predicted) + "\n";
    return out;
}

// ============================================================================
// Permutation importance
// ============================================================================

enum class ImportanceMetric { mae, mape, r2 };

inline ImportanceMetric parse_importance_metric(std::string_view s) {
    if (s == "mae") return ImportanceMetric::mae;
    if (s == "mape") return ImportanceMetric::mape;
    if (s == "r2") return ImportanceMetric::r2;
    throw Error(ErrorCode::usage, "unknown importance metric '" + std::string(s) + "'");
}

// Fixed evaluation inputs shared by every permutation.
struct ImportanceContext {
    const ModelParams* params = nullptr;
    Matrix features;                 // D x N over built cells in the regions
    std::vector<double> buildings;
    std::vector<std::int64_t> region; // per column
    CensusTable truth;
    ImportanceMetric metric = ImportanceMetric::mae;
};

inline ImportanceContext make_importance_context(const ModelParams& params, const Dataset& d, Level level,
                                                 ImportanceMetric metric) {
    ImportanceContext ctx;
    ctx.params = &params;
    ctx.metric = metric;
    const auto& regions = d.regions(level);
    ctx.truth = d.census(level);
    std::vector<std::size_t> cells;
    for (auto i : built_mask(d.buildings))
        if (regions.values[i] != kOutside) cells.push_back(i);
    ctx.features = normalize_features(d.covariates, params.norm, cells);
    for (auto c : cells) {
        ctx.buildings.push_back(d.buildings.values[c]);
        ctx.region.push_back(regions.values[c]);
    }
    return ctx;
}

inline double importance_metric_value(const ImportanceContext& ctx, const Matrix& features) {
    Vector occ = features.cols() ? forward_occupancy(*ctx.params, features, Mode::infer) : Vector();
    std::map<std::int64_t, double> totals;
    for (const auto& [id, _] : ctx.truth.rows()) totals[id] = 0.0;
    for (std::size_t j = 0; j < ctx.region.size(); ++j) {
        double v = occ[static_cast<Eigen::Index>(j)];
        totals[ctx.region[j]] += ctx.params->occupancy_output ? v * ctx.buildings[j] : v;
    }
    const MetricsReport m = compute_metrics(totals, ctx.truth);
    switch (ctx.metric) {
    case ImportanceMetric::mae: return m.mae;
    case ImportanceMetric::mape: return m.mape;
    case ImportanceMetric::r2: return m.r2;
    }
    return 0.0;
}

// Degradation when feature row `layer` is reordered by `perm`: error metrics
// as shuffled - baseline, R^2 as baseline - shuffled, so larger always
// means more important.
inline double importance_for_permutation(const ImportanceContext& ctx, std::size_t layer,
                                         const std::vector<std::size_t>& perm, double baseline) {
    Matrix shuffled = ctx.features;
    const auto k = static_cast<Eigen::Index>(layer);
    for (std::size_t j = 0; j < perm.size(); ++j)
        shuffled(k, static_cast<Eigen::Index>(j)) = ctx.features(k, static_cast<Eigen::Index>(perm[j]));
    const double v = importance_metric_value(ctx, shuffled);
    return ctx.metric == ImportanceMetric::r2 ? baseline - v : v - baseline;
}

struct ImportanceScore {
    std::string layer;
    double mean = 0.0;
    std::vector<double> repeats;
};

inline std::vector<ImportanceScore> permutation_importance(const ModelParams& params, const Dataset& d, Level level,
                                                           ImportanceMetric metric, std::uint64_t seed,
                                                           std::size_t n_repeats = 5) {
    const ImportanceContext ctx = make_importance_context(params, d, level, metric);
    const double baseline = importance_metric_value(ctx, ctx.features);
    const std::size_t n = static_cast<std::size_t>(ctx.features.cols());
    std::vector<ImportanceScore> out;
    for (std::size_t k = 0; k < params.norm.names.size(); ++k) {
        ImportanceScore s;
        s.layer = params.norm.names[k];
        for (std::size_t r = 0; r < n_repeats; ++r) {
            std::vector<std::size_t> perm(n);
            std::iota(perm.begin(), perm.end(), std::size_t{0});
            std::mt19937_64 rng(splitmix64(seed ^ splitmix64(k * 1000003u + r)));
            std::shuffle(perm.begin(), perm.end(), rng);
            s.repeats.push_back(importance_for_permutation(ctx, k, perm, baseline));
        }
        s.mean = n_repeats ? std::accumulate(s.repeats.begin(), s.repeats.end(), 0.0) / static_cast<double>(n_repeats) : 0.0;
        out.push_back(std::move(s));
    }
    return out;
}

} // namespace popmap
