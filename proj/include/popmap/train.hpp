#pragma once

// Weakly supervised training: the network only ever sees region totals.
//
// Every loss term is a complete region: per-pixel predictions are summed
// over the region's built cells and compared to the census count. Batches
// are lists of regions, optionally replaced by pseudo-regions formed by
// merging two training regions.

#include "popmap/error.hpp"
#include "popmap/grid.hpp"
#include "popmap/io.hpp"
#include "popmap/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace popmap {

struct TrainConfig {
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_epsilon = 1e-8;
    std::vector<double> weight_decays{0.0, 1e-5, 1e-4, 1e-3};
    std::size_t max_epochs = 1000;
    std::size_t patience = 100;
    std::size_t regions_per_step = 64;
    double augmentation_probability = 0.5;
    double log_epsilon = 1e-8;

    // Ablation switches.
    bool use_log_loss = true;
    bool use_occupancy = true;
    bool use_augmentation = true;

    std::vector<std::size_t> hidden = default_hidden_sizes();
    double dropout = 0.4;
    // Multiplier on the He-uniform output-layer weights; small values start
    // the network near a constant occupancy.
    double output_init_scale = 0.01;
    std::uint64_t seed = 0;

    void validate() const {
        auto bad = [](const std::string& what) { throw Error(ErrorCode::invalid_argument, "train config: " + what); };
        if (!(learning_rate > 0.0)) bad("learning rate must be > 0");
        if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) bad("Adam betas must lie in [0,1)");
        if (!(adam_epsilon > 0.0)) bad("Adam epsilon must be > 0");
        if (weight_decays.empty()) bad("weight-decay grid is empty");
        for (double wd : weight_decays)
            if (!(wd >= 0.0)) bad("weight decay must be >= 0");
        if (max_epochs == 0) bad("max epochs must be >= 1");
        if (regions_per_step == 0) bad("regions per step must be >= 1");
        if (!(augmentation_probability >= 0.0 && augmentation_probability <= 1.0)) bad("augmentation probability must lie in [0,1]");
        if (!(log_epsilon > 0.0)) bad("log epsilon must be > 0");
        if (!(dropout >= 0.0 && dropout < 1.0)) bad("dropout must lie in [0,1)");
        if (!(output_init_scale >= 0.0)) bad("output init scale must be >= 0");
    }
};

enum class Split { train, val, test };

// A supervision region: census count plus the batch columns of its built
// cells.
struct TrainingRegion {
    std::int64_t id = 0;
    double count = 0.0;
    std::vector<std::size_t> rows;
    Split split = Split::train;
};

// ============================================================================
// Loss
// ============================================================================

inline double log_l1_loss(double predicted, double truth, double eps = 1e-8) {
    return std::abs(std::log(std::max(predicted, eps)) - std::log(std::max(truth, eps)));
}

// d loss / d predicted for the clamped log-L1 (or plain L1) loss.
inline double region_loss_derivative(double predicted, double truth, const TrainConfig& cfg) {
    if (!cfg.use_log_loss) return predicted > truth ? 1.0 : (predicted < truth ? -1.0 : 0.0);
    if (predicted <= cfg.log_epsilon) return 0.0;
    double diff = std::log(predicted) - std::log(std::max(truth, cfg.log_epsilon));
    double s = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
    return s / predicted;
}

inline double region_loss(double predicted, double truth, const TrainConfig& cfg) {
    return cfg.use_log_loss ? log_l1_loss(predicted, truth, cfg.log_epsilon) : std::abs(predicted - truth);
}

// Pixels of one dataset available to training: normalized features and
// building counts of every built cell inside the supervision regions.
struct PixelTable {
    Matrix features; // D x N
    std::vector<double> buildings;
    std::vector<std::size_t> cells;
};

struct BatchResult {
    double loss = 0.0;
    Gradients gradients;
    std::vector<double> predicted; // per batch region
};

// Sum of region losses over `batch` and its exact parameter gradient.
inline BatchResult region_loss_and_grad(const ModelParams& params, const PixelTable& pixels,
                                        std::span<const TrainingRegion> batch, const TrainConfig& cfg,
                                        std::uint64_t seed) {
    std::size_t n = 0;
    for (const auto& r : batch) n += r.rows.size();
    Matrix x(pixels.features.rows(), static_cast<Eigen::Index>(n));
    std::vector<double> bld(n);
    std::vector<std::size_t> owner(n);
    std::size_t j = 0;
    for (std::size_t k = 0; k < batch.size(); ++k) {
        for (auto row : batch[k].rows) {
            x.col(static_cast<Eigen::Index>(j)) = pixels.features.col(static_cast<Eigen::Index>(row));
            bld[j] = cfg.use_occupancy ? pixels.buildings[row] : 1.0;
            owner[j] = k;
            ++j;
        }
    }

    ForwardPass pass(params, x, params.dropout > 0.0 ? Mode::train : Mode::infer, seed);
    BatchResult res;
    res.predicted.assign(batch.size(), 0.0);
    for (std::size_t i = 0; i < n; ++i) res.predicted[owner[i]] += pass.output()[static_cast<Eigen::Index>(i)] * bld[i];

    std::vector<double> dregion(batch.size());
    for (std::size_t k = 0; k < batch.size(); ++k) {
        res.loss += region_loss(res.predicted[k], batch[k].count, cfg);
        dregion[k] = region_loss_derivative(res.predicted[k], batch[k].count, cfg);
    }
    Vector upstream(static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) upstream[static_cast<Eigen::Index>(i)] = dregion[owner[i]] * bld[i];
    res.gradients = pass.backward(upstream);
    return res;
}

// Pseudo-region from two training regions: union of cells, summed count.
inline TrainingRegion merge_pseudo_region(const TrainingRegion& a, const TrainingRegion& b, std::int64_t new_id) {
    TrainingRegion m;
    m.id = new_id;
    m.count = a.count + b.count;
    m.split = Split::train;
    m.rows.reserve(a.rows.size() + b.rows.size());
    m.rows.insert(m.rows.end(), a.rows.begin(), a.rows.end());
    m.rows.insert(m.rows.end(), b.rows.begin(), b.rows.end());
    std::sort(m.rows.begin(), m.rows.end());
    return m;
}

// Materializes one batch from pool indices; each entry is replaced by a
// merge with a uniformly drawn partner with probability `probability`.
// The pool itself is never modified.
inline std::vector<TrainingRegion> augment_batch(const std::vector<TrainingRegion>& pool,
                                                 std::span<const std::size_t> picks, double probability,
                                                 std::mt19937_64& rng, std::int64_t& next_id) {
    std::vector<TrainingRegion> out;
    out.reserve(picks.size());
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    for (auto idx : picks) {
        if (pool.size() > 1 && probability > 0.0 && coin(rng) < probability) {
            std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 2);
            std::size_t partner = pick(rng);
            if (partner >= idx) ++partner;
            out.push_back(merge_pseudo_region(pool[idx], pool[partner], next_id--));
        } else {
            out.push_back(pool[idx]);
        }
    }
    return out;
}

// ============================================================================
// Optimizer
// ============================================================================

struct AdamState {
    Gradients m, v;
    std::size_t step = 0;

    static AdamState for_params(const ModelParams& p) {
        return {Gradients::zeros_like(p), Gradients::zeros_like(p), 0};
    }
};

// Adam with decoupled weight decay.
inline void adam_step(ModelParams& params, const Gradients& g, AdamState& s, const TrainConfig& cfg,
                      double weight_decay) {
    ++s.step;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(s.step));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(s.step));
    auto update = [&](auto& theta, const auto& grad, auto& m, auto& v) {
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad;
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad.cwiseProduct(grad);
        theta -= cfg.learning_rate *
                 ((m / c1).array() / ((v / c2).array().sqrt() + cfg.adam_epsilon) + weight_decay * theta.array()).matrix();
    };
    for (std::size_t l = 0; l < params.layers.size(); ++l) {
        update(params.layers[l].weight, g.layers[l].weight, s.m.layers[l].weight, s.v.layers[l].weight);
        update(params.layers[l].bias, g.layers[l].bias, s.m.layers[l].bias, s.v.layers[l].bias);
    }
}

// ============================================================================
// Training sets
// ============================================================================

// Region ids of one dataset used for training and validation at a given
// census level.
struct SplitSpec {
    const Dataset* dataset = nullptr;
    Level level = Level::fine;
    std::vector<std::int64_t> train;
    std::vector<std::int64_t> val;
};

struct TrainingSet {
    PixelTable pixels;
    std::vector<TrainingRegion> train;
    std::vector<TrainingRegion> val;
    std::size_t excluded = 0; // regions without built cells
};

// Built cells per region id, ascending cell order.
inline std::map<std::int64_t, std::vector<std::size_t>> built_cells_by_region(const BuildingGrid& buildings,
                                                                               const RegionMap& regions) {
    require_same_shape(buildings, regions, "built_cells_by_region");
    std::map<std::int64_t, std::vector<std::size_t>> out;
    for (auto i : built_mask(buildings)) {
        auto id = regions.values[i];
        if (id != kOutside) out[id].push_back(i);
    }
    return out;
}

inline std::vector<std::size_t> training_cells(const SplitSpec& spec) {
    const auto by_region = built_cells_by_region(spec.dataset->buildings, spec.dataset->regions(spec.level));
    std::vector<std::size_t> cells;
    for (auto id : spec.train)
        if (auto it = by_region.find(id); it != by_region.end()) cells.insert(cells.end(), it->second.begin(), it->second.end());
    std::sort(cells.begin(), cells.end());
    return cells;
}

inline TrainingSet prepare_training_set(const SplitSpec& spec, const NormStats& stats) {
    const Dataset& d = *spec.dataset;
    const auto& census = d.census(spec.level);
    const auto by_region = built_cells_by_region(d.buildings, d.regions(spec.level));

    TrainingSet set;
    std::vector<std::size_t> cells;
    auto add = [&](const std::vector<std::int64_t>& ids, Split split, std::vector<TrainingRegion>& dest) {
        for (auto id : ids) {
            auto it = by_region.find(id);
            if (it == by_region.end()) {
                ++set.excluded;
                continue;
            }
            TrainingRegion r;
            r.id = id;
            r.count = census.count(id);
            r.split = split;
            for (auto c : it->second) {
                r.rows.push_back(cells.size());
                cells.push_back(c);
            }
            dest.push_back(std::move(r));
        }
    };
    add(spec.train, Split::train, set.train);
    add(spec.val, Split::val, set.val);

    set.pixels.features = normalize_features(d.covariates, stats, cells);
    set.pixels.buildings.reserve(cells.size());
    for (auto c : cells) set.pixels.buildings.push_back(d.buildings.values[c]);
    set.pixels.cells = std::move(cells);
    return set;
}

// ============================================================================
// Fit
// ============================================================================

struct TrainLogRow {
    std::size_t epoch = 0;
    std::size_t step = 0;
    double train_loss = 0.0;
    double val_mape = 0.0;
    double val_mae = 0.0;
    double val_r2 = 0.0;
    double weight_decay = 0.0;
    std::uint64_t seed = 0;
};

struct FitResult {
    ModelParams params;
    double best_val_mape = std::numeric_limits<double>::infinity();
    double best_weight_decay = 0.0;
    std::vector<TrainLogRow> log;
    std::vector<std::string> warnings;
};

struct ValScores {
    double mape = 0.0, mae = 0.0, r2 = 0.0;
};

// Raw (unadjusted) region totals of `regions` under `params`.
inline std::vector<double> predict_region_totals(const ModelParams& params, const PixelTable& pixels,
                                                 const std::vector<TrainingRegion>& regions) {
    std::vector<std::size_t> rows;
    for (const auto& r : regions) rows.insert(rows.end(), r.rows.begin(), r.rows.end());
    Matrix x(pixels.features.rows(), static_cast<Eigen::Index>(rows.size()));
    for (std::size_t j = 0; j < rows.size(); ++j)
        x.col(static_cast<Eigen::Index>(j)) = pixels.features.col(static_cast<Eigen::Index>(rows[j]));
    Vector out = rows.empty() ? Vector() : forward_occupancy(params, x, Mode::infer);
    std::vector<double> totals;
    std::size_t j = 0;
    for (const auto& r : regions) {
        double s = 0.0;
        for (auto row : r.rows) {
            double v = out[static_cast<Eigen::Index>(j++)];
            s += params.occupancy_output ? v * pixels.buildings[row] : v;
        }
        totals.push_back(s);
    }
    return totals;
}

inline ValScores score_totals(const std::vector<double>& predicted, const std::vector<double>& truth) {
    ValScores s;
    const std::size_t n = truth.size();
    if (n == 0) return {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN(),
                        std::numeric_limits<double>::quiet_NaN()};
    double mean = 0.0;
    for (double c : truth) mean += c;
    mean /= static_cast<double>(n);
    double ss_res = 0.0, ss_tot = 0.0, abs_sum = 0.0, pct_sum = 0.0;
    std::size_t pct_n = 0;
    for (std::size_t i = 0; i < n; ++i) {
        double e = truth[i] - predicted[i];
        ss_res += e * e;
        ss_tot += (truth[i] - mean) * (truth[i] - mean);
        abs_sum += std::abs(e);
        if (truth[i] > 0.0) {
            pct_sum += std::abs(e / truth[i]);
            ++pct_n;
        }
    }
    s.mae = abs_sum / static_cast<double>(n);
    s.mape = pct_n ? 100.0 * pct_sum / static_cast<double>(pct_n) : std::numeric_limits<double>::quiet_NaN();
    s.r2 = ss_tot > 0.0 ? 1.0 - ss_res / ss_tot : std::numeric_limits<double>::quiet_NaN();
    return s;
}

// Trains one model per weight-decay value and keeps the parameters with the
// lowest validation MAPE over all epochs and grid values. Multiple datasets
// share one model; their batches are interleaved round-robin.
inline FitResult fit(const std::vector<SplitSpec>& splits, const TrainConfig& cfg) {
    cfg.validate();
    if (splits.empty()) throw Error(ErrorCode::invalid_argument, "fit: no datasets");
    std::size_t n_train = 0, n_val = 0;
    for (const auto& s : splits) {
        if (!s.dataset) throw Error(ErrorCode::invalid_argument, "fit: null dataset");
        n_train += s.train.size();
        n_val += s.val.size();
    }
    if (n_train == 0) throw Error(ErrorCode::invalid_argument, "fit: no training regions");
    if (n_val == 0) throw Error(ErrorCode::invalid_argument, "fit: no validation regions");

    // Normalization over the union of training pixels.
    const auto names = splits.front().dataset->covariates.names();
    std::vector<std::vector<float>> pooled_values(names.size());
    for (const auto& s : splits) {
        require_matching_covariates(NormStats{names, {}, {}}, s.dataset->covariates.names());
        auto cells = training_cells(s);
        for (std::size_t k = 0; k < names.size(); ++k)
            for (auto c : cells) pooled_values[k].push_back(s.dataset->covariates.layer(k).values[c]);
    }
    NormStats stats;
    {
        const std::size_t n = pooled_values.empty() ? 0 : pooled_values.front().size();
        CovariateStack stack(n, 1);
        for (std::size_t k = 0; k < names.size(); ++k) stack.add_layer(names[k], std::move(pooled_values[k]));
        std::vector<std::size_t> all(n);
        for (std::size_t i = 0; i < n; ++i) all[i] = i;
        stats = compute_norm_stats(stack, splits.front().dataset->normalization, all);
    }

    FitResult result;
    std::vector<TrainingSet> sets;
    double count_sum = 0.0, unit_sum = 0.0;
    for (const auto& s : splits) {
        sets.push_back(prepare_training_set(s, stats));
        if (sets.back().excluded) {
            result.warnings.push_back("dataset '" + s.dataset->name + "': " + std::to_string(sets.back().excluded) +
                                      " region(s) without built cells excluded");
        }
        for (const auto& r : sets.back().train) {
            count_sum += r.count;
            for (auto row : r.rows) unit_sum += cfg.use_occupancy ? sets.back().pixels.buildings[row] : 1.0;
        }
    }
    std::size_t usable_train = 0, usable_val = 0;
    for (const auto& s : sets) {
        usable_train += s.train.size();
        usable_val += s.val.size();
    }
    if (usable_train == 0) throw Error(ErrorCode::invalid_argument, "fit: no training region has built cells");
    if (usable_val == 0) throw Error(ErrorCode::invalid_argument, "fit: no validation region has built cells");

    std::vector<double> val_truth;
    for (const auto& s : sets)
        for (const auto& r : s.val) val_truth.push_back(r.count);

    // Output bias starts at the mean training occupancy (or density).
    const double mean_rate = unit_sum > 0.0 ? std::max(count_sum / unit_sum, 1e-3) : 1.0;

    bool any_ok = false;
    for (double wd : cfg.weight_decays) {
        ModelParams params = init_params(names.size(), cfg.hidden, cfg.seed, cfg.dropout);
        params.occupancy_output = cfg.use_occupancy;
        params.norm = stats;
        params.layers.back().weight *= cfg.output_init_scale;
        params.layers.back().bias[0] = inverse_softplus(mean_rate);

        AdamState adam = AdamState::for_params(params);
        std::mt19937_64 rng(cfg.seed);
        std::int64_t next_id = -2;
        std::size_t since_best = 0, step = 0;
        double grid_best = std::numeric_limits<double>::infinity();
        bool diverged = false;

        for (std::size_t epoch = 1; epoch <= cfg.max_epochs && !diverged; ++epoch) {
            // Shuffled batches per dataset, interleaved round-robin.
            std::vector<std::vector<std::size_t>> order(sets.size());
            std::size_t max_batches = 0;
            for (std::size_t d = 0; d < sets.size(); ++d) {
                order[d].resize(sets[d].train.size());
                for (std::size_t i = 0; i < order[d].size(); ++i) order[d][i] = i;
                std::shuffle(order[d].begin(), order[d].end(), rng);
                max_batches = std::max(max_batches, chunk_count(order[d].size(), cfg.regions_per_step));
            }
            double loss_sum = 0.0;
            std::size_t loss_terms = 0;
            for (std::size_t b = 0; b < max_batches && !diverged; ++b) {
                for (std::size_t d = 0; d < sets.size(); ++d) {
                    const std::size_t lo = b * cfg.regions_per_step;
                    if (lo >= order[d].size()) continue;
                    const std::size_t hi = std::min(order[d].size(), lo + cfg.regions_per_step);
                    std::span<const std::size_t> picks(order[d].data() + lo, hi - lo);
                    auto batch = augment_batch(sets[d].train, picks,
                                               cfg.use_augmentation ? cfg.augmentation_probability : 0.0, rng, next_id);
                    const std::uint64_t step_seed = splitmix64(cfg.seed ^ splitmix64(++step));
                    auto res = region_loss_and_grad(params, sets[d].pixels, batch, cfg, step_seed);
                    if (!std::isfinite(res.loss) || !std::isfinite(res.gradients.max_abs())) {
                        diverged = true;
                        break;
                    }
                    loss_sum += res.loss;
                    loss_terms += batch.size();
                    adam_step(params, res.gradients, adam, cfg, wd);
                    if (!params.all_finite()) {
                        diverged = true;
                        break;
                    }
                }
            }
            if (diverged) break;

            std::vector<double> val_pred;
            for (const auto& s : sets) {
                auto t = predict_region_totals(params, s.pixels, s.val);
                val_pred.insert(val_pred.end(), t.begin(), t.end());
            }
            ValScores v = score_totals(val_pred, val_truth);
            result.log.push_back({epoch, step, loss_terms ? loss_sum / static_cast<double>(loss_terms) : 0.0, v.mape,
                                  v.mae, v.r2, wd, cfg.seed});

            const double key = std::isnan(v.mape) ? v.mae : v.mape;
            if (key < grid_best) {
                grid_best = key;
                since_best = 0;
                if (key < result.best_val_mape || !any_ok) {
                    result.best_val_mape = key;
                    result.best_weight_decay = wd;
                    result.params = params;
                    any_ok = true;
                }
            } else if (++since_best >= cfg.patience) {
                break;
            }
        }
        if (diverged) {
            result.warnings.push_back("weight decay " + format_double(wd) + ": non-finite loss, grid point aborted");
        }
    }
    if (!any_ok) throw Error(ErrorCode::numeric_failure, "training diverged for every weight-decay value");
    return result;
}

inline std::string encode_train_log(const std::vector<TrainLogRow>& log) {
    std::string out = "epoch,step,train_loss,val_mape,val_mae,val_r2,weight_decay,seed\n";
    for (const auto& r : log) {
        out += std::to_string(r.epoch) + "," + std::to_string(r.step) + "," + format_double(r.train_loss) + "," +
               format_double(r.val_mape) + "," + format_double(r.val_mae) + "," + format_double(r.val_r2) + "," +
               format_double(r.weight_decay) + "," + std::to_string(r.seed) + "\n";
    }
    return out;
}

} // namespace popmap
