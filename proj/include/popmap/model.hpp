#pragma once

// Per-pixel occupancy network.
//
// A stack of affine layers with ReLU + dropout between them and a softplus
// on the scalar output. Applied independently to every built cell; the
// output is persons per building (or persons per cell when the network is
// configured for direct population output).
//
// Activations are stored column-major with one column per pixel. Batches are
// processed in fixed 256-column chunks whose partial gradients are reduced
// in chunk order, so results never depend on the worker count.

#include "popmap/error.hpp"
#include "popmap/grid.hpp"
#include "popmap/io.hpp"
#include "popmap/parallel.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace popmap {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

inline constexpr std::size_t kColumnChunk = 256;

// ============================================================================
// Scalar helpers
// ============================================================================

inline double softplus(double x) {
    return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}

inline double inverse_softplus(double y) {
    // log(exp(y) - 1), stable for large y
    return y > 30.0 ? y + std::log1p(-std::exp(-y)) : std::log(std::expm1(y));
}

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Counter-based dropout decision for (layer, pixel column, unit).
inline bool dropout_keep(std::uint64_t seed_key, std::size_t layer, std::size_t column, std::size_t unit,
                         double keep_prob) {
    std::uint64_t key = (static_cast<std::uint64_t>(layer) << 48) ^ (static_cast<std::uint64_t>(column) << 16) ^
                        static_cast<std::uint64_t>(unit);
    std::uint64_t h = splitmix64(seed_key ^ splitmix64(key));
    double u = static_cast<double>(h >> 11) * 0x1.0p-53;
    return u < keep_prob;
}

// ============================================================================
// Parameters
// ============================================================================

struct DenseLayer {
    Matrix weight; // out x in
    Vector bias;   // out

    bool operator==(const DenseLayer& o) const {
        return weight.rows() == o.weight.rows() && weight.cols() == o.weight.cols() && bias.size() == o.bias.size() &&
               weight == o.weight && bias == o.bias;
    }
};

struct NormStats {
    std::vector<std::string> names;
    std::vector<double> mean;
    std::vector<double> stddev;

    bool operator==(const NormStats&) const = default;
};

struct ModelParams {
    std::vector<DenseLayer> layers;
    double dropout = 0.4;
    bool occupancy_output = true; // false: softplus output is persons per cell
    NormStats norm;

    std::size_t input_dim() const { return layers.empty() ? 0 : static_cast<std::size_t>(layers.front().weight.cols()); }
    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& l : layers) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
        return n;
    }
    bool all_finite() const {
        for (const auto& l : layers)
            if (!l.weight.allFinite() || !l.bias.allFinite()) return false;
        return true;
    }

    bool operator==(const ModelParams&) const = default;
};

inline const std::vector<std::size_t>& default_hidden_sizes() {
    static const std::vector<std::size_t> sizes{128, 128, 128};
    return sizes;
}

// He-uniform weights, zero biases.
inline ModelParams init_params(std::size_t input_dim, const std::vector<std::size_t>& hidden, std::uint64_t seed,
                               double dropout = 0.4) {
    if (input_dim == 0) throw Error(ErrorCode::invalid_argument, "network needs at least one input feature");
    ModelParams p;
    p.dropout = dropout;
    std::mt19937_64 rng(seed);
    std::size_t fan_in = input_dim;
    auto add = [&](std::size_t out) {
        const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
        std::uniform_real_distribution<double> u(-limit, limit);
        DenseLayer l{Matrix(out, fan_in), Vector::Zero(static_cast<Eigen::Index>(out))};
        for (Eigen::Index r = 0; r < l.weight.rows(); ++r)
            for (Eigen::Index c = 0; c < l.weight.cols(); ++c) l.weight(r, c) = u(rng);
        p.layers.push_back(std::move(l));
        fan_in = out;
    };
    for (std::size_t h : hidden) add(h);
    add(1);
    return p;
}

// Gradient container with the same layout as ModelParams::layers.
struct Gradients {
    std::vector<DenseLayer> layers;

    static Gradients zeros_like(const ModelParams& p) {
        Gradients g;
        for (const auto& l : p.layers)
            g.layers.push_back({Matrix::Zero(l.weight.rows(), l.weight.cols()), Vector::Zero(l.bias.size())});
        return g;
    }
    Gradients& operator+=(const Gradients& o) {
        for (std::size_t i = 0; i < layers.size(); ++i) {
            layers[i].weight += o.layers[i].weight;
            layers[i].bias += o.layers[i].bias;
        }
        return *this;
    }
    double max_abs() const {
        double m = 0.0;
        for (const auto& l : layers) {
            if (l.weight.size()) m = std::max(m, l.weight.cwiseAbs().maxCoeff());
            if (l.bias.size()) m = std::max(m, l.bias.cwiseAbs().maxCoeff());
        }
        return m;
    }
};

// ============================================================================
// Features
// ============================================================================

// Mean and population standard deviation per layer over `cells`, ignoring
// NaN. Layers marked Normalization::none get mean 0 / std 1, and a zero
// (or undefined) spread is clamped to 1.
inline NormStats compute_norm_stats(const CovariateStack& stack, const std::vector<Normalization>& roles,
                                    const std::vector<std::size_t>& cells) {
    NormStats s;
    for (std::size_t k = 0; k < stack.layer_count(); ++k) {
        const auto& layer = stack.layer(k);
        s.names.push_back(layer.name);
        if (k < roles.size() && roles[k] == Normalization::none) {
            s.mean.push_back(0.0);
            s.stddev.push_back(1.0);
            continue;
        }
        double sum = 0.0;
        std::size_t n = 0;
        for (auto i : cells) {
            double v = layer.values[i];
            if (std::isnan(v)) continue;
            sum += v;
            ++n;
        }
        double mean = n ? sum / static_cast<double>(n) : 0.0;
        double ss = 0.0;
        for (auto i : cells) {
            double v = layer.values[i];
            if (std::isnan(v)) continue;
            ss += (v - mean) * (v - mean);
        }
        double sd = n ? std::sqrt(ss / static_cast<double>(n)) : 0.0;
        if (!(sd > 0.0) || !std::isfinite(sd)) sd = 1.0;
        s.mean.push_back(mean);
        s.stddev.push_back(sd);
    }
    return s;
}

inline void require_matching_covariates(const NormStats& stats, const std::vector<std::string>& names) {
    if (stats.names != names) {
        std::string want, got;
        for (const auto& n : stats.names) want += (want.empty() ? "" : ",") + n;
        for (const auto& n : names) got += (got.empty() ? "" : ",") + n;
        throw Error(ErrorCode::covariate_mismatch, "model expects covariates [" + want + "], data has [" + got + "]");
    }
}

inline double normalize_value(float raw, double mean, double sd) {
    return std::isnan(raw) ? 0.0 : (static_cast<double>(raw) - mean) / sd;
}

// Z-scored features (layers x cells); NaN inputs become 0.
inline Matrix normalize_features(const CovariateStack& stack, const NormStats& stats,
                                 const std::vector<std::size_t>& cells) {
    require_matching_covariates(stats, stack.names());
    Matrix x(static_cast<Eigen::Index>(stack.layer_count()), static_cast<Eigen::Index>(cells.size()));
    for (std::size_t k = 0; k < stack.layer_count(); ++k) {
        const auto& v = stack.layer(k).values;
        for (std::size_t j = 0; j < cells.size(); ++j)
            x(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j)) =
                normalize_value(v[cells[j]], stats.mean[k], stats.stddev[k]);
    }
    return x;
}

// Normalized features for a set of built cells together with their
// bookkeeping.
struct PixelBatch {
    Matrix features;                 // D x N
    std::vector<std::size_t> cells;  // flat cell index per column
    std::vector<std::int32_t> region;
    std::vector<double> buildings;

    std::size_t size() const { return cells.size(); }
};

inline PixelBatch make_pixel_batch(const CovariateStack& stack, const NormStats& stats, const BuildingGrid& buildings,
                                   const RegionMap* regions, std::vector<std::size_t> cells) {
    PixelBatch b;
    b.features = normalize_features(stack, stats, cells);
    b.region.reserve(cells.size());
    b.buildings.reserve(cells.size());
    for (auto i : cells) {
        if (!(buildings.values[i] > 0.0f))
            throw Error(ErrorCode::invalid_argument, "pixel batch cell " + std::to_string(i) + " has no buildings");
        b.region.push_back(regions ? regions->values[i] : kOutside);
        b.buildings.push_back(buildings.values[i]);
    }
    b.cells = std::move(cells);
    return b;
}

// ============================================================================
// Forward / backward
// ============================================================================

enum class Mode { train, infer };

namespace detail {

struct ChunkCache {
    std::vector<Matrix> inputs;      // input to each layer (post-dropout)
    std::vector<Matrix> pre;         // pre-activation of each layer
    std::vector<Matrix> keep_scale;  // hidden layers only: 0 or 1/keep (train), empty in infer
};

inline void check_params(const ModelParams& params, Eigen::Index feature_rows) {
    if (params.layers.empty()) throw Error(ErrorCode::invalid_argument, "model has no layers");
    if (static_cast<Eigen::Index>(params.input_dim()) != feature_rows) {
        throw Error(ErrorCode::dimension_mismatch, "feature width " + std::to_string(feature_rows) +
                                                       " vs network input " + std::to_string(params.input_dim()));
    }
    if (!params.all_finite()) throw Error(ErrorCode::numeric_failure, "non-finite network parameter");
}

// Runs the network on columns [col0, col0 + x.cols()) of a batch; returns the
// softplus pre-activation row.
inline RowVector forward_chunk(const ModelParams& params, const Matrix& x, Mode mode, std::uint64_t seed_key,
                               std::size_t col0, ChunkCache* cache) {
    const double keep = 1.0 - params.dropout;
    const bool drop = mode == Mode::train && params.dropout > 0.0;
    Matrix a = x;
    const std::size_t last = params.layers.size() - 1;
    for (std::size_t l = 0; l < params.layers.size(); ++l) {
        const auto& layer = params.layers[l];
        Matrix z = layer.weight * a;
        z.colwise() += layer.bias;
        if (cache) {
            cache->inputs.push_back(std::move(a));
            cache->pre.push_back(z);
        }
        if (l == last) return z.row(0);
        a = z.cwiseMax(0.0);
        if (drop) {
            Matrix scale(a.rows(), a.cols());
            for (Eigen::Index c = 0; c < a.cols(); ++c)
                for (Eigen::Index u = 0; u < a.rows(); ++u)
                    scale(u, c) = dropout_keep(seed_key, l, col0 + static_cast<std::size_t>(c),
                                               static_cast<std::size_t>(u), keep)
                                      ? 1.0 / keep
                                      : 0.0;
            a = a.cwiseProduct(scale);
            if (cache) cache->keep_scale.push_back(std::move(scale));
        } else if (cache) {
            cache->keep_scale.emplace_back();
        }
    }
    return {};
}

// Column padding for inference. Vectorized GEMM kernels treat leftover
// columns with different instruction sequences, so without padding a pixel's
// result could depend on its position within the batch.
inline constexpr Eigen::Index kInferPad = 16;

// Inference-only forward over x, reusing the caller's buffers. Columns are
// zero-padded to a multiple of kInferPad; each output depends only on its
// own input column.
inline void infer_chunk(const ModelParams& params, const Eigen::Ref<const Matrix>& x, Matrix& a, Matrix& z,
                        Matrix& padded, double* out) {
    const Eigen::Index n = x.cols();
    const Eigen::Index m = (n + kInferPad - 1) / kInferPad * kInferPad;
    padded.resize(x.rows(), m);
    padded.leftCols(n) = x;
    padded.rightCols(m - n).setZero();
    z.resize(params.layers[0].weight.rows(), m);
    z.noalias() = params.layers[0].weight * padded;
    for (std::size_t l = 1; l < params.layers.size(); ++l) {
        a = (z.colwise() + params.layers[l - 1].bias).cwiseMax(0.0);
        z.resize(params.layers[l].weight.rows(), m);
        z.noalias() = params.layers[l].weight * a;
    }
    const double b = params.layers.back().bias[0];
    for (Eigen::Index j = 0; j < n; ++j) out[j] = softplus(z(0, j) + b);
}

inline void backward_chunk(const ModelParams& params, const ChunkCache& cache, const RowVector& upstream_logit,
                           Gradients& grad) {
    Matrix delta = upstream_logit; // 1 x n
    for (std::size_t l = params.layers.size(); l-- > 0;) {
        grad.layers[l].weight.noalias() += delta * cache.inputs[l].transpose();
        grad.layers[l].bias += delta.rowwise().sum();
        if (l == 0) break;
        Matrix da = params.layers[l].weight.transpose() * delta;
        const auto& scale = cache.keep_scale[l - 1];
        if (scale.size()) da = da.cwiseProduct(scale);
        const auto& z = cache.pre[l - 1];
        delta = da.cwiseProduct((z.array() > 0.0).cast<double>().matrix());
    }
}

} // namespace detail

inline std::uint64_t dropout_seed_key(std::uint64_t seed) { return splitmix64(seed ^ 0x5eed5eed5eedull); }

// Network outputs for every column of `features`: softplus of the final
// layer, strictly positive. Train mode applies inverted dropout after each
// hidden ReLU, fully determined by `seed`.
inline Vector forward_occupancy(const ModelParams& params, const Matrix& features, Mode mode, std::uint64_t seed = 0) {
    detail::check_params(params, features.rows());
    const std::size_t n = static_cast<std::size_t>(features.cols());
    Vector out(static_cast<Eigen::Index>(n));
    const auto key = dropout_seed_key(seed);
    if (mode == Mode::infer || params.dropout == 0.0) {
        parallel_chunks(n, kColumnChunk, [&](std::size_t, std::size_t b, std::size_t e) {
            thread_local Matrix a, z, padded;
            detail::infer_chunk(params, features.middleCols(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(e - b)),
                                a, z, padded, out.data() + b);
        });
        return out;
    }
    parallel_chunks(n, kColumnChunk, [&](std::size_t, std::size_t b, std::size_t e) {
        RowVector z = detail::forward_chunk(params, features.middleCols(b, e - b), mode, key, b, nullptr);
        for (std::size_t j = b; j < e; ++j) out[static_cast<Eigen::Index>(j)] = softplus(z[static_cast<Eigen::Index>(j - b)]);
    });
    return out;
}

// Forward pass that keeps what backward() needs. Pairing both calls on one
// object guarantees the same dropout masks.
class ForwardPass {
public:
    ForwardPass(const ModelParams& params, const Matrix& features, Mode mode, std::uint64_t seed)
        : params_(params) {
        detail::check_params(params, features.rows());
        const std::size_t n = static_cast<std::size_t>(features.cols());
        caches_.resize(chunk_count(n, kColumnChunk));
        logits_.resize(static_cast<Eigen::Index>(n));
        output_.resize(static_cast<Eigen::Index>(n));
        const auto key = dropout_seed_key(seed);
        parallel_chunks(n, kColumnChunk, [&](std::size_t c, std::size_t b, std::size_t e) {
            RowVector z = detail::forward_chunk(params, features.middleCols(b, e - b), mode, key, b, &caches_[c]);
            for (std::size_t j = b; j < e; ++j) {
                double v = z[static_cast<Eigen::Index>(j - b)];
                logits_[static_cast<Eigen::Index>(j)] = v;
                output_[static_cast<Eigen::Index>(j)] = softplus(v);
            }
        });
    }

    const Vector& output() const { return output_; }
    const Vector& logits() const { return logits_; }

    // Parameter gradients of sum_i upstream[i] * output[i].
    Gradients backward(const Vector& upstream) const {
        if (upstream.size() != output_.size())
            throw Error(ErrorCode::dimension_mismatch, "upstream gradient size does not match batch");
        const std::size_t n = static_cast<std::size_t>(output_.size());
        std::vector<Gradients> partial(caches_.size());
        parallel_chunks(n, kColumnChunk, [&](std::size_t c, std::size_t b, std::size_t e) {
            partial[c] = Gradients::zeros_like(params_);
            RowVector d(static_cast<Eigen::Index>(e - b));
            for (std::size_t j = b; j < e; ++j)
                d[static_cast<Eigen::Index>(j - b)] =
                    upstream[static_cast<Eigen::Index>(j)] * sigmoid(logits_[static_cast<Eigen::Index>(j)]);
            detail::backward_chunk(params_, caches_[c], d, partial[c]);
        });
        Gradients total = Gradients::zeros_like(params_);
        for (const auto& g : partial) total += g;
        return total;
    }

private:
    const ModelParams& params_;
    std::vector<detail::ChunkCache> caches_;
    Vector logits_;
    Vector output_;
};

// Parameter gradients of sum_i upstream[i] * f(x_i); recomputes the forward
// pass with the same mode and seed.
inline Gradients backward(const ModelParams& params, const Matrix& features, const Vector& upstream, Mode mode,
                          std::uint64_t seed) {
    return ForwardPass(params, features, mode, seed).backward(upstream);
}

// ============================================================================
// Prediction
// ============================================================================

// Persons per cell: network output times building count on built cells
// (cells outside `regions` are skipped when given), exactly zero elsewhere.
inline PopulationGrid predict_population(const ModelParams& params, const CovariateStack& stack,
                                         const BuildingGrid& buildings, const RegionMap* regions = nullptr) {
    if (stack.width() != buildings.width || stack.height() != buildings.height)
        throw Error(ErrorCode::dimension_mismatch, "covariates " + shape_string(stack.width(), stack.height()) +
                                                       " vs buildings " + shape_string(buildings.width, buildings.height));
    if (regions) require_same_shape(buildings, *regions, "predict_population regions");
    require_matching_covariates(params.norm, stack.names());

    std::vector<std::size_t> cells;
    for (auto i : built_mask(buildings))
        if (!regions || regions->values[i] != kOutside) cells.push_back(i);

    PopulationGrid out(buildings.width, buildings.height, 0.0);
    if (cells.empty()) return out;
    Matrix x = normalize_features(stack, params.norm, cells);
    Vector occ = forward_occupancy(params, x, Mode::infer);
    for (std::size_t j = 0; j < cells.size(); ++j) {
        double v = occ[static_cast<Eigen::Index>(j)];
        out.values[cells[j]] = params.occupancy_output ? v * buildings.values[cells[j]] : v;
    }
    return out;
}

// Row-window prediction for rasters too large to hold in memory. Only a
// window of `window_rows` rows of every input is resident at a time.
//
//   covariate_row(layer, row, std::vector<float>&)
//   building_row(row, std::vector<float>&)
//   sink(row, const std::vector<double>& persons)
template <class CovariateRow, class BuildingRow, class Sink>
void predict_rows(const ModelParams& params, std::size_t width, std::size_t height, CovariateRow&& covariate_row,
                  BuildingRow&& building_row, Sink&& sink, std::size_t window_rows = 32) {
    const std::size_t layers = params.norm.names.size();
    if (layers != params.input_dim())
        throw Error(ErrorCode::invalid_argument, "normalization stats do not match network input width");
    std::vector<std::vector<float>> cov(layers * window_rows);
    std::vector<std::vector<float>> bld(window_rows);
    std::vector<std::vector<double>> out(window_rows, std::vector<double>(width));
    std::vector<std::size_t> cell_row, cell_col;

    for (std::size_t r0 = 0; r0 < height; r0 += window_rows) {
        const std::size_t rows = std::min(window_rows, height - r0);
        cell_row.clear();
        cell_col.clear();
        for (std::size_t r = 0; r < rows; ++r) {
            building_row(r0 + r, bld[r]);
            for (std::size_t c = 0; c < width; ++c) {
                if (bld[r][c] > 0.0f) {
                    cell_row.push_back(r);
                    cell_col.push_back(c);
                }
            }
            for (std::size_t k = 0; k < layers; ++k) covariate_row(k, r0 + r, cov[k * window_rows + r]);
        }
        Matrix x(static_cast<Eigen::Index>(layers), static_cast<Eigen::Index>(cell_row.size()));
        for (std::size_t j = 0; j < cell_row.size(); ++j)
            for (std::size_t k = 0; k < layers; ++k)
                x(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j)) = normalize_value(
                    cov[k * window_rows + cell_row[j]][cell_col[j]], params.norm.mean[k], params.norm.stddev[k]);
        Vector occ = cell_row.empty() ? Vector() : forward_occupancy(params, x, Mode::infer);
        for (std::size_t r = 0; r < rows; ++r) std::fill(out[r].begin(), out[r].end(), 0.0);
        for (std::size_t j = 0; j < cell_row.size(); ++j) {
            double v = occ[static_cast<Eigen::Index>(j)];
            out[cell_row[j]][cell_col[j]] = params.occupancy_output ? v * bld[cell_row[j]][cell_col[j]] : v;
        }
        for (std::size_t r = 0; r < rows; ++r) sink(r0 + r, out[r]);
    }
}

// ============================================================================
// Checkpoints
// ============================================================================
//
// Layout, little-endian:
//   char[4] "PCKP", u16 version, u8 dtype (2 = f64), u8 flags (bit0 occupancy output)
//   u32 layer count L, u32 input width D, u32 x L output widths
//   f64 dropout
//   per layer: weight (row-major, out x in) f64, bias f64
//   D x f64 means, D x f64 standard deviations
//   D x (u32 byte length + UTF-8 name)

inline constexpr std::array<char, 4> kCheckpointMagic{'P', 'C', 'K', 'P'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

inline std::string encode_checkpoint(const ModelParams& p) {
    std::string out(kCheckpointMagic.data(), 4);
    le::put<std::uint16_t>(out, kCheckpointVersion);
    le::put<std::uint8_t>(out, 2);
    le::put<std::uint8_t>(out, p.occupancy_output ? 1 : 0);
    le::put<std::uint32_t>(out, static_cast<std::uint32_t>(p.layers.size()));
    le::put<std::uint32_t>(out, static_cast<std::uint32_t>(p.input_dim()));
    for (const auto& l : p.layers) le::put<std::uint32_t>(out, static_cast<std::uint32_t>(l.weight.rows()));
    le::put<double>(out, p.dropout);
    for (const auto& l : p.layers) {
        for (Eigen::Index r = 0; r < l.weight.rows(); ++r)
            for (Eigen::Index c = 0; c < l.weight.cols(); ++c) le::put<double>(out, l.weight(r, c));
        for (Eigen::Index r = 0; r < l.bias.size(); ++r) le::put<double>(out, l.bias[r]);
    }
    for (double m : p.norm.mean) le::put<double>(out, m);
    for (double s : p.norm.stddev) le::put<double>(out, s);
    for (const auto& n : p.norm.names) {
        le::put<std::uint32_t>(out, static_cast<std::uint32_t>(n.size()));
        out += n;
    }
    return out;
}

inline ModelParams decode_checkpoint(std::string_view bytes, const std::string& source) {
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    std::size_t off = 0;
    auto need = [&](std::size_t n) {
        if (off + n > bytes.size())
            throw Error(ErrorCode::format, source + ": truncated checkpoint at byte offset " + std::to_string(bytes.size()));
    };
    auto u32 = [&] { need(4); auto v = le::get<std::uint32_t>(p + off); off += 4; return v; };
    auto f64 = [&] { need(8); auto v = le::get<double>(p + off); off += 8; return v; };

    need(8);
    if (std::memcmp(p, kCheckpointMagic.data(), 4) != 0) throw Error(ErrorCode::format, source + ": bad magic, not a checkpoint");
    if (le::get<std::uint16_t>(p + 4) != kCheckpointVersion) throw Error(ErrorCode::format, source + ": unsupported checkpoint version");
    if (p[6] != 2) throw Error(ErrorCode::format, source + ": checkpoint payload must be f64");
    ModelParams m;
    m.occupancy_output = (p[7] & 1) != 0;
    off = 8;
    const std::uint32_t n_layers = u32();
    const std::uint32_t d = u32();
    if (n_layers == 0 || n_layers > 64 || d == 0) throw Error(ErrorCode::format, source + ": implausible network shape");
    std::vector<std::uint32_t> widths(n_layers);
    for (auto& w : widths) w = u32();
    m.dropout = f64();
    std::uint32_t fan_in = d;
    for (std::uint32_t l = 0; l < n_layers; ++l) {
        DenseLayer layer{Matrix(widths[l], fan_in), Vector(widths[l])};
        need(static_cast<std::size_t>(widths[l]) * (fan_in + 1) * 8);
        for (Eigen::Index r = 0; r < layer.weight.rows(); ++r)
            for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) layer.weight(r, c) = f64();
        for (Eigen::Index r = 0; r < layer.bias.size(); ++r) layer.bias[r] = f64();
        m.layers.push_back(std::move(layer));
        fan_in = widths[l];
    }
    if (fan_in != 1) throw Error(ErrorCode::format, source + ": network output width must be 1");
    m.norm.mean.resize(d);
    m.norm.stddev.resize(d);
    for (auto& v : m.norm.mean) v = f64();
    for (auto& v : m.norm.stddev) v = f64();
    for (std::uint32_t k = 0; k < d; ++k) {
        std::uint32_t len = u32();
        need(len);
        m.norm.names.emplace_back(bytes.substr(off, len));
        off += len;
    }
    if (off != bytes.size()) throw Error(ErrorCode::format, source + ": trailing bytes after checkpoint at offset " + std::to_string(off));
    return m;
}

inline void save_checkpoint(const ModelParams& p, const fs::path& path) { write_file_atomic(path, encode_checkpoint(p)); }

inline ModelParams load_checkpoint(const fs::path& path) {
    return decode_checkpoint(read_file_bytes(path), path.string());
}

} // namespace popmap
