// popmap: command-line front end. Each subcommand delegates to one library
// operation and writes its outputs plus a run.json into --out.

#include "popmap/baselines.hpp"
#include "popmap/eval.hpp"
#include "popmap/io.hpp"
#include "popmap/model.hpp"
#include "popmap/parallel.hpp"
#include "popmap/synth.hpp"
#include "popmap/train.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <fstream>
#include <iostream>
#include <random>

using namespace popmap;
using nlohmann::ordered_json;

namespace {

// Merges a flat JSON object keyed by long flag name into `sub`. Options
// already given on the command line keep their command-line value.
void apply_config(CLI::App* sub, const fs::path& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file_bytes(path));
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::format, path.string() + ": invalid JSON: " + e.what());
    }
    if (!j.is_object()) throw Error(ErrorCode::format, path.string() + ": top level must be an object");
    auto scalar = [](const nlohmann::json& v) -> std::string {
        if (v.is_string()) return v.get<std::string>();
        if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
        return v.dump();
    };
    for (const auto& [key, value] : j.items()) {
        CLI::Option* opt = sub->get_option_no_throw("--" + key);
        if (!opt) opt = sub->get_option_no_throw(key);
        if (!opt || key == "config") throw Error(ErrorCode::usage, path.string() + ": unknown flag '" + key + "'");
        if (opt->count()) continue;
        std::vector<std::string> vals;
        if (value.is_array()) {
            for (const auto& v : value) vals.push_back(scalar(v));
        } else {
            vals.push_back(scalar(value));
        }
        try {
            opt->add_result(vals);
            opt->run_callback();
        } catch (const CLI::Error& e) {
            throw Error(ErrorCode::usage, path.string() + ": flag '" + key + "': " + e.what());
        }
    }
}

void log(const std::string& msg) { std::cerr << "popmap: " << msg << "\n"; }

std::string stream_hash(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::missing_file, "cannot open '" + path.string() + "'");
    std::uint64_t h = 0xcbf29ce484222325ull;
    std::vector<char> buf(1 << 20);
    while (in) {
        in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
        h = fnv1a(std::string_view(buf.data(), static_cast<std::size_t>(in.gcount())), h);
    }
    return hex64(h);
}

// Accumulates the RunManifest for one invocation.
struct Run {
    std::string command;
    fs::path out;
    std::uint64_t seed = 0;
    ordered_json inputs = ordered_json::object();
    ordered_json artifacts = ordered_json::array();
    std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

    void input(const fs::path& p) { inputs[p.string()] = stream_hash(p); }
    void manifest_inputs(const fs::path& manifest) {
        input(manifest);
        for (const auto& p : popmap::manifest_inputs(load_manifest(manifest), manifest)) input(p);
    }
    fs::path artifact(const std::string& name) {
        fs::create_directories(out);
        fs::path p = out / name;
        artifacts.push_back(p.string());
        return p;
    }
    void write_text(const std::string& name, std::string_view text) { write_file_atomic(artifact(name), text); }

    void finish(const CLI::App& sub) const {
        ordered_json cfg = ordered_json::object();
        for (const CLI::Option* opt : sub.get_options()) {
            const std::string name = opt->get_single_name();
            if (name.empty() || name == "help" || name == "config") continue;
            std::vector<std::string> vals = opt->count() ? opt->results() : std::vector<std::string>{};
            if (vals.empty() && !opt->get_default_str().empty()) vals = {opt->get_default_str()};
            if (opt->get_items_expected_max() > 1) cfg[name] = vals;
            else cfg[name] = vals.empty() ? "" : vals.front();
        }
        ordered_json j;
        j["command"] = command;
        j["subcommand"] = sub.get_name();
        j["config"] = cfg;
        j["seeds"] = {{"seed", seed}};
        j["inputs"] = inputs;
        j["artifacts"] = artifacts;
        j["wall_time_s"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        fs::create_directories(out);
        write_file_atomic(out / "run.json", j.dump(2) + "\n");
    }
};

void add_train_options(CLI::App* sub, TrainConfig& c) {
    sub->add_option("--learning-rate", c.learning_rate)->capture_default_str();
    sub->add_option("--beta1", c.beta1)->capture_default_str();
    sub->add_option("--beta2", c.beta2)->capture_default_str();
    sub->add_option("--adam-epsilon", c.adam_epsilon)->capture_default_str();
    sub->add_option("--weight-decays", c.weight_decays, "grid searched on validation MAPE")->capture_default_str();
    sub->add_option("--max-epochs", c.max_epochs)->capture_default_str();
    sub->add_option("--patience", c.patience)->capture_default_str();
    sub->add_option("--regions-per-step", c.regions_per_step)->capture_default_str();
    sub->add_option("--augmentation-probability", c.augmentation_probability)->capture_default_str();
    sub->add_option("--log-epsilon", c.log_epsilon)->capture_default_str();
    sub->add_option("--use-log-loss", c.use_log_loss)->capture_default_str();
    sub->add_option("--use-occupancy", c.use_occupancy)->capture_default_str();
    sub->add_option("--use-augmentation", c.use_augmentation)->capture_default_str();
    sub->add_option("--hidden", c.hidden, "hidden layer widths")->capture_default_str();
    sub->add_option("--dropout", c.dropout)->capture_default_str();
    sub->add_option("--output-init-scale", c.output_init_scale)->capture_default_str();
}

void add_mrf_options(CLI::App* sub, MrfConfig& c) {
    sub->add_option("--lambda", c.lambda)->capture_default_str();
    sub->add_option("--k", c.k)->capture_default_str();
    sub->add_option("--features", c.features, "layers for the kNN graph ('buildings' = building grid)")->capture_default_str();
    sub->add_option("--max-sweeps", c.max_sweeps)->capture_default_str();
    sub->add_option("--tolerance", c.tolerance)->capture_default_str();
    sub->add_option("--step", c.step)->capture_default_str();
    sub->add_option("--recompute-every", c.recompute_every)->capture_default_str();
}

std::string join_args(int argc, char** argv) {
    std::string s;
    for (int i = 0; i < argc; ++i) s += (i ? " " : "") + std::string(argv[i]);
    return s;
}

// Seeded train/validation split of the region ids at one level.
SplitSpec random_split(const Dataset& d, Level level, double val_fraction, std::uint64_t seed) {
    SplitSpec s;
    s.dataset = &d;
    s.level = level;
    auto ids = d.census(level).ids();
    std::mt19937_64 rng(seed);
    std::shuffle(ids.begin(), ids.end(), rng);
    std::size_t n_val = static_cast<std::size_t>(std::ceil(val_fraction * static_cast<double>(ids.size())));
    n_val = std::clamp<std::size_t>(n_val, 1, ids.size() > 1 ? ids.size() - 1 : 1);
    s.val.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_val));
    s.train.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_val), ids.end());
    std::sort(s.train.begin(), s.train.end());
    std::sort(s.val.begin(), s.val.end());
    return s;
}

std::string summary_row(const std::string& label, const std::string& rotation, const MetricsReport& m, std::uint64_t seed) {
    return label + "," + rotation + "," + format_double(m.r2) + "," + format_double(m.mae) + "," + format_double(m.mape) +
           "," + std::to_string(m.n_regions) + "," + std::to_string(m.n_excluded_mape) + "," + std::to_string(seed) + "\n";
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Fine-grained population maps from census counts"};
    app.require_subcommand(1);
    app.option_defaults()->always_capture_default();

    std::uint64_t seed = 0;
    std::size_t threads = 0;
    std::string out_dir;
    std::string config_path;
    std::map<CLI::App*, std::vector<CLI::Option*>> required;

    auto make_sub = [&](const std::string& name, const std::string& help, bool needs_out = true) {
        CLI::App* sub = app.add_subcommand(name, help);
        sub->add_option("--config", config_path, "JSON file supplying any flag; the command line wins");
        sub->add_option("--seed", seed, "seed for all randomness")->capture_default_str();
        sub->add_option("--threads", threads, "worker threads (default: POPMAP_THREADS or all cores)");
        auto* o = sub->add_option("--out", out_dir, "output directory");
        if (needs_out) required[sub].push_back(o);
        return sub;
    };

    // Required flags are checked after --config has been merged.
    auto req = [&](CLI::App* s, CLI::Option* o) {
        required[s].push_back(o);
        return o;
    };

    // synth
    SynthSpec synth;
    bool heterogeneous = false;
    CLI::App* c_synth = make_sub("synth", "generate a synthetic world with ground truth");
    c_synth->add_option("--name", synth.name)->capture_default_str();
    c_synth->add_option("--width", synth.width)->capture_default_str();
    c_synth->add_option("--height", synth.height)->capture_default_str();
    c_synth->add_option("--n-covariates", synth.n_covariates)->capture_default_str();
    c_synth->add_option("--n-fine-regions", synth.n_fine_regions)->capture_default_str();
    c_synth->add_option("--n-coarse-regions", synth.n_coarse_regions)->capture_default_str();
    c_synth->add_option("--bias", synth.bias)->capture_default_str();
    c_synth->add_option("--weights", synth.weights)->capture_default_str();
    c_synth->add_option("--n-blobs", synth.n_blobs)->capture_default_str();
    c_synth->add_option("--blob-peak", synth.blob_peak)->capture_default_str();
    c_synth->add_option("--blob-radius", synth.blob_radius)->capture_default_str();
    c_synth->add_option("--background", synth.background)->capture_default_str();
    c_synth->add_option("--noise", synth.noise)->capture_default_str();
    c_synth->add_flag("--heterogeneous", heterogeneous, "use the high-contrast occupancy weights");

    // validate
    std::string manifest;
    CLI::App* c_validate = make_sub("validate", "check a dataset manifest and its files", false);
    req(c_validate, c_validate->add_option("manifest", manifest));

    // train
    TrainConfig train_cfg;
    std::vector<std::string> data;
    std::string level_name = "coarse";
    double val_fraction = 0.2;
    CLI::App* c_train = make_sub("train", "fit the occupancy model on region counts");
    req(c_train, c_train->add_option("--data", data, "dataset manifests (several = round-robin training)"));
    c_train->add_option("--level", level_name, "supervision level")->check(CLI::IsMember({"coarse", "fine"}))->capture_default_str();
    c_train->add_option("--val-fraction", val_fraction)->capture_default_str();
    add_train_options(c_train, train_cfg);

    // predict
    std::string checkpoint;
    std::size_t window_rows = 32;
    CLI::App* c_predict = make_sub("predict", "raw population grid from a checkpoint (row-streamed)");
    req(c_predict, c_predict->add_option("--data", manifest, "dataset manifest"));
    req(c_predict, c_predict->add_option("--checkpoint", checkpoint));
    c_predict->add_option("--window-rows", window_rows)->capture_default_str();

    // adjust
    std::string raw_path;
    CLI::App* c_adjust = make_sub("adjust", "rescale a raw grid to match census counts");
    req(c_adjust, c_adjust->add_option("--data", manifest));
    req(c_adjust, c_adjust->add_option("--raw", raw_path, "raw population PGRD"));
    c_adjust->add_option("--level", level_name)->check(CLI::IsMember({"coarse", "fine"}))->capture_default_str();

    // disaggregate-buildings
    CLI::App* c_bld = make_sub("disaggregate-buildings", "split census counts by building counts");
    req(c_bld, c_bld->add_option("--data", manifest));
    c_bld->add_option("--level", level_name)->check(CLI::IsMember({"coarse", "fine"}))->capture_default_str();

    // mrf
    MrfConfig mrf_cfg;
    CLI::App* c_mrf = make_sub("mrf", "MRF/ICM disaggregation baseline");
    req(c_mrf, c_mrf->add_option("--data", manifest));
    c_mrf->add_option("--level", level_name)->check(CLI::IsMember({"coarse", "fine"}))->capture_default_str();
    add_mrf_options(c_mrf, mrf_cfg);

    // evaluate
    ProtocolConfig proto;
    std::string protocol_name_arg, grid_path, method = "model";
    CLI::App* c_eval = make_sub("evaluate", "score a grid, or run a cross-validation protocol");
    req(c_eval, c_eval->add_option("--data", data, "dataset manifests"));
    auto* o_grid = c_eval->add_option("--grid", grid_path, "population PGRD to score against the census");
    auto* o_proto = c_eval->add_option("--protocol", protocol_name_arg)
                        ->check(CLI::IsMember({"coarse", "fine", "transfer", "pooled"}));
    o_grid->excludes(o_proto);
    c_eval->add_option("--level", level_name, "census level scored with --grid")
        ->check(CLI::IsMember({"coarse", "fine"}))
        ->capture_default_str();
    c_eval->add_option("--method", method)->check(CLI::IsMember({"model", "buildings", "mrf"}))->capture_default_str();
    c_eval->add_option("--n-folds", proto.n_folds)->capture_default_str();
    c_eval->add_option("--rotations", proto.rotations, "rotations to run (default all)");
    c_eval->add_option("--holdout", proto.holdout, "transfer: held-out dataset name (default last)");
    c_eval->add_option("--transfer-repeats", proto.transfer_repeats)->capture_default_str();
    c_eval->add_option("--val-fraction", proto.val_fraction)->capture_default_str();
    add_train_options(c_eval, proto.train);
    add_mrf_options(c_eval, mrf_cfg);

    // importance
    std::string metric = "mae";
    std::size_t repeats = 5;
    CLI::App* c_imp = make_sub("importance", "permutation importance of each covariate");
    req(c_imp, c_imp->add_option("--data", manifest));
    req(c_imp, c_imp->add_option("--checkpoint", checkpoint));
    c_imp->add_option("--level", level_name)->check(CLI::IsMember({"coarse", "fine"}))->capture_default_str();
    c_imp->add_option("--metric", metric)->check(CLI::IsMember({"mae", "mape", "r2"}))->capture_default_str();
    c_imp->add_option("--repeats", repeats)->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::string msg = e.what();
        std::replace(msg.begin(), msg.end(), '\n', ' ');
        std::cerr << "error: usage: " << msg << "\n";
        return 2;
    }

    CLI::App* sub = app.get_subcommands().front();
    Run run;
    run.command = join_args(argc, argv);
    run.out = out_dir;
    run.seed = seed;
    if (threads > 0) set_thread_count(threads);

    try {
        if (!config_path.empty()) apply_config(sub, config_path);
        for (const CLI::Option* o : required[sub])
            if (!o->count()) throw Error(ErrorCode::usage, o->get_name() + " is required");
        const Level level = parse_level(level_name);

        if (sub == c_synth) {
            SynthSpec s = synth;
            if (heterogeneous) {
                SynthSpec h = heterogeneous_synth_spec(seed);
                s.weights = h.weights;
                s.name = c_synth->get_option("--name")->count() ? synth.name : h.name;
            }
            s.seed = seed;
            auto world = generate(s);
            fs::path m = save_world(world, out_dir);
            run.artifacts.push_back(m.string());
            for (const auto& entry : fs::directory_iterator(out_dir))
                if (entry.path() != m && entry.path().filename() != "run.json") run.artifacts.push_back(entry.path().string());
            std::cout << m.string() << "\n";
        } else if (sub == c_validate) {
            Dataset d = load_dataset(manifest);
            log("dataset '" + d.name + "' " + shape_string(d.width(), d.height()) + ", " +
                std::to_string(d.covariates.layer_count()) + " covariates, " + std::to_string(d.fine_census.size()) +
                " fine regions" + (d.has_coarse() ? ", " + std::to_string(d.coarse_census->size()) + " coarse regions" : ""));
            std::cout << "ok\n";
            if (out_dir.empty()) return 0;
            run.manifest_inputs(manifest);
        } else if (sub == c_train) {
            std::vector<Dataset> sets;
            for (const auto& m : data) {
                run.manifest_inputs(m);
                sets.push_back(load_dataset(m));
            }
            std::vector<SplitSpec> splits;
            for (std::size_t i = 0; i < sets.size(); ++i)
                splits.push_back(random_split(sets[i], level, val_fraction, seed + i));
            TrainConfig c = train_cfg;
            c.seed = seed;
            FitResult r = fit(splits, c);
            for (const auto& w : r.warnings) log("warning: " + w);
            log("best validation MAPE " + format_double(r.best_val_mape) + " at weight decay " +
                format_double(r.best_weight_decay));
            fs::path ck = run.artifact("model.pckp");
            save_checkpoint(r.params, ck);
            run.write_text("train_log.csv", encode_train_log(r.log));
            std::cout << ck.string() << "\n";
        } else if (sub == c_predict) {
            ModelParams params = load_checkpoint(checkpoint);
            run.input(checkpoint);
            run.manifest_inputs(manifest);
            const DatasetManifest m = load_manifest(manifest);
            const fs::path base = fs::path(manifest).parent_path();
            std::vector<std::string> names;
            if (m.use_layers.empty()) {
                for (const auto& c : m.covariates) names.push_back(c.name);
            } else {
                names = m.use_layers;
            }
            require_matching_covariates(params.norm, names);
            std::vector<GridRowReader> cov;
            for (const auto& n : names) {
                auto it = std::find_if(m.covariates.begin(), m.covariates.end(), [&](const auto& c) { return c.name == n; });
                if (it == m.covariates.end()) throw Error(ErrorCode::unknown_layer, "use_layers references unknown layer '" + n + "'");
                cov.emplace_back(base / it->path);
            }
            GridRowReader bld(base / m.buildings), regions(base / m.fine_regions);
            auto check = [&](const GridRowReader& r, const std::string& what) {
                if (r.width() != m.width || r.height() != m.height)
                    throw Error(ErrorCode::dimension_mismatch, what + " is " + shape_string(r.width(), r.height()) +
                                                                   ", manifest declares " + shape_string(m.width, m.height));
            };
            for (std::size_t k = 0; k < cov.size(); ++k) check(cov[k], "layer '" + names[k] + "'");
            check(bld, "buildings");
            check(regions, "fine regions");
            GridRowWriter writer(run.artifact("raw.pgrd"), m.width, m.height);
            std::vector<std::int32_t> region_row;
            std::vector<double> masked;
            predict_rows(
                params, m.width, m.height, [&](std::size_t k, std::size_t row, std::vector<float>& v) { cov[k].read_row(row, v); },
                [&](std::size_t row, std::vector<float>& v) { bld.read_row(row, v); },
                [&](std::size_t row, const std::vector<double>& p) {
                    regions.read_row(row, region_row);
                    masked = p;
                    for (std::size_t c = 0; c < masked.size(); ++c)
                        if (region_row[c] == kOutside) masked[c] = 0.0;
                    writer.write_row(masked);
                },
                window_rows);
            writer.finish();
            std::cout << (run.out / "raw.pgrd").string() << "\n";
        } else if (sub == c_adjust) {
            run.manifest_inputs(manifest);
            run.input(raw_path);
            Dataset d = load_dataset(manifest);
            auto raw = load_grid<double>(raw_path);
            std::vector<ZeroMassRegion> fb;
            auto adjusted = dasymetric_adjust(raw, d.regions(level), d.census(level), &d.buildings, &fb);
            for (const auto& z : fb)
                log("region " + std::to_string(z.region_id) + " had zero raw mass; spread uniformly over " +
                    std::to_string(z.cells_used) + (z.used_built_cells ? " built" : "") + " cells");
            fs::path p = run.artifact("adjusted.pgrd");
            save_grid(adjusted, p);
            std::cout << p.string() << "\n";
        } else if (sub == c_bld) {
            run.manifest_inputs(manifest);
            Dataset d = load_dataset(manifest);
            auto g = building_disaggregate(d.buildings, d.regions(level), d.census(level));
            fs::path p = run.artifact("population.pgrd");
            save_grid(g, p);
            std::cout << p.string() << "\n";
        } else if (sub == c_mrf) {
            run.manifest_inputs(manifest);
            Dataset d = load_dataset(manifest);
            auto r = mrf_disaggregate(d.covariates, d.buildings, d.regions(level), d.census(level), mrf_cfg);
            log(std::to_string(r.sweeps) + " sweeps, " + (r.converged ? "converged" : "sweep limit reached"));
            fs::path p = run.artifact("population.pgrd");
            save_grid(r.grid, p);
            std::string energy = "sweep,energy\n";
            for (std::size_t i = 0; i < r.energy.size(); ++i) energy += std::to_string(i) + "," + format_double(r.energy[i]) + "\n";
            run.write_text("energy.csv", energy);
            std::cout << p.string() << "\n";
        } else if (sub == c_eval) {
            std::vector<Dataset> sets;
            for (const auto& m : data) {
                run.manifest_inputs(m);
                sets.push_back(load_dataset(m));
            }
            if (!grid_path.empty()) {
                if (sets.size() != 1) throw Error(ErrorCode::usage, "--grid takes exactly one --data manifest");
                run.input(grid_path);
                auto g = load_grid<double>(grid_path);
                const Dataset& d = sets.front();
                require_same_shape(g, d.regions(level), "--grid vs regions");
                auto totals = totals_for_census(g, d.regions(level), d.census(level));
                MetricsReport mr = compute_metrics(totals, d.census(level));
                if (!mr.r2_note.empty()) log(mr.r2_note);
                std::vector<RegionResult> rows;
                for (const auto& [id, v] : totals) rows.push_back({d.name, id, d.census(level).count(id), v});
                run.write_text("summary.csv", "protocol,rotation,r2,mae,mape,n_regions,n_excluded_mape,seed\n" +
                                                  summary_row("grid", "0", mr, seed));
                run.write_text("regions.csv", encode_regions_csv(rows));
            } else {
                if (protocol_name_arg.empty()) throw Error(ErrorCode::usage, "evaluate needs --grid or --protocol");
                proto.protocol = parse_protocol(protocol_name_arg);
                proto.seed = seed;
                std::vector<const Dataset*> ptrs;
                for (const auto& d : sets) ptrs.push_back(&d);
                Predictor pred = method == "model"       ? model_predictor(proto.train)
                                 : method == "buildings" ? building_predictor()
                                                         : mrf_predictor(mrf_cfg, proto.protocol == Protocol::fine ? Level::fine : Level::coarse);
                ProtocolReport rep = run_protocol(ptrs, proto, pred);
                for (const auto& r : rep.rotations)
                    log("rotation " + std::to_string(r.rotation) + ": R2 " + format_double(r.metrics.r2) + ", MAPE " +
                        format_double(r.metrics.mape));
                std::vector<RegionResult> rows;
                for (const auto& r : rep.rotations) rows.insert(rows.end(), r.regions.begin(), r.regions.end());
                run.write_text("summary.csv", encode_summary_csv(rep, protocol_name_arg));
                run.write_text("regions.csv", encode_regions_csv(rows));
            }
            std::cout << (run.out / "summary.csv").string() << "\n";
        } else if (sub == c_imp) {
            run.manifest_inputs(manifest);
            run.input(checkpoint);
            Dataset d = load_dataset(manifest);
            ModelParams params = load_checkpoint(checkpoint);
            require_matching_covariates(params.norm, d.covariates.names());
            auto scores = permutation_importance(params, d, level, parse_importance_metric(metric), seed, repeats);
            std::string csv = "layer,mean";
            for (std::size_t r = 0; r < repeats; ++r) csv += ",repeat_" + std::to_string(r + 1);
            csv += "\n";
            for (const auto& s : scores) {
                csv += s.layer + "," + format_double(s.mean);
                for (double v : s.repeats) csv += "," + format_double(v);
                csv += "\n";
            }
            run.write_text("importance.csv", csv);
            std::cout << (run.out / "importance.csv").string() << "\n";
        }
        run.finish(*sub);
    } catch (const Error& e) {
        std::string msg = e.what();
        std::replace(msg.begin(), msg.end(), '\n', ' ');
        std::cerr << "error: " << e.category() << ": " << msg << "\n";
        return exit_code(e.code());
    } catch (const std::exception& e) {
        std::cerr << "error: internal: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
