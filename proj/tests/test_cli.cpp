#include "popmap/eval.hpp"
#include "popmap/io.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <string>
#include <sys/wait.h>

using namespace popmap;

namespace {

struct Result {
    int code = -1;
    std::string out, err;
};

Result run_cli(const std::string& args, const fs::path& scratch) {
    const fs::path err_file = scratch / "stderr.txt";
    fs::create_directories(scratch);
    std::string cmd = std::string(POPMAP_CLI_PATH) + " " + args + " 2>" + err_file.string();
    Result r;
    FILE* p = popen(cmd.c_str(), "r");
    if (!p) return r;
    char buf[4096];
    std::size_t n;
    while ((n = fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
    int status = pclose(p);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.err = read_file_bytes(err_file);
    return r;
}

fs::path scratch_dir(const std::string& name) {
    fs::path d = fs::temp_directory_path() / ("popmap_cli_" + name);
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

const std::string kSmallWorld = "--width 32 --height 32 --n-fine-regions 16 --n-coarse-regions 4";
const std::string kQuickTrain = "--max-epochs 5 --weight-decays 0 --hidden 8 8 8 --learning-rate 1e-3";

} // namespace

TEST(Cli, SynthThenValidate) {
    auto dir = scratch_dir("synth");
    auto r = run_cli("synth --seed 7 --out " + (dir / "w").string(), dir);
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(r.out, (dir / "w" / "manifest.json").string() + "\n");
    EXPECT_TRUE(fs::exists(dir / "w" / "run.json"));
    auto v = run_cli("validate " + (dir / "w" / "manifest.json").string(), dir);
    EXPECT_EQ(v.code, 0) << v.err;
}

TEST(Cli, EndToEndPipeline) {
    auto dir = scratch_dir("pipeline");
    const std::string w = (dir / "w").string(), m = w + "/manifest.json";
    ASSERT_EQ(run_cli("synth --seed 3 " + kSmallWorld + " --out " + w, dir).code, 0);

    auto t = run_cli("train --data " + m + " --level coarse " + kQuickTrain + " --out " + (dir / "train").string(), dir);
    ASSERT_EQ(t.code, 0) << t.err;
    const std::string ck = (dir / "train" / "model.pckp").string();
    EXPECT_TRUE(fs::exists(ck));
    EXPECT_TRUE(fs::exists(dir / "train" / "train_log.csv"));

    auto p = run_cli("predict --data " + m + " --checkpoint " + ck + " --out " + (dir / "pred").string(), dir);
    ASSERT_EQ(p.code, 0) << p.err;
    const std::string raw = (dir / "pred" / "raw.pgrd").string();

    auto a = run_cli("adjust --data " + m + " --raw " + raw + " --level coarse --out " + (dir / "adj").string(), dir);
    ASSERT_EQ(a.code, 0) << a.err;
    const fs::path adjusted = dir / "adj" / "adjusted.pgrd";

    auto e = run_cli("evaluate --data " + m + " --grid " + adjusted.string() + " --level fine --out " + (dir / "eval").string(), dir);
    ASSERT_EQ(e.code, 0) << e.err;
    auto csv = read_file_bytes(dir / "eval" / "summary.csv");
    EXPECT_EQ(csv.rfind("protocol,rotation,r2,mae,mape,n_regions,n_excluded_mape,seed\ngrid,0,", 0), 0u) << csv;

    // The adjusted grid must reproduce the coarse census.
    Dataset d = load_dataset(m);
    auto g = load_grid<double>(adjusted);
    for (const auto& [id, s] : aggregate_by_region(g, *d.coarse_regions))
        EXPECT_NEAR(s, d.coarse_census->count(id), 1e-4 * (1.0 + s)); // f32 storage

    auto run_json = nlohmann::json::parse(read_file_bytes(dir / "adj" / "run.json"));
    EXPECT_EQ(run_json["subcommand"], "adjust");
    EXPECT_EQ(run_json["config"]["level"], "coarse");
    EXPECT_TRUE(run_json["inputs"].contains(raw));
}

TEST(Cli, ProtocolEvaluation) {
    auto dir = scratch_dir("protocol");
    const std::string w = (dir / "w").string(), m = w + "/manifest.json";
    ASSERT_EQ(run_cli("synth --seed 4 " + kSmallWorld + " --out " + w, dir).code, 0);
    auto e = run_cli("evaluate --data " + m + " --protocol coarse --method buildings --n-folds 4 --out " +
                         (dir / "eval").string(),
                     dir);
    ASSERT_EQ(e.code, 0) << e.err;
    auto csv = read_file_bytes(dir / "eval" / "summary.csv");
    EXPECT_NE(csv.find("\ncoarse,pooled,"), std::string::npos) << csv;
    EXPECT_NE(csv.find("\ncoarse,std,"), std::string::npos);
}

TEST(Cli, CheckpointCovariateMismatch) {
    auto dir = scratch_dir("mismatch");
    const std::string w = (dir / "w").string(), m = w + "/manifest.json";
    ASSERT_EQ(run_cli("synth --seed 1 " + kSmallWorld + " --out " + w, dir).code, 0);
    ASSERT_EQ(run_cli("train --data " + m + " --max-epochs 1 --weight-decays 0 --hidden 8 8 8 --out " + (dir / "t").string(), dir).code, 0);

    auto j = nlohmann::json::parse(read_file_bytes(m));
    j["use_layers"] = {"nightlights", "elevation"};
    write_file_atomic(w + "/subset.json", j.dump());
    auto r = run_cli("predict --data " + w + "/subset.json --checkpoint " + (dir / "t" / "model.pckp").string() + " --out " +
                         (dir / "p").string(),
                     dir);
    EXPECT_EQ(r.code, 3);
    EXPECT_EQ(r.err.rfind("error: covariate-mismatch: ", 0), 0u) << r.err;
    EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1);
}

TEST(Cli, UsageErrors) {
    auto dir = scratch_dir("usage");
    auto r = run_cli("synth --no-such-flag --out " + dir.string(), dir);
    EXPECT_EQ(r.code, 2);
    EXPECT_EQ(r.err.rfind("error: usage: ", 0), 0u) << r.err;
    EXPECT_EQ(run_cli("", dir).code, 2);
    EXPECT_EQ(run_cli("frobnicate", dir).code, 2);
}

TEST(Cli, MissingManifestIsDataError) {
    auto dir = scratch_dir("missing");
    auto r = run_cli("validate " + (dir / "nope.json").string(), dir);
    EXPECT_EQ(r.code, 3);
    EXPECT_EQ(r.err.rfind("error: missing-file: ", 0), 0u) << r.err;
}

TEST(Cli, ConfigFileWithCommandLineOverride) {
    auto dir = scratch_dir("config");
    write_file_atomic(dir / "cfg.json", R"({"width": 20, "height": 24, "n-fine-regions": 6, "n-coarse-regions": 2})");
    ASSERT_EQ(run_cli("synth --config " + (dir / "cfg.json").string() + " --height 30 --out " + (dir / "w").string(), dir).code, 0);
    Dataset d = load_dataset(dir / "w" / "manifest.json");
    EXPECT_EQ(d.width(), 20u);
    EXPECT_EQ(d.height(), 30u);
    EXPECT_EQ(d.fine_census.size(), 6u);
}

TEST(Cli, SameSeedSameBytes) {
    auto dir = scratch_dir("determinism");
    for (const char* tag : {"a", "b"}) {
        ASSERT_EQ(run_cli("synth --seed 9 " + kSmallWorld + " --out " + (dir / tag).string(), dir).code, 0);
        ASSERT_EQ(run_cli("train --data " + (dir / tag / "manifest.json").string() + " " + kQuickTrain + " --seed 2 --out " +
                              (dir / tag / "t").string(),
                          dir)
                      .code,
                  0);
    }
    EXPECT_EQ(read_file_bytes(dir / "a" / "buildings.pgrd"), read_file_bytes(dir / "b" / "buildings.pgrd"));
    EXPECT_EQ(read_file_bytes(dir / "a" / "t" / "model.pckp"), read_file_bytes(dir / "b" / "t" / "model.pckp"));
    EXPECT_EQ(read_file_bytes(dir / "a" / "t" / "train_log.csv"), read_file_bytes(dir / "b" / "t" / "train_log.csv"));
}
