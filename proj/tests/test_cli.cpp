// End-to-end tests that drive the hitm binary (path injected via the
// HITM_BINARY compile definition) through popen, covering exit codes, the
// config file, the gen/train/attack/eval workflow, and the piped stream demo.

#include <catch2/catch_amalgamated.hpp>

#include <sys/wait.h>
#include <unistd.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;

namespace {

struct RunResult {
    int exit_code = -1;
    std::string output;  // stdout and stderr combined
};

RunResult run_command(const std::string& cmd) {
    RunResult r;
    FILE* pipe = ::popen((cmd + " 2>&1").c_str(), "r");
    REQUIRE(pipe != nullptr);
    char buf[4096];
    std::size_t n = 0;
    while ((n = std::fread(buf, 1, sizeof buf, pipe)) > 0) r.output.append(buf, n);
    const int status = ::pclose(pipe);
    REQUIRE(status != -1);
    r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

RunResult run_hitm(const std::string& args) {
    return run_command(std::string(HITM_BINARY) + " " + args);
}

struct TempDir {
    fs::path path;
    TempDir() : path(fs::temp_directory_path() /
                     ("hitm_cli_" + std::to_string(::getpid()) + "_" +
                      std::to_string(counter++))) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string str(const std::string& leaf) const {
        return (path / leaf).string();
    }
    static inline int counter = 0;
};

bool contains(const std::string& haystack, const std::string& needle) {
    return haystack.find(needle) != std::string::npos;
}

// Returns all five fields of the last data row of a metrics CSV.
std::vector<double> last_csv_row(const std::string& file) {
    std::ifstream in(file);
    REQUIRE(in.good());
    std::string line;
    REQUIRE(std::getline(in, line));
    REQUIRE(line ==
            "iteration,mean_conf_variation,num_boxes,relative_box_variation,"
            "adv_loss");
    std::string last;
    while (std::getline(in, line))
        if (!line.empty()) last = line;
    REQUIRE_FALSE(last.empty());
    std::vector<double> fields;
    std::stringstream row(last);
    std::string cell;
    while (std::getline(row, cell, ',')) fields.push_back(std::stod(cell));
    REQUIRE(fields.size() == 5);
    return fields;
}

int csv_data_rows(const std::string& file) {
    std::ifstream in(file);
    REQUIRE(in.good());
    std::string line;
    REQUIRE(std::getline(in, line));  // header
    int rows = 0;
    while (std::getline(in, line))
        if (!line.empty()) ++rows;
    return rows;
}

}  // namespace

TEST_CASE("usage errors exit with status 2") {
    const auto none = run_hitm("");
    CHECK(none.exit_code == 2);
    CHECK(contains(none.output, "subcommand"));

    const auto bad_flag = run_hitm("gen-scenes --no-such-flag --out x");
    CHECK(bad_flag.exit_code == 2);

    const auto bad_sub = run_hitm("frobnicate");
    CHECK(bad_sub.exit_code == 2);

    const auto missing_required = run_hitm("gen-scenes");  // --out is required
    CHECK(missing_required.exit_code == 2);
    CHECK(contains(missing_required.output, "--out"));
}

TEST_CASE("help exits with status 0") {
    const auto top = run_hitm("--help");
    CHECK(top.exit_code == 0);
    CHECK(contains(top.output, "gen-scenes"));
    CHECK(contains(top.output, "train-uap"));

    const auto sub = run_hitm("attack --help");
    CHECK(sub.exit_code == 0);
    CHECK(contains(sub.output, "--eps"));
}

TEST_CASE("runtime failures exit with status 1") {
    TempDir tmp;

    const auto bad_scenes =
        run_hitm("train --scenes " + tmp.str("nowhere") + " --out " +
                 tmp.str("w.bin"));
    CHECK(bad_scenes.exit_code == 1);
    CHECK(contains(bad_scenes.output, "error:"));

    const auto bad_family =
        run_hitm("gen-scenes --family f9 --out " + tmp.str("scenes"));
    CHECK(bad_family.exit_code == 1);
    CHECK(contains(bad_family.output, "f9"));

    const auto bad_weights =
        run_hitm("attack --weights " + tmp.str("missing.bin") + " --image " +
                 tmp.str("missing.ppm") + " --out " + tmp.str("d.bin"));
    CHECK(bad_weights.exit_code == 1);

    const auto bad_loss = run_hitm("gen-scenes --count 0 --out " +
                                   tmp.str("scenes"));
    CHECK(bad_loss.exit_code == 1);
}

TEST_CASE("config file errors exit with status 1") {
    TempDir tmp;

    {
        std::ofstream out(tmp.str("bad.json"));
        out << R"({"bogus": 1})";
    }
    const auto unknown =
        run_hitm("--config " + tmp.str("bad.json") + " gen-scenes --out " +
                 tmp.str("scenes"));
    CHECK(unknown.exit_code == 1);
    CHECK(contains(unknown.output, "bogus"));

    {
        std::ofstream out(tmp.str("typo.json"));
        out << R"({"attack": {"itres": 4}})";
    }
    const auto typo =
        run_hitm("--config " + tmp.str("typo.json") + " gen-scenes --out " +
                 tmp.str("scenes"));
    CHECK(typo.exit_code == 1);
    CHECK(contains(typo.output, "attack.itres"));

    {
        std::ofstream out(tmp.str("garbage.json"));
        out << "not json";
    }
    const auto garbage =
        run_hitm("--config " + tmp.str("garbage.json") + " gen-scenes --out " +
                 tmp.str("scenes"));
    CHECK(garbage.exit_code == 1);

    const auto missing =
        run_hitm("--config " + tmp.str("absent.json") + " gen-scenes --out " +
                 tmp.str("scenes"));
    CHECK(missing.exit_code == 1);
    CHECK(contains(missing.output, "cannot open"));
}

TEST_CASE("full workflow: generate, train, attack, evaluate, stream") {
    TempDir tmp;
    const std::string scenes = tmp.str("scenes");
    const std::string one = tmp.str("one");
    const std::string weights = tmp.str("w.bin");

    // --- dataset generation -------------------------------------------------
    const auto gen =
        run_hitm("gen-scenes --family f3 --count 6 --seed 7 --out " + scenes);
    REQUIRE(gen.exit_code == 0);
    CHECK(contains(gen.output, "wrote 6 scenes"));
    CHECK(fs::exists(fs::path(scenes) / "frame_000000.ppm"));
    CHECK(fs::exists(fs::path(scenes) / "frame_000005.ppm"));
    CHECK(fs::exists(fs::path(scenes) / "truth.json"));

    const auto gen_one =
        run_hitm("gen-scenes --family f3 --count 1 --seed 11 --out " + one);
    REQUIRE(gen_one.exit_code == 0);

    // Regeneration with the same seed is byte-identical.
    const std::string again = tmp.str("again");
    REQUIRE(run_hitm("gen-scenes --family f3 --count 1 --seed 11 --out " +
                     again)
                .exit_code == 0);
    {
        std::ifstream a(fs::path(one) / "frame_000000.ppm", std::ios::binary);
        std::ifstream b(fs::path(again) / "frame_000000.ppm", std::ios::binary);
        std::stringstream sa, sb;
        sa << a.rdbuf();
        sb << b.rdbuf();
        REQUIRE(sa.str() == sb.str());
    }

    // --- custom family via JSON ---------------------------------------------
    {
        std::ofstream out(tmp.str("family.json"));
        out << R"({"id": "flat", "background_mean": [0.5, 0.5, 0.5],)"
            << R"( "background_jitter": 0.0, "noise": 0.0})";
    }
    const auto custom = run_hitm("gen-scenes --family-json " +
                                 tmp.str("family.json") + " --count 2 --out " +
                                 tmp.str("custom"));
    CHECK(custom.exit_code == 0);
    CHECK(contains(custom.output, "family flat"));

    // --- training -----------------------------------------------------------
    const auto train = run_hitm("train --scenes " + scenes +
                                " --epochs 4 --lr 5e-3 --seed 3 --out " +
                                weights);
    REQUIRE(train.exit_code == 0);
    CHECK(contains(train.output, "epoch 0 mean_loss="));
    CHECK(contains(train.output, "epoch 3 mean_loss="));
    CHECK(contains(train.output, "wrote weights"));
    REQUIRE(fs::exists(weights));

    // --- image-specific attack ----------------------------------------------
    const std::string image = (fs::path(one) / "frame_000000.ppm").string();
    const auto atk = run_hitm("attack --weights " + weights + " --image " +
                              image +
                              " --loss pcb --mode vanish --iters 8 --out " +
                              tmp.str("delta.bin") + " --metrics " +
                              tmp.str("atk.csv"));
    REQUIRE(atk.exit_code == 0);
    CHECK(contains(atk.output, "iterations=8"));

    // --- evaluation reproduces the final attack record ----------------------
    const auto ev = run_hitm("eval --weights " + weights + " --scenes " + one +
                             " --uap " + tmp.str("delta.bin") + " --metrics " +
                             tmp.str("ev.csv"));
    REQUIRE(ev.exit_code == 0);
    CHECK(contains(ev.output, "scenes=1"));
    CHECK(contains(ev.output, "family=f3"));

    const auto atk_last = last_csv_row(tmp.str("atk.csv"));
    const auto ev_row = last_csv_row(tmp.str("ev.csv"));
    CHECK(atk_last[0] == 8.0);  // final iteration
    CHECK(ev_row[0] == 0.0);    // scene index
    for (int f = 1; f < 5; ++f)
        CHECK(std::abs(atk_last[f] - ev_row[f]) <= 1e-9);

    // --- universal attack ---------------------------------------------------
    const auto uap = run_hitm("train-uap --weights " + weights + " --scenes " +
                              scenes + " --iters 3 --out " + tmp.str("uap.bin") +
                              " --metrics " + tmp.str("uap.csv"));
    REQUIRE(uap.exit_code == 0);
    CHECK(contains(uap.output, "epochs=3"));
    CHECK(csv_data_rows(tmp.str("uap.csv")) == 3);

    // --- config file seeds defaults, flags still win ------------------------
    {
        std::ofstream out(tmp.str("cfg.json"));
        out << R"({"attack": {"iters": 5, "loss": "pc", "mode": "vanish"}})";
    }
    const auto cfg_run =
        run_hitm("--config " + tmp.str("cfg.json") + " attack --weights " +
                 weights + " --image " + image + " --out " +
                 tmp.str("d2.bin"));
    REQUIRE(cfg_run.exit_code == 0);
    CHECK(contains(cfg_run.output, "iterations=5"));

    const auto cfg_override =
        run_hitm("--config " + tmp.str("cfg.json") + " attack --weights " +
                 weights + " --image " + image + " --iters 2 --out " +
                 tmp.str("d3.bin"));
    REQUIRE(cfg_override.exit_code == 0);
    CHECK(contains(cfg_override.output, "iterations=2"));

    // --- piped stream demo: source | inject | sink --------------------------
    const std::string bin = HITM_BINARY;
    const auto pipeline = run_command(
        "( " + bin + " stream source --scenes " + scenes + " | " + bin +
        " stream inject --uap " + tmp.str("uap.bin") + " | " + bin +
        " stream sink --weights " + weights + " )");
    REQUIRE(pipeline.exit_code == 0);
    CHECK(contains(pipeline.output, "source: sent 6 frames"));
    CHECK(contains(pipeline.output, "inject: processed 6 frames"));
    CHECK(contains(pipeline.output, "frames=6"));
    CHECK(contains(pipeline.output, "frame 0 boxes="));

    // Online injection needs detector weights.
    const auto online = run_command(bin + " stream inject --uap " +
                                    tmp.str("uap.bin") +
                                    " --online < /dev/null");
    CHECK(online.exit_code == 1);
    CHECK(contains(online.output, "--weights"));
}
