#include "test_support.hpp"

#include <doctest.h>

#include "cli.hpp"
#include "terdit/checkpoint.hpp"

#include <fstream>
#include <sstream>

using namespace terdit;
namespace fs = std::filesystem;

namespace {

struct Result {
    int code;
    std::string out;
    std::string err;
};

Result run(std::vector<std::string> args) {
    args.insert(args.begin(), "terdit");
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), {}};
}

struct Workspace {
    fs::path dir = terdit::testing::temp_dir("cli");
    fs::path cfg = dir / "tiny.cfg";

    Workspace() {
        std::ofstream(cfg) << "# tiny model\nimage_size=4\nhidden_dim=16\ndepth=2\nnum_heads=2\nnum_classes=3\n";
    }
    ~Workspace() { fs::remove_all(dir); }
    std::string path(const std::string& name) const { return (dir / name).string(); }
};

}  // namespace

TEST_CASE("usage errors exit with 2") {
    CHECK(run({}).code == cli::kExitUsage);
    CHECK(run({"frobnicate"}).code == cli::kExitUsage);
    CHECK(run({"train"}).code == cli::kExitUsage);
    CHECK(run({"train", "--out", "x", "--adaln-rms", "maybe"}).code == cli::kExitUsage);
    CHECK(run({"sample", "--out", "x"}).code == cli::kExitUsage);
    CHECK(run({"train", "--help"}).code == cli::kExitOk);
}

TEST_CASE("train reports config problems with exit 2") {
    Workspace w;
    const auto missing = run({"train", "--config", w.path("nope.cfg"), "--out", w.path("r")});
    CHECK(missing.code == cli::kExitUsage);
    CHECK(missing.err.find("nope.cfg") != std::string::npos);

    std::ofstream(w.dir / "bad.cfg") << "hidden_dim=15\nnum_heads=2\n";
    CHECK(run({"train", "--config", w.path("bad.cfg"), "--out", w.path("r")}).code == cli::kExitUsage);
    std::ofstream(w.dir / "typo.cfg") << "hiden_dim=16\n";
    CHECK(run({"train", "--config", w.path("typo.cfg"), "--out", w.path("r")}).code == cli::kExitUsage);
    CHECK(run({"train", "--config", w.cfg.string(), "--out", w.path("r"), "--lr", "0"}).code == cli::kExitUsage);
    CHECK(run({"train", "--config", w.cfg.string(), "--out", w.path("r"), "--steps", "5", "--lr-drop-step", "6"}).code ==
          cli::kExitUsage);
}

TEST_CASE("train writes checkpoints and a loss log") {
    Workspace w;
    const auto r = run({"train", "--config", w.cfg.string(), "--out", w.path("run"), "--steps", "6", "--batch", "2",
                        "--ckpt-every", "3", "--seed", "4"});
    REQUIRE(r.code == cli::kExitOk);
    for (const char* f : {"master.terd", "ema.terd", "loss.tsv", "config.txt", "master_step3.terd", "master_step6.terd"})
        CHECK(fs::exists(w.dir / "run" / f));
    const auto log = slurp(w.dir / "run" / "loss.tsv");
    CHECK(log.rfind("step\traw\tsmoothed\n", 0) == 0);
    CHECK(std::count(log.begin(), log.end(), '\n') == 7);

    const auto master = pack::load_checkpoint(w.dir / "run" / "master.terd");
    CHECK(!master.has_packed());
    CHECK(master.config_text.find("hidden_dim=16") != std::string::npos);
    CHECK(slurp(w.dir / "run" / "master_step6.terd") == slurp(w.dir / "run" / "master.terd"));

    run({"train", "--config", w.cfg.string(), "--out", w.path("again"), "--steps", "6", "--batch", "2", "--seed", "4"});
    CHECK(slurp(w.dir / "again" / "master.terd") == slurp(w.dir / "run" / "master.terd"));
    CHECK(slurp(w.dir / "again" / "loss.tsv") == log);
}

TEST_CASE("train flags override the config file") {
    Workspace w;
    const auto r = run({"train", "--config", w.cfg.string(), "--out", w.path("r"), "--steps", "1", "--batch", "1",
                        "--adaln-rms", "off", "--quantize", "off"});
    REQUIRE(r.code == cli::kExitOk);
    const auto cfg = slurp(w.dir / "r" / "config.txt");
    CHECK(cfg.find("adaln_rms=false") != std::string::npos);
    CHECK(cfg.find("quantize_blocks=false") != std::string::npos);
}

TEST_CASE("lr-drop-step 0 uses the late rate from the first step") {
    Workspace w;
    const auto r = run({"train", "--config", w.cfg.string(), "--out", w.path("r"), "--steps", "2", "--batch", "1",
                        "--lr-drop-step", "0"});
    REQUIRE(r.code == cli::kExitOk);
    CHECK(r.out.find("step 1 ") != std::string::npos);
    CHECK(r.out.find("lr 0.0001") != std::string::npos);
    CHECK(r.out.find("lr 0.0005") == std::string::npos);
}

TEST_CASE("divergence exits with 3") {
    Workspace w;
    const auto r = run({"train", "--config", w.cfg.string(), "--out", w.path("r"), "--steps", "10", "--batch", "2",
                        "--lr", "1e30", "--lr-after", "1e30", "--clip-grad", "off"});
    CHECK(r.code == cli::kExitDivergence);
    CHECK(r.err.find("diverged") != std::string::npos);
}

TEST_CASE("pack, sample, inspect, capture and bench on a trained model") {
    Workspace w;
    REQUIRE(run({"train", "--config", w.cfg.string(), "--out", w.path("run"), "--steps", "4", "--batch", "2"}).code ==
            cli::kExitOk);
    const auto master = w.path("run/master.terd");
    const auto packed = w.path("packed.terd");

    REQUIRE(run({"pack", "--in", master, "--out", packed}).code == cli::kExitOk);
    CHECK(pack::load_checkpoint(packed).has_packed());
    const auto again = run({"pack", "--in", packed, "--out", w.path("twice.terd")});
    CHECK(again.code == cli::kExitUsage);
    CHECK(again.err.find("already packed") != std::string::npos);
    CHECK(!fs::exists(w.dir / "twice.terd"));

    auto sample = [&](const std::string& ckpt, const std::string& out, const std::string& seed, const std::string& cfg) {
        return run({"sample", "--ckpt", ckpt, "--class", "0", "--class", "2", "--steps", "12", "--seed", seed,
                    "--cfg-scale", cfg, "--out", w.path(out)});
    };
    REQUIRE(sample(master, "a", "1", "4").code == cli::kExitOk);
    REQUIRE(sample(packed, "b", "1", "4").code == cli::kExitOk);
    REQUIRE(sample(master, "c", "1", "4").code == cli::kExitOk);
    REQUIRE(sample(master, "d", "2", "4").code == cli::kExitOk);
    CHECK(fs::exists(w.dir / "a" / "sample_0_class0.ppm"));
    CHECK(fs::exists(w.dir / "a" / "sample_1_class2.ppm"));
    const auto raw = slurp(w.dir / "a" / "samples.f32");
    CHECK(raw.size() == 2u * 3 * 4 * 4 * 4);
    CHECK(raw == slurp(w.dir / "b" / "samples.f32"));
    CHECK(raw == slurp(w.dir / "c" / "samples.f32"));
    CHECK(raw != slurp(w.dir / "d" / "samples.f32"));
    CHECK(sample(master, "e", "1", "10").code == cli::kExitOk);
    CHECK(sample(master, "f", "1", "0.5").code == cli::kExitUsage);
    CHECK(run({"sample", "--ckpt", master, "--class", "3", "--out", w.path("g")}).code == cli::kExitUsage);
    CHECK(run({"sample", "--ckpt", w.path("none.terd"), "--out", w.path("g")}).code == cli::kExitUsage);

    const auto inspect = run({"inspect", "--ckpt", packed});
    CHECK(inspect.code == cli::kExitOk);
    CHECK(inspect.out.find("packed checkpoint") != std::string::npos);
    CHECK(inspect.out.find("ratio:") != std::string::npos);
    CHECK(run({"inspect", "--ckpt", master, "--per-tensor"}).out.find("blocks.1.ffn.w2.weight") != std::string::npos);

    const auto cap = run({"capture", "--ckpt", master, "--block", "1", "--site", "scale_mlp"});
    CHECK(cap.code == cli::kExitOk);
    CHECK(cap.out.find("16 values") != std::string::npos);
    CHECK(run({"capture", "--ckpt", master, "--site", "scale"}).code == cli::kExitUsage);
    CHECK(run({"capture", "--ckpt", master, "--block", "2"}).code == cli::kExitUsage);

    const auto bench = run({"bench", "--ckpt", master, "--batch", "2", "--reps", "1"});
    CHECK(bench.code == cli::kExitOk);
    CHECK(bench.out.find("outputs identical: yes") != std::string::npos);
    CHECK(run({"bench", "--ckpt", packed}).code == cli::kExitUsage);

    std::ofstream(w.dir / "garbage.terd") << "not a checkpoint";
    CHECK(run({"inspect", "--ckpt", w.path("garbage.terd")}).code == cli::kExitUsage);
}

TEST_CASE("pilot prints the report and writes csv") {
    Workspace w;
    const auto r = run({"pilot", "--seed", "0", "--csv", w.path("pilot.csv")});
    CHECK(r.code == cli::kExitOk);
    CHECK(r.out.find("full_precision") != std::string::npos);
    const auto csv = slurp(w.dir / "pilot.csv");
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
    CHECK(run({"pilot", "--seed", "0"}).out == r.out);
}
