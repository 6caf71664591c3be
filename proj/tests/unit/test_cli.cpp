#include <doctest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

struct Run {
    int code = -1;
    std::string out;
};

// Runs the CLI with stderr folded into the captured output.
Run cli(const std::string& args) {
    const std::string cmd = std::string(M3DNCA_CLI) + " " + args + " 2>&1";
    Run r;
    FILE* p = ::popen(cmd.c_str(), "r");
    REQUIRE(p != nullptr);
    char buf[4096];
    std::size_t n;
    while ((n = std::fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
    const int status = ::pclose(p);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("m3dnca_cli_" + std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string operator/(const std::string& name) const { return (path / name).string(); }
};

const char* kConfig = R"({"model": {"channels": 8, "hidden": 16, "kernel_sizes": [5, 3], "scale": 2},
 "train": {"epochs": 12, "batch_size": 2, "dup_factor": 2},
 "synth": {"extent": 16, "count": 8, "family": "sphere"}})";

}  // namespace

TEST_CASE("info and usage errors") {
    Run r = cli("info");
    CHECK(r.code == 0);
    CHECK(r.out.find("parameters: 12480\n") != std::string::npos);
    CHECK(r.out.find("level 1: extent (64,64,64) kernel 3 steps 64") != std::string::npos);

    CHECK(cli("").code == 2);
    CHECK(cli("info --no-such-flag").code == 2);
    CHECK(cli("frobnicate").code == 2);
    CHECK(cli("ensemble --model x.ckpt").code == 2);
    CHECK(cli("--threads -2 info").code == 2);

    r = cli("infer --model /nonexistent.ckpt --input /nonexistent.json --out /tmp/x");
    CHECK(r.code == 1);
    CHECK(r.out.find("error [io]") != std::string::npos);
    r = cli("plan --extent 64 --budget-bytes 100");
    CHECK(r.code == 1);
    CHECK(r.out.find("memory-plan") != std::string::npos);
}

TEST_CASE("scripted pipeline") {
    TempDir dir;
    std::ofstream(dir / "cfg.json") << kConfig;
    const std::string g = "--quiet --config " + (dir / "cfg.json") + " ";

    REQUIRE(cli(g + "--seed 3 synth --out " + (dir / "train")).code == 0);
    REQUIRE(cli(g + "--seed 4 synth --count 6 --out " + (dir / "test")).code == 0);
    REQUIRE(cli(g + "--seed 5 train --data " + (dir / "train") + " --val " + (dir / "test") + " --out " +
                (dir / "m.ckpt") + " --log " + (dir / "log.csv"))
                .code == 0);

    SUBCASE("training log") {
        const std::string log = slurp(dir / "log.csv");
        CHECK(log.rfind("epoch,mean_loss,loss_variance,eval_dice,optimizer_steps\n", 0) == 0);
        CHECK(std::count(log.begin(), log.end(), '\n') == 13);
        CHECK(log.find('\r') == std::string::npos);
    }

    SUBCASE("ensemble copies give zero nqm") {
        const std::string image = dir / "test/case0_image.json";
        REQUIRE(cli("--seed 1 ensemble --n 10 --model " + (dir / "m.ckpt") + " --input " + image + " --out " +
                    (dir / "pred"))
                    .code == 0);
        fs::copy(dir / "pred", dir / "copy", fs::copy_options::recursive);
        Run r = cli("nqm " + (dir / "pred") + " " + (dir / "copy"));
        CHECK(r.code == 0);
        CHECK(r.out == "nqm: 0\n");
        // The stored ensemble on its own reports its own spread.
        r = cli("nqm " + (dir / "pred"));
        CHECK(r.code == 0);
        CHECK(r.out != "nqm: 0\n");

        // Budgeted execution writes the same bytes.
        REQUIRE(cli("--seed 1 ensemble --n 10 --budget-bytes 60000 --model " + (dir / "m.ckpt") + " --input " +
                    image + " --out " + (dir / "tiled"))
                    .code == 0);
        CHECK(slurp(dir / "pred/mean.raw") == slurp(dir / "tiled/mean.raw"));
        CHECK(slurp(dir / "pred/sd.raw") == slurp(dir / "tiled/sd.raw"));
    }

    SUBCASE("calibrate then qc-eval") {
        const std::string qc = " --model " + (dir / "m.ckpt") + " --data " + (dir / "test") +
                               " --members 4 --corruption noise:std=0.3 --corruption noise:std=1"
                               " --corruption spike:intensity=5 --corruption ghost";
        Run r = cli("--seed 2 calibrate" + qc + " --out " + (dir / "cal.json"));
        REQUIRE(r.code == 0);
        r = cli("--seed 7 qc-eval" + qc + " --calibration " + (dir / "cal.json") + " --out " +
                (dir / "report.csv") + " --summary " + (dir / "summary.txt"));
        REQUIRE(r.code == 0);
        CHECK(r.out.find("detection_rate: ") != std::string::npos);
        const std::string csv = slurp(dir / "report.csv");
        CHECK(csv.rfind("case_id,corruption,dice,nqm,flagged\n", 0) == 0);
        CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 6 * 5);
        CHECK(slurp(dir / "summary.txt") == r.out);
    }

    SUBCASE("corrupt and convert") {
        const std::string image = dir / "test/case1_image.json";
        REQUIRE(cli("--seed 9 corrupt --spec ghost:count=4 --input " + image + " --out " + (dir / "g.json")).code == 0);
        REQUIRE(cli("convert --type u8 --input " + (dir / "g.json") + " --out " + (dir / "g8.json")).code == 0);
        CHECK(fs::file_size(dir / "g8.raw") == 16 * 16 * 16);
        CHECK(cli("corrupt --spec blur --input " + image + " --out " + (dir / "b.json")).code == 1);
    }
}
