// SPDX-License-Identifier: Apache-2.0
//
// Drives the built `momentkv` binary end to end.

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace {

namespace fs = std::filesystem;

struct Outcome {
    int exit_code = -1;
    std::string output;  // stdout and stderr
};

Outcome run_cli(const std::string& args) {
    const std::string cmd = std::string(MOMENTKV_CLI_PATH) + " " + args + " 2>&1";
    Outcome out;
    FILE* pipe = ::popen(cmd.c_str(), "r");
    if (pipe == nullptr) {
        return out;
    }
    char buf[4096];
    while (std::fgets(buf, sizeof buf, pipe) != nullptr) {
        out.output += buf;
    }
    const int status = ::pclose(pipe);
    out.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return out;
}

fs::path scratch_dir() {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    const auto dir = fs::temp_directory_path() / (std::string("momentkv_cli_") + info->name());
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

TEST(Cli, NoSubcommandFails) { EXPECT_NE(run_cli("").exit_code, 0); }

TEST(Cli, GenTraceThenReplay) {
    const auto dir = scratch_dir();
    const auto trace = dir / "hh.bin";
    auto gen = run_cli("gen-trace --kind heavy-hitter --prefill 16 --steps 200 --hitter 3:0.2 --hitter 20:0.15 "
                       "--hitter 40:0.1 --dip 20:80:30 --noise 0.3 --seed 7 --out " + q(trace));
    ASSERT_EQ(gen.exit_code, 0) << gen.output;
    EXPECT_NE(gen.output.find("M=16 T=200"), std::string::npos);

    auto rep = run_cli("replay --trace " + q(trace) + " --budget 32 --budget 64 --alpha 0.9 --out " + q(dir / "r"));
    ASSERT_EQ(rep.exit_code, 0) << rep.output;
    for (const char* id : {"run_FullCache", "run_MomentKV_a0.9_b32", "run_MomentKV_a0.9_b64"}) {
        for (const char* name : {"report.json", "steps.csv", "cdf.csv", "timing.csv", "config.echo"}) {
            EXPECT_TRUE(fs::exists(dir / "r" / id / name)) << id << "/" << name;
        }
    }
}

TEST(Cli, GenTraceIsDeterministic) {
    const auto dir = scratch_dir();
    const std::string args = "gen-trace --kind recency-burst --prefill 8 --steps 300 --concentration 0.1 --seed 4 --out ";
    ASSERT_EQ(run_cli(args + q(dir / "a.bin")).exit_code, 0);
    ASSERT_EQ(run_cli(args + q(dir / "b.bin")).exit_code, 0);
    EXPECT_EQ(slurp(dir / "a.bin"), slurp(dir / "b.bin"));
}

TEST(Cli, GenTraceInvalidDipFails) {
    const auto dir = scratch_dir();
    const auto out = run_cli("gen-trace --steps 50 --hitter 3:0.2 --dip 3:45:10 --out " + q(dir / "x.bin"));
    EXPECT_NE(out.exit_code, 0);
    EXPECT_NE(out.output.find("InvalidDipWindow"), std::string::npos);
    EXPECT_FALSE(fs::exists(dir / "x.bin"));
}

TEST(Cli, MissingTraceFails) {
    const auto dir = scratch_dir();
    const auto out = run_cli("replay --trace " + q(dir / "missing.bin") + " --out " + q(dir / "r"));
    EXPECT_NE(out.exit_code, 0);
    EXPECT_NE(out.output.find("NotFound"), std::string::npos);
}

TEST(Cli, BenchRejectsReplayMode) {
    const auto dir = scratch_dir();
    const auto out = run_cli("bench --trace " + q(dir / "t.bin") + " --out " + q(dir / "r"));
    EXPECT_NE(out.exit_code, 0);
    EXPECT_NE(out.output.find("ModeError"), std::string::npos);
}

TEST(Cli, ClosedLoopNeedsSeed) {
    const auto dir = scratch_dir();
    const auto out = run_cli("simulate --steps 10 --out " + q(dir / "r"));
    EXPECT_NE(out.exit_code, 0);
    EXPECT_NE(out.output.find("seed"), std::string::npos);
}

TEST(Cli, SimulateDefaultPoliciesOverLongRun) {
    // FullCache and MomentKV(alpha=0.98) at B_d = 512 over 2048 toy-model steps.
    const auto dir = scratch_dir();
    const auto out = run_cli("simulate --seed 1 --steps 2048 --budget 512 --out " + q(dir / "r"));
    ASSERT_EQ(out.exit_code, 0) << out.output;
    const auto full = slurp(dir / "r" / "run_FullCache" / "report.json");
    const auto moment = slurp(dir / "r" / "run_MomentKV_a0.98_b512" / "report.json");
    EXPECT_NE(full.find("\"max_total_size\": 2112"), std::string::npos);
    EXPECT_NE(moment.find("\"capacity_limit\": 576"), std::string::npos);
    EXPECT_NE(moment.find("\"max_total_size\": 576"), std::string::npos);
}

TEST(Cli, ConfigFileAndSweep) {
    const auto dir = scratch_dir();
    ASSERT_EQ(run_cli("gen-trace --prefill 4 --steps 200 --hitter 5:0.3 --dip 5:60:20 --seed 1 --out " +
                      q(dir / "dip.bin")).exit_code, 0);
    {
        std::ofstream cfg(dir / "run.json");
        cfg << R"({"run_id": "dip", "mode": "replay", "trace": ")" << (dir / "dip.bin").string()
            << R"(", "policies": [{"kind": "MomentKV"}], "decode_budgets": [16]})";
    }
    const auto out = run_cli("sweep-alpha --config " + q(dir / "run.json") +
                             " --alpha 0 --alpha 0.9 --alpha 1 --out " + q(dir / "r"));
    ASSERT_EQ(out.exit_code, 0) << out.output;
    const auto csv = slurp(dir / "r" / "dip_sweep" / "sweep.csv");
    EXPECT_NE(csv.find("H2O-equivalent"), std::string::npos);
    EXPECT_NE(csv.find("0.9,16,"), std::string::npos);
}

}  // namespace
