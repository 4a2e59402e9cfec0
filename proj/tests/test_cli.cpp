// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

namespace {

struct Run {
    int code = -1;
    std::string out;
};

Run run(const std::string& args) {
    const std::string cmd = std::string(RWKVX_CLI_PATH) + " " + args + " 2>&1";
    Run r;
    FILE* p = popen(cmd.c_str(), "r");
    if (!p) return r;
    std::array<char, 4096> buf{};
    while (std::fgets(buf.data(), buf.size(), p)) r.out += buf.data();
    const int status = pclose(p);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

std::string tmp(const std::string& name) {
    return (std::filesystem::path(::testing::TempDir()) / ("rwkvx_cli_" + name)).string();
}

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    std::stringstream s;
    s << f.rdbuf();
    return s.str();
}

/// phase, context_len and peak_entries of each data row.
std::vector<std::string> structure(const std::string& csv) {
    std::istringstream in(csv);
    std::vector<std::string> out;
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line) && !line.empty()) {
        std::istringstream fields(line);
        std::vector<std::string> f;
        for (std::string x; std::getline(fields, x, ',');) f.push_back(x);
        out.push_back(f.at(0) + "," + f.at(1) + "," + f.at(3));
    }
    return out;
}

const char* kTinyModel = "--set n_layers=4 --set d_model=16 --set d_k=8 --set d_v=8 --set chunk_size=4 "
                         "--set top_k=2 --set cache_budget=16 --set obs_window=4";

}  // namespace

TEST(Cli, VerifyDefaultsPass) {
    const auto r = run("verify");
    EXPECT_EQ(r.code, 0) << r.out;
    std::size_t passes = 0;
    for (std::size_t p = r.out.find("PASS "); p != std::string::npos; p = r.out.find("PASS ", p + 1)) ++passes;
    EXPECT_EQ(passes, 10u);
    EXPECT_EQ(r.out.find("FAIL"), std::string::npos);
}

TEST(Cli, ZeroTopKIsConfigError) {
    const auto r = run("verify --set top_k=0");
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.out.find("k >= 1"), std::string::npos) << r.out;
}

TEST(Cli, ConfigFileAndUnknownKey) {
    const auto good = tmp("good.cfg"), bad = tmp("bad.cfg");
    std::ofstream(good) << "# small\nn_layers = 2\ntop_k = 2\n";
    std::ofstream(bad) << "n_layers = 2\nflavour = mint\n";
    EXPECT_EQ(run("verify --config " + good).code, 0);
    const auto r = run("verify --config " + bad);
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.out.find("flavour"), std::string::npos);
    EXPECT_EQ(run("verify --config " + tmp("missing.cfg")).code, 3);
}

TEST(Cli, InjectedFaultFailsNamedCheck) {
    const auto r = run("verify --inject-fault gradient_check");
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.out.find("FAIL gradient_check"), std::string::npos);
    EXPECT_EQ(run("verify --inject-fault no_such_check").code, 2);
}

TEST(Cli, UsageErrors) {
    EXPECT_EQ(run("").code, 2);
    EXPECT_EQ(run("verify --bogus").code, 2);
    EXPECT_EQ(run("verify bench").code, 2);
    EXPECT_EQ(run("frobnicate").code, 2);
    EXPECT_EQ(run("bench --lengths 12,x").code, 2);
    EXPECT_EQ(run("--help").code, 0);
}

TEST(Cli, BenchWritesReports) {
    const auto out = tmp("bench.csv");
    const std::string args = std::string("bench ") + kTinyModel + " --lengths 64,128,256 --steps 16 --out " + out;
    const auto r = run(args);
    ASSERT_EQ(r.code, 0) << r.out;
    const auto csv = slurp(out);
    std::istringstream in(csv);
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, "phase,context_len,wall_time_s,peak_entries,peak_bytes");
    const std::regex row(R"((prefill|decode),\d+,[0-9.e+-]+,\d+,\d+)");
    for (int i = 0; i < 6; ++i) {
        ASSERT_TRUE(std::getline(in, line));
        EXPECT_TRUE(std::regex_match(line, row)) << line;
    }
    EXPECT_NE(csv.find("# model_prefill_exponent,"), std::string::npos);
    EXPECT_NE(csv.find("# sparse_prefill_exponent,"), std::string::npos);
    EXPECT_NE(csv.find("# full_prefill_exponent,"), std::string::npos);
    const auto j = nlohmann::json::parse(slurp(tmp("bench.json")));
    EXPECT_EQ(j["records"].size(), 6u);
    EXPECT_EQ(j["comparison"].size(), 3u);
    EXPECT_NE(slurp(tmp("bench.compare.csv")).find("path,phase,context_len"), std::string::npos);

    // Rerun: phase, context_len and peak_entries columns are reproduced.
    ASSERT_EQ(run(args).code, 0);
    EXPECT_EQ(structure(slurp(out)), structure(csv));
}

TEST(Cli, BenchUnwritableOutputIsIoError) {
    EXPECT_EQ(run("bench --lengths 64,128,256 --out /nonexistent-dir/x.csv").code, 3);
}

TEST(Cli, ExpandTwelveLayers) {
    const auto base = tmp("base12.ckpt"), out = tmp("exp15.ckpt"), same = tmp("exp0.ckpt");
    const auto r = run(std::string("expand ") + kTinyModel +
                       " --set n_layers=12 --set attn_ratio=0 --ratio 0.25 --base-out " + base + " --out " + out);
    ASSERT_EQ(r.code, 0) << r.out;
    EXPECT_NE(r.out.find("RRRRARRRRARRRRA (15 layers)"), std::string::npos) << r.out;
    EXPECT_NE(r.out.find("PASS identity_at_init"), std::string::npos);
    const auto z = run("expand --base " + base + " --ratio 0 --out " + same);
    ASSERT_EQ(z.code, 0) << z.out;
    EXPECT_EQ(slurp(base), slurp(same));
    EXPECT_EQ(run("expand --base " + tmp("nope.ckpt") + " --out " + same).code, 3);
}

TEST(Cli, DemoOneTokenAndDeterminism) {
    const auto one = run(std::string("demo ") + kTinyModel + " --prompt hi --tokens 1");
    ASSERT_EQ(one.code, 0) << one.out;
    const std::regex tokens_line(R"(tokens: (\d+)\n)");
    std::smatch m;
    ASSERT_TRUE(std::regex_search(one.out, m, tokens_line)) << one.out;
    const auto a = run(std::string("demo ") + kTinyModel + " --prompt hello --tokens 12 --seed 3");
    const auto b = run(std::string("demo ") + kTinyModel + " --prompt hello --tokens 12 --seed 3");
    EXPECT_EQ(a.out, b.out);
    EXPECT_EQ(run("demo --tokens 0").code, 2);
}

TEST(Cli, DemoPeakEntriesFollowBudget) {
    for (int n : {3, 10, 40}) {
        const auto r = run(std::string("demo ") + kTinyModel + " --prompt ab --tokens " + std::to_string(n));
        ASSERT_EQ(r.code, 0) << r.out;
        const std::size_t total = 1 + 2 + static_cast<std::size_t>(n);
        EXPECT_NE(r.out.find("total_len: " + std::to_string(total)), std::string::npos);
        EXPECT_NE(r.out.find("peak_entries: " + std::to_string(std::min<std::size_t>(total, 20))), std::string::npos)
            << r.out;
    }
}

TEST(Cli, GenTask) {
    const auto r = run("gen-task --length 128 --position 40 --seed 2");
    ASSERT_EQ(r.code, 0);
    const auto j = nlohmann::json::parse(r.out);
    EXPECT_EQ(j["context_len"], 128);
    EXPECT_EQ(j["needle_position"], 40);
    EXPECT_EQ(j["context"].size(), 128u);
    EXPECT_EQ(run("gen-task --length 8").code, 2);
}
