// SPDX-License-Identifier: Apache-2.0

// rwkvx: verify, bench, expand, demo and gen-task commands.
// Exit codes: 0 success, 1 check failure, 2 usage/config error, 3 I/O error.

#include <CLI11.hpp>

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "rwkvx/alloc_probe.hpp"
#include "rwkvx/bench.hpp"
#include "rwkvx/errors.hpp"
#include "rwkvx/model.hpp"
#include "rwkvx/verify.hpp"

RWKVX_INSTALL_ALLOC_PROBE()

namespace {

using namespace rwkvx;

enum Exit : int { kOk = 0, kCheckFailed = 1, kUsage = 2, kIo = 3 };

struct Common {
    std::string config_path;
    std::vector<std::string> overrides;
    std::optional<std::uint64_t> seed;
    std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool with_config = true) {
    if (with_config) {
        cmd->add_option("--config", c.config_path, "Config file (key = value lines)");
        cmd->add_option("--set", c.overrides, "Override a config key, e.g. --set top_k=8 (repeatable)");
    }
    cmd->add_option("--seed", c.seed, "Random seed");
    cmd->add_option("--out", c.out, "Output path");
}

ModelConfig resolve_config(const Common& c) {
    ModelConfig cfg = c.config_path.empty() ? ModelConfig{} : load_config(c.config_path);
    for (const auto& kv : c.overrides) apply_override(cfg, kv);
    if (c.seed) cfg.seed = *c.seed;
    cfg.validate();
    return cfg;
}

std::ofstream open_out(const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot open '" + path + "' for writing");
    return f;
}

std::string sibling(const std::string& path, const std::string& suffix) {
    std::filesystem::path p(path);
    return (p.parent_path() / (p.stem().string() + suffix)).string();
}

std::vector<std::size_t> parse_lengths(const std::string& s) {
    std::vector<std::size_t> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const std::string t = detail::trim(item);
        std::size_t mult = 1;
        std::string digits = t;
        if (!t.empty() && (t.back() == 'K' || t.back() == 'k')) {
            mult = 1024;
            digits.pop_back();
        }
        std::size_t v = 0;
        const auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), v);
        if (ec != std::errc{} || ptr != digits.data() + digits.size() || v == 0)
            throw ConfigError("lengths are positive integers", "bad length '" + t + "'");
        out.push_back(v * mult);
    }
    if (out.empty()) throw ConfigError("lengths are positive integers", "no lengths given");
    std::sort(out.begin(), out.end());
    return out;
}

std::string printable(const std::vector<int>& tokens) {
    std::string s;
    for (int t : tokens) {
        if (t >= 32 && t < 127) s.push_back(static_cast<char>(t));
        else {
            char buf[8];
            std::snprintf(buf, sizeof buf, "<%d>", t);
            s += buf;
        }
    }
    return s;
}

int cmd_verify(const Common& c, const std::string& fault) {
    verify::Options o;
    o.config = resolve_config(c);
    o.seed = c.seed.value_or(o.seed);
    o.inject_fault = fault;
    const auto results = verify::run_all(o);
    bool ok = true;
    std::ostringstream report;
    for (const auto& r : results) {
        report << (r.passed ? "PASS " : "FAIL ") << r.name << ": " << r.detail << '\n';
        ok = ok && r.passed;
    }
    report << (ok ? "verify: all checks passed" : "verify: FAILED") << '\n';
    std::cout << report.str();
    if (!c.out.empty()) open_out(c.out) << report.str();
    return ok ? kOk : kCheckFailed;
}

int cmd_bench(const Common& c, const std::string& lengths_arg, const std::string& decode_arg,
              const std::string& compare_arg, std::size_t repeats, std::size_t steps) {
    const ModelConfig cfg = resolve_config(c);
    const auto lengths = parse_lengths(lengths_arg);
    const auto decode_ctx = decode_arg.empty() ? lengths : parse_lengths(decode_arg);
    const auto compare = compare_arg.empty() ? lengths : parse_lengths(compare_arg);
    const std::string out = c.out.empty() ? "bench.csv" : c.out;
    // Open everything up front so an unwritable path fails before the long run.
    auto csv = open_out(out);
    auto cmp_csv = open_out(sibling(out, ".compare.csv"));
    auto json = open_out(sibling(out, ".json"));

    const auto model = Model<float>::random(cfg);
    auto records = bench::measure_prefill(model, lengths, repeats, cfg.seed);
    const auto dec = bench::measure_decode(model, decode_ctx, steps, cfg.seed + 1);
    records.insert(records.end(), dec.begin(), dec.end());
    const auto cmp = bench::compare_sparse_full(cfg.attn, compare, std::max<std::size_t>(1, repeats / 3), 16, cfg.seed);

    std::map<std::string, double> summary;
    std::vector<bench::LatencyRecord> pre(records.begin(), records.begin() + static_cast<std::ptrdiff_t>(lengths.size()));
    if (lengths.size() >= 3) summary["model_prefill_exponent"] = bench::fit_scaling(pre);
    if (compare.size() >= 3) {
        summary["sparse_prefill_exponent"] = cmp.sparse_prefill_exponent;
        summary["full_prefill_exponent"] = cmp.full_prefill_exponent;
    }
    if (dec.size() >= 2) summary["decode_step_ratio"] = dec.back().wall_time / dec.front().wall_time;

    bench::write_csv(csv, records, summary);
    bench::write_comparison_csv(cmp_csv, cmp);
    json << bench::to_json(records, cmp, summary).dump(2) << '\n';
    if (!csv || !cmp_csv || !json) throw IoError("failed writing bench reports next to '" + out + "'");

    std::cout << bench::kCsvHeader << '\n';
    for (const auto& r : records)
        std::cout << bench::phase_name(r.phase) << ',' << r.context_len << ',' << r.wall_time << ','
                  << r.peak_entries << ',' << r.peak_bytes << '\n';
    for (const auto& [k, v] : summary) std::cout << k << " = " << v << '\n';
    std::cout << "wrote " << out << ", " << sibling(out, ".compare.csv") << ", " << sibling(out, ".json") << '\n';
    return kOk;
}

int cmd_expand(const Common& c, const std::string& base_path, const std::string& base_out, double ratio) {
    if (c.out.empty()) throw ConfigError("--out is required", "expand needs an output checkpoint path");
    if (!(ratio >= 0.0 && ratio <= 1.0)) throw ConfigError("0 <= ratio <= 1", "got " + std::to_string(ratio));
    Model<double> base = base_path.empty() ? Model<double>::random(resolve_config(c)) : load_checkpoint<double>(base_path);
    if (!base_out.empty()) save_checkpoint(base, base_out);
    const auto positions = expansion_positions(base.config().n_layers, ratio);
    Model<double> expanded = expand_blocks(base, positions);
    save_checkpoint(expanded, c.out);

    const std::uint64_t seed = c.seed.value_or(base.config().seed);
    const std::size_t vocab = std::min<std::size_t>(256, base.config().vocab_size);
    bool identical = true;
    for (std::uint64_t i = 0; i < 8 && identical; ++i) {
        const auto tokens = bench::random_tokens(48, seed + i, vocab);
        identical = base.prefill(tokens).logits == expanded.prefill(tokens).logits;
    }
    std::cout << "layout " << base.layout().to_string() << " -> " << expanded.layout().to_string() << " ("
              << expanded.config().n_layers << " layers)\n";
    std::cout << (identical ? "PASS" : "FAIL") << " identity_at_init: expanded logits "
              << (identical ? "bitwise equal to base" : "differ from base") << '\n';
    std::cout << "wrote " << c.out << '\n';
    return identical ? kOk : kCheckFailed;
}

int cmd_demo(const Common& c, const std::string& checkpoint, const std::string& prompt, std::size_t n_tokens) {
    if (n_tokens < 1) throw ConfigError("tokens >= 1", "demo needs at least one token");
    const Model<float> model = checkpoint.empty() ? Model<float>::random(resolve_config(c)) : load_checkpoint<float>(checkpoint);
    if (model.config().vocab_size < bench::kByteVocab)
        throw ConfigError("vocab_size >= 259", "demo runs a byte-level model");
    std::vector<int> stream{bench::kBosToken};
    for (unsigned char ch : prompt) stream.push_back(ch);

    auto argmax = [](std::span<const float> logits) {
        return static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    };
    auto out = model.prefill(stream);
    auto state = std::move(out.state);
    int next = argmax(out.logits.row(out.logits.rows() - 1));
    std::vector<int> generated;
    std::size_t peak = state.cache_entries();
    for (std::size_t i = 0; i < n_tokens; ++i) {
        generated.push_back(next);
        stream.push_back(next);
        const auto logits = model.decode(next, state);
        peak = std::max(peak, state.cache_entries());
        next = argmax(logits);
    }
    std::cout << "prompt: " << printable({stream.begin() + 1, stream.end() - static_cast<std::ptrdiff_t>(n_tokens)}) << '\n';
    std::cout << "generated: " << printable(generated) << '\n';
    std::cout << "tokens: ";
    for (std::size_t i = 0; i < generated.size(); ++i) std::cout << (i ? " " : "") << generated[i];
    std::cout << '\n' << "total_len: " << stream.size() << '\n' << "peak_entries: " << peak << '\n';
    if (!c.out.empty()) {
        auto f = open_out(c.out);
        for (int t : generated) f << t << '\n';
    }
    return kOk;
}

int cmd_gen_task(const Common& c, std::size_t length, std::optional<std::size_t> position) {
    const std::uint64_t seed = c.seed.value_or(0);
    const std::size_t needle = bench::passkey_key_tokens().size() + 1 + bench::kPasskeyDigits;
    const std::size_t pos = position.value_or(length > needle ? (length - needle) / 2 : 0);
    const auto task = bench::gen_passkey_task(length, pos, seed);
    nlohmann::json j{{"context_len", task.context.size()},
                     {"needle_position", task.needle_position},
                     {"answer", printable(task.answer)},
                     {"key_tokens", task.key_tokens},
                     {"value_tokens", task.value_tokens},
                     {"context", task.context}};
    if (c.out.empty()) {
        std::cout << j.dump() << '\n';
    } else {
        auto f = open_out(c.out);
        f << j.dump() << '\n';
        std::cout << "needle at " << task.needle_position << ", answer " << printable(task.answer) << ", wrote "
                  << c.out << '\n';
    }
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"RWKV-X hybrid: recurrence, sparse attention and KV-cache compression"};
    app.require_subcommand(1, 1);

    Common verify_c, bench_c, expand_c, demo_c, task_c;
    std::string fault;
    auto* verify = app.add_subcommand("verify", "Run the invariant suites");
    add_common(verify, verify_c);
    verify->add_option("--inject-fault", fault, "Force the named check to fail (test hook)")
        ->check(CLI::IsMember(verify::check_names()));

    std::string lengths = "1024,2048,4096", decode_lengths, compare_lengths;
    std::size_t repeats = 3, steps = 32;
    auto* bench_cmd = app.add_subcommand("bench", "Prefill/decode latency and sparse-vs-full comparison");
    add_common(bench_cmd, bench_c);
    bench_cmd->add_option("--lengths", lengths, "Comma-separated prefill lengths (K suffix allowed)")->capture_default_str();
    bench_cmd->add_option("--decode-lengths", decode_lengths, "Decode context lengths (default: --lengths)");
    bench_cmd->add_option("--compare-lengths", compare_lengths, "Sparse-vs-full lengths (default: --lengths)");
    bench_cmd->add_option("--repeats", repeats, "Timed repeats per length (>= 3)")->capture_default_str();
    bench_cmd->add_option("--steps", steps, "Decode steps per context (>= 16)")->capture_default_str();

    std::string base_path, base_out;
    double ratio = 0.25;
    auto* expand = app.add_subcommand("expand", "Insert zero-initialised attention blocks into a checkpoint");
    add_common(expand, expand_c);
    expand->add_option("--base", base_path, "Base checkpoint (default: random model from --config)");
    expand->add_option("--base-out", base_out, "Also save the base model here");
    expand->add_option("--ratio", ratio, "Attention-layer ratio used to place new blocks")->capture_default_str();

    std::string checkpoint, prompt;
    std::size_t n_tokens = 16;
    auto* demo = app.add_subcommand("demo", "Greedy byte-level generation");
    add_common(demo, demo_c);
    demo->add_option("--checkpoint", checkpoint, "Checkpoint to load (default: random model from --config)");
    demo->add_option("--prompt", prompt, "Prompt text");
    demo->add_option("--tokens", n_tokens, "Tokens to generate")->capture_default_str();

    std::size_t task_len = 4096;
    std::optional<std::size_t> task_pos;
    auto* task = app.add_subcommand("gen-task", "Generate a passkey retrieval task as JSON");
    add_common(task, task_c, false);
    task->add_option("--length", task_len, "Context length in tokens")->capture_default_str();
    task->add_option("--position", task_pos, "Needle position (default: middle)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kUsage;
    }

    try {
        if (*verify) return cmd_verify(verify_c, fault);
        if (*bench_cmd) return cmd_bench(bench_c, lengths, decode_lengths, compare_lengths, repeats, steps);
        if (*expand) return cmd_expand(expand_c, base_path, base_out, ratio);
        if (*demo) return cmd_demo(demo_c, checkpoint, prompt, n_tokens);
        if (*task) return cmd_gen_task(task_c, task_len, task_pos);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kUsage;
    } catch (const IoError& e) {
        std::cerr << "I/O error: " << e.what() << '\n';
        return kIo;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kUsage;
    }
    return kUsage;
}
