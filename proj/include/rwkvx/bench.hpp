// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <map>
#include <ostream>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "rwkvx/alloc_probe.hpp"
#include "rwkvx/errors.hpp"
#include "rwkvx/kv_cache.hpp"
#include "rwkvx/model.hpp"
#include "rwkvx/sparse_attn.hpp"
#include "rwkvx/tensor.hpp"

namespace rwkvx::bench {

// ---------------------------------------------------------------------------
// Synthetic single-needle retrieval tasks (byte-level tokens)

inline constexpr int kBosToken = 256;
inline constexpr int kKeyMarker = 257;
inline constexpr int kValueMarker = 258;
inline constexpr std::size_t kByteVocab = 259;
inline constexpr std::size_t kPasskeyDigits = 5;

struct PasskeyTask {
    std::vector<int> context;
    std::size_t needle_position = 0;
    std::vector<int> key_tokens;
    std::vector<int> value_tokens;
    std::vector<int> answer;

    std::size_t needle_length() const { return key_tokens.size() + value_tokens.size(); }
    std::vector<int> needle() const {
        std::vector<int> n = key_tokens;
        n.insert(n.end(), value_tokens.begin(), value_tokens.end());
        return n;
    }
    friend bool operator==(const PasskeyTask&, const PasskeyTask&) = default;
};

/// Needle layout: <KEY>"pass key" <VALUE>ddddd. The marker tokens lie
/// outside the byte range, so random filler can never recreate the needle.
inline std::vector<int> passkey_key_tokens() {
    std::vector<int> k{kKeyMarker};
    for (char c : std::string_view("pass key")) k.push_back(static_cast<unsigned char>(c));
    return k;
}

inline PasskeyTask gen_passkey_task(std::size_t context_len, std::size_t needle_position, std::uint64_t seed) {
    PasskeyTask task;
    task.key_tokens = passkey_key_tokens();
    std::mt19937_64 rng(seed);
    task.value_tokens.push_back(kValueMarker);
    for (std::size_t i = 0; i < kPasskeyDigits; ++i) {
        const int digit = '0' + static_cast<int>(rng() % 10);
        task.value_tokens.push_back(digit);
        task.answer.push_back(digit);
    }
    const std::size_t len = task.needle_length();
    if (context_len < len + 2)
        throw InputError("gen_passkey_task: context of " + std::to_string(context_len) +
                         " tokens cannot hold the needle");
    if (needle_position + len > context_len)
        throw InputError("gen_passkey_task: needle position " + std::to_string(needle_position) + " out of range");
    task.needle_position = needle_position;
    task.context.resize(context_len);
    for (int& t : task.context) t = static_cast<int>(rng() % 256);
    const auto needle = task.needle();
    std::copy(needle.begin(), needle.end(), task.context.begin() + static_cast<std::ptrdiff_t>(needle_position));
    return task;
}

// ---------------------------------------------------------------------------
// Measurements

enum class Phase { prefill, decode };

inline std::string_view phase_name(Phase p) { return p == Phase::prefill ? "prefill" : "decode"; }

struct LatencyRecord {
    Phase phase = Phase::prefill;
    std::size_t context_len = 0;
    double wall_time = 0.0;  ///< seconds; per step for decode
    std::size_t peak_entries = 0;
    std::size_t peak_bytes = 0;
};

class InsufficientDataError : public InputError {
public:
    using InputError::InputError;
};

inline double median(std::vector<double> xs) {
    RWKVX_CHECK(!xs.empty(), EmptyInputError, "median of no samples");
    std::sort(xs.begin(), xs.end());
    const std::size_t n = xs.size();
    return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

template <typename F>
double time_seconds(F&& f) {
    const auto t0 = std::chrono::steady_clock::now();
    f();
    const auto t1 = std::chrono::steady_clock::now();
    return std::max(std::chrono::duration<double>(t1 - t0).count(), 1e-9);
}

inline std::vector<int> random_tokens(std::size_t n, std::uint64_t seed, std::size_t vocab = 256) {
    std::mt19937_64 rng(seed);
    std::vector<int> t(n);
    for (int& x : t) x = static_cast<int>(rng() % vocab);
    return t;
}

/// Median prefill wall time per length after one warmup run.
template <typename T>
std::vector<LatencyRecord> measure_prefill(const Model<T>& model, const std::vector<std::size_t>& lengths,
                                           std::size_t repeats, std::uint64_t seed = 1) {
    RWKVX_CHECK(repeats >= 3, InputError, "measure_prefill: repeats must be at least 3");
    RWKVX_CHECK(std::is_sorted(lengths.begin(), lengths.end()), InputError, "measure_prefill: lengths must ascend");
    const std::size_t vocab = std::min<std::size_t>(256, model.config().vocab_size);
    std::vector<LatencyRecord> out;
    for (std::size_t len : lengths) {
        const auto tokens = random_tokens(len, seed + len, vocab);
        LatencyRecord rec{Phase::prefill, len};
        {
            alloc_probe::Scope probe;
            rec.peak_entries = model.prefill(tokens).state.cache_entries();
            rec.peak_bytes = probe.peak_bytes();
        }
        std::vector<double> times;
        for (std::size_t r = 0; r < repeats; ++r) times.push_back(time_seconds([&] { (void)model.prefill(tokens); }));
        rec.wall_time = median(times);
        out.push_back(rec);
    }
    return out;
}

/// For each context length c: prefill c − steps tokens, then time `steps`
/// single-token decode steps so the context ends at exactly c. Reports the
/// median step time and the largest cache size reached.
template <typename T>
std::vector<LatencyRecord> measure_decode(const Model<T>& model, const std::vector<std::size_t>& context_lens,
                                          std::size_t steps, std::uint64_t seed = 2) {
    RWKVX_CHECK(steps >= 16, InputError, "measure_decode: steps must be at least 16");
    const std::size_t vocab = std::min<std::size_t>(256, model.config().vocab_size);
    std::vector<LatencyRecord> out;
    for (std::size_t ctx : context_lens) {
        RWKVX_CHECK(ctx > steps, InputError, "measure_decode: context length must exceed the step count");
        const auto tokens = random_tokens(ctx, seed + ctx, vocab);
        const std::span<const int> all(tokens);
        LatencyRecord rec{Phase::decode, ctx};
        auto state = model.prefill(all.first(ctx - steps)).state;
        std::vector<double> times;
        alloc_probe::Scope probe;
        for (std::size_t s = ctx - steps; s < ctx; ++s) {
            times.push_back(time_seconds([&] { (void)model.decode(tokens[s], state); }));
            rec.peak_entries = std::max(rec.peak_entries, state.cache_entries());
        }
        rec.peak_bytes = probe.peak_bytes();
        rec.wall_time = median(times);
        out.push_back(rec);
    }
    return out;
}

/// Least-squares slope of log(time) against log(length).
inline double fit_scaling(const std::vector<LatencyRecord>& records) {
    if (records.size() < 3) throw InsufficientDataError("fit_scaling: need at least 3 records");
    std::vector<std::size_t> lens;
    for (const auto& r : records) lens.push_back(r.context_len);
    std::sort(lens.begin(), lens.end());
    if (std::adjacent_find(lens.begin(), lens.end()) != lens.end())
        throw InsufficientDataError("fit_scaling: lengths must be distinct");
    double mx = 0, my = 0;
    for (const auto& r : records) {
        RWKVX_CHECK(r.context_len > 0 && r.wall_time > 0, InputError, "fit_scaling: non-positive sample");
        mx += std::log(static_cast<double>(r.context_len));
        my += std::log(r.wall_time);
    }
    const double n = static_cast<double>(records.size());
    mx /= n;
    my /= n;
    double sxy = 0, sxx = 0;
    for (const auto& r : records) {
        const double dx = std::log(static_cast<double>(r.context_len)) - mx;
        sxy += dx * (std::log(r.wall_time) - my);
        sxx += dx * dx;
    }
    return sxy / sxx;
}

// ---------------------------------------------------------------------------
// Sparse vs full attention at kernel level

struct ComparisonRow {
    std::size_t context_len = 0;
    LatencyRecord sparse_prefill, full_prefill, sparse_decode, full_decode;
    double max_abs_diff = 0.0;  ///< saturated-k sparse vs oracle on a prefix, double precision
};

struct Comparison {
    std::vector<ComparisonRow> rows;
    double sparse_prefill_exponent = 0.0;
    double full_prefill_exponent = 0.0;
};

template <typename T>
Matrix<T> random_matrix_normal(std::size_t rows, std::size_t cols, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Matrix<T> m(rows, cols);
    for (T& x : m.data()) x = static_cast<T>(static_cast<double>(rng() >> 11) * 0x1.0p-53 * 2.0 - 1.0);
    return m;
}

/// Runs single-head prefill and decode through the sparse path and the
/// dense oracle path over random Q/K/V (single precision). Prefill is timed
/// as the median of `repeats`; decode as the median over `decode_steps`
/// steps against a cache holding the full context.
inline Comparison compare_sparse_full(const AttnConfig& cfg, const std::vector<std::size_t>& lengths,
                                      std::size_t repeats = 1, std::size_t decode_steps = 16,
                                      std::uint64_t seed = 7, std::size_t check_prefix = 256) {
    cfg.validate();
    Comparison cmp;
    std::vector<LatencyRecord> sp, fp;
    for (std::size_t n : lengths) {
        ComparisonRow row;
        row.context_len = n;
        const auto q = random_matrix_normal<float>(n, cfg.d_k, seed + 3 * n);
        const auto k = random_matrix_normal<float>(n, cfg.d_k, seed + 3 * n + 1);
        const auto v = random_matrix_normal<float>(n, cfg.d_v, seed + 3 * n + 2);

        auto time_prefill = [&](auto&& fn, LatencyRecord& rec) {
            rec.phase = Phase::prefill;
            rec.context_len = n;
            std::vector<double> ts;
            for (std::size_t r = 0; r < repeats; ++r) {
                alloc_probe::Scope probe;
                ts.push_back(time_seconds(fn));
                rec.peak_bytes = probe.peak_bytes();
            }
            rec.wall_time = median(ts);
            rec.peak_entries = n;
        };
        time_prefill([&] { (void)prefill(q, k, v, cfg); }, row.sparse_prefill);
        time_prefill([&] { (void)full_attention_oracle(q, k, v, cfg.d_k, true); }, row.full_prefill);

        auto time_decode = [&](bool sparse, LatencyRecord& rec) {
            rec.phase = Phase::decode;
            rec.context_len = n;
            const std::size_t pre = n - std::min(n - 1, decode_steps);
            auto prefix = [&](const Matrix<float>& m) {
                Matrix<float> out(0, m.cols());
                for (std::size_t i = 0; i < pre; ++i) out.push_row(m.row(i));
                return out;
            };
            auto cache = KvCache<float>::from_sequence(prefix(q), prefix(k), prefix(v),
                                                       sparse ? cfg.cache_budget : kUnbounded, cfg.obs_window);
            std::vector<double> ts;
            alloc_probe::Scope probe;
            for (std::size_t s = pre; s < n; ++s) {
                ts.push_back(time_seconds([&] {
                    cache.append(q.row(s), k.row(s), v.row(s));
                    if (sparse)
                        (void)decode_step<float>(q.row(s), cache, cfg);
                    else
                        (void)dense_decode_step<float>(q.row(s), cache, cfg.d_k);
                }));
                rec.peak_entries = std::max(rec.peak_entries, cache.size());
            }
            rec.peak_bytes = probe.peak_bytes();
            rec.wall_time = median(ts);
        };
        time_decode(true, row.sparse_decode);
        time_decode(false, row.full_decode);

        const std::size_t m = std::min(n, check_prefix);
        auto head = [&](const Matrix<float>& src) {
            Matrix<double> out(m, src.cols());
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < src.cols(); ++j) out(i, j) = src(i, j);
            return out;
        };
        const auto qd = head(q), kd = head(k), vd = head(v);
        AttnConfig sat = cfg;
        sat.top_k = (m + cfg.chunk_size - 1) / cfg.chunk_size;
        const auto a = prefill(qd, kd, vd, sat);
        const auto b = full_attention_oracle(qd, kd, vd, cfg.d_k, true);
        for (std::size_t i = 0; i < a.data().size(); ++i)
            row.max_abs_diff = std::max(row.max_abs_diff, std::abs(a.data()[i] - b.data()[i]));

        sp.push_back(row.sparse_prefill);
        fp.push_back(row.full_prefill);
        cmp.rows.push_back(std::move(row));
    }
    if (lengths.size() >= 3) {
        cmp.sparse_prefill_exponent = fit_scaling(sp);
        cmp.full_prefill_exponent = fit_scaling(fp);
    }
    return cmp;
}

// ---------------------------------------------------------------------------
// Reports

inline constexpr std::string_view kCsvHeader = "phase,context_len,wall_time_s,peak_entries,peak_bytes";

inline void write_csv(std::ostream& out, const std::vector<LatencyRecord>& records,
                      const std::map<std::string, double>& summary) {
    out << kCsvHeader << '\n';
    for (const auto& r : records)
        out << phase_name(r.phase) << ',' << r.context_len << ',' << detail::format_double(r.wall_time) << ','
            << r.peak_entries << ',' << r.peak_bytes << '\n';
    if (!summary.empty()) {
        out << "\n# summary\n";
        for (const auto& [k, v] : summary) out << "# " << k << ',' << detail::format_double(v) << '\n';
    }
}

inline void write_comparison_csv(std::ostream& out, const Comparison& cmp) {
    out << "path,phase,context_len,wall_time_s,peak_entries,peak_bytes,max_abs_diff\n";
    for (const auto& row : cmp.rows) {
        auto line = [&](std::string_view path, const LatencyRecord& r) {
            out << path << ',' << phase_name(r.phase) << ',' << r.context_len << ','
                << detail::format_double(r.wall_time) << ',' << r.peak_entries << ',' << r.peak_bytes << ','
                << detail::format_double(row.max_abs_diff) << '\n';
        };
        line("sparse", row.sparse_prefill);
        line("full", row.full_prefill);
        line("sparse", row.sparse_decode);
        line("full", row.full_decode);
    }
}

inline nlohmann::json to_json(const LatencyRecord& r) {
    return {{"phase", phase_name(r.phase)},
            {"context_len", r.context_len},
            {"wall_time_s", r.wall_time},
            {"peak_entries", r.peak_entries},
            {"peak_bytes", r.peak_bytes}};
}

inline nlohmann::json to_json(const std::vector<LatencyRecord>& records, const Comparison& cmp,
                              const std::map<std::string, double>& summary) {
    nlohmann::json j;
    j["records"] = nlohmann::json::array();
    for (const auto& r : records) j["records"].push_back(to_json(r));
    j["comparison"] = nlohmann::json::array();
    for (const auto& row : cmp.rows) {
        j["comparison"].push_back({{"context_len", row.context_len},
                                   {"sparse_prefill", to_json(row.sparse_prefill)},
                                   {"full_prefill", to_json(row.full_prefill)},
                                   {"sparse_decode", to_json(row.sparse_decode)},
                                   {"full_decode", to_json(row.full_decode)},
                                   {"max_abs_diff", row.max_abs_diff}});
    }
    j["summary"] = summary;
    return j;
}

}  // namespace rwkvx::bench
