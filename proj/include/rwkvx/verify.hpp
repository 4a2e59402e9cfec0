// SPDX-License-Identifier: Apache-2.0

#pragma once

// Invariant checks run by `rwkvx verify`. Sizes are kept small so the whole
// suite finishes in seconds on a laptop; the acceptance tests run the same
// properties at full scale.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "rwkvx/bench.hpp"
#include "rwkvx/kv_cache.hpp"
#include "rwkvx/model.hpp"
#include "rwkvx/rwkv7.hpp"
#include "rwkvx/sparse_attn.hpp"
#include "rwkvx/tensor.hpp"

namespace rwkvx::verify {

struct CheckResult {
    std::string name;
    bool passed = false;
    std::string detail;
};

struct Options {
    ModelConfig config{};
    std::uint64_t seed = 1234;
    /// Test hook: the named check reports failure regardless of its outcome.
    std::string inject_fault;
};

namespace detail {

inline Matrix<double> random_matrix(std::mt19937_64& rng, std::size_t r, std::size_t c, double scale = 1.0) {
    std::normal_distribution<double> nd(0.0, scale);
    Matrix<double> m(r, c);
    for (double& x : m.data()) x = nd(rng);
    return m;
}

inline Vector<double> random_vector(std::mt19937_64& rng, std::size_t n, double scale = 1.0) {
    std::normal_distribution<double> nd(0.0, scale);
    Vector<double> v(n);
    for (double& x : v) x = nd(rng);
    return v;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

inline std::string fmt(double x) {
    std::ostringstream o;
    o << x;
    return o.str();
}

inline ModelConfig small_model(const ModelConfig& base, std::size_t layers = 4) {
    ModelConfig c = base;
    c.n_layers = std::min<std::size_t>(c.n_layers, layers);
    c.d_model = std::min<std::size_t>(c.d_model, 32);
    c.d_k = c.attn.d_k = std::min<std::size_t>(c.d_k, 16);
    c.d_v = c.attn.d_v = std::min<std::size_t>(c.d_v, 16);
    return c;
}

}  // namespace detail

inline CheckResult check_oracle_equivalence(const Options& o) {
    std::mt19937_64 rng(o.seed);
    double worst = 0.0;
    for (std::size_t n : {32, 128})
        for (std::size_t b : {4, 16}) {
            AttnConfig cfg{b, (n + b - 1) / b, 16, 16, std::max<std::size_t>(b, 16), 8};
            auto q = detail::random_matrix(rng, n, 16), k = detail::random_matrix(rng, n, 16),
                 v = detail::random_matrix(rng, n, 16);
            worst = std::max(worst, detail::max_abs_diff(prefill(q, k, v, cfg).data(),
                                                         full_attention_oracle(q, k, v, 16, true).data()));
        }
    return {"oracle_equivalence", worst <= 1e-10, "max |sparse - full| = " + detail::fmt(worst)};
}

inline CheckResult check_causality(const Options& o) {
    std::mt19937_64 rng(o.seed + 1);
    AttnConfig cfg = o.config.attn;
    cfg.d_k = cfg.d_v = 8;
    const std::size_t n = 4 * cfg.chunk_size + 3;
    auto q = detail::random_matrix(rng, n, 8), k = detail::random_matrix(rng, n, 8), v = detail::random_matrix(rng, n, 8);
    AttendTrace trace;
    (void)prefill(q, k, v, cfg, &trace);
    for (const auto& rec : trace) {
        if (!rec.attended.empty() && rec.attended.back() > rec.position)
            return {"causality", false, "position " + std::to_string(rec.position) + " attends a future index"};
        if (std::abs(rec.weight_sum - 1.0) > 1e-6)
            return {"causality", false, "weights at " + std::to_string(rec.position) + " sum to " + detail::fmt(rec.weight_sum)};
    }
    return {"causality", true, std::to_string(n) + " positions, no future index attended"};
}

inline CheckResult check_decode_prefill(const Options& o) {
    ModelConfig c = detail::small_model(o.config);
    c.attn.cache_budget = kUnbounded;
    c.attn.obs_window = std::max(c.attn.obs_window, c.attn.chunk_size);
    c.seed = o.seed;
    const auto model = Model<double>::random(c);
    const std::size_t t = 3 * c.attn.chunk_size + 5;
    const auto tokens = bench::random_tokens(t, o.seed, std::min<std::size_t>(256, c.vocab_size));
    const auto pre = model.prefill(tokens);
    auto state = model.initial_state();
    Vector<double> last;
    for (int tok : tokens) last = model.decode(tok, state);
    const double diff = detail::max_abs_diff(last, pre.logits.row(t - 1));
    return {"decode_prefill_consistency", diff <= 1e-10, "t=" + std::to_string(t) + " max diff " + detail::fmt(diff)};
}

inline CheckResult check_cache_budget(const Options& o) {
    std::mt19937_64 rng(o.seed + 2);
    const auto& a = o.config.attn;
    KvCache<double> cache(8, 8, a.cache_budget, a.obs_window);
    const std::size_t budget = a.cache_budget == kUnbounded ? 0 : a.cache_budget;
    const std::size_t steps = a.cache_budget == kUnbounded ? 256 : 2 * (budget + a.obs_window) + 7;
    for (std::size_t s = 0; s < steps; ++s) {
        auto q = detail::random_vector(rng, 8), k = detail::random_vector(rng, 8), v = detail::random_vector(rng, 8);
        cache.append(q, k, v);
        if (cache.past_size() > a.cache_budget || cache.obs_size() > a.obs_window)
            return {"cache_budget", false, "budget exceeded after " + std::to_string(s + 1) + " appends"};
    }
    const std::size_t expect = a.cache_budget == kUnbounded ? steps : std::min(steps, budget + a.obs_window);
    return {"cache_budget", cache.size() == expect,
            std::to_string(cache.size()) + " entries after " + std::to_string(steps) + " appends (expected " +
                std::to_string(expect) + ")"};
}

inline CheckResult check_attended_bound(const Options& o) {
    std::mt19937_64 rng(o.seed + 3);
    AttnConfig a = o.config.attn;
    a.d_k = a.d_v = 8;
    a.cache_budget = std::min<std::size_t>(a.cache_budget, 4 * a.chunk_size);
    KvCache<double> cache(8, 8, a.cache_budget, a.obs_window);
    AttendTrace trace;
    const std::size_t steps = 2 * (a.cache_budget + a.obs_window);
    for (std::size_t s = 0; s < steps; ++s) {
        auto q = detail::random_vector(rng, 8), k = detail::random_vector(rng, 8), v = detail::random_vector(rng, 8);
        cache.append(q, k, v);
        (void)decode_step<double>(q, cache, a, &trace);
    }
    std::size_t worst = 0;
    for (const auto& r : trace) worst = std::max(worst, r.attended.size());
    return {"attended_bound", worst <= a.decode_attend_bound(),
            "max attended " + std::to_string(worst) + " <= k*B + L_obs = " + std::to_string(a.decode_attend_bound())};
}

inline CheckResult check_identity_at_init(const Options& o) {
    ModelConfig c = detail::small_model(o.config, 6);
    c.attn_ratio = 0.0;
    c.seed = o.seed;
    const auto base = Model<double>::random(c);
    const auto expanded = expand_blocks(base, expansion_positions(c.n_layers, 0.34));
    for (std::uint64_t s = 0; s < 5; ++s) {
        const auto tokens = bench::random_tokens(40, o.seed + s, std::min<std::size_t>(256, c.vocab_size));
        if (!(base.prefill(tokens).logits == expanded.prefill(tokens).logits))
            return {"identity_at_init", false, "expanded logits differ for input " + std::to_string(s)};
    }
    return {"identity_at_init", true,
            base.layout().to_string() + " -> " + expanded.layout().to_string() + ", logits bitwise equal"};
}

inline CheckResult check_gradient(const Options& o) {
    std::mt19937_64 rng(o.seed + 4);
    double worst = 0.0;
    const std::size_t n = 16, d = 8;
    for (int inst = 0; inst < 20; ++inst) {
        auto q = detail::random_vector(rng, d), g = detail::random_vector(rng, d);
        auto k = detail::random_matrix(rng, n, d), v = detail::random_matrix(rng, n, d);
        const auto grads = sparse_attend_backward<double>(q, k, v, d, g);
        auto loss_q = [&](const Vector<double>& x) { return dot<double>(sparse_attend<double>(x, k, v, d), g); };
        const auto fd = finite_diff_grad(loss_q, q, 1e-5);
        double num = 0, den = 0;
        for (std::size_t i = 0; i < d; ++i) {
            num += (fd[i] - grads.dq[i]) * (fd[i] - grads.dq[i]);
            den = std::max(den, std::max(std::abs(fd[i]), std::abs(grads.dq[i])));
        }
        worst = std::max(worst, std::sqrt(num) / std::max(den, 1e-12));
    }
    return {"gradient_check", worst <= 1e-4, "worst relative error " + detail::fmt(worst)};
}

inline CheckResult check_recurrence(const Options& o) {
    std::mt19937_64 rng(o.seed + 5);
    std::uniform_real_distribution<double> unit(0.05, 1.0);
    const std::size_t dk = 6, dv = 5, t = 40;
    std::vector<rwkv7::Inputs<double>> seq;
    for (std::size_t i = 0; i < t; ++i) {
        Vector<double> w(dk), a(dk);
        for (auto& x : w) x = unit(rng);
        for (auto& x : a) x = unit(rng) - 0.05;
        seq.push_back(rwkv7::Inputs<double>::make(w, a, detail::random_vector(rng, dk), detail::random_vector(rng, dk),
                                                  detail::random_vector(rng, dv), detail::random_vector(rng, dk)));
    }
    const std::span<const rwkv7::Inputs<double>> all(seq);
    const auto full = rwkv7::forward<double>(all, rwkv7::State<double>::zeros(dv, dk));
    for (std::size_t split = 1; split < t; ++split) {
        const auto head = rwkv7::forward<double>(all.first(split), rwkv7::State<double>::zeros(dv, dk));
        const auto tail = rwkv7::forward<double>(all.subspan(split), head.final_state);
        if (!(tail.final_state == full.final_state) || tail.outputs.back() != full.outputs.back())
            return {"rwkv7_recurrence", false, "prefix split at " + std::to_string(split) + " diverges"};
    }
    return {"rwkv7_recurrence", true, "prefix-split equivalence bitwise for all " + std::to_string(t - 1) + " splits"};
}

inline CheckResult check_compression(const Options& o) {
    std::mt19937_64 rng(o.seed + 6);
    const std::size_t d = 8;
    for (int inst = 0; inst < 20; ++inst) {
        const std::size_t past = 6 + inst % 6, obs = 3, m = 1 + inst % (past - 1);
        KvCache<double> cache(d, d, kUnbounded, obs);
        auto q = detail::random_matrix(rng, past + obs, d), k = detail::random_matrix(rng, past + obs, d),
             v = detail::random_matrix(rng, past + obs, d);
        cache = KvCache<double>::from_sequence(q, k, v, kUnbounded, obs);
        const auto views = cache.split();
        const auto scores = importance_scores(views.obs_queries, views.past_keys, d);
        double total = 0;
        for (double s : scores) total += s;
        if (std::abs(total - static_cast<double>(obs)) > 1e-6)
            return {"kv_compression", false, "importance scores do not sum to the query count"};
        auto compressed = KvCache<double>::from_sequence(q, k, v, m, obs);
        const auto keep = top_m_indices<double>(scores, m);
        for (std::size_t i = 0; i < keep.size(); ++i)
            if (!std::equal(compressed.key(i).begin(), compressed.key(i).end(), k.row(keep[i]).begin()))
                return {"kv_compression", false, "retained entries differ from the top-m set"};
        if (compressed.past_size() != m || compressed.obs_size() != obs)
            return {"kv_compression", false, "compressed cache has the wrong size"};
    }
    return {"kv_compression", true, "top-m retention in temporal order on 20 instances"};
}

inline CheckResult check_checkpoint(const Options& o) {
    ModelConfig c = detail::small_model(o.config);
    c.seed = o.seed;
    auto model = Model<float>::random(c);
    std::stringstream buf;
    save_checkpoint(model, buf);
    const auto loaded = load_checkpoint<float>(buf);
    const auto tokens = bench::random_tokens(50, o.seed, std::min<std::size_t>(256, c.vocab_size));
    const bool same = model.prefill(tokens).logits == loaded.prefill(tokens).logits;
    return {"checkpoint_roundtrip", same, same ? "logits bitwise identical after reload" : "logits differ after reload"};
}

inline std::vector<std::string> check_names() {
    return {"oracle_equivalence", "causality", "decode_prefill_consistency", "cache_budget", "attended_bound",
            "identity_at_init", "gradient_check", "rwkv7_recurrence", "kv_compression", "checkpoint_roundtrip"};
}

inline std::vector<CheckResult> run_all(const Options& o) {
    o.config.validate();
    const std::vector<std::function<CheckResult(const Options&)>> checks{
        check_oracle_equivalence, check_causality, check_decode_prefill, check_cache_budget,
        check_attended_bound, check_identity_at_init, check_gradient, check_recurrence,
        check_compression, check_checkpoint};
    std::vector<CheckResult> out;
    for (const auto& check : checks) {
        CheckResult r;
        try {
            r = check(o);
        } catch (const std::exception& e) {
            r.passed = false;
            r.detail = std::string("exception: ") + e.what();
        }
        if (r.name.empty()) r.name = check_names()[out.size()];
        if (r.name == o.inject_fault) {
            r.passed = false;
            r.detail = "fault injected";
        }
        out.push_back(std::move(r));
    }
    return out;
}

}  // namespace rwkvx::verify
