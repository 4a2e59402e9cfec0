// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "rwkvx/errors.hpp"
#include "rwkvx/kv_cache.hpp"
#include "rwkvx/tensor.hpp"

namespace rwkvx {

/// Top-k chunk sparse attention parameters.
struct AttnConfig {
    std::size_t chunk_size = 64;     ///< B
    std::size_t top_k = 4;           ///< k
    std::size_t d_k = 64;
    std::size_t d_v = 64;
    std::size_t cache_budget = 1024; ///< m; kUnbounded disables compression
    std::size_t obs_window = 64;     ///< L_obs

    void validate() const {
        if (chunk_size < 1) throw ConfigError("B >= 1", "chunk_size must be at least 1");
        if (top_k < 1) throw ConfigError("k >= 1", "top_k must be at least 1");
        if (d_k < 1 || d_v < 1) throw ConfigError("dims >= 1", "d_k and d_v must be at least 1");
        if (cache_budget < chunk_size)
            throw ConfigError("m >= B", "cache_budget must be at least chunk_size");
        if (obs_window < 1) throw ConfigError("L_obs >= 1", "obs_window must be at least 1");
    }

    /// Upper bound on entries attended by one decode step.
    std::size_t decode_attend_bound() const { return top_k * chunk_size + obs_window; }

    friend bool operator==(const AttnConfig&, const AttnConfig&) = default;
};

template <typename T>
struct ChunkScores {
    Vector<T> scores;
    std::vector<std::size_t> candidate_ids;
};

/// One query's routing decision, recorded when tracing is requested.
struct AttendRecord {
    std::size_t position = 0;
    std::vector<std::size_t> chunk_ids;
    std::vector<std::size_t> attended;
    double weight_sum = 0.0;

    /// `position, [chunk ids], attended_count`
    std::string to_line() const {
        std::string s = std::to_string(position) + ", [";
        for (std::size_t i = 0; i < chunk_ids.size(); ++i) {
            if (i) s += ',';
            s += std::to_string(chunk_ids[i]);
        }
        s += "], " + std::to_string(attended.size());
        return s;
    }
};

using AttendTrace = std::vector<AttendRecord>;

namespace detail {

struct Range {
    std::size_t begin;
    std::size_t end;
};

/// Means of consecutive chunks of B entries over [0, n), stored transposed
/// (d_k × n_chunks) so that scoring vectorizes across chunks. A trailing
/// partial chunk is pooled over its actual length.
template <typename T, typename KeyAt>
Matrix<T> chunk_means_t(KeyAt&& key_at, std::size_t n, std::size_t d_k, std::size_t chunk) {
    const std::size_t n_chunks = (n + chunk - 1) / chunk;
    Matrix<T> means(d_k, n_chunks);
    Vector<T> acc(d_k);
    for (std::size_t c = 0; c < n_chunks; ++c) {
        const std::size_t b = c * chunk;
        const std::size_t e = std::min(n, b + chunk);
        std::fill(acc.begin(), acc.end(), T(0));
        for (std::size_t r = b; r < e; ++r) {
            std::span<const T> k = key_at(r);
            for (std::size_t p = 0; p < d_k; ++p) acc[p] += k[p];
        }
        const T len = static_cast<T>(e - b);
        for (std::size_t p = 0; p < d_k; ++p) means(p, c) = acc[p] / len;
    }
    return means;
}

/// scores[c] = q · mean_c for the first n_cand chunks.
template <typename T>
void score_chunks(std::span<const T> q, const Matrix<T>& means_t, std::size_t n_cand,
                  Vector<T>& scores) {
    scores.assign(n_cand, T(0));
    for (std::size_t p = 0; p < q.size(); ++p) {
        const T qp = q[p];
        const T* m = means_t.row(p).data();
        for (std::size_t c = 0; c < n_cand; ++c) scores[c] += qp * m[c];
    }
}

/// Top-k positions of `scores`; ties go to the lower position. Returned ascending.
template <typename T>
void topk_positions(std::span<const T> scores, std::size_t k, std::vector<std::size_t>& out) {
    const std::size_t n = scores.size();
    out.clear();
    if (k >= n) {
        for (std::size_t i = 0; i < n; ++i) out.push_back(i);
        return;
    }
    auto better = [&](std::size_t a, std::size_t b) {
        return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
    };
    if (k <= 16) {
        // Insertion into a k-element list kept best-first; a later position
        // only displaces an entry with a strictly lower score.
        for (std::size_t i = 0; i < n; ++i) {
            if (out.size() == k && !better(i, out.back())) continue;
            if (out.size() == k) out.pop_back();
            auto it = out.end();
            while (it != out.begin() && better(i, *(it - 1))) --it;
            out.insert(it, i);
        }
    } else {
        out.resize(n);
        std::iota(out.begin(), out.end(), std::size_t{0});
        std::partial_sort(out.begin(), out.begin() + static_cast<std::ptrdiff_t>(k), out.end(), better);
        out.resize(k);
    }
    std::sort(out.begin(), out.end());
}

/// softmax(q·Kᵀ/√d_k)·V over the entries listed in `ranges` (in order).
/// Writes the output into `out` and returns the sum of the weights.
template <typename T, typename KeyAt, typename ValueAt>
T attend_ranges(std::span<const T> q, KeyAt&& key_at, ValueAt&& value_at,
                std::span<const Range> ranges, std::size_t d_k, std::span<T> out,
                Vector<T>& weights) {
    const T inv_scale = T(1) / std::sqrt(static_cast<T>(d_k));
    weights.clear();
    for (const Range& r : ranges)
        for (std::size_t j = r.begin; j < r.end; ++j) weights.push_back(dot<T>(q, key_at(j)) * inv_scale);
    RWKVX_CHECK(!weights.empty(), EmptyInputError, "sparse attention: empty attended set");
    softmax_inplace<T>(weights);

    std::fill(out.begin(), out.end(), T(0));
    std::size_t w = 0;
    for (const Range& r : ranges)
        for (std::size_t j = r.begin; j < r.end; ++j, ++w) {
            const T p = weights[w];
            std::span<const T> v = value_at(j);
            for (std::size_t c = 0; c < out.size(); ++c) out[c] += p * v[c];
        }
    T sum = T(0);
    for (T p : weights) sum += p;
    return sum;
}

inline void record(AttendTrace* trace, std::size_t position, std::span<const std::size_t> chunks,
                   std::span<const Range> ranges, double weight_sum) {
    if (!trace) return;
    AttendRecord rec;
    rec.position = position;
    rec.chunk_ids.assign(chunks.begin(), chunks.end());
    for (const Range& r : ranges)
        for (std::size_t j = r.begin; j < r.end; ++j) rec.attended.push_back(j);
    rec.weight_sum = weight_sum;
    trace->push_back(std::move(rec));
}

}  // namespace detail

/// Relevance score of each chunk of B consecutive keys: q · mean(chunk keys).
template <typename T>
ChunkScores<T> chunk_scores(std::span<const T> q, const Matrix<T>& keys, std::size_t chunk) {
    RWKVX_CHECK(chunk >= 1, InputError, "chunk_scores: chunk size must be positive");
    ChunkScores<T> out;
    if (keys.rows() == 0) return out;
    if (q.size() != keys.cols())
        throw ShapeError("chunk_scores: query dim " + std::to_string(q.size()) + " vs key dim " +
                         std::to_string(keys.cols()));
    const auto means = detail::chunk_means_t<T>([&](std::size_t r) { return keys.row(r); },
                                                keys.rows(), keys.cols(), chunk);
    detail::score_chunks<T>(q, means, means.cols(), out.scores);
    out.candidate_ids.resize(out.scores.size());
    std::iota(out.candidate_ids.begin(), out.candidate_ids.end(), std::size_t{0});
    return out;
}

/// The k best candidates (all of them when fewer than k exist), ascending.
/// Equal scores favour the lower chunk index.
template <typename T>
std::vector<std::size_t> select_topk(const ChunkScores<T>& s, std::size_t k) {
    RWKVX_CHECK(k >= 1, InputError, "select_topk: k must be at least 1");
    RWKVX_CHECK(s.scores.size() == s.candidate_ids.size(), ShapeError,
                "select_topk: scores and candidate ids differ in length");
    std::vector<std::size_t> pos;
    detail::topk_positions<T>(s.scores, k, pos);
    std::vector<std::size_t> ids;
    ids.reserve(pos.size());
    for (std::size_t p : pos) ids.push_back(s.candidate_ids[p]);
    std::sort(ids.begin(), ids.end());
    return ids;
}

/// softmax(q·K_selᵀ/√d_k)·V_sel.
template <typename T>
Vector<T> sparse_attend(std::span<const T> q, const Matrix<T>& k_sel, const Matrix<T>& v_sel,
                        std::size_t d_k) {
    RWKVX_CHECK(k_sel.rows() >= 1, EmptyInputError, "sparse_attend: empty selection");
    if (k_sel.rows() != v_sel.rows() || k_sel.cols() != q.size())
        throw ShapeError("sparse_attend: q/K_sel/V_sel shape mismatch");
    Vector<T> out(v_sel.cols()), weights;
    const detail::Range all{0, k_sel.rows()};
    detail::attend_ranges<T>(
        q, [&](std::size_t j) { return k_sel.row(j); }, [&](std::size_t j) { return v_sel.row(j); },
        std::span<const detail::Range>(&all, 1), d_k, out, weights);
    return out;
}

/// Causal chunk-sparse self-attention over one sequence.
///
/// Query t attends the causal prefix of its own chunk plus the top-k
/// (by chunk_scores) among the chunks that were completed before its own
/// chunk began.
template <typename T>
Matrix<T> prefill(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v, const AttnConfig& cfg,
                  AttendTrace* trace = nullptr) {
    cfg.validate();
    const std::size_t n = q.rows();
    if (k.rows() != n || v.rows() != n)
        throw ShapeError("prefill: Q, K, V must have the same number of rows");
    if (q.cols() != k.cols()) throw ShapeError("prefill: Q and K widths differ");
    if (n == 0) return Matrix<T>(0, v.cols());

    const std::size_t b = cfg.chunk_size;
    auto key_at = [&](std::size_t j) { return k.row(j); };
    auto value_at = [&](std::size_t j) { return v.row(j); };
    const auto means = detail::chunk_means_t<T>(key_at, n, k.cols(), b);

    Matrix<T> out(n, v.cols());
    Vector<T> scores, weights;
    std::vector<std::size_t> chosen;
    std::vector<detail::Range> ranges;
    for (std::size_t t = 0; t < n; ++t) {
        const std::size_t own = t / b;
        detail::score_chunks<T>(q.row(t), means, own, scores);
        detail::topk_positions<T>(scores, cfg.top_k, chosen);
        ranges.clear();
        for (std::size_t c : chosen) ranges.push_back({c * b, c * b + b});
        ranges.push_back({own * b, t + 1});
        const T wsum =
            detail::attend_ranges<T>(q.row(t), key_at, value_at, ranges, cfg.d_k, out.row(t), weights);
        detail::record(trace, t, chosen, ranges, static_cast<double>(wsum));
    }
    return out;
}

/// One decode step against a cache that already contains the current token.
///
/// The stored entries (past ++ obs, temporal order) are split into the
/// current token's own-chunk segment, i.e. the trailing min(pos mod B + 1,
/// |obs|) entries, and the candidates before it. Candidates are re-chunked
/// contiguously from the oldest entry, top-k chunks are selected, and the
/// query attends those chunks plus the own-chunk segment. At most
/// k·B + L_obs entries are attended.
template <typename T>
Vector<T> decode_step(std::span<const T> q, const KvCache<T>& cache, const AttnConfig& cfg,
                      AttendTrace* trace = nullptr) {
    const std::size_t n = cache.size();
    RWKVX_CHECK(n > 0, EmptyInputError, "decode_step: empty cache and observation window");
    if (q.size() != cache.key_dim())
        throw ShapeError("decode_step: query dim " + std::to_string(q.size()) + " vs cache key dim " +
                         std::to_string(cache.key_dim()));
    const std::size_t b = cfg.chunk_size;
    RWKVX_CHECK(b >= 1 && cfg.top_k >= 1, InputError, "decode_step: invalid chunk size or k");

    const std::size_t pos = cache.position() - 1;
    const std::size_t own_len = std::min({pos % b + 1, cache.obs_size(), n});
    const std::size_t n_cand = n - own_len;

    auto key_at = [&](std::size_t j) { return cache.key(j); };
    auto value_at = [&](std::size_t j) { return cache.value(j); };
    const auto means = detail::chunk_means_t<T>(key_at, n_cand, cache.key_dim(), b);

    Vector<T> scores, weights, out(cache.value_dim());
    std::vector<std::size_t> chosen;
    detail::score_chunks<T>(q, means, means.cols(), scores);
    detail::topk_positions<T>(scores, cfg.top_k, chosen);
    std::vector<detail::Range> ranges;
    for (std::size_t c : chosen) ranges.push_back({c * b, std::min(n_cand, c * b + b)});
    if (own_len > 0) ranges.push_back({n_cand, n});
    const T wsum = detail::attend_ranges<T>(q, key_at, value_at, ranges, cfg.d_k, out, weights);
    detail::record(trace, pos, chosen, ranges, static_cast<double>(wsum));
    return out;
}

/// Dense attention over every stored entry; the decode-time full-attention baseline.
template <typename T>
Vector<T> dense_decode_step(std::span<const T> q, const KvCache<T>& cache, std::size_t d_k) {
    RWKVX_CHECK(cache.size() > 0, EmptyInputError, "dense_decode_step: empty cache");
    Vector<T> out(cache.value_dim()), weights;
    const detail::Range all{0, cache.size()};
    detail::attend_ranges<T>(
        q, [&](std::size_t j) { return cache.key(j); }, [&](std::size_t j) { return cache.value(j); },
        std::span<const detail::Range>(&all, 1), d_k, out, weights);
    return out;
}

/// Reference dense attention softmax(Q·Kᵀ/√d_k)·V, optionally causal. O(N²).
///
/// Queries are processed in blocks against key tiles so each tile of Kᵀ and
/// V is reused across the block; every logit is still summed over the head
/// dimension in ascending order and every output over keys in ascending order.
template <typename T>
Matrix<T> full_attention_oracle(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v,
                                std::size_t d_k, bool causal) {
    if (q.cols() != k.cols() || k.rows() != v.rows() || (causal && q.rows() != k.rows()))
        throw ShapeError("full_attention_oracle: inconsistent Q/K/V shapes");
    constexpr std::size_t kQueryBlock = 8;
    constexpr std::size_t kKeyTile = 512;
    const Matrix<T> kt = transpose(k);
    const T inv_scale = T(1) / std::sqrt(static_cast<T>(d_k));
    const std::size_t n_keys = k.rows();
    Matrix<T> out(q.rows(), v.cols());
    Matrix<T> logits;
    std::array<std::size_t, kQueryBlock> limit{};

    for (std::size_t i0 = 0; i0 < q.rows(); i0 += kQueryBlock) {
        const std::size_t nb = std::min(kQueryBlock, q.rows() - i0);
        std::size_t span = 0;
        for (std::size_t r = 0; r < nb; ++r) {
            limit[r] = causal ? i0 + r + 1 : n_keys;
            span = std::max(span, limit[r]);
        }
        logits = Matrix<T>(nb, span);
        for (std::size_t j0 = 0; j0 < span; j0 += kKeyTile) {
            const std::size_t j1 = std::min(span, j0 + kKeyTile);
            for (std::size_t p = 0; p < q.cols(); ++p) {
                const T* krow = kt.row(p).data();
                for (std::size_t r = 0; r < nb; ++r) {
                    const T qp = q(i0 + r, p);
                    T* l = logits.row(r).data();
                    const std::size_t e = std::min(j1, limit[r]);
                    for (std::size_t j = j0; j < e; ++j) l[j] += qp * krow[j];
                }
            }
        }
        for (std::size_t r = 0; r < nb; ++r) {
            auto row = logits.row(r).first(limit[r]);
            for (T& x : row) x *= inv_scale;
            softmax_inplace<T>(row);
        }
        for (std::size_t j0 = 0; j0 < span; j0 += kKeyTile) {
            const std::size_t j1 = std::min(span, j0 + kKeyTile);
            for (std::size_t r = 0; r < nb; ++r) {
                T* o = out.row(i0 + r).data();
                const T* l = logits.row(r).data();
                const std::size_t e = std::min(j1, limit[r]);
                for (std::size_t j = j0; j < e; ++j) {
                    const T p = l[j];
                    const T* vrow = v.row(j).data();
                    for (std::size_t c = 0; c < v.cols(); ++c) o[c] += p * vrow[c];
                }
            }
        }
    }
    return out;
}

template <typename T>
struct AttendGrads {
    Vector<T> dq;
    Matrix<T> dk;
    Matrix<T> dv;
};

/// Exact gradients of sparse_attend for a fixed selection.
///
/// With s_j = q·k_j/√d, p = softmax(s), o = Σ p_j v_j and upstream g:
/// dv_j = p_j g, ds_j = p_j (g·v_j − Σ_l p_l g·v_l),
/// dq = Σ ds_j k_j/√d, dk_j = ds_j q/√d.
template <typename T>
AttendGrads<T> sparse_attend_backward(std::span<const T> q, const Matrix<T>& k_sel,
                                      const Matrix<T>& v_sel, std::size_t d_k,
                                      std::span<const T> upstream) {
    if (k_sel.rows() == 0 || k_sel.rows() != v_sel.rows() || k_sel.cols() != q.size() ||
        upstream.size() != v_sel.cols())
        throw ShapeError("sparse_attend_backward: shape mismatch");
    const std::size_t n = k_sel.rows();
    const T inv_scale = T(1) / std::sqrt(static_cast<T>(d_k));

    Vector<T> p(n);
    for (std::size_t j = 0; j < n; ++j) p[j] = dot<T>(q, k_sel.row(j)) * inv_scale;
    softmax_inplace<T>(p);

    AttendGrads<T> g{Vector<T>(q.size(), T(0)), Matrix<T>(n, k_sel.cols()), Matrix<T>(n, v_sel.cols())};
    Vector<T> dp(n);
    T weighted = T(0);
    for (std::size_t j = 0; j < n; ++j) {
        dp[j] = dot<T>(upstream, v_sel.row(j));
        weighted += p[j] * dp[j];
        T* dvj = g.dv.row(j).data();
        for (std::size_t c = 0; c < v_sel.cols(); ++c) dvj[c] = p[j] * upstream[c];
    }
    for (std::size_t j = 0; j < n; ++j) {
        const T ds = p[j] * (dp[j] - weighted) * inv_scale;
        auto kj = k_sel.row(j);
        T* dkj = g.dk.row(j).data();
        for (std::size_t c = 0; c < q.size(); ++c) {
            g.dq[c] += ds * kj[c];
            dkj[c] = ds * q[c];
        }
    }
    return g;
}

}  // namespace rwkvx
