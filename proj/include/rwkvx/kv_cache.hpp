// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "rwkvx/errors.hpp"
#include "rwkvx/tensor.hpp"

namespace rwkvx {

/// Budget value that disables compression.
inline constexpr std::size_t kUnbounded = std::numeric_limits<std::size_t>::max();

/// C[j] = Σᵢ softmax(Q_obs·K_pastᵀ/√d_k)[i, j].
///
/// Returns an empty vector when there are no past keys. Each softmax row sums
/// to one, so Σⱼ C[j] equals the number of observation queries.
template <typename T>
Vector<T> importance_scores(const Matrix<T>& q_obs, const Matrix<T>& k_past, std::size_t d_k) {
    if (k_past.rows() == 0) return {};
    RWKVX_CHECK(q_obs.rows() > 0, EmptyInputError, "importance_scores: no observation queries");
    if (q_obs.cols() != k_past.cols())
        throw ShapeError("importance_scores: query width " + std::to_string(q_obs.cols()) +
                         " vs key width " + std::to_string(k_past.cols()));
    Matrix<T> logits = matmul(q_obs, transpose(k_past));
    const T scale = T(1) / std::sqrt(static_cast<T>(d_k));
    for (T& x : logits.data()) x *= scale;
    for (std::size_t i = 0; i < logits.rows(); ++i) softmax_inplace(logits.row(i));

    Vector<T> c(k_past.rows(), T(0));
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        const T* p = logits.row(i).data();
        for (std::size_t j = 0; j < c.size(); ++j) c[j] += p[j];
    }
    return c;
}

/// Indices of the `m` highest scores, returned in ascending (temporal) order.
/// Equal scores favour the more recent (higher) index.
template <typename T>
std::vector<std::size_t> top_m_indices(std::span<const T> scores, std::size_t m) {
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (m >= idx.size()) return idx;
    auto better = [&](std::size_t a, std::size_t b) {
        return scores[a] > scores[b] || (scores[a] == scores[b] && a > b);
    };
    std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(m), idx.end(), better);
    idx.resize(m);
    std::sort(idx.begin(), idx.end());
    return idx;
}

/// Decode-time KV cache with a past segment bounded by `budget_m` entries and
/// an observation window of the `window_L` most recent entries.
///
/// Observation-window queries are stored next to their keys and values;
/// they are the Q_obs of the importance score. Entries are kept in temporal
/// order: the logical sequence is past ++ obs.
template <typename T>
class KvCache {
public:
    struct Views {
        const Matrix<T>& past_keys;
        const Matrix<T>& past_values;
        const Matrix<T>& obs_queries;
        const Matrix<T>& obs_keys;
        const Matrix<T>& obs_values;
    };

    KvCache(std::size_t d_k, std::size_t d_v, std::size_t budget_m, std::size_t window_L)
        : d_k_(d_k), d_v_(d_v), budget_m_(budget_m), window_L_(window_L),
          past_keys_(0, d_k), past_values_(0, d_v), obs_queries_(0, d_k), obs_keys_(0, d_k),
          obs_values_(0, d_v) {
        if (d_k == 0 || d_v == 0) throw ConfigError("dims >= 1", "cache dimensions must be positive");
        if (window_L == 0) throw ConfigError("L_obs >= 1", "observation window must hold an entry");
    }

    /// Builds the cache left behind by a prefill over Q/K/V: the last
    /// `window_L` rows form the observation window, the rest the past, and a
    /// single compression pass brings the past within budget.
    static KvCache from_sequence(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v,
                                 std::size_t budget_m, std::size_t window_L) {
        if (q.rows() != k.rows() || k.rows() != v.rows() || q.cols() != k.cols())
            throw ShapeError("KvCache::from_sequence: Q/K/V shape mismatch");
        KvCache c(k.cols(), v.cols(), budget_m, window_L);
        const std::size_t n = k.rows();
        const std::size_t n_obs = std::min(n, window_L);
        const std::size_t n_past = n - n_obs;
        c.past_keys_.reserve_rows(n_past);
        c.past_values_.reserve_rows(n_past);
        for (std::size_t i = 0; i < n_past; ++i) {
            c.past_keys_.push_row(k.row(i));
            c.past_values_.push_row(v.row(i));
        }
        for (std::size_t i = n_past; i < n; ++i) {
            c.obs_queries_.push_row(q.row(i));
            c.obs_keys_.push_row(k.row(i));
            c.obs_values_.push_row(v.row(i));
        }
        c.position_ = n;
        c.compress();
        return c;
    }

    std::size_t key_dim() const noexcept { return d_k_; }
    std::size_t value_dim() const noexcept { return d_v_; }
    std::size_t budget_m() const noexcept { return budget_m_; }
    std::size_t window_L() const noexcept { return window_L_; }
    bool compression_enabled() const noexcept { return budget_m_ != kUnbounded; }

    std::size_t past_size() const noexcept { return past_keys_.rows(); }
    std::size_t obs_size() const noexcept { return obs_keys_.rows(); }
    std::size_t size() const noexcept { return past_size() + obs_size(); }
    /// Number of tokens ever appended (absolute position of the next token).
    std::size_t position() const noexcept { return position_; }

    Views split() const {
        return Views{past_keys_, past_values_, obs_queries_, obs_keys_, obs_values_};
    }

    /// Logical entry i of past ++ obs.
    std::span<const T> key(std::size_t i) const {
        return i < past_size() ? past_keys_.row(i) : obs_keys_.row(i - past_size());
    }
    std::span<const T> value(std::size_t i) const {
        return i < past_size() ? past_values_.row(i) : obs_values_.row(i - past_size());
    }

    /// Adds one decoded token. The oldest window entry spills into the past
    /// (its query is dropped) and the past is compressed whenever it
    /// exceeds the budget.
    void append(std::span<const T> q, std::span<const T> k, std::span<const T> v) {
        if (q.size() != d_k_ || k.size() != d_k_ || v.size() != d_v_)
            throw ShapeError("KvCache::append: expected q,k of dim " + std::to_string(d_k_) +
                             " and v of dim " + std::to_string(d_v_));
        obs_queries_.push_row(q);
        obs_keys_.push_row(k);
        obs_values_.push_row(v);
        ++position_;
        if (obs_size() > window_L_) {
            past_keys_.push_row(obs_keys_.row(0));
            past_values_.push_row(obs_values_.row(0));
            obs_queries_.pop_front_row();
            obs_keys_.pop_front_row();
            obs_values_.pop_front_row();
        }
        if (past_size() > budget_m_) compress();
    }

    /// Keeps the `budget_m` past entries with the highest importance under
    /// the current observation queries, in their original order. No-op when
    /// the past already fits.
    void compress() {
        if (past_size() <= budget_m_) return;
        if (obs_size() == 0)
            throw CompressionUndefinedError(
                "KvCache::compress: past exceeds budget but the observation window is empty");
        const Vector<T> scores = importance_scores(obs_queries_, past_keys_, d_k_);
        const auto keep = top_m_indices<T>(scores, budget_m_);
        Matrix<T> nk(0, d_k_), nv(0, d_v_);
        nk.reserve_rows(keep.size());
        nv.reserve_rows(keep.size());
        for (std::size_t i : keep) {
            nk.push_row(past_keys_.row(i));
            nv.push_row(past_values_.row(i));
        }
        past_keys_ = std::move(nk);
        past_values_ = std::move(nv);
    }

    friend bool operator==(const KvCache&, const KvCache&) = default;

    template <typename U>
    friend void write_cache_dump(std::ostream& out, const KvCache<U>& cache);
    template <typename U>
    friend KvCache<U> read_cache_dump(std::istream& in);

private:
    std::size_t d_k_;
    std::size_t d_v_;
    std::size_t budget_m_;
    std::size_t window_L_;
    std::size_t position_ = 0;
    Matrix<T> past_keys_;
    Matrix<T> past_values_;
    Matrix<T> obs_queries_;
    Matrix<T> obs_keys_;
    Matrix<T> obs_values_;
};

template <typename T>
KvCache<T> append(KvCache<T> cache, std::span<const T> q, std::span<const T> k,
                  std::span<const T> v) {
    cache.append(q, k, v);
    return cache;
}

template <typename T>
KvCache<T> compress(KvCache<T> cache) {
    cache.compress();
    return cache;
}

namespace detail {

template <typename T>
void write_real(std::ostream& out, T x) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), x);
    out.write(buf, res.ptr - buf);
}

template <typename T>
void write_row(std::ostream& out, std::initializer_list<std::span<const T>> parts) {
    bool first = true;
    for (auto part : parts)
        for (T x : part) {
            if (!first) out << ", ";
            first = false;
            write_real(out, x);
        }
    out << '\n';
}

inline std::vector<std::string_view> split_fields(std::string_view line) {
    std::vector<std::string_view> out;
    while (true) {
        const auto comma = line.find(',');
        auto field = line.substr(0, comma);
        while (!field.empty() && field.front() == ' ') field.remove_prefix(1);
        while (!field.empty() && (field.back() == ' ' || field.back() == '\r')) field.remove_suffix(1);
        out.push_back(field);
        if (comma == std::string_view::npos) break;
        line.remove_prefix(comma + 1);
    }
    return out;
}

template <typename T>
T parse_number(std::string_view s) {
    T value{};
    auto res = std::from_chars(s.data(), s.data() + s.size(), value);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size())
        throw IoError("cache dump: malformed number '" + std::string(s) + "'");
    return value;
}

inline std::size_t parse_budget(std::string_view s) {
    return s == "inf" ? kUnbounded : parse_number<std::size_t>(s);
}

}  // namespace detail

/// Text dump used by tests:
///
///     m, L_obs, n_past, n_obs
///     d_k, d_v, position
///     <n_past rows: key..., value...>
///     <n_obs rows: query..., key..., value...>
///
/// Reals use the shortest decimal form that round-trips exactly. An
/// unbounded budget is written as `inf`.
template <typename T>
void write_cache_dump(std::ostream& out, const KvCache<T>& c) {
    if (c.compression_enabled())
        out << c.budget_m_;
    else
        out << "inf";
    out << ", " << c.window_L_ << ", " << c.past_size() << ", " << c.obs_size() << '\n';
    out << c.d_k_ << ", " << c.d_v_ << ", " << c.position_ << '\n';
    for (std::size_t i = 0; i < c.past_size(); ++i)
        detail::write_row<T>(out, {c.past_keys_.row(i), c.past_values_.row(i)});
    for (std::size_t i = 0; i < c.obs_size(); ++i)
        detail::write_row<T>(out, {c.obs_queries_.row(i), c.obs_keys_.row(i), c.obs_values_.row(i)});
}

template <typename T>
KvCache<T> read_cache_dump(std::istream& in) {
    std::string line;
    auto next_fields = [&](std::size_t expected) {
        if (!std::getline(in, line)) throw IoError("cache dump: truncated");
        auto f = detail::split_fields(line);
        if (f.size() != expected)
            throw IoError("cache dump: expected " + std::to_string(expected) + " fields, got " +
                          std::to_string(f.size()));
        return f;
    };
    auto head = next_fields(4);
    const std::size_t m = detail::parse_budget(head[0]);
    const auto window = detail::parse_number<std::size_t>(head[1]);
    const auto n_past = detail::parse_number<std::size_t>(head[2]);
    const auto n_obs = detail::parse_number<std::size_t>(head[3]);
    auto dims = next_fields(3);
    const auto dk = detail::parse_number<std::size_t>(dims[0]);
    const auto dv = detail::parse_number<std::size_t>(dims[1]);
    const auto position = detail::parse_number<std::size_t>(dims[2]);

    KvCache<T> c(dk, dv, m, window);
    std::vector<T> buf;
    auto read_row = [&](std::size_t width) {
        auto f = next_fields(width);
        buf.resize(width);
        for (std::size_t i = 0; i < width; ++i) buf[i] = detail::parse_number<T>(f[i]);
        return std::span<const T>(buf);
    };
    for (std::size_t i = 0; i < n_past; ++i) {
        auto row = read_row(dk + dv);
        c.past_keys_.push_row(row.first(dk));
        c.past_values_.push_row(row.subspan(dk));
    }
    for (std::size_t i = 0; i < n_obs; ++i) {
        auto row = read_row(2 * dk + dv);
        c.obs_queries_.push_row(row.first(dk));
        c.obs_keys_.push_row(row.subspan(dk, dk));
        c.obs_values_.push_row(row.subspan(2 * dk));
    }
    c.position_ = position;
    return c;
}

}  // namespace rwkvx
