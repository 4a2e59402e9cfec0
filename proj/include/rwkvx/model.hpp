// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <variant>
#include <vector>

#include "rwkvx/errors.hpp"
#include "rwkvx/kv_cache.hpp"
#include "rwkvx/rwkv7.hpp"
#include "rwkvx/sparse_attn.hpp"
#include "rwkvx/tensor.hpp"

namespace rwkvx {

class IndexError : public InputError {
public:
    using InputError::InputError;
};

// ---------------------------------------------------------------------------
// Configuration and layout

enum class LayerKind : char { recurrence = 'R', sparse_attention = 'A' };

struct LayerLayout {
    std::vector<LayerKind> kinds;

    std::size_t size() const noexcept { return kinds.size(); }
    std::size_t count(LayerKind k) const {
        return static_cast<std::size_t>(std::count(kinds.begin(), kinds.end(), k));
    }
    std::vector<std::size_t> indices(LayerKind k) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < kinds.size(); ++i)
            if (kinds[i] == k) out.push_back(i);
        return out;
    }
    std::string to_string() const {
        std::string s;
        for (LayerKind k : kinds) s.push_back(static_cast<char>(k));
        return s;
    }
    static LayerLayout from_string(std::string_view s) {
        LayerLayout l;
        for (char c : s) {
            if (c != 'R' && c != 'A') throw InputError("layout: unknown layer kind '" + std::string(1, c) + "'");
            l.kinds.push_back(static_cast<LayerKind>(c));
        }
        return l;
    }
    friend bool operator==(const LayerLayout&, const LayerLayout&) = default;
};

/// n_attn = round(n_layers·ratio) attention layers; with period
/// round(n_layers/n_attn), layer i is attention iff (i+1) mod period == 0.
inline LayerLayout build_layout(std::size_t n_layers, double attn_ratio) {
    if (n_layers == 0) throw EmptyInputError("build_layout: model needs at least one layer");
    if (!(attn_ratio >= 0.0 && attn_ratio <= 1.0))
        throw ConfigError("0 <= attn_ratio <= 1", "got " + std::to_string(attn_ratio));
    LayerLayout layout{std::vector<LayerKind>(n_layers, LayerKind::recurrence)};
    const auto n_attn = static_cast<std::size_t>(std::llround(static_cast<double>(n_layers) * attn_ratio));
    if (n_attn == 0) return layout;
    const auto period = static_cast<std::size_t>(
        std::llround(static_cast<double>(n_layers) / static_cast<double>(n_attn)));
    for (std::size_t i = 0; i < n_layers; ++i)
        if ((i + 1) % period == 0) layout.kinds[i] = LayerKind::sparse_attention;
    return layout;
}

/// Insertion indices for interleaved expansion of an n_base-layer stack: one
/// new block directly after every layer that build_layout(n_base, ratio)
/// marks as attention.
inline std::vector<std::size_t> expansion_positions(std::size_t n_base, double attn_ratio) {
    std::vector<std::size_t> pos;
    for (std::size_t i : build_layout(n_base, attn_ratio).indices(LayerKind::sparse_attention))
        pos.push_back(i + 1);
    return pos;
}

struct ModelConfig {
    std::size_t n_layers = 8;
    std::size_t d_model = 128;
    std::size_t d_k = 64;
    std::size_t d_v = 64;
    std::size_t vocab_size = 259;  // bytes + BOS, key and value markers
    double attn_ratio = 0.25;
    AttnConfig attn{};
    std::uint64_t seed = 42;

    void validate() const {
        if (n_layers < 1) throw ConfigError("n_layers >= 1", "model needs at least one layer");
        if (d_model < 1 || d_k < 1 || d_v < 1) throw ConfigError("dims >= 1", "d_model, d_k, d_v must be positive");
        if (vocab_size < 1) throw ConfigError("vocab_size >= 1", "vocabulary must be non-empty");
        if (!(attn_ratio >= 0.0 && attn_ratio <= 1.0))
            throw ConfigError("0 <= attn_ratio <= 1", "got " + std::to_string(attn_ratio));
        if (attn.d_k != d_k || attn.d_v != d_v)
            throw ConfigError("attn dims == model dims", "attention d_k/d_v must match the model");
        attn.validate();
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

namespace detail {

inline std::string trim(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return std::string(s);
}

template <typename N>
N parse_config_number(const std::string& key, const std::string& value) {
    N out{};
    const char* b = value.data();
    const char* e = b + value.size();
    auto res = std::from_chars(b, e, out);
    if (res.ec != std::errc() || res.ptr != e)
        throw ConfigError(key + " is numeric", "cannot parse '" + value + "'");
    return out;
}

inline std::string format_double(double x) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), x);
    return std::string(buf, res.ptr);
}

}  // namespace detail

/// Applies one `key = value` setting. Unknown keys are rejected.
inline void apply_setting(ModelConfig& cfg, const std::string& raw_key, const std::string& raw_value) {
    const std::string key = detail::trim(raw_key);
    const std::string value = detail::trim(raw_value);
    using detail::parse_config_number;
    if (key == "n_layers") cfg.n_layers = parse_config_number<std::size_t>(key, value);
    else if (key == "d_model") cfg.d_model = parse_config_number<std::size_t>(key, value);
    else if (key == "d_k") cfg.attn.d_k = cfg.d_k = parse_config_number<std::size_t>(key, value);
    else if (key == "d_v") cfg.attn.d_v = cfg.d_v = parse_config_number<std::size_t>(key, value);
    else if (key == "vocab_size") cfg.vocab_size = parse_config_number<std::size_t>(key, value);
    else if (key == "attn_ratio") cfg.attn_ratio = parse_config_number<double>(key, value);
    else if (key == "seed") cfg.seed = parse_config_number<std::uint64_t>(key, value);
    else if (key == "chunk_size") cfg.attn.chunk_size = parse_config_number<std::size_t>(key, value);
    else if (key == "top_k") cfg.attn.top_k = parse_config_number<std::size_t>(key, value);
    else if (key == "cache_budget")
        cfg.attn.cache_budget = value == "inf" ? kUnbounded : parse_config_number<std::size_t>(key, value);
    else if (key == "obs_window") cfg.attn.obs_window = parse_config_number<std::size_t>(key, value);
    else throw ConfigError("known key", "unknown config key '" + key + "'");
}

/// Applies a `key=value` override string.
inline void apply_override(ModelConfig& cfg, std::string_view kv) {
    const auto eq = kv.find('=');
    if (eq == std::string_view::npos) throw ConfigError("key=value", "malformed override '" + std::string(kv) + "'");
    apply_setting(cfg, std::string(kv.substr(0, eq)), std::string(kv.substr(eq + 1)));
}

/// Parses the flat `key = value` config format. `#` starts a comment.
inline ModelConfig parse_config(std::string_view text, ModelConfig base = {}) {
    std::istringstream in{std::string(text)};
    std::string line;
    while (std::getline(in, line)) {
        if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        if (detail::trim(line).empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("key = value", "malformed line '" + line + "'");
        apply_setting(base, line.substr(0, eq), line.substr(eq + 1));
    }
    return base;
}

inline ModelConfig load_config(const std::string& path, ModelConfig base = {}) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot read config '" + path + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_config(ss.str(), base);
}

inline std::string to_config_text(const ModelConfig& c) {
    std::ostringstream o;
    o << "n_layers = " << c.n_layers << '\n'
      << "d_model = " << c.d_model << '\n'
      << "d_k = " << c.d_k << '\n'
      << "d_v = " << c.d_v << '\n'
      << "vocab_size = " << c.vocab_size << '\n'
      << "attn_ratio = " << detail::format_double(c.attn_ratio) << '\n'
      << "seed = " << c.seed << '\n'
      << "chunk_size = " << c.attn.chunk_size << '\n'
      << "top_k = " << c.attn.top_k << '\n'
      << "cache_budget = "
      << (c.attn.cache_budget == kUnbounded ? std::string("inf") : std::to_string(c.attn.cache_budget)) << '\n'
      << "obs_window = " << c.attn.obs_window << '\n';
    return o.str();
}

// ---------------------------------------------------------------------------
// Parameters

/// Deterministic uniform source: mt19937_64 output is fully specified by
/// the standard, and the 53-bit mapping below avoids the implementation-
/// defined std::uniform_real_distribution.
class ParamRng {
public:
    explicit ParamRng(std::uint64_t seed) : gen_(seed) {}
    double uniform(double lo, double hi) {
        const double u = static_cast<double>(gen_() >> 11) * 0x1.0p-53;
        return lo + (hi - lo) * u;
    }

private:
    std::mt19937_64 gen_;
};

template <typename T>
Matrix<T> random_matrix(ParamRng& rng, std::size_t rows, std::size_t cols, double scale) {
    Matrix<T> m(rows, cols);
    for (T& x : m.data()) x = static_cast<T>(rng.uniform(-scale, scale));
    return m;
}

/// Weights are stored input-major (in × out): y = x·W.
template <typename T>
struct RecurrenceLayer {
    Matrix<T> w_decay, w_rate, w_removal, w_key, w_value, w_receptance, w_out;

    static RecurrenceLayer random(ParamRng& rng, const ModelConfig& c) {
        const double s_in = 1.0 / std::sqrt(static_cast<double>(c.d_model));
        const double s_out = 1.0 / std::sqrt(static_cast<double>(c.d_v));
        RecurrenceLayer l;
        l.w_decay = random_matrix<T>(rng, c.d_model, c.d_k, s_in);
        l.w_rate = random_matrix<T>(rng, c.d_model, c.d_k, s_in);
        l.w_removal = random_matrix<T>(rng, c.d_model, c.d_k, s_in);
        l.w_key = random_matrix<T>(rng, c.d_model, c.d_k, s_in);
        l.w_value = random_matrix<T>(rng, c.d_model, c.d_v, s_in);
        l.w_receptance = random_matrix<T>(rng, c.d_model, c.d_k, s_in);
        l.w_out = random_matrix<T>(rng, c.d_v, c.d_model, s_out);
        return l;
    }

    template <typename F>
    void for_each_param(F&& f) {
        f("w_decay", w_decay); f("w_rate", w_rate); f("w_removal", w_removal); f("w_key", w_key);
        f("w_value", w_value); f("w_receptance", w_receptance); f("w_out", w_out);
    }
    friend bool operator==(const RecurrenceLayer&, const RecurrenceLayer&) = default;
};

template <typename T>
struct AttentionLayer {
    Matrix<T> w_query, w_key, w_value, w_out;

    static AttentionLayer random(ParamRng& rng, const ModelConfig& c) {
        const double s_in = 1.0 / std::sqrt(static_cast<double>(c.d_model));
        const double s_out = 1.0 / std::sqrt(static_cast<double>(c.d_v));
        AttentionLayer l;
        l.w_query = random_matrix<T>(rng, c.d_model, c.d_k, s_in);
        l.w_key = random_matrix<T>(rng, c.d_model, c.d_k, s_in);
        l.w_value = random_matrix<T>(rng, c.d_model, c.d_v, s_in);
        l.w_out = random_matrix<T>(rng, c.d_v, c.d_model, s_out);
        return l;
    }

    template <typename F>
    void for_each_param(F&& f) {
        f("w_query", w_query); f("w_key", w_key); f("w_value", w_value); f("w_out", w_out);
    }
    friend bool operator==(const AttentionLayer&, const AttentionLayer&) = default;
};

template <typename T>
using Layer = std::variant<RecurrenceLayer<T>, AttentionLayer<T>>;

/// Per-layer decode state: the recurrence matrix or the attention cache.
template <typename T>
using LayerState = std::variant<rwkv7::State<T>, KvCache<T>>;

template <typename T>
struct ModelState {
    std::vector<LayerState<T>> layers;

    std::size_t count_recurrent() const {
        return static_cast<std::size_t>(std::count_if(layers.begin(), layers.end(), [](const auto& s) {
            return std::holds_alternative<rwkv7::State<T>>(s);
        }));
    }
    std::size_t count_caches() const { return layers.size() - count_recurrent(); }

    /// Largest number of entries stored by any attention layer's cache.
    std::size_t cache_entries() const {
        std::size_t n = 0;
        for (const auto& s : layers)
            if (const auto* c = std::get_if<KvCache<T>>(&s)) n = std::max(n, c->size());
        return n;
    }
};

enum class ForwardMode { prefill, decode };

template <typename T>
struct ForwardOutput {
    Matrix<T> logits;
    ModelState<T> state;
};

namespace detail {

template <typename T>
void rms_norm_inplace(std::span<T> x) {
    T sq = T(0);
    for (T v : x) sq += v * v;
    const T inv = T(1) / std::sqrt(sq / static_cast<T>(x.size()) + T(1e-6));
    for (T& v : x) v *= inv;
}

template <typename T>
Matrix<T> rms_norm_rows(const Matrix<T>& h) {
    Matrix<T> out = h;
    for (std::size_t i = 0; i < out.rows(); ++i) rms_norm_inplace(out.row(i));
    return out;
}

template <typename T>
T sigmoid(T x) {
    return T(1) / (T(1) + std::exp(-x));
}

/// Gate maps from one normalized hidden row to delta-rule inputs.
template <typename T>
rwkv7::Inputs<T> gate_inputs(const Vector<T>& decay, const Vector<T>& rate, Vector<T> removal,
                             Vector<T> key, Vector<T> value, Vector<T> receptance) {
    Vector<T> w(decay.size()), a(rate.size());
    for (std::size_t i = 0; i < w.size(); ++i)
        w[i] = std::max(sigmoid(decay[i]), std::numeric_limits<T>::min());
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = sigmoid(rate[i]);
    // A zero projection has no direction; fall back to the first basis vector.
    if (std::all_of(removal.begin(), removal.end(), [](T x) { return x == T(0); })) removal[0] = T(1);
    return rwkv7::Inputs<T>::make(std::move(w), std::move(a), std::move(removal), std::move(key),
                                  std::move(value), std::move(receptance));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Model

/// Hybrid stack: byte embedding (no positional encoding), pre-norm residual
/// blocks of delta-rule recurrence or top-k chunk sparse attention, final
/// norm and vocabulary projection.
template <typename T>
class Model {
public:
    static Model random(const ModelConfig& cfg) {
        cfg.validate();
        return random(cfg, build_layout(cfg.n_layers, cfg.attn_ratio));
    }

    static Model random(ModelConfig cfg, const LayerLayout& layout) {
        cfg.n_layers = layout.size();
        cfg.validate();
        ParamRng rng(cfg.seed);
        Model m;
        m.cfg_ = cfg;
        m.embed_ = random_matrix<T>(rng, cfg.vocab_size, cfg.d_model, 1.0);
        for (LayerKind k : layout.kinds) {
            if (k == LayerKind::recurrence)
                m.layers_.emplace_back(RecurrenceLayer<T>::random(rng, cfg));
            else
                m.layers_.emplace_back(AttentionLayer<T>::random(rng, cfg));
        }
        m.head_ = random_matrix<T>(rng, cfg.d_model, cfg.vocab_size,
                                   1.0 / std::sqrt(static_cast<double>(cfg.d_model)));
        return m;
    }

    const ModelConfig& config() const noexcept { return cfg_; }
    ModelConfig& config() noexcept { return cfg_; }
    std::size_t n_layers() const noexcept { return layers_.size(); }
    std::vector<Layer<T>>& layers() noexcept { return layers_; }
    const std::vector<Layer<T>>& layers() const noexcept { return layers_; }
    Matrix<T>& embedding() noexcept { return embed_; }
    Matrix<T>& head() noexcept { return head_; }

    LayerLayout layout() const {
        LayerLayout l;
        for (const auto& layer : layers_)
            l.kinds.push_back(std::holds_alternative<RecurrenceLayer<T>>(layer) ? LayerKind::recurrence
                                                                              : LayerKind::sparse_attention);
        return l;
    }

    ModelState<T> initial_state() const {
        ModelState<T> s;
        for (const auto& layer : layers_) {
            if (std::holds_alternative<RecurrenceLayer<T>>(layer))
                s.layers.emplace_back(rwkv7::State<T>::zeros(cfg_.d_v, cfg_.d_k));
            else
                s.layers.emplace_back(
                    KvCache<T>(cfg_.d_k, cfg_.d_v, cfg_.attn.cache_budget, cfg_.attn.obs_window));
        }
        return s;
    }

    /// Processes a whole sequence; returns one logits row per token and the
    /// state needed to continue decoding after it.
    ForwardOutput<T> prefill(std::span<const int> tokens, AttendTrace* trace = nullptr) const {
        RWKVX_CHECK(!tokens.empty(), EmptyInputError, "prefill: empty token sequence");
        Matrix<T> h = embed(tokens);
        ForwardOutput<T> out;
        for (const auto& layer : layers_) {
            const Matrix<T> x = detail::rms_norm_rows(h);
            if (const auto* rec = std::get_if<RecurrenceLayer<T>>(&layer)) {
                const Matrix<T> dec = matmul(x, rec->w_decay), rate = matmul(x, rec->w_rate),
                                rem = matmul(x, rec->w_removal), key = matmul(x, rec->w_key),
                                val = matmul(x, rec->w_value), rcp = matmul(x, rec->w_receptance);
                auto st = rwkv7::State<T>::zeros(cfg_.d_v, cfg_.d_k);
                for (std::size_t t = 0; t < tokens.size(); ++t) {
                    const auto in = detail::gate_inputs<T>(row_vec(dec, t), row_vec(rate, t), row_vec(rem, t),
                                                           row_vec(key, t), row_vec(val, t), row_vec(rcp, t));
                    rwkv7::state_step_inplace(st, in);
                    add_into(h.row(t), vecmat<T>(rwkv7::readout<T>(st, in.r), rec->w_out));
                }
                out.state.layers.emplace_back(std::move(st));
            } else {
                const auto& att = std::get<AttentionLayer<T>>(layer);
                const Matrix<T> q = matmul(x, att.w_query), k = matmul(x, att.w_key), v = matmul(x, att.w_value);
                const Matrix<T> o = matmul(rwkvx::prefill(q, k, v, cfg_.attn, trace), att.w_out);
                for (std::size_t t = 0; t < tokens.size(); ++t) add_into(h.row(t), o.row(t));
                out.state.layers.emplace_back(
                    KvCache<T>::from_sequence(q, k, v, cfg_.attn.cache_budget, cfg_.attn.obs_window));
            }
        }
        out.logits = matmul(detail::rms_norm_rows(h), head_);
        return out;
    }

    /// Consumes one token against carried state; returns its logits.
    Vector<T> decode(int token, ModelState<T>& state, AttendTrace* trace = nullptr) const {
        RWKVX_CHECK(state.layers.size() == layers_.size(), ShapeError, "decode: state/layer count mismatch");
        check_token(token);
        Vector<T> h(embed_.row(static_cast<std::size_t>(token)).begin(),
                    embed_.row(static_cast<std::size_t>(token)).end());
        for (std::size_t li = 0; li < layers_.size(); ++li) {
            Vector<T> x = h;
            detail::rms_norm_inplace<T>(x);
            if (const auto* rec = std::get_if<RecurrenceLayer<T>>(&layers_[li])) {
                auto& st = std::get<rwkv7::State<T>>(state.layers[li]);
                const auto in = detail::gate_inputs<T>(vecmat<T>(x, rec->w_decay), vecmat<T>(x, rec->w_rate),
                                                       vecmat<T>(x, rec->w_removal), vecmat<T>(x, rec->w_key),
                                                       vecmat<T>(x, rec->w_value), vecmat<T>(x, rec->w_receptance));
                rwkv7::state_step_inplace(st, in);
                add_into(h, vecmat<T>(rwkv7::readout<T>(st, in.r), rec->w_out));
            } else {
                const auto& att = std::get<AttentionLayer<T>>(layers_[li]);
                auto& cache = std::get<KvCache<T>>(state.layers[li]);
                const Vector<T> q = vecmat<T>(x, att.w_query), k = vecmat<T>(x, att.w_key),
                                v = vecmat<T>(x, att.w_value);
                cache.append(q, k, v);
                add_into(h, vecmat<T>(decode_step<T>(q, cache, cfg_.attn, trace), att.w_out));
            }
        }
        detail::rms_norm_inplace<T>(h);
        return vecmat<T>(h, head_);
    }

    ForwardOutput<T> forward(std::span<const int> tokens, ForwardMode mode) const {
        if (mode == ForwardMode::prefill) return prefill(tokens);
        RWKVX_CHECK(!tokens.empty(), EmptyInputError, "forward: empty token sequence");
        ForwardOutput<T> out{Matrix<T>(0, cfg_.vocab_size), initial_state()};
        for (int tok : tokens) out.logits.push_row(decode(tok, out.state));
        return out;
    }

    /// Visits every parameter with its checkpoint name.
    template <typename F>
    void for_each_param(F&& f) {
        f(std::string("embed"), embed_);
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            std::visit(
                [&](auto& layer) {
                    const std::string prefix = "layers." + std::to_string(i) +
                                               (std::is_same_v<std::decay_t<decltype(layer)>, RecurrenceLayer<T>>
                                                    ? ".rwkv."
                                                    : ".attn.");
                    layer.for_each_param([&](const char* n, Matrix<T>& m) { f(prefix + n, m); });
                },
                layers_[i]);
        }
        f(std::string("head"), head_);
    }

    friend bool operator==(const Model&, const Model&) = default;

private:
    template <typename U>
    friend Model<U> expand_blocks(const Model<U>& base, std::vector<std::size_t> positions);

    void check_token(int tok) const {
        if (tok < 0 || static_cast<std::size_t>(tok) >= cfg_.vocab_size)
            throw InputError("token id " + std::to_string(tok) + " outside vocabulary of " +
                             std::to_string(cfg_.vocab_size));
    }

    Matrix<T> embed(std::span<const int> tokens) const {
        Matrix<T> h(0, cfg_.d_model);
        h.reserve_rows(tokens.size());
        for (int tok : tokens) {
            check_token(tok);
            h.push_row(embed_.row(static_cast<std::size_t>(tok)));
        }
        return h;
    }

    static Vector<T> row_vec(const Matrix<T>& m, std::size_t r) {
        return Vector<T>(m.row(r).begin(), m.row(r).end());
    }

    static void add_into(std::span<T> dst, std::span<const T> src) {
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    }

    ModelConfig cfg_;
    Matrix<T> embed_;
    std::vector<Layer<T>> layers_;
    Matrix<T> head_;
};

/// Inserts sparse-attention blocks at the given insertion indices of the
/// base stack (0 = before the first layer, n = after the last). New blocks
/// draw their weights from the model seed, except the output projection,
/// which is zero so the residual stream is unchanged at initialization.
template <typename T>
Model<T> expand_blocks(const Model<T>& base, std::vector<std::size_t> positions) {
    const std::size_t n = base.n_layers();
    for (std::size_t p : positions)
        if (p > n)
            throw IndexError("expand_blocks: insertion index " + std::to_string(p) + " outside [0, " +
                             std::to_string(n) + "]");
    std::sort(positions.begin(), positions.end());

    Model<T> out = base;
    out.layers_.clear();
    std::size_t next = 0;
    for (std::size_t i = 0; i <= n; ++i) {
        while (next < positions.size() && positions[next] == i) {
            ParamRng rng(base.cfg_.seed ^ (0x9E3779B97F4A7C15ull * (next + 1)));
            auto blk = AttentionLayer<T>::random(rng, base.cfg_);
            blk.w_out = Matrix<T>(base.cfg_.d_v, base.cfg_.d_model);
            out.layers_.emplace_back(std::move(blk));
            ++next;
        }
        if (i < n) out.layers_.push_back(base.layers_[i]);
    }
    out.cfg_.n_layers = out.layers_.size();
    out.cfg_.attn_ratio = static_cast<double>(out.layout().count(LayerKind::sparse_attention)) /
                          static_cast<double>(out.cfg_.n_layers);
    return out;
}

// ---------------------------------------------------------------------------
// Loss

/// Per-token weights given logits and targets (e.g. a long-context emphasis scheme).
template <typename T>
using TokenWeightHook = std::function<Vector<double>(const Matrix<T>&, std::span<const int>)>;

template <typename T>
TokenWeightHook<T> uniform_weights() {
    return [](const Matrix<T>&, std::span<const int> targets) { return Vector<double>(targets.size(), 1.0); };
}

/// Cross entropy of one logits row against a target id.
template <typename T>
double cross_entropy(std::span<const T> logits, int target) {
    RWKVX_CHECK(target >= 0 && static_cast<std::size_t>(target) < logits.size(), InputError,
                "cross_entropy: target outside vocabulary");
    const double mx = static_cast<double>(*std::max_element(logits.begin(), logits.end()));
    double sum = 0.0;
    for (T x : logits) sum += std::exp(static_cast<double>(x) - mx);
    return mx + std::log(sum) - static_cast<double>(logits[static_cast<std::size_t>(target)]);
}

/// Σₜ wₜ·CE(logitsₜ, targetₜ) / Σₜ wₜ.
template <typename T>
double weighted_ce(const Matrix<T>& logits, std::span<const int> targets, std::span<const double> weights) {
    if (weights.size() != targets.size() || targets.size() != logits.rows())
        throw ShapeError("weighted_ce: logits rows, targets and weights must have equal length");
    double num = 0.0, den = 0.0;
    for (std::size_t t = 0; t < targets.size(); ++t) {
        RWKVX_CHECK(weights[t] >= 0.0, InputError, "weighted_ce: negative weight");
        if (weights[t] == 0.0) continue;
        num += weights[t] * cross_entropy<T>(logits.row(t), targets[t]);
        den += weights[t];
    }
    RWKVX_CHECK(den > 0.0, InputError, "weighted_ce: all weights are zero");
    return num / den;
}

template <typename T>
double weighted_ce(const Matrix<T>& logits, std::span<const int> targets, const TokenWeightHook<T>& hook) {
    const Vector<double> w = hook(logits, targets);
    return weighted_ce<T>(logits, targets, w);
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Little-endian layout:
//   "RWKVXCKP"              8-byte magic
//   u32 version             offset 8
//   u32 flags               bit 0: values are 64-bit
//   u32 len, bytes          config text (key = value lines)
//   u32 len, bytes          layout string ('R' recurrence, 'A' attention)
//   u32 count               tensor records, each:
//     u32 len, bytes name; u32 rank (2); u64 rows; u64 cols; values

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::array<char, 8> kCheckpointMagic{'R', 'W', 'K', 'V', 'X', 'C', 'K', 'P'};

namespace detail {

class ByteWriter {
public:
    explicit ByteWriter(std::ostream& out) : out_(out) {}
    template <typename U>
    void put(U v) {
        static_assert(std::is_trivially_copyable_v<U>);
        std::array<unsigned char, sizeof(U)> b{};
        std::memcpy(b.data(), &v, sizeof(U));
        if constexpr (std::endian::native == std::endian::big) std::reverse(b.begin(), b.end());
        out_.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
    }
    void put_string(std::string_view s) {
        put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
        out_.write(s.data(), static_cast<std::streamsize>(s.size()));
    }

private:
    std::ostream& out_;
};

class ByteReader {
public:
    explicit ByteReader(std::istream& in) : in_(in) {}
    template <typename U>
    U get() {
        std::array<unsigned char, sizeof(U)> b{};
        read_raw(reinterpret_cast<char*>(b.data()), b.size());
        if constexpr (std::endian::native == std::endian::big) std::reverse(b.begin(), b.end());
        U v;
        std::memcpy(&v, b.data(), sizeof(U));
        return v;
    }
    std::string get_string() {
        const auto n = get<std::uint32_t>();
        std::string s(n, '\0');
        read_raw(s.data(), n);
        return s;
    }
    void read_raw(char* dst, std::size_t n) {
        in_.read(dst, static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in_.gcount()) != n)
            throw CheckpointTruncatedError("checkpoint: unexpected end of file");
    }

private:
    std::istream& in_;
};

}  // namespace detail

template <typename T>
void save_checkpoint(Model<T>& model, std::ostream& out) {
    detail::ByteWriter w(out);
    out.write(kCheckpointMagic.data(), kCheckpointMagic.size());
    w.put<std::uint32_t>(kCheckpointVersion);
    const bool wide = std::is_same_v<T, double>;
    w.put<std::uint32_t>(wide ? 1u : 0u);
    w.put_string(to_config_text(model.config()));
    w.put_string(model.layout().to_string());
    std::uint32_t count = 0;
    model.for_each_param([&](const std::string&, Matrix<T>&) { ++count; });
    w.put<std::uint32_t>(count);
    model.for_each_param([&](const std::string& name, Matrix<T>& m) {
        w.put_string(name);
        w.put<std::uint32_t>(2);
        w.put<std::uint64_t>(m.rows());
        w.put<std::uint64_t>(m.cols());
        for (T x : m.data()) {
            if constexpr (std::is_same_v<T, double>)
                w.put<double>(x);
            else
                w.put<float>(static_cast<float>(x));
        }
    });
    if (!out) throw IoError("checkpoint: write failed");
}

template <typename T>
void save_checkpoint(Model<T>& model, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("checkpoint: cannot open '" + path + "' for writing");
    save_checkpoint(model, f);
}

template <typename T>
Model<T> load_checkpoint(std::istream& in) {
    detail::ByteReader r(in);
    std::array<char, 8> magic{};
    r.read_raw(magic.data(), magic.size());
    if (magic != kCheckpointMagic) throw IoError("checkpoint: bad magic");
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion)
        throw CheckpointVersionError("checkpoint: version " + std::to_string(version) + ", expected " +
                                     std::to_string(kCheckpointVersion));
    const bool wide = (r.get<std::uint32_t>() & 1u) != 0;
    const ModelConfig cfg = parse_config(r.get_string());
    const LayerLayout layout = LayerLayout::from_string(r.get_string());

    std::map<std::string, Matrix<T>> records;
    const auto count = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name = r.get_string();
        if (r.get<std::uint32_t>() != 2) throw CheckpointShapeError("checkpoint: tensor '" + name + "' is not 2-D");
        const auto rows = r.get<std::uint64_t>();
        const auto cols = r.get<std::uint64_t>();
        Matrix<T> m(rows, cols);
        for (T& x : m.data()) x = wide ? static_cast<T>(r.get<double>()) : static_cast<T>(r.get<float>());
        records.emplace(std::move(name), std::move(m));
    }

    Model<T> model = Model<T>::random(cfg, layout);
    model.for_each_param([&](const std::string& name, Matrix<T>& dst) {
        auto it = records.find(name);
        if (it == records.end()) throw CheckpointShapeError("checkpoint: missing parameter '" + name + "'");
        if (it->second.rows() != dst.rows() || it->second.cols() != dst.cols())
            throw CheckpointShapeError("checkpoint: parameter '" + name + "' has shape " +
                                       shape_str(it->second.rows(), it->second.cols()) + ", expected " +
                                       shape_str(dst.rows(), dst.cols()));
        dst = std::move(it->second);
        records.erase(it);
    });
    if (!records.empty()) throw CheckpointShapeError("checkpoint: unexpected parameter '" + records.begin()->first + "'");
    return model;
}

template <typename T>
Model<T> load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("checkpoint: cannot open '" + path + "'");
    return load_checkpoint<T>(f);
}

}  // namespace rwkvx
