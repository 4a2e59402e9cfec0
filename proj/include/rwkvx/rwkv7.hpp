// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "rwkvx/errors.hpp"
#include "rwkvx/tensor.hpp"

namespace rwkvx::rwkv7 {

/// Per-token gate vectors of the generalized delta rule.
///
/// `kappa_hat` is L2-normalized at construction; `w` must lie in (0,1] and
/// `a` in [0,1]. `r` (receptance) drives the linear readout y = S·r.
template <typename T>
struct Inputs {
    Vector<T> w;
    Vector<T> a;
    Vector<T> kappa_hat;
    Vector<T> k_tilde;
    Vector<T> v;
    Vector<T> r;

    std::size_t d_k() const noexcept { return w.size(); }
    std::size_t d_v() const noexcept { return v.size(); }

    /// Validates ranges and normalizes the removal key.
    static Inputs make(Vector<T> w, Vector<T> a, Vector<T> kappa, Vector<T> k_tilde, Vector<T> v,
                       Vector<T> r) {
        const std::size_t dk = w.size();
        if (a.size() != dk || kappa.size() != dk || k_tilde.size() != dk || r.size() != dk)
            throw ShapeError("rwkv7 inputs: w, a, kappa, k_tilde, r must share d_k");
        for (T x : w)
            RWKVX_CHECK(x > T(0) && x <= T(1), InputError, "rwkv7 inputs: decay w outside (0,1]");
        for (T x : a)
            RWKVX_CHECK(x >= T(0) && x <= T(1), InputError, "rwkv7 inputs: rate a outside [0,1]");
        normalize(kappa);
        return Inputs{std::move(w), std::move(a), std::move(kappa), std::move(k_tilde), std::move(v),
                      std::move(r)};
    }

    static void normalize(Vector<T>& x) {
        T sq = T(0);
        for (T e : x) sq += e * e;
        RWKVX_CHECK(sq > T(0) && std::isfinite(sq), InputError,
                    "rwkv7 inputs: removal key has zero or non-finite norm");
        const T inv = T(1) / std::sqrt(sq);
        for (T& e : x) e *= inv;
    }
};

/// Recurrent state S of shape d_v × d_k.
template <typename T>
struct State {
    Matrix<T> S;

    static State zeros(std::size_t d_v, std::size_t d_k) { return State{Matrix<T>(d_v, d_k)}; }

    std::size_t d_v() const noexcept { return S.rows(); }
    std::size_t d_k() const noexcept { return S.cols(); }

    friend bool operator==(const State&, const State&) = default;
};

/// M = diag(w) − κ̂ᵀ(a ⊙ κ̂), i.e. M(l,j) = w_j·δ_lj − κ̂_l·a_j·κ̂_j.
template <typename T>
Matrix<T> transition_matrix(std::span<const T> w, std::span<const T> kappa_hat,
                            std::span<const T> a) {
    const std::size_t dk = w.size();
    if (kappa_hat.size() != dk || a.size() != dk)
        throw ShapeError("transition_matrix: w, kappa_hat, a must share dimension");
    Matrix<T> m(dk, dk);
    for (std::size_t l = 0; l < dk; ++l)
        for (std::size_t j = 0; j < dk; ++j)
            m(l, j) = (l == j ? w[j] : T(0)) - kappa_hat[l] * (a[j] * kappa_hat[j]);
    return m;
}

/// In-place S ← S·M + vᵀk̃.
///
/// M is never materialized: S·M = S·diag(w) − (S·κ̂)(a ⊙ κ̂)ᵀ, which costs
/// O(d_v·d_k) instead of O(d_v·d_k²).
template <typename T>
void state_step_inplace(State<T>& state, const Inputs<T>& in) {
    const std::size_t dv = state.d_v();
    const std::size_t dk = state.d_k();
    if (in.d_k() != dk || in.d_v() != dv)
        throw ShapeError("state_step: state " + shape_str(dv, dk) + " vs inputs d_v=" +
                         std::to_string(in.d_v()) + " d_k=" + std::to_string(in.d_k()));

    thread_local Vector<T> removal;
    removal.resize(dk);
    for (std::size_t j = 0; j < dk; ++j) removal[j] = in.a[j] * in.kappa_hat[j];

    for (std::size_t i = 0; i < dv; ++i) {
        T* s = state.S.row(i).data();
        T proj = T(0);
        for (std::size_t l = 0; l < dk; ++l) proj += s[l] * in.kappa_hat[l];
        const T vi = in.v[i];
        for (std::size_t j = 0; j < dk; ++j)
            s[j] = s[j] * in.w[j] - proj * removal[j] + vi * in.k_tilde[j];
    }
}

template <typename T>
State<T> state_step(State<T> prev, const Inputs<T>& in) {
    state_step_inplace(prev, in);
    return prev;
}

/// y = S·r.
template <typename T>
Vector<T> readout(const State<T>& state, std::span<const T> r) {
    if (r.size() != state.d_k())
        throw ShapeError("readout: r dim " + std::to_string(r.size()) + " vs d_k " +
                         std::to_string(state.d_k()));
    return matvec(state.S, r);
}

/// Streams the recurrence: for each token, step the state then hand the
/// readout to `sink(t, y)`. Holds only the state and per-step temporaries.
template <typename T, typename Sink>
void scan(std::span<const Inputs<T>> seq, State<T>& state, Sink&& sink) {
    RWKVX_CHECK(!seq.empty(), EmptyInputError, "rwkv7 forward: empty sequence");
    for (std::size_t t = 0; t < seq.size(); ++t) {
        state_step_inplace(state, seq[t]);
        sink(t, readout<T>(state, seq[t].r));
    }
}

template <typename T>
struct ForwardResult {
    std::vector<Vector<T>> outputs;
    State<T> final_state;
};

template <typename T>
ForwardResult<T> forward(std::span<const Inputs<T>> seq, State<T> init) {
    ForwardResult<T> res{{}, std::move(init)};
    res.outputs.reserve(seq.size());
    scan<T>(seq, res.final_state, [&](std::size_t, Vector<T> y) { res.outputs.push_back(std::move(y)); });
    return res;
}

}  // namespace rwkvx::rwkv7
