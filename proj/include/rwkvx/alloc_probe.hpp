// SPDX-License-Identifier: Apache-2.0

#pragma once

// Heap high-water probe. Counting is active only in programs that expand
// RWKVX_INSTALL_ALLOC_PROBE() in exactly one translation unit; elsewhere the
// probe reports zero bytes.

#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <malloc.h>
#include <new>

namespace rwkvx::alloc_probe {

struct Counters {
    std::atomic<std::size_t> current{0};
    std::atomic<std::size_t> peak{0};
    std::atomic<bool> installed{false};
};

inline Counters& counters() {
    static Counters c;
    return c;
}

inline void on_alloc(std::size_t n) {
    auto& c = counters();
    const std::size_t now = c.current.fetch_add(n, std::memory_order_relaxed) + n;
    std::size_t prev = c.peak.load(std::memory_order_relaxed);
    while (now > prev && !c.peak.compare_exchange_weak(prev, now, std::memory_order_relaxed)) {
    }
}

inline void on_free(std::size_t n) { counters().current.fetch_sub(n, std::memory_order_relaxed); }

inline bool installed() { return counters().installed.load(); }
inline std::size_t current_bytes() { return counters().current.load(); }

/// Scoped high-water measurement: bytes allocated above the level at construction.
class Scope {
public:
    Scope() : base_(current_bytes()) { counters().peak.store(base_); }
    std::size_t peak_bytes() const {
        const std::size_t p = counters().peak.load();
        return p > base_ ? p - base_ : 0;
    }

private:
    std::size_t base_;
};

inline void* counted_malloc(std::size_t n) {
    void* p = std::malloc(n ? n : 1);
    if (!p) throw std::bad_alloc();
    on_alloc(malloc_usable_size(p));
    return p;
}

inline void counted_free(void* p) noexcept {
    if (!p) return;
    on_free(malloc_usable_size(p));
    std::free(p);
}

}  // namespace rwkvx::alloc_probe

#define RWKVX_INSTALL_ALLOC_PROBE()                                                               \
    namespace {                                                                                   \
    const bool rwkvx_probe_installed_ = (rwkvx::alloc_probe::counters().installed = true);        \
    }                                                                                             \
    void* operator new(std::size_t n) { return rwkvx::alloc_probe::counted_malloc(n); }           \
    void* operator new[](std::size_t n) { return rwkvx::alloc_probe::counted_malloc(n); }         \
    void operator delete(void* p) noexcept { rwkvx::alloc_probe::counted_free(p); }               \
    void operator delete[](void* p) noexcept { rwkvx::alloc_probe::counted_free(p); }             \
    void operator delete(void* p, std::size_t) noexcept { rwkvx::alloc_probe::counted_free(p); }  \
    void operator delete[](void* p, std::size_t) noexcept { rwkvx::alloc_probe::counted_free(p); }
