// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <numeric>
#include <set>

#include "oracles.hpp"
#include "rwkvx/sparse_attn.hpp"

using rwkvx::AttnConfig;
using rwkvx::Matrix;
using rwkvx::Vector;

namespace {

Matrix<double> to_matrix(const oracle::Mat& m) {
    Matrix<double> out(0, m[0].size());
    for (const auto& r : m) out.push_row(r);
    return out;
}

AttnConfig cfg(std::size_t b, std::size_t k, std::size_t d = 8, std::size_t m = 1024, std::size_t l = 64) {
    return AttnConfig{b, k, d, d, std::max(m, b), l};
}

double max_diff(const Matrix<double>& a, const oracle::Mat& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) m = std::max(m, std::abs(a(i, j) - b[i][j]));
    return m;
}

}  // namespace

TEST(AttnConfigTest, NamedConstraintViolations) {
    auto expect_violation = [](AttnConfig c, const std::string& name) {
        try {
            c.validate();
            ADD_FAILURE() << "expected " << name;
        } catch (const rwkvx::ConfigError& e) {
            EXPECT_EQ(e.constraint(), name);
        }
    };
    expect_violation({0, 4, 8, 8, 64, 8}, "B >= 1");
    expect_violation({4, 0, 8, 8, 64, 8}, "k >= 1");
    expect_violation({64, 4, 8, 8, 32, 8}, "m >= B");
    expect_violation({4, 4, 8, 8, 64, 0}, "L_obs >= 1");
    EXPECT_NO_THROW(AttnConfig{}.validate());
    EXPECT_NO_THROW((AttnConfig{4, 1, 8, 8, rwkvx::kUnbounded, 1}.validate()));
}

TEST(ChunkScores, HandPooledExample) {
    const auto s = rwkvx::chunk_scores<double>(Vector<double>{1, 0}, Matrix<double>{{2, 0}, {4, 0}, {0, 2}, {0, 4}}, 2);
    EXPECT_EQ(s.scores, (Vector<double>{3, 0}));
    EXPECT_EQ(s.candidate_ids, (std::vector<std::size_t>{0, 1}));
}

TEST(ChunkScores, ZeroQueryAndSingleKey) {
    const Matrix<double> k{{1, 2}, {3, -4}, {5, 6}};
    for (double x : rwkvx::chunk_scores<double>(Vector<double>{0, 0}, k, 2).scores) EXPECT_EQ(x, 0.0);
    const auto one = rwkvx::chunk_scores<double>(Vector<double>{0.5, 2}, Matrix<double>{{3, -1}}, 4);
    EXPECT_EQ(one.scores, (Vector<double>{0.5 * 3 - 2}));
}

TEST(ChunkScores, PartialChunkPooledOverActualLength) {
    // Three keys with B = 2: the trailing chunk holds one key.
    const auto s = rwkvx::chunk_scores<double>(Vector<double>{1}, Matrix<double>{{1}, {3}, {10}}, 2);
    EXPECT_EQ(s.scores, (Vector<double>{2, 10}));
}

TEST(ChunkScores, EmptyKeysGiveNoCandidates) {
    const auto s = rwkvx::chunk_scores<double>(Vector<double>{1, 2}, Matrix<double>(0, 2), 4);
    EXPECT_TRUE(s.scores.empty());
    EXPECT_TRUE(s.candidate_ids.empty());
}

TEST(ChunkScores, ShapeMismatchThrows) {
    EXPECT_THROW(rwkvx::chunk_scores<double>(Vector<double>{1}, Matrix<double>{{1, 2}}, 1), rwkvx::ShapeError);
}

TEST(SelectTopk, TieGoesToLowerIndex) {
    rwkvx::ChunkScores<double> s{{3, 0, 3}, {0, 1, 2}};
    EXPECT_EQ(rwkvx::select_topk(s, 1), (std::vector<std::size_t>{0}));
}

TEST(SelectTopk, SaturatedAndUndersized) {
    EXPECT_EQ(rwkvx::select_topk(rwkvx::ChunkScores<double>{{1, 2, 3}, {0, 1, 2}}, 3),
              (std::vector<std::size_t>{0, 1, 2}));
    EXPECT_EQ(rwkvx::select_topk(rwkvx::ChunkScores<double>{{5}, {0}}, 4), (std::vector<std::size_t>{0}));
}

TEST(SelectTopk, MatchesExhaustiveOracleWithTies) {
    std::mt19937_64 rng(11);
    std::uniform_int_distribution<int> small(0, 3);
    for (int trial = 0; trial < 500; ++trial) {
        const std::size_t n = 1 + trial % 12, k = 1 + trial % 7;
        rwkvx::ChunkScores<double> s;
        for (std::size_t i = 0; i < n; ++i) {
            s.scores.push_back(small(rng));
            s.candidate_ids.push_back(i);
        }
        const auto want = oracle::dominant_subset(n, k, [&](std::size_t a, std::size_t b) {
            return s.scores[a] > s.scores[b] || (s.scores[a] == s.scores[b] && a < b);
        });
        EXPECT_EQ(rwkvx::select_topk(s, k), want);
    }
}

TEST(SelectTopk, NestedInK) {
    std::mt19937_64 rng(12);
    std::normal_distribution<double> nd;
    for (int trial = 0; trial < 100; ++trial) {
        rwkvx::ChunkScores<double> s;
        for (std::size_t i = 0; i < 40; ++i) {
            s.scores.push_back(std::round(nd(rng) * 2));
            s.candidate_ids.push_back(i);
        }
        for (std::size_t k = 1; k < 40; ++k) {
            const auto a = rwkvx::select_topk(s, k), b = rwkvx::select_topk(s, k + 1);
            EXPECT_TRUE(std::includes(b.begin(), b.end(), a.begin(), a.end()));
        }
    }
}

TEST(SparseAttend, SingleEntryReturnsValue) {
    const auto y = rwkvx::sparse_attend<double>(Vector<double>{3, -1}, Matrix<double>{{0.2, 9}}, Matrix<double>{{7, 8, 9}}, 2);
    EXPECT_EQ(y, (Vector<double>{7, 8, 9}));
}

TEST(SparseAttend, ClosedFormTwoWay) {
    const auto y = rwkvx::sparse_attend<double>(Vector<double>{1, 0}, Matrix<double>{{1, 0}, {-1, 0}},
                                                Matrix<double>{{1}, {0}}, 2);
    const double e = std::exp(1 / std::sqrt(2.0)), f = std::exp(-1 / std::sqrt(2.0));
    EXPECT_NEAR(y[0], e / (e + f), 1e-15);
    EXPECT_NEAR(y[0], 0.8044, 1e-4);
}

TEST(SparseAttend, DuplicationInvariant) {
    std::mt19937_64 rng(13);
    const auto q = oracle::random_vec(rng, 8);
    const auto k = to_matrix(oracle::random_mat(rng, 10, 8)), v = to_matrix(oracle::random_mat(rng, 10, 5));
    Matrix<double> k2 = k, v2 = v;
    for (std::size_t i = 0; i < k.rows(); ++i) {
        k2.push_row(k.row(i));
        v2.push_row(v.row(i));
    }
    const auto a = rwkvx::sparse_attend<double>(q, k, v, 8), b = rwkvx::sparse_attend<double>(q, k2, v2, 8);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(SparseAttend, EmptySelectionThrows) {
    EXPECT_THROW(rwkvx::sparse_attend<double>(Vector<double>{1}, Matrix<double>(0, 1), Matrix<double>(0, 1), 1),
                 rwkvx::EmptyInputError);
}

TEST(Prefill, EmptySequenceGivesEmptyOutput) {
    const auto out = rwkvx::prefill(Matrix<double>(0, 8), Matrix<double>(0, 8), Matrix<double>(0, 4), cfg(4, 1));
    EXPECT_EQ(out.rows(), 0u);
}

TEST(Prefill, SingleChunkIsFullCausalAttention) {
    std::mt19937_64 rng(14);
    const auto q = oracle::random_mat(rng, 16, 8), k = oracle::random_mat(rng, 16, 8), v = oracle::random_mat(rng, 16, 8);
    const auto out = rwkvx::prefill(to_matrix(q), to_matrix(k), to_matrix(v), cfg(16, 1));
    EXPECT_LE(max_diff(out, oracle::naive_attention(q, k, v, 8, true)), 1e-12);
}

TEST(Prefill, SaturatedKMatchesNaiveOracle) {
    std::mt19937_64 rng(15);
    for (std::size_t n : {1, 5, 32, 100, 128})
        for (std::size_t b : {4, 16, 64}) {
            const auto q = oracle::random_mat(rng, n, 8), k = oracle::random_mat(rng, n, 8),
                       v = oracle::random_mat(rng, n, 6);
            const auto out = rwkvx::prefill(to_matrix(q), to_matrix(k), to_matrix(v), cfg(b, (n + b - 1) / b));
            EXPECT_LE(max_diff(out, oracle::naive_attention(q, k, v, 8, true)), 1e-10) << n << "/" << b;
        }
}

TEST(Prefill, FloatPathMatchesOracleLoosely) {
    std::mt19937_64 rng(16);
    const std::size_t n = 96, b = 16;
    const auto q = oracle::random_mat(rng, n, 8), k = oracle::random_mat(rng, n, 8), v = oracle::random_mat(rng, n, 8);
    const auto out = rwkvx::prefill(rwkvx::cast<float>(to_matrix(q)), rwkvx::cast<float>(to_matrix(k)),
                                    rwkvx::cast<float>(to_matrix(v)), cfg(b, n / b));
    EXPECT_LE(max_diff(rwkvx::cast<double>(out), oracle::naive_attention(q, k, v, 8, true)), 1e-5);
}

TEST(Prefill, CraftedDominantChunkAttendedSets) {
    // N=4, B=2, k=1: queries align with chunk 0, so positions 2 and 3 pick it.
    const Matrix<double> q{{1, 0}, {1, 0}, {1, 0}, {1, 0}};
    const Matrix<double> k{{5, 0}, {5, 0}, {-1, 0}, {-1, 0}};
    const Matrix<double> v{{1}, {2}, {3}, {4}};
    rwkvx::AttendTrace trace;
    (void)rwkvx::prefill(q, k, v, AttnConfig{2, 1, 2, 1, 2, 1}, &trace);
    ASSERT_EQ(trace.size(), 4u);
    EXPECT_EQ(trace[0].attended, (std::vector<std::size_t>{0}));
    EXPECT_EQ(trace[1].attended, (std::vector<std::size_t>{0, 1}));
    EXPECT_EQ(trace[2].attended, (std::vector<std::size_t>{0, 1, 2}));
    EXPECT_EQ(trace[3].attended, (std::vector<std::size_t>{0, 1, 2, 3}));
    EXPECT_EQ(trace[2].chunk_ids, (std::vector<std::size_t>{0}));
    EXPECT_EQ(trace[3].to_line(), "3, [0], 4");
}

TEST(Prefill, AttendedSetsMatchEnumerationOracle) {
    std::mt19937_64 rng(17);
    std::uniform_int_distribution<int> coarse(-2, 2);
    for (int trial = 0; trial < 40; ++trial) {
        const std::size_t b = 1 + trial % 4, k = 1 + trial % 3, n = 12 + trial % 9;
        // Coarse integer keys produce frequent score ties.
        oracle::Mat q(n, oracle::Vec(3)), kk(n, oracle::Vec(3)), v = oracle::random_mat(rng, n, 2);
        for (auto& r : q)
            for (auto& x : r) x = coarse(rng);
        for (auto& r : kk)
            for (auto& x : r) x = coarse(rng);
        rwkvx::AttendTrace trace;
        const auto out = rwkvx::prefill(to_matrix(q), to_matrix(kk), to_matrix(v), AttnConfig{b, k, 3, 2, b, 1}, &trace);
        for (std::size_t t = 0; t < n; ++t) {
            const auto want = oracle::enumerate_attended(q, kk, t, b, k);
            ASSERT_EQ(trace[t].attended, want) << "t=" << t << " b=" << b << " k=" << k;
            const auto ref = oracle::attend_set(q[t], kk, v, want, 3);
            for (std::size_t c = 0; c < 2; ++c) EXPECT_NEAR(out(t, c), ref[c], 1e-12);
        }
    }
}

TEST(Prefill, CausalWeightsNormalizedDeterministic) {
    std::mt19937_64 rng(18);
    const std::size_t n = 300;
    const auto q = to_matrix(oracle::random_mat(rng, n, 8)), k = to_matrix(oracle::random_mat(rng, n, 8)),
               v = to_matrix(oracle::random_mat(rng, n, 8));
    rwkvx::AttendTrace t1, t2;
    const auto a = rwkvx::prefill(q, k, v, cfg(16, 3), &t1);
    const auto b = rwkvx::prefill(q, k, v, cfg(16, 3), &t2);
    EXPECT_EQ(a, b);
    for (std::size_t t = 0; t < n; ++t) {
        EXPECT_EQ(t1[t].chunk_ids, t2[t].chunk_ids);
        EXPECT_EQ(t1[t].position, t);
        EXPECT_LE(t1[t].attended.back(), t);
        EXPECT_NEAR(t1[t].weight_sum, 1.0, 1e-6);
        EXPECT_LE(t1[t].attended.size(), 3 * 16 + 16u);
    }
}

TEST(FullOracle, SingleRowIsValue) {
    const auto out = rwkvx::full_attention_oracle(Matrix<double>{{0.3}}, Matrix<double>{{2}}, Matrix<double>{{4, 5}}, 1, true);
    EXPECT_EQ(out, (Matrix<double>{{4, 5}}));
}

TEST(FullOracle, UniformKeysGiveRunningMean) {
    const Matrix<double> k{{1, 1}, {1, 1}, {1, 1}}, q{{0.5, 2}, {-1, 3}, {7, 0}}, v{{3}, {6}, {12}};
    const auto out = rwkvx::full_attention_oracle(q, k, v, 2, true);
    EXPECT_NEAR(out(0, 0), 3.0, 1e-15);
    EXPECT_NEAR(out(1, 0), 4.5, 1e-15);
    EXPECT_NEAR(out(2, 0), 7.0, 1e-15);
}

TEST(FullOracle, MatchesNaiveCausalAndBidirectional) {
    std::mt19937_64 rng(19);
    const std::size_t n = 700;  // spans more than one key tile
    const auto q = oracle::random_mat(rng, n, 8), k = oracle::random_mat(rng, n, 8), v = oracle::random_mat(rng, n, 4);
    for (bool causal : {true, false}) {
        const auto out = rwkvx::full_attention_oracle(to_matrix(q), to_matrix(k), to_matrix(v), 8, causal);
        EXPECT_LE(max_diff(out, oracle::naive_attention(q, k, v, 8, causal)), 1e-12);
    }
    EXPECT_THROW(rwkvx::full_attention_oracle(Matrix<double>(2, 3), Matrix<double>(2, 4), Matrix<double>(2, 1), 3, true),
                 rwkvx::ShapeError);
}

TEST(DecodeStep, SmallCacheAttendsEverything) {
    std::mt19937_64 rng(20);
    const AttnConfig c = cfg(4, 3, 8, 64, 8);
    rwkvx::KvCache<double> cache(8, 8, c.cache_budget, c.obs_window);
    oracle::Mat ks, vs;
    for (int i = 0; i < 15; ++i) {
        ks.push_back(oracle::random_vec(rng, 8));
        vs.push_back(oracle::random_vec(rng, 8));
        cache.append(oracle::random_vec(rng, 8), ks.back(), vs.back());
    }
    const auto q = oracle::random_vec(rng, 8);
    rwkvx::AttendTrace trace;
    const auto y = rwkvx::decode_step<double>(q, cache, c, &trace);
    std::vector<std::size_t> all(15);
    std::iota(all.begin(), all.end(), std::size_t{0});
    EXPECT_EQ(trace.at(0).attended, all);
    const auto ref = oracle::attend_set(q, ks, vs, all, 8);
    for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(y[i], ref[i], 1e-12);
    const auto dense = rwkvx::dense_decode_step<double>(q, cache, 8);
    for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(y[i], dense[i], 1e-12);
}

TEST(DecodeStep, ReproducesPrefillRowsUncompressed) {
    std::mt19937_64 rng(21);
    for (std::size_t b : {1, 4, 16}) {
        const std::size_t n = 150;
        const AttnConfig c{b, 2, 8, 8, rwkvx::kUnbounded, std::max<std::size_t>(b, 8)};
        const auto q = to_matrix(oracle::random_mat(rng, n, 8)), k = to_matrix(oracle::random_mat(rng, n, 8)),
                   v = to_matrix(oracle::random_mat(rng, n, 8));
        const auto pre = rwkvx::prefill(q, k, v, c);
        rwkvx::KvCache<double> cache(8, 8, c.cache_budget, c.obs_window);
        for (std::size_t t = 0; t < n; ++t) {
            cache.append(q.row(t), k.row(t), v.row(t));
            const auto y = rwkvx::decode_step<double>(q.row(t), cache, c);
            for (std::size_t i = 0; i < 8; ++i) ASSERT_NEAR(y[i], pre(t, i), 1e-10) << "b=" << b << " t=" << t;
        }
    }
}

TEST(DecodeStep, AttendedCountBoundedWithCompression) {
    std::mt19937_64 rng(22);
    const AttnConfig c = cfg(8, 3, 8, 32, 5);
    rwkvx::KvCache<double> cache(8, 8, c.cache_budget, c.obs_window);
    rwkvx::AttendTrace trace;
    for (int t = 0; t < 2000; ++t) {
        const auto q = oracle::random_vec(rng, 8);
        cache.append(q, oracle::random_vec(rng, 8), oracle::random_vec(rng, 8));
        (void)rwkvx::decode_step<double>(q, cache, c, &trace);
    }
    for (const auto& r : trace) {
        EXPECT_LE(r.attended.size(), c.decode_attend_bound());
        EXPECT_NEAR(r.weight_sum, 1.0, 1e-6);
    }
}

TEST(DecodeStep, EmptyCacheThrows) {
    rwkvx::KvCache<double> cache(2, 2, 8, 2);
    EXPECT_THROW(rwkvx::decode_step<double>(Vector<double>{1, 0}, cache, cfg(2, 1, 2, 8, 2)), rwkvx::EmptyInputError);
}

TEST(Backward, ZeroUpstreamGivesZeroGrads) {
    std::mt19937_64 rng(23);
    const auto q = oracle::random_vec(rng, 4);
    const auto k = to_matrix(oracle::random_mat(rng, 5, 4)), v = to_matrix(oracle::random_mat(rng, 5, 3));
    const auto g = rwkvx::sparse_attend_backward<double>(q, k, v, 4, Vector<double>(3, 0.0));
    for (double x : g.dq) EXPECT_EQ(x, 0.0);
    for (double x : g.dk.data()) EXPECT_EQ(x, 0.0);
    for (double x : g.dv.data()) EXPECT_EQ(x, 0.0);
}

TEST(Backward, SingleEntry) {
    const Vector<double> up{0.5, -2};
    const auto g = rwkvx::sparse_attend_backward<double>(Vector<double>{1, 2}, Matrix<double>{{3, 4}},
                                                         Matrix<double>{{5, 6}}, 2, up);
    EXPECT_EQ(g.dv, (Matrix<double>{{0.5, -2}}));
    for (double x : g.dq) EXPECT_EQ(x, 0.0);
}

TEST(Backward, MatchesFiniteDifferences) {
    std::mt19937_64 rng(24);
    const std::size_t n = 16, d = 8;  // 4 chunks of B = 4
    for (int inst = 0; inst < 100; ++inst) {
        const auto q = oracle::random_vec(rng, d), up = oracle::random_vec(rng, d);
        const auto k = to_matrix(oracle::random_mat(rng, n, d)), v = to_matrix(oracle::random_mat(rng, n, d));
        const auto g = rwkvx::sparse_attend_backward<double>(q, k, v, d, up);
        auto loss = [&](const Vector<double>& qq, const Matrix<double>& kk, const Matrix<double>& vv) {
            const auto y = rwkvx::sparse_attend<double>(qq, kk, vv, d);
            double s = 0;
            for (std::size_t i = 0; i < d; ++i) s += y[i] * up[i];
            return s;
        };
        auto rel = [](const Vector<double>& fd, std::span<const double> an) {
            double num = 0, den = 0;
            for (std::size_t i = 0; i < fd.size(); ++i) {
                num += (fd[i] - an[i]) * (fd[i] - an[i]);
                den += fd[i] * fd[i] + an[i] * an[i];
            }
            return std::sqrt(num) / std::max(std::sqrt(den), 1e-12);
        };
        const auto fq = rwkvx::finite_diff_grad([&](const Vector<double>& x) { return loss(x, k, v); }, q, 1e-5);
        const auto fk = rwkvx::finite_diff_grad(
            [&](const Vector<double>& x) { return loss(q, Matrix<double>(n, d, x), v); },
            Vector<double>(k.data().begin(), k.data().end()), 1e-5);
        const auto fv = rwkvx::finite_diff_grad(
            [&](const Vector<double>& x) { return loss(q, k, Matrix<double>(n, d, x)); },
            Vector<double>(v.data().begin(), v.data().end()), 1e-5);
        EXPECT_LE(rel(fq, g.dq), 1e-4);
        EXPECT_LE(rel(fk, g.dk.data()), 1e-4);
        EXPECT_LE(rel(fv, g.dv.data()), 1e-4);
    }
}

TEST(Backward, ShapeMismatchThrows) {
    EXPECT_THROW(rwkvx::sparse_attend_backward<double>(Vector<double>{1, 2}, Matrix<double>{{1, 2}},
                                                       Matrix<double>{{1}}, 2, Vector<double>{1, 2}),
                 rwkvx::ShapeError);
}
