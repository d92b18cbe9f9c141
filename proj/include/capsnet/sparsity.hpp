#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "capsnet/tensor.hpp"

namespace capsnet {

struct SparsityConfig {
    int L = 16;
    double gamma = 12.0;
    double mask_floor = 0.01;
    double alpha = 0.99;        // EMA decay
    double d = 0.1;             // boost increment
    int N = 50;                 // boost-update period in batches
    double mu_min = 0.04;
    double mu_max = 0.1;
    bool ema_every_batch = true;  // false: EMA also gated by N

    void validate() const {
        require(L >= 2, "sparsity: L must be >= 2");
        require(gamma > 0, "sparsity: gamma must be positive");
        require(alpha > 0 && alpha < 1, "sparsity: alpha must be in (0,1)");
        require(N >= 1, "sparsity: N must be >= 1");
        require(d > 0, "sparsity: d must be positive");
        require(mu_min > 0 && mu_min < mu_max && mu_max < 1, "sparsity: need 0 < mu_min < mu_max < 1");
    }

    bool operator==(const SparsityConfig&) const = default;
};

struct SparsityState {
    std::vector<double> g;   // per-capsule boost, init 1, clamped >= 1
    std::vector<double> mu;  // EMA rank-0 frequency, init 0
    int64_t n = 0;           // batch counter

    static SparsityState init(int L) {
        SparsityState s;
        s.g.assign(static_cast<size_t>(L), 1.0);
        s.mu.assign(static_cast<size_t>(L), 0.0);
        s.n = 0;
        return s;
    }

    bool operator==(const SparsityState&) const = default;
};

// psi[k,j] = sum_{w,h} max_p c[k,w,h,p,j]
template <class S>
Tensor<S> aggregate_support(const Tensor<S>& c) {
    require(c.ndim() == 5, "aggregate_support: c must be [K,W,H,P,L], got " + shape_str(c.shape()));
    int K = c.dim(0), W = c.dim(1), H = c.dim(2), P = c.dim(3), L = c.dim(4);
    Tensor<S> psi = Tensor<S>::zeros({K, L});
    const S* pc = c.data();
    S* pp = psi.data();
    for (int k = 0; k < K; ++k)
        for (int w = 0; w < W; ++w)
            for (int h = 0; h < H; ++h) {
                const S* cell = pc + (((static_cast<int64_t>(k) * W + w) * H + h) * P) * L;
                for (int j = 0; j < L; ++j) {
                    S mx = cell[j];
                    for (int p = 1; p < P; ++p) mx = std::max(mx, cell[static_cast<int64_t>(p) * L + j]);
                    pp[static_cast<int64_t>(k) * L + j] += mx;
                }
            }
    return psi;
}

// z[k,j] = psi[k,j] * g[j]
template <class S>
Tensor<S> boost_support(const Tensor<S>& psi, const std::vector<double>& g) {
    require(psi.ndim() == 2, "boost_support: psi must be [K,L]");
    int K = psi.dim(0), L = psi.dim(1);
    require(static_cast<int>(g.size()) == L, "boost_support: boost length " + std::to_string(g.size()) +
                                                 " != L = " + std::to_string(L));
    Tensor<S> z = Tensor<S>::zeros({K, L});
    for (int k = 0; k < K; ++k)
        for (int j = 0; j < L; ++j)
            z.values()[static_cast<size_t>(k * L + j)] =
                psi.values()[static_cast<size_t>(k * L + j)] * static_cast<S>(g[static_cast<size_t>(j)]);
    return z;
}

// Per sample, position of z[k,j] in the descending sort of z[k,.]
// (rank 0 = max support). Ties: lower capsule index wins the lower rank.
template <class S>
std::vector<int> rank_capsules(const Tensor<S>& z) {
    require(z.ndim() == 2, "rank_capsules: z must be [K,L]");
    int K = z.dim(0), L = z.dim(1);
    std::vector<int> r(static_cast<size_t>(K) * L);
    std::vector<int> order(static_cast<size_t>(L));
    for (int k = 0; k < K; ++k) {
        const S* row = z.data() + static_cast<int64_t>(k) * L;
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [row](int a, int b) { return row[a] > row[b]; });
        for (int pos = 0; pos < L; ++pos) r[static_cast<size_t>(k * L + order[static_cast<size_t>(pos)])] = pos;
    }
    return r;
}

// m = exp(-gamma * r / (L-1)), floored to exactly 0 below mask_floor.
// The mask is a constant w.r.t. differentiation.
template <class S>
Tensor<S> exp_mask(const std::vector<int>& r, int K, const SparsityConfig& cfg) {
    require(cfg.L >= 2, "exp_mask: L must be >= 2");
    require(static_cast<int>(r.size()) == K * cfg.L, "exp_mask: rank vector size mismatch");
    Tensor<S> m = Tensor<S>::zeros({K, cfg.L});
    for (size_t i = 0; i < r.size(); ++i) {
        double v = std::exp(-cfg.gamma * static_cast<double>(r[i]) / (cfg.L - 1));
        m.values()[i] = v < cfg.mask_floor ? S(0) : static_cast<S>(v);
    }
    return m;
}

// v'[k,j,:] = m[k,j] * v[k,j,:]; gradient flows into v scaled by m.
template <class S>
Tensor<S> apply_mask(Tape<S>& tp, const Tensor<S>& v, const Tensor<S>& m) {
    require(v.ndim() == 3 && m.ndim() == 2 && v.dim(0) == m.dim(0) && v.dim(1) == m.dim(1),
            "apply_mask: v " + shape_str(v.shape()) + " vs m " + shape_str(m.shape()));
    return tp.mul(v, tp.reshape(m, {m.dim(0), m.dim(1), 1}));
}

// eps_j = (1/K) * #{k : r[k,j] = 0}; sums to 1 over j.
inline std::vector<double> batch_rank0_frequency(const std::vector<int>& r, int K, int L) {
    require(static_cast<int>(r.size()) == K * L, "rank0_frequency: rank vector size mismatch");
    std::vector<double> eps(static_cast<size_t>(L), 0.0);
    for (int k = 0; k < K; ++k)
        for (int j = 0; j < L; ++j)
            if (r[static_cast<size_t>(k * L + j)] == 0) eps[static_cast<size_t>(j)] += 1.0;
    for (auto& e : eps) e /= K;
    return eps;
}

inline std::vector<double> update_ema(const std::vector<double>& mu, const std::vector<double>& eps,
                                      double alpha) {
    require(mu.size() == eps.size(), "update_ema: length mismatch");
    std::vector<double> out(mu.size());
    for (size_t j = 0; j < mu.size(); ++j) out[j] = alpha * mu[j] + (1.0 - alpha) * eps[j];
    return out;
}

// Post-batch boost update: increments n, and every N batches nudges g for
// capsules whose EMA rank-0 frequency sits outside [mu_min, mu_max].
inline void boost_update(SparsityState& state, const SparsityConfig& cfg) {
    state.n += 1;
    if (state.n % cfg.N != 0) return;
    for (size_t j = 0; j < state.g.size(); ++j) {
        if (state.mu[j] < cfg.mu_min) state.g[j] += cfg.d;
        if (state.mu[j] > cfg.mu_max) state.g[j] = std::max(1.0, state.g[j] - cfg.d);
    }
}

// Per-batch statistics update: EMA every batch by default, or gated by N
// when ema_every_batch is off.
inline void observe_batch(SparsityState& state, const std::vector<int>& ranks, int K,
                          const SparsityConfig& cfg) {
    if (cfg.ema_every_batch || (state.n + 1) % cfg.N == 0) {
        auto eps = batch_rank0_frequency(ranks, K, cfg.L);
        state.mu = update_ema(state.mu, eps, cfg.alpha);
    }
    boost_update(state, cfg);
}

}  // namespace capsnet
