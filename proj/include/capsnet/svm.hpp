#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <limits>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "capsnet/tensor.hpp"

namespace capsnet {

struct SvmConfig {
    double C = 10.0;
    double gamma = 0.0;  // <= 0: 1/(dim * variance) heuristic
    double tol = 1e-3;   // KKT gap tolerance
    int64_t max_iters = 2000000;
    int train_cap = 10000;  // bounds the kernel matrix
};

// Per-dimension standardization with a floored std, fitted on training
// features and reused at prediction time.
struct Standardizer {
    std::vector<double> mean, stddev;

    void fit(const std::vector<float>& x, int n, int dim) {
        mean.assign(size_t(dim), 0.0);
        stddev.assign(size_t(dim), 0.0);
        for (int i = 0; i < n; ++i)
            for (int d = 0; d < dim; ++d) mean[size_t(d)] += x[size_t(i) * dim + d];
        for (auto& m : mean) m /= n;
        for (int i = 0; i < n; ++i)
            for (int d = 0; d < dim; ++d) {
                double c = x[size_t(i) * dim + d] - mean[size_t(d)];
                stddev[size_t(d)] += c * c;
            }
        for (auto& s : stddev) s = std::max(std::sqrt(s / n), 1e-6);
    }

    void apply(std::vector<float>& x, int n, int dim) const {
        require(size_t(dim) == mean.size(), "standardizer: dim mismatch");
        for (int i = 0; i < n; ++i)
            for (int d = 0; d < dim; ++d) {
                auto& v = x[size_t(i) * dim + d];
                v = float((v - mean[size_t(d)]) / stddev[size_t(d)]);
            }
    }
};

// Flatten latent capsule output [K, L, Dl] into [K, L*Dl] feature rows.
template <class S>
std::vector<float> featurize(const Tensor<S>& v_prime) {
    require(v_prime.ndim() == 3, "featurize: expected [K,L,Dl], got " + shape_str(v_prime.shape()));
    std::vector<float> out(v_prime.values().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = float(v_prime.values()[i]);
    return out;
}

inline double rbf_kernel(const float* a, const float* b, int dim, double gamma) {
    double d2 = 0;
    for (int i = 0; i < dim; ++i) {
        double d = double(a[i]) - double(b[i]);
        d2 += d * d;
    }
    return std::exp(-gamma * d2);
}

// RBF Gram matrix (float storage) via ||a-b||^2 = |a|^2 + |b|^2 - 2ab.
inline std::vector<float> rbf_gram(const std::vector<float>& x, int n, int dim, double gamma) {
    std::vector<float> g(size_t(n) * n);
    Gemm<float>::run(false, true, n, n, dim, 1.0f, x.data(), x.data(), 0.0f, g.data());
    std::vector<float> sq((size_t(n)));
    for (int i = 0; i < n; ++i) sq[size_t(i)] = g[size_t(i) * n + i];
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            double d2 = sq[size_t(i)] + sq[size_t(j)] - 2.0 * g[size_t(i) * n + j];
            g[size_t(i) * n + j] = float(std::exp(-gamma * std::max(0.0, d2)));
        }
    return g;
}

struct BinarySvm {
    std::vector<double> coef;  // alpha_i * y_i over the shared training matrix
    double bias = 0.0;
    bool converged = true;
    double achieved_gap = 0.0;
};

// One-vs-rest SVM with a shared (standardized) training matrix. Dual
// problems are solved by SMO with maximal-violating-pair selection.
struct SvmModel {
    int dim = 0;
    double gamma = 0.0;
    double C = 0.0;
    Standardizer std_;
    std::vector<float> train_x;  // [n, dim], standardized
    std::vector<int> classes;    // sorted distinct labels
    std::vector<BinarySvm> machines;

    int train_count() const { return dim ? int(train_x.size()) / dim : 0; }
};

namespace detail {

// Two-variable SMO subproblem on the maximal violating pair (LIBSVM-style
// working set selection WSS1).
inline BinarySvm smo_solve(const std::vector<float>& gram, const std::vector<int8_t>& y, int n,
                           double C, double tol, int64_t max_iters) {
    std::vector<double> alpha(size_t(n), 0.0);
    std::vector<double> grad(size_t(n), -1.0);  // G_i = (Q alpha)_i - 1
    auto Q = [&](int i, int j) { return double(y[size_t(i)]) * y[size_t(j)] * gram[size_t(i) * n + j]; };

    const double tau = 1e-12;
    double gap = std::numeric_limits<double>::infinity();
    int64_t iters = 0;
    for (; iters < max_iters; ++iters) {
        int i = -1, j = -1;
        double gmax = -std::numeric_limits<double>::infinity();
        double gmin = std::numeric_limits<double>::infinity();
        for (int t = 0; t < n; ++t) {
            double v = -double(y[size_t(t)]) * grad[size_t(t)];
            bool up = (y[size_t(t)] > 0 && alpha[size_t(t)] < C) || (y[size_t(t)] < 0 && alpha[size_t(t)] > 0);
            bool low = (y[size_t(t)] > 0 && alpha[size_t(t)] > 0) || (y[size_t(t)] < 0 && alpha[size_t(t)] < C);
            if (up && v > gmax) { gmax = v; i = t; }
            if (low && v < gmin) { gmin = v; j = t; }
        }
        gap = gmax - gmin;
        if (i < 0 || j < 0 || gap <= tol) break;

        double ai = alpha[size_t(i)], aj = alpha[size_t(j)];
        double quad = std::max(tau, double(gram[size_t(i) * n + i]) + gram[size_t(j) * n + j] -
                                        2.0 * gram[size_t(i) * n + j]);
        if (y[size_t(i)] != y[size_t(j)]) {
            double delta = (-grad[size_t(i)] - grad[size_t(j)]) / quad;
            double diff = ai - aj;
            alpha[size_t(i)] += delta;
            alpha[size_t(j)] += delta;
            if (diff > 0) {
                if (alpha[size_t(j)] < 0) { alpha[size_t(j)] = 0; alpha[size_t(i)] = diff; }
                if (alpha[size_t(i)] > C) { alpha[size_t(i)] = C; alpha[size_t(j)] = C - diff; }
            } else {
                if (alpha[size_t(i)] < 0) { alpha[size_t(i)] = 0; alpha[size_t(j)] = -diff; }
                if (alpha[size_t(j)] > C) { alpha[size_t(j)] = C; alpha[size_t(i)] = C + diff; }
            }
        } else {
            double delta = (grad[size_t(i)] - grad[size_t(j)]) / quad;
            double sum = ai + aj;
            alpha[size_t(i)] -= delta;
            alpha[size_t(j)] += delta;
            if (sum > C) {
                if (alpha[size_t(i)] > C) { alpha[size_t(i)] = C; alpha[size_t(j)] = sum - C; }
                if (alpha[size_t(j)] > C) { alpha[size_t(j)] = C; alpha[size_t(i)] = sum - C; }
            } else {
                if (alpha[size_t(j)] < 0) { alpha[size_t(j)] = 0; alpha[size_t(i)] = sum; }
                if (alpha[size_t(i)] < 0) { alpha[size_t(i)] = 0; alpha[size_t(j)] = sum; }
            }
        }
        double di = alpha[size_t(i)] - ai, dj = alpha[size_t(j)] - aj;
        if (di != 0 || dj != 0)
            for (int t = 0; t < n; ++t) grad[size_t(t)] += Q(t, i) * di + Q(t, j) * dj;
    }

    BinarySvm out;
    out.coef.resize(size_t(n));
    for (int t = 0; t < n; ++t) out.coef[size_t(t)] = alpha[size_t(t)] * y[size_t(t)];
    out.converged = gap <= tol;
    out.achieved_gap = gap;
    if (!out.converged)
        std::cerr << "svm: SMO stopped at max iterations, KKT gap " << gap << " (tol " << tol << ")\n";

    // bias from free support vectors; fall back to the violating-pair midpoint
    double bsum = 0;
    int bcount = 0;
    for (int t = 0; t < n; ++t)
        if (alpha[size_t(t)] > 1e-9 && alpha[size_t(t)] < C - 1e-9) {
            double f = 0;
            for (int s = 0; s < n; ++s) f += out.coef[size_t(s)] * gram[size_t(t) * n + s];
            bsum += y[size_t(t)] - f;
            ++bcount;
        }
    if (bcount > 0) {
        out.bias = bsum / bcount;
    } else {
        double gmax = -std::numeric_limits<double>::infinity(), gmin = std::numeric_limits<double>::infinity();
        for (int t = 0; t < n; ++t) {
            double v = -double(y[size_t(t)]) * grad[size_t(t)];
            bool up = (y[size_t(t)] > 0 && alpha[size_t(t)] < C) || (y[size_t(t)] < 0 && alpha[size_t(t)] > 0);
            bool low = (y[size_t(t)] > 0 && alpha[size_t(t)] > 0) || (y[size_t(t)] < 0 && alpha[size_t(t)] < C);
            if (up) gmax = std::max(gmax, v);
            if (low) gmin = std::min(gmin, v);
        }
        out.bias = (gmax + gmin) / 2.0;
    }
    return out;
}

}  // namespace detail

// features: raw (unstandardized) rows [n, dim]; labels in 0..9.
inline SvmModel svm_fit(std::vector<float> features, std::vector<int> labels, int dim,
                        const SvmConfig& cfg = {}) {
    int n = int(labels.size());
    require(n > 0 && int(features.size()) == n * dim, "svm_fit: feature/label size mismatch");
    if (n > cfg.train_cap) {
        n = cfg.train_cap;
        features.resize(size_t(n) * dim);
        labels.resize(size_t(n));
    }
    std::set<int> cls(labels.begin(), labels.end());
    require(cls.size() >= 2, "svm_fit: need at least 2 classes, got " + std::to_string(cls.size()));

    SvmModel model;
    model.dim = dim;
    model.C = cfg.C;
    model.classes.assign(cls.begin(), cls.end());
    model.std_.fit(features, n, dim);
    model.std_.apply(features, n, dim);

    if (cfg.gamma > 0) {
        model.gamma = cfg.gamma;
    } else {
        double var = 0;
        double m = 0;
        for (float v : features) m += v;
        m /= features.size();
        for (float v : features) var += (v - m) * (v - m);
        var /= features.size();
        model.gamma = 1.0 / (dim * std::max(var, 1e-9));
    }
    model.train_x = std::move(features);

    auto gram = rbf_gram(model.train_x, n, dim, model.gamma);
    for (int c : model.classes) {
        std::vector<int8_t> y((size_t(n)));
        for (int i = 0; i < n; ++i) y[size_t(i)] = labels[size_t(i)] == c ? 1 : -1;
        model.machines.push_back(detail::smo_solve(gram, y, n, cfg.C, cfg.tol, cfg.max_iters));
    }
    return model;
}

// Per-class decision values for raw feature rows [n, dim].
inline std::vector<double> svm_decision(const SvmModel& model, std::vector<float> features, int n) {
    require(int(features.size()) == n * model.dim, "svm_decision: feature width mismatch, expected dim " +
                                                       std::to_string(model.dim));
    model.std_.apply(features, n, model.dim);
    int ntr = model.train_count();
    int nc = int(model.machines.size());
    // kernel block K[n, ntr] via gemm on squared distances
    std::vector<float> dots(size_t(n) * ntr);
    Gemm<float>::run(false, true, n, ntr, model.dim, 1.0f, features.data(), model.train_x.data(), 0.0f,
                     dots.data());
    std::vector<double> sq_te(size_t(n), 0.0), sq_tr(size_t(ntr), 0.0);
    for (int i = 0; i < n; ++i)
        for (int d = 0; d < model.dim; ++d) {
            double v = features[size_t(i) * model.dim + d];
            sq_te[size_t(i)] += v * v;
        }
    for (int i = 0; i < ntr; ++i)
        for (int d = 0; d < model.dim; ++d) {
            double v = model.train_x[size_t(i) * model.dim + d];
            sq_tr[size_t(i)] += v * v;
        }
    std::vector<double> dec(size_t(n) * nc, 0.0);
    std::vector<double> krow((size_t(ntr)));
    for (int i = 0; i < n; ++i) {
        for (int t = 0; t < ntr; ++t) {
            double d2 = sq_te[size_t(i)] + sq_tr[size_t(t)] - 2.0 * dots[size_t(i) * ntr + t];
            krow[size_t(t)] = std::exp(-model.gamma * std::max(0.0, d2));
        }
        for (int c = 0; c < nc; ++c) {
            double f = model.machines[size_t(c)].bias;
            const auto& coef = model.machines[size_t(c)].coef;
            for (int t = 0; t < ntr; ++t) f += coef[size_t(t)] * krow[size_t(t)];
            dec[size_t(i) * nc + c] = f;
        }
    }
    return dec;
}

// argmax over one-vs-rest decisions; ties resolve to the lowest class index.
inline std::vector<int> svm_predict(const SvmModel& model, const std::vector<float>& features, int n) {
    auto dec = svm_decision(model, features, n);
    int nc = int(model.machines.size());
    std::vector<int> out((size_t(n)));
    for (int i = 0; i < n; ++i) {
        int best = 0;
        for (int c = 1; c < nc; ++c)
            if (dec[size_t(i) * nc + c] > dec[size_t(i) * nc + best]) best = c;
        out[size_t(i)] = model.classes[size_t(best)];
    }
    return out;
}

}  // namespace capsnet
