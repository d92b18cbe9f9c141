#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "capsnet/rng.hpp"
#include "capsnet/tensor.hpp"

namespace capsnet {

// Two-stage conv geometry: conv1 (stride 1, ReLU) then the primary-capsule
// conv (stride 2), both valid padding. canvas 28 -> 6x6 grid, canvas 40 -> 12x12.
struct Geometry {
    int canvas = 28;
    int conv1_channels = 64;
    int conv1_kernel = 9;
    int conv1_stride = 1;
    int primary_kernel = 9;
    int primary_stride = 2;
    int P = 8;    // primary capsule types
    int Dp = 8;   // primary pose dims
    int L = 16;   // latent capsules
    int Dl = 16;  // latent pose dims
    int routing_iterations = 3;
    int fc1 = 512;
    int fc2 = 1024;

    int conv1_out() const { return (canvas - conv1_kernel) / conv1_stride + 1; }
    int grid() const { return (conv1_out() - primary_kernel) / primary_stride + 1; }
    int pixels() const { return canvas * canvas; }
    int latent_width() const { return L * Dl; }

    void validate() const {
        require(conv1_kernel <= canvas, "geometry: conv1 kernel exceeds canvas");
        require(primary_kernel <= conv1_out(), "geometry: primary kernel exceeds conv1 output");
        require(grid() >= 1, "geometry: empty primary grid");
        require(L >= 2, "geometry: need at least 2 latent capsules");
        require(routing_iterations >= 1, "geometry: routing iterations must be >= 1");
    }

    bool operator==(const Geometry&) const = default;
};

template <class S>
struct CapsNetModel {
    Geometry geo;
    Tensor<S> conv1_kernel;    // [C1, 1, k, k]
    Tensor<S> conv1_bias;      // [C1]
    Tensor<S> primary_kernel;  // [P*Dp, C1, k, k]
    Tensor<S> primary_bias;    // [P*Dp]
    Tensor<S> vote_weights;    // [G, G, P, L, Dp, Dl] (per-position transforms, not shared)
    Tensor<S> dec_w1, dec_b1;  // [L*Dl, fc1], [fc1]
    Tensor<S> dec_w2, dec_b2;  // [fc1, fc2], [fc2]
    Tensor<S> dec_w3, dec_b3;  // [fc2, canvas^2], [canvas^2]

    static CapsNetModel init(const Geometry& geo, Rng& rng) {
        geo.validate();
        CapsNetModel m;
        m.geo = geo;
        int g = geo.grid();
        auto normal = [&rng](Shape shape, double stddev) {
            auto t = Tensor<S>::zeros(shape, true);
            for (auto& v : t.values()) v = static_cast<S>(rng.normal(0.0, stddev));
            return t;
        };
        int c1fan = geo.conv1_kernel * geo.conv1_kernel;
        m.conv1_kernel = normal({geo.conv1_channels, 1, geo.conv1_kernel, geo.conv1_kernel},
                                std::sqrt(2.0 / c1fan));
        m.conv1_bias = Tensor<S>::zeros({geo.conv1_channels}, true);
        int pcfan = geo.conv1_channels * geo.primary_kernel * geo.primary_kernel;
        m.primary_kernel = normal({geo.P * geo.Dp, geo.conv1_channels, geo.primary_kernel, geo.primary_kernel},
                                  std::sqrt(2.0 / pcfan));
        m.primary_bias = Tensor<S>::zeros({geo.P * geo.Dp}, true);
        // Unit-variance vote transforms: agreement increments to the routing
        // logits start at O(1), so coupling differentiates from the first
        // steps instead of lingering near uniform.
        m.vote_weights = normal({g, g, geo.P, geo.L, geo.Dp, geo.Dl}, 1.0);
        int lw = geo.latent_width();
        m.dec_w1 = normal({lw, geo.fc1}, std::sqrt(2.0 / (lw + geo.fc1)));
        m.dec_b1 = Tensor<S>::zeros({geo.fc1}, true);
        m.dec_w2 = normal({geo.fc1, geo.fc2}, std::sqrt(2.0 / (geo.fc1 + geo.fc2)));
        m.dec_b2 = Tensor<S>::zeros({geo.fc2}, true);
        m.dec_w3 = normal({geo.fc2, geo.pixels()}, std::sqrt(2.0 / (geo.fc2 + geo.pixels())));
        m.dec_b3 = Tensor<S>::zeros({geo.pixels()}, true);
        return m;
    }

    std::vector<std::pair<std::string, Tensor<S>>> named_params() const {
        return {{"conv1_kernel", conv1_kernel}, {"conv1_bias", conv1_bias},
                {"primary_kernel", primary_kernel}, {"primary_bias", primary_bias},
                {"vote_weights", vote_weights},
                {"dec_w1", dec_w1}, {"dec_b1", dec_b1},
                {"dec_w2", dec_w2}, {"dec_b2", dec_b2},
                {"dec_w3", dec_w3}, {"dec_b3", dec_b3}};
    }

    std::vector<Tensor<S>> params() const {
        std::vector<Tensor<S>> out;
        for (auto& [name, t] : named_params()) out.push_back(t);
        return out;
    }

    void zero_grads() {
        for (auto& p : params()) p.zero_grad();
    }
};

// v = (|s|^2 / (1 + |s|^2)) * s/|s| over the last axis; squash(0) = 0.
template <class S>
Tensor<S> squash(Tape<S>& tp, const Tensor<S>& s, S eps = S(1e-9)) {
    int last = s.ndim() - 1;
    auto n2 = tp.reduce_sum(tp.mul(s, s), {last}, true);
    auto norm = tp.sqrt(tp.add_scalar(n2, eps));
    auto factor = tp.div(n2, tp.mul(tp.add_scalar(n2, S(1)), norm));
    return tp.mul(s, factor);
}

// images [K,1,canvas,canvas] -> squashed primary poses [K,G,G,P,Dp]
template <class S>
Tensor<S> primary_caps_forward(Tape<S>& tp, const CapsNetModel<S>& m, const Tensor<S>& images) {
    const Geometry& g = m.geo;
    require(images.ndim() == 4 && images.dim(2) == g.canvas && images.dim(3) == g.canvas,
            "primary_caps: images " + shape_str(images.shape()) + " do not match canvas " +
                std::to_string(g.canvas));
    int K = images.dim(0);
    auto b1 = tp.reshape(m.conv1_bias, {1, g.conv1_channels, 1, 1});
    auto h1 = tp.relu(tp.add(tp.conv2d(images, m.conv1_kernel, g.conv1_stride), b1));
    auto b2 = tp.reshape(m.primary_bias, {1, g.P * g.Dp, 1, 1});
    auto pc = tp.add(tp.conv2d(h1, m.primary_kernel, g.primary_stride), b2);  // [K, P*Dp, G, G]
    int G = g.grid();
    auto u = tp.transpose(tp.reshape(pc, {K, g.P, g.Dp, G, G}), {0, 3, 4, 1, 2});  // [K,G,G,P,Dp]
    return squash(tp, u);
}

// u [K,G,G,P,Dp] x vote_weights [G,G,P,L,Dp,Dl] -> votes [K,G,G,P,L,Dl]
template <class S>
Tensor<S> compute_votes(Tape<S>& tp, const CapsNetModel<S>& m, const Tensor<S>& u) {
    const Geometry& g = m.geo;
    int K = u.dim(0), G = g.grid();
    auto urow = tp.reshape(u, {K, G, G, g.P, 1, 1, g.Dp});
    auto w = tp.reshape(m.vote_weights, {1, G, G, g.P, g.L, g.Dp, g.Dl});
    auto v = tp.matmul(urow, w);  // [K,G,G,P,L,1,Dl]
    return tp.reshape(v, {K, G, G, g.P, g.L, g.Dl});
}

template <class S>
struct RoutingOutput {
    Tensor<S> v;    // [K, L, Dl] final latent vectors (post-squash)
    Tensor<S> c;    // [K, G, G, P, L] final coupling coefficients
    Tensor<S> psi;  // [K, L] aggregated support, filled by the sparse controller
};

// Routing by agreement, unrolled and fully differentiable: logits start at 0,
// c = softmax over L, s_j = sum c*votes, v_j = squash(s_j), b += votes . v_j.
template <class S>
RoutingOutput<S> dynamic_routing(Tape<S>& tp, const Tensor<S>& votes, int iterations) {
    require(iterations >= 1, "routing: iterations must be >= 1, got " + std::to_string(iterations));
    require(votes.ndim() == 6, "routing: votes must be [K,G,G,P,L,Dl], got " + shape_str(votes.shape()));
    int K = votes.dim(0), G1 = votes.dim(1), G2 = votes.dim(2), P = votes.dim(3), L = votes.dim(4);
    Tensor<S> b = Tensor<S>::zeros({K, G1, G2, P, L});
    RoutingOutput<S> out;
    for (int it = 0; it < iterations; ++it) {
        Tensor<S> c = tp.softmax(b, 4);
        auto cexp = tp.reshape(c, {K, G1, G2, P, L, 1});
        auto s = tp.reduce_sum(tp.mul(cexp, votes), {1, 2, 3});  // [K, L, Dl]
        Tensor<S> v = squash(tp, s);
        if (it + 1 < iterations) {
            auto vexp = tp.reshape(v, {K, 1, 1, 1, L, votes.dim(5)});
            auto agree = tp.reduce_sum(tp.mul(votes, vexp), {5});  // [K,G,G,P,L]
            b = tp.add(b, agree);
        }
        out.v = v;
        out.c = c;
    }
    return out;
}

// v_masked [K, L, Dl] -> reconstruction [K, canvas^2] in (0,1)
template <class S>
Tensor<S> decode(Tape<S>& tp, const CapsNetModel<S>& m, const Tensor<S>& v_masked) {
    const Geometry& g = m.geo;
    require(v_masked.ndim() >= 2, "decode: bad input rank");
    int K = v_masked.dim(0);
    require(static_cast<int>(v_masked.size() / K) == g.latent_width(),
            "decode: input width " + std::to_string(v_masked.size() / K) + " != L*Dl = " +
                std::to_string(g.latent_width()));
    auto flat = tp.reshape(v_masked, {K, g.latent_width()});
    auto h1 = tp.relu(tp.add(tp.matmul(flat, m.dec_w1), m.dec_b1));
    auto h2 = tp.relu(tp.add(tp.matmul(h1, m.dec_w2), m.dec_b2));
    return tp.sigmoid(tp.add(tp.matmul(h2, m.dec_w3), m.dec_b3));
}

// Sum of squared pixel error, averaged over the batch. This is both the
// training loss and the reported "batch MSE" metric.
template <class S>
Tensor<S> reconstruction_loss(Tape<S>& tp, const Tensor<S>& recon, const Tensor<S>& target) {
    require(recon.shape() == target.shape(), "reconstruction_loss: shape mismatch " +
                                                 shape_str(recon.shape()) + " vs " +
                                                 shape_str(target.shape()));
    int K = recon.dim(0);
    auto diff = tp.sub(recon, target);
    return tp.scale(tp.reduce_sum_all(tp.mul(diff, diff)), S(1) / static_cast<S>(K));
}

}  // namespace capsnet
