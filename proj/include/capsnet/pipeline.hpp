#pragma once

#include <vector>

#include "capsnet/model.hpp"
#include "capsnet/sparsity.hpp"

namespace capsnet {

// One full forward pass: conv stack -> votes -> routing -> support -> rank ->
// mask -> v' -> reconstruction. Dense-ablation mode bypasses boosting and
// masking (m == 1) and feeds raw v to the decoder.
template <class S>
struct ForwardResult {
    Tensor<S> u;      // primary poses [K,G,G,P,Dp]
    Tensor<S> votes;  // [K,G,G,P,L,Dl]
    RoutingOutput<S> routing;
    Tensor<S> z;            // boosted support [K,L]
    std::vector<int> ranks; // [K*L]
    Tensor<S> mask;         // [K,L]
    Tensor<S> v_prime;      // [K,L,Dl]
    Tensor<S> recon;        // [K, canvas^2]
};

template <class S>
ForwardResult<S> forward_pipeline(Tape<S>& tp, const CapsNetModel<S>& m, const Tensor<S>& images,
                                  const SparsityConfig& cfg, const SparsityState& st, bool dense_mode) {
    ForwardResult<S> r;
    int K = images.dim(0);
    r.u = primary_caps_forward(tp, m, images);
    r.votes = compute_votes(tp, m, r.u);
    r.routing = dynamic_routing(tp, r.votes, m.geo.routing_iterations);
    // support/rank/mask are constants w.r.t. differentiation
    r.routing.psi = aggregate_support(tp.stop_gradient(r.routing.c));
    if (dense_mode) {
        r.z = r.routing.psi;  // unboosted; ranks kept for diagnostics only
        r.ranks = rank_capsules(r.z);
        r.mask = Tensor<S>::filled({K, m.geo.L}, S(1));
        r.v_prime = r.routing.v;
    } else {
        r.z = boost_support(r.routing.psi, st.g);
        r.ranks = rank_capsules(r.z);
        r.mask = exp_mask<S>(r.ranks, K, cfg);
        r.v_prime = apply_mask(tp, r.routing.v, r.mask);
    }
    r.recon = decode(tp, m, r.v_prime);
    return r;
}

}  // namespace capsnet
