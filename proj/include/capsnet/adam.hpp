#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "capsnet/tensor.hpp"

namespace capsnet {

template <class S>
struct AdamConfig {
    S lr = S(1e-3);
    S beta1 = S(0.9);
    S beta2 = S(0.999);
    S eps = S(1e-8);
};

// Adam with bias correction. Moment buffers are parallel to the parameter
// list handed to init(); order must stay stable across steps.
template <class S>
class Adam {
public:
    AdamConfig<S> cfg;
    int64_t step_count = 0;

    Adam() = default;
    explicit Adam(AdamConfig<S> c) : cfg(c) {}

    void init(const std::vector<Tensor<S>>& params) {
        m_.clear();
        v_.clear();
        for (const auto& p : params) {
            m_.emplace_back(p.values().size(), S(0));
            v_.emplace_back(p.values().size(), S(0));
        }
        step_count = 0;
    }

    bool initialized() const { return !m_.empty(); }
    size_t param_count() const { return m_.size(); }

    std::vector<std::vector<S>>& first_moments() { return m_; }
    std::vector<std::vector<S>>& second_moments() { return v_; }
    const std::vector<std::vector<S>>& first_moments() const { return m_; }
    const std::vector<std::vector<S>>& second_moments() const { return v_; }

    void step(std::vector<Tensor<S>>& params) {
        require(params.size() == m_.size(), "adam: param count changed, expected " +
                                                std::to_string(m_.size()) + " got " +
                                                std::to_string(params.size()));
        ++step_count;
        S bc1 = S(1) - std::pow(cfg.beta1, static_cast<S>(step_count));
        S bc2 = S(1) - std::pow(cfg.beta2, static_cast<S>(step_count));
        for (size_t i = 0; i < params.size(); ++i) {
            auto& p = params[i].values();
            const auto& g = params[i].grad();
            require(p.size() == m_[i].size(), "adam: shape mismatch on param " + std::to_string(i));
            auto& m = m_[i];
            auto& v = v_[i];
            for (size_t j = 0; j < p.size(); ++j) {
                m[j] = cfg.beta1 * m[j] + (S(1) - cfg.beta1) * g[j];
                v[j] = cfg.beta2 * v[j] + (S(1) - cfg.beta2) * g[j] * g[j];
                S mhat = m[j] / bc1;
                S vhat = v[j] / bc2;
                p[j] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
            }
        }
    }

private:
    std::vector<std::vector<S>> m_;
    std::vector<std::vector<S>> v_;
};

}  // namespace capsnet
