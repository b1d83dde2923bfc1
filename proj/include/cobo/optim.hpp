// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <vector>

#include "cobo/graph.hpp"

namespace cobo {

/// Adam over a fixed set of parameter nodes in one graph. Call step() after
/// each backward(); moment buffers are keyed by position in `params`.
class Adam {
public:
    explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

    void step(ad::Graph& g, const std::vector<ad::NodeId>& params) {
        if (m_.empty()) {
            for (ad::NodeId p : params) {
                m_.emplace_back(g.value(p).shape());
                v_.emplace_back(g.value(p).shape());
            }
        }
        ++t_;
        const double bc1 = 1.0 - std::pow(b1_, t_);
        const double bc2 = 1.0 - std::pow(b2_, t_);
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& val = g.mutable_value(params[i]).data();
            const auto& grad = g.grad(params[i]).data();
            auto& m = m_[i].data();
            auto& v = v_[i].data();
            for (std::size_t k = 0; k < val.size(); ++k) {
                m[k] = b1_ * m[k] + (1.0 - b1_) * grad[k];
                v[k] = b2_ * v[k] + (1.0 - b2_) * grad[k] * grad[k];
                const double mhat = m[k] / bc1;
                const double vhat = v[k] / bc2;
                val[k] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
            }
        }
    }

    double lr() const { return lr_; }
    void set_lr(double lr) { lr_ = lr; }

private:
    double lr_, b1_, b2_, eps_;
    int t_ = 0;
    std::vector<ad::Tensor> m_, v_;
};

}  // namespace cobo
