#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "levelblend/rng.hpp"
#include "levelblend/tensor.hpp"

namespace lvb::num {

// He-uniform fill: limit sqrt(6 / fan_in). All parameter init in the project
// goes through this, drawing from a labeled RNG stream in declaration order.
inline Tensor he_uniform(Shape shape, int fan_in, Rng& rng) {
    float limit = std::sqrt(6.0f / static_cast<float>(fan_in));
    std::vector<float> v(shape_numel(shape));
    for (auto& x : v) x = rng.uniform(-limit, limit);
    return Tensor::leaf(std::move(shape), std::move(v), true);
}

// Bias-corrected adaptive-moment optimizer. Consumes (and clears) the grad
// buffers left by backward(); an empty buffer counts as a zero gradient.
class Adam {
public:
    explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void add_param(const Tensor& p) {
        slots_.push_back(Slot{p, std::vector<float>(p.numel(), 0.0f), std::vector<float>(p.numel(), 0.0f)});
    }

    long step_count() const { return step_; }
    double lr() const { return lr_; }

    void step() {
        ++step_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
        for (auto& slot : slots_) {
            auto& node = *slot.param.node();
            const bool has_grad = node.grad.size() == node.value.size();
            for (std::size_t i = 0; i < node.value.size(); ++i) {
                float g = has_grad ? node.grad[i] : 0.0f;
                if (!std::isfinite(g)) fail("NonFiniteGradient", "parameter gradient is not finite");
                slot.m[i] = static_cast<float>(beta1_ * slot.m[i] + (1.0 - beta1_) * g);
                slot.v[i] = static_cast<float>(beta2_ * slot.v[i] + (1.0 - beta2_) * g * g);
                double mhat = slot.m[i] / bc1;
                double vhat = slot.v[i] / bc2;
                node.value[i] -= static_cast<float>(lr_ * mhat / (std::sqrt(vhat) + eps_));
            }
            node.grad.clear();
        }
    }

private:
    struct Slot {
        Tensor param;
        std::vector<float> m;
        std::vector<float> v;
    };
    std::vector<Slot> slots_;
    double lr_, beta1_, beta2_, eps_;
    long step_ = 0;
};

// Central finite differences against the analytic gradient. `f` must rebuild
// its graph from the leaf values on every call. Returns the max relative
// error max |a-n| / max(1, |a|, |n|) over every coordinate of every leaf.
inline double grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                         std::vector<Tensor> leaves, double eps = 1e-3) {
    Tensor loss = f(leaves);
    backward(loss);
    std::vector<std::vector<float>> analytic;
    analytic.reserve(leaves.size());
    for (auto& leaf : leaves) {
        if (leaf.grad().size() == leaf.numel())
            analytic.push_back(leaf.grad());
        else
            analytic.emplace_back(leaf.numel(), 0.0f);
        leaf.node()->grad.clear();
    }

    double worst = 0.0;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        if (!leaves[li].requires_grad()) continue;
        auto& data = leaves[li].data();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const float saved = data[i];
            data[i] = saved + static_cast<float>(eps);
            double up = f(leaves).item();
            data[i] = saved - static_cast<float>(eps);
            double down = f(leaves).item();
            data[i] = saved;
            double numeric = (up - down) / (2.0 * eps);
            double a = analytic[li][i];
            double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
            worst = std::max(worst, err);
        }
    }
    return worst;
}

} // namespace lvb::num
