#include "fgd/optim.hpp"

#include <cmath>

namespace fgd {

AdamState make_adam_state(std::span<Parameter* const> params) {
    AdamState s;
    for (const Parameter* p : params) {
        s.m.emplace_back(p->value.shape());
        s.v.emplace_back(p->value.shape());
    }
    return s;
}

void adam_step(std::span<Parameter* const> params, AdamState& state, const AdamOptions& opts) {
    if (state.m.size() != params.size() || state.v.size() != params.size()) {
        throw ShapeError("adam_step: state holds " + std::to_string(state.m.size()) + " slots for " +
                         std::to_string(params.size()) + " parameters");
    }
    for (std::size_t k = 0; k < params.size(); ++k) {
        const Parameter& p = *params[k];
        if (state.m[k].shape() != p.value.shape() || p.grad.shape() != p.value.shape()) {
            throw ShapeError("adam_step: parameter '" + p.name + "' shape " + to_string(p.value.shape()) +
                             " vs state " + to_string(state.m[k].shape()) + " / grad " + to_string(p.grad.shape()));
        }
    }
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(opts.beta1, t);
    const double c2 = 1.0 - std::pow(opts.beta2, t);
    for (std::size_t k = 0; k < params.size(); ++k) {
        Parameter& p = *params[k];
        Tensor& m = state.m[k];
        Tensor& v = state.v[k];
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            const double g = p.grad[i];
            m[i] = opts.beta1 * m[i] + (1.0 - opts.beta1) * g;
            v[i] = opts.beta2 * v[i] + (1.0 - opts.beta2) * g * g;
            p.value[i] -= opts.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + opts.eps);
        }
    }
}

}  // namespace fgd
