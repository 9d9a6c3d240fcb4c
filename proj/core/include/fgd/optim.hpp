#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "fgd/autodiff.hpp"

namespace fgd {

struct AdamOptions {
    double lr = 0.002;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// First/second moment estimates, one pair per parameter, plus the step count.
struct AdamState {
    std::vector<Tensor> m;
    std::vector<Tensor> v;
    std::int64_t step = 0;
};

AdamState make_adam_state(std::span<Parameter* const> params);

/// One bias-corrected Adam update using each parameter's `grad` slot.
void adam_step(std::span<Parameter* const> params, AdamState& state, const AdamOptions& opts);

}  // namespace fgd
