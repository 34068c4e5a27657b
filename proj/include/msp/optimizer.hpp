// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "msp/autograd.hpp"

#include <deque>
#include <map>
#include <string>

namespace msp {

struct AdamConfig {
    double learning_rate = 1e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Adam with bias correction. Moment state is keyed by parameter name; frozen
// parameters are skipped.
class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    void step(std::deque<Parameter>& params);
    // Drops all moment state and the step counter.
    void reset();

    long steps() const { return t_; }
    const AdamConfig& config() const { return cfg_; }
    void set_learning_rate(double lr) { cfg_.learning_rate = lr; }

private:
    struct Moments {
        Matrix m;
        Matrix v;
    };
    AdamConfig cfg_;
    long t_ = 0;
    std::map<std::string, Moments> state_;
};

} // namespace msp
