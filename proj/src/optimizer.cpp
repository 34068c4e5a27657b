// SPDX-License-Identifier: Apache-2.0

#include "msp/optimizer.hpp"

#include <cmath>

namespace msp {

void Adam::step(std::deque<Parameter>& params) {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& prm : params) {
        if (prm.frozen || prm.grad.size() == 0) continue;
        auto& s = state_[prm.name];
        if (s.m.size() == 0) {
            s.m = Matrix::Zero(prm.value.rows(), prm.value.cols());
            s.v = Matrix::Zero(prm.value.rows(), prm.value.cols());
        }
        s.m = cfg_.beta1 * s.m + (1.0 - cfg_.beta1) * prm.grad;
        s.v = cfg_.beta2 * s.v + (1.0 - cfg_.beta2) * prm.grad.cwiseProduct(prm.grad);
        prm.value.array() -= cfg_.learning_rate * (s.m.array() / c1) / ((s.v.array() / c2).sqrt() + cfg_.eps);
    }
}

void Adam::reset() {
    t_ = 0;
    state_.clear();
}

} // namespace msp
