#pragma once

#include "code/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

namespace testing_support {

using V = code::ag::Var<double>;

// Worst relative error between the analytic gradient of `f` with respect to
// every element of `leaves` and a central difference with step h. Gradients
// below 1e-4 in magnitude are compared against that floor instead.
inline double gradcheck(std::vector<V> leaves, const std::function<V()>& f, double h = 1e-5) {
    for (auto& l : leaves) l.zero_grad();
    V loss = f();
    code::ag::backward(loss);
    double worst = 0;
    for (auto& l : leaves) {
        const std::vector<double> analytic = l.grad();
        for (std::size_t i = 0; i < l.size(); ++i) {
            const double x = l.value()[i];
            l.value()[i] = x + h;
            const double up = f().item();
            l.value()[i] = x - h;
            const double down = f().item();
            l.value()[i] = x;
            const double numeric = (up - down) / (2 * h);
            const double scale = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-4});
            worst = std::max(worst, std::abs(analytic[i] - numeric) / scale);
        }
    }
    return worst;
}

}  // namespace testing_support
