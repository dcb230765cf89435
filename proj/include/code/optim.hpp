#pragma once

// AdamW with decoupled weight decay and the warmup + cosine learning-rate schedule.

#include "code/nn.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace code {

struct ScheduleConfig {
    long steps = 2000;
    long warmup_steps = 200;
    double lr = 3e-4;
};

// Linear warmup 0 -> lr over warmup_steps, then cosine decay to 0 at `steps`.
inline double lr_at(long step, const ScheduleConfig& s) {
    if (step < 0 || step > s.steps) throw Error("lr_at: step outside [0, steps]");
    if (step < s.warmup_steps) return s.lr * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
    if (s.steps == s.warmup_steps) return s.lr;
    const double progress =
        static_cast<double>(step - s.warmup_steps) / static_cast<double>(s.steps - s.warmup_steps);
    return 0.5 * s.lr * (1.0 + std::cos(M_PI * progress));
}

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.05;
};

// Decay applies to matrices named "*.weight"; biases, norms, embeddings,
// prompts and scalars are not decayed.
inline bool decays(const std::string& name) {
    return name.size() >= 7 && name.compare(name.size() - 7, 7, ".weight") == 0;
}

template <typename T>
class AdamW {
public:
    struct Slot {
        std::vector<T> m, v;
    };

    AdamW() = default;
    explicit AdamW(const AdamWConfig& cfg) : cfg_(cfg) {}

    // One update of every trainable parameter that received a gradient.
    // Parameters without a gradient this step are left untouched.
    void step(ParamStore<T>& ps, double lr) {
        ++t_;
        if (slots_.size() != ps.entries().size()) slots_.resize(ps.entries().size());
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (std::size_t k = 0; k < ps.entries().size(); ++k) {
            auto& e = ps.entries()[k];
            auto* node = e.var.node();
            if (!node->requires_grad || node->grad.empty()) continue;
            auto& s = slots_[k];
            if (s.m.empty()) {
                s.m.assign(node->value.size(), T(0));
                s.v.assign(node->value.size(), T(0));
            }
            const bool wd = decays(e.name) && cfg_.weight_decay > 0.0;
            for (std::size_t i = 0; i < node->value.size(); ++i) {
                const T g = node->grad[i];
                s.m[i] = static_cast<T>(cfg_.beta1) * s.m[i] + static_cast<T>(1.0 - cfg_.beta1) * g;
                s.v[i] = static_cast<T>(cfg_.beta2) * s.v[i] + static_cast<T>(1.0 - cfg_.beta2) * g * g;
                const T mhat = s.m[i] / static_cast<T>(bc1);
                const T vhat = s.v[i] / static_cast<T>(bc2);
                T upd = mhat / (std::sqrt(vhat) + static_cast<T>(cfg_.eps));
                if (wd) upd += static_cast<T>(cfg_.weight_decay) * node->value[i];
                node->value[i] -= static_cast<T>(lr) * upd;
            }
        }
    }

    long steps_taken() const { return t_; }
    void set_steps_taken(long t) { t_ = t; }
    std::vector<Slot>& slots() { return slots_; }
    const std::vector<Slot>& slots() const { return slots_; }
    const AdamWConfig& config() const { return cfg_; }

private:
    AdamWConfig cfg_;
    long t_ = 0;
    std::vector<Slot> slots_;
};

}  // namespace code
