#pragma once

// Region-word alignment: similarity matrix, symmetric InfoNCE and the
// weighted composite objective.

#include "code/nn.hpp"
#include "code/tensor.hpp"

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace code {

// Symmetric InfoNCE on a B x B logit matrix whose diagonal holds the positives:
//   -(1/2B) sum_i log softmax_row(Z)_ii - (1/2B) sum_i log softmax_col(Z)_ii
template <typename T>
ag::Var<T> symmetric_infonce(const ag::Var<T>& logits) {
    if (logits.rows() != logits.cols()) throw Error("symmetric_infonce: matrix must be square");
    if (!ag::all_finite(logits)) throw Error("symmetric_infonce: non-finite entries");
    const std::size_t b = logits.rows();
    std::vector<std::pair<std::size_t, std::size_t>> diag;
    for (std::size_t i = 0; i < b; ++i) diag.emplace_back(i, i);
    auto rows = ag::pick(ag::log_softmax_rows(logits), diag);
    auto cols = ag::pick(ag::log_softmax_rows(ag::transpose(logits)), diag);
    return ag::scale(ag::add(ag::sum(rows), ag::sum(cols)), T(-1) / static_cast<T>(2 * b));
}

// S_ij = <e^v_i, e^t_j> for unit-norm 1 x C embeddings.
template <typename T>
ag::Var<T> similarity_matrix(const std::vector<ag::Var<T>>& region, const std::vector<ag::Var<T>>& word) {
    if (region.size() != word.size()) throw Error("similarity_matrix: batch size mismatch");
    if (region.empty()) throw Error("similarity_matrix: empty batch");
    return ag::matmul_nt(ag::concat_rows(region), ag::concat_rows(word));
}

// Learnable temperature tau = exp(log_tau).
template <typename T>
struct Temperature {
    ag::Var<T> log_tau;

    Temperature() = default;
    Temperature(ParamStore<T>& ps, double inverse_init = 14.3)
        : log_tau(ps.filled("align.log_tau", 1, 1, static_cast<T>(-std::log(inverse_init)), "align")) {}

    T tau() const { return std::exp(log_tau.value()[0]); }
};

template <typename T>
ag::Var<T> hcl_loss(const ag::Var<T>& similarity, const ag::Var<T>& log_tau) {
    if (log_tau.size() != 1) throw Error("hcl_loss: log_tau must be scalar");
    return symmetric_infonce(ag::mul_scalar(similarity, ag::exp(ag::neg(log_tau))));
}

// Plain-value convenience: tau given directly.
template <typename T>
ag::Var<T> hcl_loss(const ag::Var<T>& similarity, T tau) {
    if (!(tau > T(0))) throw Error("hcl_loss: tau must be positive");
    return hcl_loss(similarity, ag::scalar<T>(std::log(tau)));
}

struct LossWeights {
    double kg = 8.0;
    double seg_v = 1.0;
    double seg_t = 1.0;
    double hcl = 0.5;

    void validate() const {
        if (kg < 0 || seg_v < 0 || seg_t < 0 || hcl < 0) throw Error("loss weights must be non-negative");
    }
};

inline constexpr const char* kLossTerms[] = {"kg", "seg_v", "seg_t", "hcl"};

// Per-term losses; absent terms (disabled by ablation) are nullopt.
template <typename T>
struct LossParts {
    std::optional<ag::Var<T>> kg, seg_v, seg_t, hcl;

    std::map<std::string, std::optional<double>> values() const {
        auto v = [](const std::optional<ag::Var<T>>& x) -> std::optional<double> {
            if (!x) return std::nullopt;
            return static_cast<double>(x->item());
        };
        return {{"kg", v(kg)}, {"seg_v", v(seg_v)}, {"seg_t", v(seg_t)}, {"hcl", v(hcl)}};
    }
};

class NonFiniteLoss : public Error {
public:
    NonFiniteLoss(const std::string& term, long step)
        : Error("non-finite loss term '" + term + "'" + (step >= 0 ? " at step " + std::to_string(step) : "")),
          term_(term) {}
    const std::string& term() const { return term_; }

private:
    std::string term_;
};

template <typename T>
ag::Var<T> total_loss(const LossParts<T>& parts, const LossWeights& w, long step = -1) {
    w.validate();
    ag::Var<T> total = ag::scalar<T>(T(0));
    auto term = [&](const std::optional<ag::Var<T>>& x, double weight, const char* name) {
        if (!x) return;
        if (!std::isfinite(static_cast<double>(x->item()))) throw NonFiniteLoss(name, step);
        if (weight == 0.0) return;
        total = ag::add(total, ag::scale(*x, static_cast<T>(weight)));
    };
    term(parts.kg, w.kg, "kg");
    term(parts.seg_v, w.seg_v, "seg_v");
    term(parts.seg_t, w.seg_t, "seg_t");
    term(parts.hcl, w.hcl, "hcl");
    return total;
}

}  // namespace code
