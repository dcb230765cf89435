#pragma once

// Reverse-mode automatic differentiation over dense row-major matrices.
//
// Every value is a rows x cols matrix; scalars are 1x1. Graph nodes are
// reference counted and freed when the last Var referring to them goes away,
// so a training step builds a fresh graph and drops it after backward().

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace code {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace ag {

template <typename T>
struct Node {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    std::size_t size() const { return rows * cols; }
    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    }
};

template <typename T>
class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

    std::size_t rows() const { return node_->rows; }
    std::size_t cols() const { return node_->cols; }
    std::size_t size() const { return node_->size(); }
    bool requires_grad() const { return node_->requires_grad; }
    bool defined() const { return static_cast<bool>(node_); }

    std::vector<T>& value() { return node_->value; }
    const std::vector<T>& value() const { return node_->value; }
    std::vector<T>& grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    const std::vector<T>& grad_or_empty() const { return node_->grad; }

    T at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }
    T item() const {
        if (size() != 1) throw Error("item() on non-scalar of shape " + shape_str());
        return node_->value[0];
    }
    std::string shape_str() const {
        return std::to_string(rows()) + "x" + std::to_string(cols());
    }

    Node<T>* node() const { return node_.get(); }
    const std::shared_ptr<Node<T>>& ptr() const { return node_; }

    void zero_grad() { node_->grad.assign(node_->value.size(), T(0)); }

private:
    std::shared_ptr<Node<T>> node_;
};

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapC = Eigen::Map<const RowMat<T>>;
template <typename T>
using MapM = Eigen::Map<RowMat<T>>;

template <typename T>
MapC<T> view(const Var<T>& v) {
    return MapC<T>(v.value().data(), static_cast<Eigen::Index>(v.rows()),
                   static_cast<Eigen::Index>(v.cols()));
}

namespace detail {

template <typename T>
Var<T> make(std::size_t rows, std::size_t cols, std::vector<T> value,
            std::vector<Var<T>> parents = {}) {
    auto n = std::make_shared<Node<T>>();
    n->rows = rows;
    n->cols = cols;
    n->value = std::move(value);
    for (auto& p : parents) {
        if (p.requires_grad()) n->requires_grad = true;
        n->parents.push_back(p.ptr());
    }
    if (!n->requires_grad) n->parents.clear();
    return Var<T>(std::move(n));
}

// Attach a backward closure only when something upstream needs gradients.
template <typename T, typename F>
void on_backward(Var<T>& out, F&& f) {
    if (out.requires_grad()) out.node()->backward = std::forward<F>(f);
}

template <typename T>
void accumulate(const Var<T>& target, std::span<const T> g) {
    if (!target.requires_grad()) return;
    auto* n = target.node();
    n->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) n->grad[i] += g[i];
}

inline void check(bool ok, const std::string& msg) {
    if (!ok) throw Error(msg);
}

}  // namespace detail

template <typename T>
Var<T> constant(std::size_t rows, std::size_t cols, std::vector<T> value) {
    detail::check(value.size() == rows * cols, "constant: size mismatch");
    return detail::make<T>(rows, cols, std::move(value));
}

template <typename T>
Var<T> constant(std::size_t rows, std::size_t cols, T fill) {
    return detail::make<T>(rows, cols, std::vector<T>(rows * cols, fill));
}

template <typename T>
Var<T> scalar(T v) {
    return constant<T>(1, 1, std::vector<T>{v});
}

template <typename T>
Var<T> leaf(std::size_t rows, std::size_t cols, std::vector<T> value) {
    auto v = constant<T>(rows, cols, std::move(value));
    v.node()->requires_grad = true;
    return v;
}

template <typename T>
Var<T> detach(const Var<T>& a) {
    return constant<T>(a.rows(), a.cols(), a.value());
}

// Runs reverse accumulation from a scalar (seed gradient 1).
template <typename T>
void backward(Var<T>& root) {
    detail::check(root.size() == 1, "backward: root must be scalar");
    if (!root.requires_grad()) return;
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node(), 0}};
    seen.insert(root.node());
    while (!stack.empty()) {
        auto& [n, idx] = stack.back();
        if (idx < n->parents.size()) {
            Node<T>* p = n->parents[idx++].get();
            if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    root.node()->ensure_grad();
    root.node()->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backward && !n->grad.empty()) n->backward(*n);
    }
}

// ---------------------------------------------------------------- linear algebra

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    detail::check(a.cols() == b.rows(),
                  "matmul: shape mismatch " + a.shape_str() + " * " + b.shape_str());
    std::vector<T> out(a.rows() * b.cols());
    MapM<T>(out.data(), a.rows(), b.cols()).noalias() = view(a) * view(b);
    auto r = detail::make<T>(a.rows(), b.cols(), std::move(out), {a, b});
    detail::on_backward(r, [a, b](Node<T>& n) {
        MapC<T> g(n.grad.data(), n.rows, n.cols);
        if (a.requires_grad()) {
            a.node()->ensure_grad();
            MapM<T>(a.node()->grad.data(), a.rows(), a.cols()).noalias() += g * view(b).transpose();
        }
        if (b.requires_grad()) {
            b.node()->ensure_grad();
            MapM<T>(b.node()->grad.data(), b.rows(), b.cols()).noalias() += view(a).transpose() * g;
        }
    });
    return r;
}

// a * b^T
template <typename T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
    detail::check(a.cols() == b.cols(),
                  "matmul_nt: shape mismatch " + a.shape_str() + " * T(" + b.shape_str() + ")");
    std::vector<T> out(a.rows() * b.rows());
    MapM<T>(out.data(), a.rows(), b.rows()).noalias() = view(a) * view(b).transpose();
    auto r = detail::make<T>(a.rows(), b.rows(), std::move(out), {a, b});
    detail::on_backward(r, [a, b](Node<T>& n) {
        MapC<T> g(n.grad.data(), n.rows, n.cols);
        if (a.requires_grad()) {
            a.node()->ensure_grad();
            MapM<T>(a.node()->grad.data(), a.rows(), a.cols()).noalias() += g * view(b);
        }
        if (b.requires_grad()) {
            b.node()->ensure_grad();
            MapM<T>(b.node()->grad.data(), b.rows(), b.cols()).noalias() += g.transpose() * view(a);
        }
    });
    return r;
}

// fixed * a, where `fixed` carries no gradient (interpolation, pooling).
template <typename T>
Var<T> apply_fixed(const RowMat<T>& fixed, const Var<T>& a) {
    detail::check(static_cast<std::size_t>(fixed.cols()) == a.rows(), "apply_fixed: shape mismatch");
    std::vector<T> out(static_cast<std::size_t>(fixed.rows()) * a.cols());
    MapM<T>(out.data(), fixed.rows(), a.cols()).noalias() = fixed * view(a);
    auto r = detail::make<T>(fixed.rows(), a.cols(), std::move(out), {a});
    detail::on_backward(r, [a, fixed](Node<T>& n) {
        MapC<T> g(n.grad.data(), n.rows, n.cols);
        a.node()->ensure_grad();
        MapM<T>(a.node()->grad.data(), a.rows(), a.cols()).noalias() += fixed.transpose() * g;
    });
    return r;
}

template <typename T>
Var<T> transpose(const Var<T>& a) {
    std::vector<T> out(a.size());
    MapM<T>(out.data(), a.cols(), a.rows()) = view(a).transpose();
    auto r = detail::make<T>(a.cols(), a.rows(), std::move(out), {a});
    detail::on_backward(r, [a](Node<T>& n) {
        a.node()->ensure_grad();
        MapM<T>(a.node()->grad.data(), a.rows(), a.cols()) +=
            MapC<T>(n.grad.data(), n.rows, n.cols).transpose();
    });
    return r;
}

template <typename T>
Var<T> reshape(const Var<T>& a, std::size_t rows, std::size_t cols) {
    detail::check(rows * cols == a.size(), "reshape: size mismatch");
    auto r = detail::make<T>(rows, cols, a.value(), {a});
    detail::on_backward(r, [a](Node<T>& n) { detail::accumulate<T>(a, n.grad); });
    return r;
}

// ---------------------------------------------------------------- elementwise

namespace detail {

template <typename T, typename Fwd, typename Dfdx>
Var<T> unary(const Var<T>& a, Fwd f, Dfdx df) {
    std::vector<T> out(a.size());
    const auto& x = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
    auto r = make<T>(a.rows(), a.cols(), std::move(out), {a});
    on_backward(r, [a, df](Node<T>& n) {
        a.node()->ensure_grad();
        auto& ga = a.node()->grad;
        const auto& x = a.value();
        for (std::size_t i = 0; i < n.grad.size(); ++i) ga[i] += n.grad[i] * df(x[i], n.value[i]);
    });
    return r;
}

inline void same_shape(std::size_t ar, std::size_t ac, std::size_t br, std::size_t bc,
                       const char* op) {
    if (ar != br || ac != bc)
        throw Error(std::string(op) + ": shape mismatch " + std::to_string(ar) + "x" +
                    std::to_string(ac) + " vs " + std::to_string(br) + "x" + std::to_string(bc));
}

}  // namespace detail

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    detail::same_shape(a.rows(), a.cols(), b.rows(), b.cols(), "add");
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
    auto r = detail::make<T>(a.rows(), a.cols(), std::move(out), {a, b});
    detail::on_backward(r, [a, b](Node<T>& n) {
        detail::accumulate<T>(a, n.grad);
        detail::accumulate<T>(b, n.grad);
    });
    return r;
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    detail::same_shape(a.rows(), a.cols(), b.rows(), b.cols(), "sub");
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
    auto r = detail::make<T>(a.rows(), a.cols(), std::move(out), {a, b});
    detail::on_backward(r, [a, b](Node<T>& n) {
        detail::accumulate<T>(a, n.grad);
        if (b.requires_grad()) {
            b.node()->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) b.node()->grad[i] -= n.grad[i];
        }
    });
    return r;
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    detail::same_shape(a.rows(), a.cols(), b.rows(), b.cols(), "mul");
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
    auto r = detail::make<T>(a.rows(), a.cols(), std::move(out), {a, b});
    detail::on_backward(r, [a, b](Node<T>& n) {
        if (a.requires_grad()) {
            a.node()->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i)
                a.node()->grad[i] += n.grad[i] * b.value()[i];
        }
        if (b.requires_grad()) {
            b.node()->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i)
                b.node()->grad[i] += n.grad[i] * a.value()[i];
        }
    });
    return r;
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
    return detail::unary<T>(a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <typename T>
Var<T> add_const(const Var<T>& a, T c) {
    return detail::unary<T>(a, [c](T x) { return x + c; }, [](T, T) { return T(1); });
}

template <typename T>
Var<T> neg(const Var<T>& a) {
    return scale<T>(a, T(-1));
}

// a (m x n) times a 1x1 variable.
template <typename T>
Var<T> mul_scalar(const Var<T>& a, const Var<T>& s) {
    detail::check(s.size() == 1, "mul_scalar: expected 1x1 scalar");
    const T sv = s.value()[0];
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * sv;
    auto r = detail::make<T>(a.rows(), a.cols(), std::move(out), {a, s});
    detail::on_backward(r, [a, s](Node<T>& n) {
        const T sv = s.value()[0];
        if (a.requires_grad()) {
            a.node()->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) a.node()->grad[i] += n.grad[i] * sv;
        }
        if (s.requires_grad()) {
            T acc = 0;
            for (std::size_t i = 0; i < n.grad.size(); ++i) acc += n.grad[i] * a.value()[i];
            s.node()->ensure_grad();
            s.node()->grad[0] += acc;
        }
    });
    return r;
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, const Var<T>& s) {
    detail::check(s.size() == 1, "add_scalar: expected 1x1 scalar");
    const T sv = s.value()[0];
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + sv;
    auto r = detail::make<T>(a.rows(), a.cols(), std::move(out), {a, s});
    detail::on_backward(r, [a, s](Node<T>& n) {
        detail::accumulate<T>(a, n.grad);
        if (s.requires_grad()) {
            s.node()->ensure_grad();
            s.node()->grad[0] += std::accumulate(n.grad.begin(), n.grad.end(), T(0));
        }
    });
    return r;
}

// a (m x n) + b (1 x n) broadcast over rows.
template <typename T>
Var<T> add_rowvec(const Var<T>& a, const Var<T>& b) {
    detail::check(b.rows() == 1 && b.cols() == a.cols(), "add_rowvec: shape mismatch");
    std::vector<T> out(a.value());
    const std::size_t c = a.cols();
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] += b.value()[j];
    auto r = detail::make<T>(a.rows(), a.cols(), std::move(out), {a, b});
    detail::on_backward(r, [a, b](Node<T>& n) {
        detail::accumulate<T>(a, n.grad);
        if (b.requires_grad()) {
            b.node()->ensure_grad();
            const std::size_t c = n.cols;
            for (std::size_t i = 0; i < n.rows; ++i)
                for (std::size_t j = 0; j < c; ++j) b.node()->grad[j] += n.grad[i * c + j];
        }
    });
    return r;
}

// a (m x n) scaled per row by v (m x 1).
template <typename T>
Var<T> mul_colvec(const Var<T>& a, const Var<T>& v) {
    detail::check(v.cols() == 1 && v.rows() == a.rows(), "mul_colvec: shape mismatch");
    std::vector<T> out(a.size());
    const std::size_t c = a.cols();
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = a.value()[i * c + j] * v.value()[i];
    auto r = detail::make<T>(a.rows(), a.cols(), std::move(out), {a, v});
    detail::on_backward(r, [a, v](Node<T>& n) {
        const std::size_t c = n.cols;
        if (a.requires_grad()) {
            a.node()->ensure_grad();
            for (std::size_t i = 0; i < n.rows; ++i)
                for (std::size_t j = 0; j < c; ++j)
                    a.node()->grad[i * c + j] += n.grad[i * c + j] * v.value()[i];
        }
        if (v.requires_grad()) {
            v.node()->ensure_grad();
            for (std::size_t i = 0; i < n.rows; ++i) {
                T acc = 0;
                for (std::size_t j = 0; j < c; ++j) acc += n.grad[i * c + j] * a.value()[i * c + j];
                v.node()->grad[i] += acc;
            }
        }
    });
    return r;
}

template <typename T>
Var<T> exp(const Var<T>& a) {
    return detail::unary<T>(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Var<T> log(const Var<T>& a) {
    return detail::unary<T>(a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Var<T> reciprocal(const Var<T>& a) {
    return detail::unary<T>(a, [](T x) { return T(1) / x; }, [](T, T y) { return -y * y; });
}

template <typename T>
Var<T> square(const Var<T>& a) {
    return detail::unary<T>(a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
    return detail::unary<T>(
        a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
    return detail::unary<T>(
        a,
        [](T x) {
            if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
            const T e = std::exp(x);
            return e / (T(1) + e);
        },
        [](T, T y) { return y * (T(1) - y); });
}

// tanh approximation of GELU
template <typename T>
Var<T> gelu(const Var<T>& a) {
    constexpr T k = T(0.7978845608028654);
    constexpr T c = T(0.044715);
    return detail::unary<T>(
        a,
        [](T x) { return T(0.5) * x * (T(1) + std::tanh(k * (x + c * x * x * x))); },
        [](T x, T) {
            const T u = k * (x + c * x * x * x);
            const T t = std::tanh(u);
            const T du = k * (T(1) + T(3) * c * x * x);
            return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du;
        });
}

// ---------------------------------------------------------------- reductions

template <typename T>
Var<T> sum(const Var<T>& a) {
    T s = std::accumulate(a.value().begin(), a.value().end(), T(0));
    auto r = detail::make<T>(1, 1, std::vector<T>{s}, {a});
    detail::on_backward(r, [a](Node<T>& n) {
        a.node()->ensure_grad();
        for (auto& g : a.node()->grad) g += n.grad[0];
    });
    return r;
}

template <typename T>
Var<T> mean(const Var<T>& a) {
    detail::check(a.size() > 0, "mean: empty input");
    return scale<T>(sum(a), T(1) / static_cast<T>(a.size()));
}

// Sum over columns: (m x n) -> (m x 1).
template <typename T>
Var<T> row_sums(const Var<T>& a) {
    std::vector<T> out(a.rows(), T(0));
    const std::size_t c = a.cols();
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < c; ++j) out[i] += a.value()[i * c + j];
    auto r = detail::make<T>(a.rows(), 1, std::move(out), {a});
    detail::on_backward(r, [a](Node<T>& n) {
        a.node()->ensure_grad();
        const std::size_t c = a.cols();
        for (std::size_t i = 0; i < a.rows(); ++i)
            for (std::size_t j = 0; j < c; ++j) a.node()->grad[i * c + j] += n.grad[i];
    });
    return r;
}

// Mean over rows: (m x n) -> (1 x n).
template <typename T>
Var<T> col_means(const Var<T>& a) {
    const std::size_t m = a.rows(), c = a.cols();
    detail::check(m > 0, "col_means: no rows");
    std::vector<T> out(c, T(0));
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j] += a.value()[i * c + j];
    for (auto& v : out) v /= static_cast<T>(m);
    auto r = detail::make<T>(1, c, std::move(out), {a});
    detail::on_backward(r, [a, m, c](Node<T>& n) {
        a.node()->ensure_grad();
        const T inv = T(1) / static_cast<T>(m);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < c; ++j) a.node()->grad[i * c + j] += n.grad[j] * inv;
    });
    return r;
}

// ---------------------------------------------------------------- indexing

template <typename T>
Var<T> slice_rows(const Var<T>& a, std::size_t r0, std::size_t r1) {
    detail::check(r0 <= r1 && r1 <= a.rows(), "slice_rows: out of range");
    const std::size_t c = a.cols();
    std::vector<T> out(a.value().begin() + static_cast<std::ptrdiff_t>(r0 * c),
                       a.value().begin() + static_cast<std::ptrdiff_t>(r1 * c));
    auto r = detail::make<T>(r1 - r0, c, std::move(out), {a});
    detail::on_backward(r, [a, r0, c](Node<T>& n) {
        a.node()->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i) a.node()->grad[r0 * c + i] += n.grad[i];
    });
    return r;
}

template <typename T>
Var<T> slice_cols(const Var<T>& a, std::size_t c0, std::size_t c1) {
    detail::check(c0 <= c1 && c1 <= a.cols(), "slice_cols: out of range");
    const std::size_t w = c1 - c0, c = a.cols();
    std::vector<T> out(a.rows() * w);
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < w; ++j) out[i * w + j] = a.value()[i * c + c0 + j];
    auto r = detail::make<T>(a.rows(), w, std::move(out), {a});
    detail::on_backward(r, [a, c0, w, c](Node<T>& n) {
        a.node()->ensure_grad();
        for (std::size_t i = 0; i < n.rows; ++i)
            for (std::size_t j = 0; j < w; ++j) a.node()->grad[i * c + c0 + j] += n.grad[i * w + j];
    });
    return r;
}

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
    detail::check(!parts.empty(), "concat_rows: no inputs");
    const std::size_t c = parts.front().cols();
    std::size_t rows = 0;
    std::vector<T> out;
    for (const auto& p : parts) {
        detail::check(p.cols() == c, "concat_rows: column mismatch");
        rows += p.rows();
        out.insert(out.end(), p.value().begin(), p.value().end());
    }
    auto r = detail::make<T>(rows, c, std::move(out), parts);
    detail::on_backward(r, [parts](Node<T>& n) {
        std::size_t off = 0;
        for (const auto& p : parts) {
            detail::accumulate<T>(p, std::span<const T>(n.grad.data() + off, p.size()));
            off += p.size();
        }
    });
    return r;
}

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
    detail::check(!parts.empty(), "concat_cols: no inputs");
    const std::size_t m = parts.front().rows();
    std::size_t cols = 0;
    for (const auto& p : parts) {
        detail::check(p.rows() == m, "concat_cols: row mismatch");
        cols += p.cols();
    }
    std::vector<T> out(m * cols);
    std::size_t off = 0;
    for (const auto& p : parts) {
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < p.cols(); ++j) out[i * cols + off + j] = p.value()[i * p.cols() + j];
        off += p.cols();
    }
    auto r = detail::make<T>(m, cols, std::move(out), parts);
    detail::on_backward(r, [parts, m, cols](Node<T>& n) {
        std::size_t off = 0;
        for (const auto& p : parts) {
            if (p.requires_grad()) {
                p.node()->ensure_grad();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < p.cols(); ++j)
                        p.node()->grad[i * p.cols() + j] += n.grad[i * cols + off + j];
            }
            off += p.cols();
        }
    });
    return r;
}

// Row lookup (embedding tables).
template <typename T>
Var<T> gather_rows(const Var<T>& table, std::vector<std::size_t> idx) {
    const std::size_t c = table.cols();
    std::vector<T> out(idx.size() * c);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        detail::check(idx[i] < table.rows(), "gather_rows: index out of range");
        std::copy_n(table.value().begin() + static_cast<std::ptrdiff_t>(idx[i] * c), c,
                    out.begin() + static_cast<std::ptrdiff_t>(i * c));
    }
    auto r = detail::make<T>(idx.size(), c, std::move(out), {table});
    detail::on_backward(r, [table, idx = std::move(idx), c](Node<T>& n) {
        table.node()->ensure_grad();
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t j = 0; j < c; ++j) table.node()->grad[idx[i] * c + j] += n.grad[i * c + j];
    });
    return r;
}

// Picks a[r_k, c_k] for each k into a (K x 1) column.
template <typename T>
Var<T> pick(const Var<T>& a, std::vector<std::pair<std::size_t, std::size_t>> at) {
    const std::size_t c = a.cols();
    std::vector<T> out(at.size());
    for (std::size_t k = 0; k < at.size(); ++k) {
        detail::check(at[k].first < a.rows() && at[k].second < c, "pick: index out of range");
        out[k] = a.value()[at[k].first * c + at[k].second];
    }
    auto r = detail::make<T>(at.size(), 1, std::move(out), {a});
    detail::on_backward(r, [a, at = std::move(at), c](Node<T>& n) {
        a.node()->ensure_grad();
        for (std::size_t k = 0; k < at.size(); ++k) a.node()->grad[at[k].first * c + at[k].second] += n.grad[k];
    });
    return r;
}

// ---------------------------------------------------------------- row-wise ops

// Row-wise log-softmax. `allowed`, when non-empty, marks admissible columns
// (shared by all rows); excluded columns get log-probability -inf and no gradient.
template <typename T>
Var<T> log_softmax_rows(const Var<T>& a, const std::vector<bool>& allowed = {}) {
    const std::size_t m = a.rows(), c = a.cols();
    detail::check(allowed.empty() || allowed.size() == c, "log_softmax_rows: mask size");
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < m; ++i) {
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < c; ++j)
            if (allowed.empty() || allowed[j]) mx = std::max(mx, a.value()[i * c + j]);
        T s = 0;
        for (std::size_t j = 0; j < c; ++j)
            if (allowed.empty() || allowed[j]) s += std::exp(a.value()[i * c + j] - mx);
        const T lse = mx + std::log(s);
        for (std::size_t j = 0; j < c; ++j)
            out[i * c + j] = (allowed.empty() || allowed[j]) ? a.value()[i * c + j] - lse
                                                             : -std::numeric_limits<T>::infinity();
    }
    auto r = detail::make<T>(m, c, std::move(out), {a});
    detail::on_backward(r, [a, m, c](Node<T>& n) {
        a.node()->ensure_grad();
        for (std::size_t i = 0; i < m; ++i) {
            T gs = 0;
            for (std::size_t j = 0; j < c; ++j)
                if (std::isfinite(n.value[i * c + j])) gs += n.grad[i * c + j];
            for (std::size_t j = 0; j < c; ++j) {
                const T y = n.value[i * c + j];
                if (!std::isfinite(y)) continue;
                a.node()->grad[i * c + j] += n.grad[i * c + j] - std::exp(y) * gs;
            }
        }
    });
    return r;
}

// Row-wise softmax with the same column mask semantics (masked entries are 0).
template <typename T>
Var<T> softmax_rows(const Var<T>& a, const std::vector<bool>& allowed = {}) {
    const std::size_t m = a.rows(), c = a.cols();
    detail::check(allowed.empty() || allowed.size() == c, "softmax_rows: mask size");
    std::vector<T> out(a.size(), T(0));
    for (std::size_t i = 0; i < m; ++i) {
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < c; ++j)
            if (allowed.empty() || allowed[j]) mx = std::max(mx, a.value()[i * c + j]);
        T s = 0;
        for (std::size_t j = 0; j < c; ++j)
            if (allowed.empty() || allowed[j]) {
                out[i * c + j] = std::exp(a.value()[i * c + j] - mx);
                s += out[i * c + j];
            }
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= s;
    }
    auto r = detail::make<T>(m, c, std::move(out), {a});
    detail::on_backward(r, [a, m, c](Node<T>& n) {
        a.node()->ensure_grad();
        for (std::size_t i = 0; i < m; ++i) {
            T dot = 0;
            for (std::size_t j = 0; j < c; ++j) dot += n.grad[i * c + j] * n.value[i * c + j];
            for (std::size_t j = 0; j < c; ++j)
                a.node()->grad[i * c + j] += n.value[i * c + j] * (n.grad[i * c + j] - dot);
        }
    });
    return r;
}

// Row-wise layer normalization with affine (1 x n) gain and bias.
template <typename T>
Var<T> layer_norm(const Var<T>& a, const Var<T>& gain, const Var<T>& bias, T eps = T(1e-5)) {
    const std::size_t m = a.rows(), c = a.cols();
    detail::check(gain.size() == c && bias.size() == c, "layer_norm: parameter size");
    std::vector<T> xhat(a.size()), inv_std(m), out(a.size());
    for (std::size_t i = 0; i < m; ++i) {
        T mu = 0;
        for (std::size_t j = 0; j < c; ++j) mu += a.value()[i * c + j];
        mu /= static_cast<T>(c);
        T var = 0;
        for (std::size_t j = 0; j < c; ++j) {
            const T d = a.value()[i * c + j] - mu;
            var += d * d;
        }
        var /= static_cast<T>(c);
        inv_std[i] = T(1) / std::sqrt(var + eps);
        for (std::size_t j = 0; j < c; ++j) {
            xhat[i * c + j] = (a.value()[i * c + j] - mu) * inv_std[i];
            out[i * c + j] = xhat[i * c + j] * gain.value()[j] + bias.value()[j];
        }
    }
    auto r = detail::make<T>(m, c, std::move(out), {a, gain, bias});
    detail::on_backward(r, [a, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std), m,
                            c](Node<T>& n) {
        if (gain.requires_grad()) {
            gain.node()->ensure_grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < c; ++j) gain.node()->grad[j] += n.grad[i * c + j] * xhat[i * c + j];
        }
        if (bias.requires_grad()) {
            bias.node()->ensure_grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < c; ++j) bias.node()->grad[j] += n.grad[i * c + j];
        }
        if (a.requires_grad()) {
            a.node()->ensure_grad();
            std::vector<T> gx(c);
            for (std::size_t i = 0; i < m; ++i) {
                T s1 = 0, s2 = 0;
                for (std::size_t j = 0; j < c; ++j) {
                    gx[j] = n.grad[i * c + j] * gain.value()[j];
                    s1 += gx[j];
                    s2 += gx[j] * xhat[i * c + j];
                }
                const T invc = T(1) / static_cast<T>(c);
                for (std::size_t j = 0; j < c; ++j)
                    a.node()->grad[i * c + j] +=
                        inv_std[i] * (gx[j] - s1 * invc - xhat[i * c + j] * s2 * invc);
            }
        }
    });
    return r;
}

// Row-wise L2 normalization.
template <typename T>
Var<T> l2_normalize_rows(const Var<T>& a, T eps = T(1e-12)) {
    const std::size_t m = a.rows(), c = a.cols();
    std::vector<T> norms(m), out(a.size());
    for (std::size_t i = 0; i < m; ++i) {
        T s = 0;
        for (std::size_t j = 0; j < c; ++j) s += a.value()[i * c + j] * a.value()[i * c + j];
        norms[i] = std::max(std::sqrt(s), eps);
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = a.value()[i * c + j] / norms[i];
    }
    auto r = detail::make<T>(m, c, std::move(out), {a});
    detail::on_backward(r, [a, norms = std::move(norms), m, c](Node<T>& n) {
        a.node()->ensure_grad();
        for (std::size_t i = 0; i < m; ++i) {
            T dot = 0;
            for (std::size_t j = 0; j < c; ++j) dot += n.grad[i * c + j] * n.value[i * c + j];
            for (std::size_t j = 0; j < c; ++j)
                a.node()->grad[i * c + j] += (n.grad[i * c + j] - n.value[i * c + j] * dot) / norms[i];
        }
    });
    return r;
}

// Forward differences of a row-major height x width field stored as a column:
// all horizontal neighbour differences followed by all vertical ones.
template <typename T>
Var<T> grid_diffs(const Var<T>& a, std::size_t height, std::size_t width) {
    detail::check(a.cols() == 1 && a.rows() == height * width, "grid_diffs: expected (H*W) x 1");
    const std::size_t nh = height * (width - 1), nv = (height - 1) * width;
    std::vector<T> out(nh + nv);
    const auto& x = a.value();
    std::size_t k = 0;
    for (std::size_t y = 0; y < height; ++y)
        for (std::size_t c = 0; c + 1 < width; ++c) out[k++] = x[y * width + c + 1] - x[y * width + c];
    for (std::size_t y = 0; y + 1 < height; ++y)
        for (std::size_t c = 0; c < width; ++c) out[k++] = x[(y + 1) * width + c] - x[y * width + c];
    auto r = detail::make<T>(nh + nv, 1, std::move(out), {a});
    detail::on_backward(r, [a, height, width](Node<T>& n) {
        a.node()->ensure_grad();
        auto& g = a.node()->grad;
        std::size_t k = 0;
        for (std::size_t y = 0; y < height; ++y)
            for (std::size_t c = 0; c + 1 < width; ++c, ++k) {
                g[y * width + c + 1] += n.grad[k];
                g[y * width + c] -= n.grad[k];
            }
        for (std::size_t y = 0; y + 1 < height; ++y)
            for (std::size_t c = 0; c < width; ++c, ++k) {
                g[(y + 1) * width + c] += n.grad[k];
                g[y * width + c] -= n.grad[k];
            }
    });
    return r;
}

// ---------------------------------------------------------------- helpers

template <typename T>
bool all_finite(const Var<T>& a) {
    return std::all_of(a.value().begin(), a.value().end(), [](T x) { return std::isfinite(x); });
}

}  // namespace ag
}  // namespace code
