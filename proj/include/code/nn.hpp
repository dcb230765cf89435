#pragma once

// Parameter registry and the transformer building blocks shared by the
// image and text encoders.

#include "code/rng.hpp"
#include "code/tensor.hpp"

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace code {

template <typename T>
class ParamStore {
public:
    struct Entry {
        std::string name;
        ag::Var<T> var;
        std::string group;
    };

    // Registers a trainable leaf. Names must be unique.
    ag::Var<T> add(const std::string& name, std::size_t rows, std::size_t cols, std::vector<T> init,
                   const std::string& group) {
        if (index_.count(name)) throw Error("duplicate parameter name: " + name);
        auto v = ag::leaf<T>(rows, cols, std::move(init));
        index_[name] = entries_.size();
        entries_.push_back({name, v, group});
        return v;
    }

    ag::Var<T> normal(const std::string& name, std::size_t rows, std::size_t cols, double stddev,
                      Rng& rng, const std::string& group) {
        std::vector<T> init(rows * cols);
        for (auto& x : init) x = static_cast<T>(rng.normal(0.0, stddev));
        return add(name, rows, cols, std::move(init), group);
    }

    ag::Var<T> filled(const std::string& name, std::size_t rows, std::size_t cols, T value,
                      const std::string& group) {
        return add(name, rows, cols, std::vector<T>(rows * cols, value), group);
    }

    const std::vector<Entry>& entries() const { return entries_; }
    std::vector<Entry>& entries() { return entries_; }

    ag::Var<T> get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw Error("unknown parameter: " + name);
        return entries_[it->second].var;
    }
    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    // Freezes or unfreezes every parameter whose group is `group`.
    void set_trainable(const std::string& group, bool trainable) {
        for (auto& e : entries_)
            if (e.group == group) e.var.node()->requires_grad = trainable;
    }

    std::vector<std::string> trainable_names() const {
        std::vector<std::string> out;
        for (const auto& e : entries_)
            if (e.var.requires_grad()) out.push_back(e.name);
        return out;
    }

    std::size_t count(bool only_trainable = false) const {
        std::size_t n = 0;
        for (const auto& e : entries_)
            if (!only_trainable || e.var.requires_grad()) n += e.var.size();
        return n;
    }

    void zero_grad() {
        for (auto& e : entries_) e.var.node()->grad.clear();
    }

private:
    std::vector<Entry> entries_;
    std::map<std::string, std::size_t> index_;
};

// Forward-pass context: train mode enables dropout.
struct Mode {
    bool train = false;
    double dropout = 0.0;
    Rng* rng = nullptr;
};

namespace nn {

template <typename T>
ag::Var<T> dropout(const ag::Var<T>& x, const Mode& mode) {
    if (!mode.train || mode.dropout <= 0.0 || mode.rng == nullptr) return x;
    const double keep = 1.0 - mode.dropout;
    std::vector<T> m(x.size());
    for (auto& v : m) v = mode.rng->uniform() < keep ? static_cast<T>(1.0 / keep) : T(0);
    return ag::mul(x, ag::constant<T>(x.rows(), x.cols(), std::move(m)));
}

template <typename T>
struct Linear {
    ag::Var<T> weight;  // in x out
    ag::Var<T> bias;    // 1 x out

    Linear() = default;
    Linear(ParamStore<T>& ps, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
           const std::string& group, bool with_bias = true) {
        weight = ps.normal(name + ".weight", in, out, 1.0 / std::sqrt(static_cast<double>(in)), rng, group);
        if (with_bias) bias = ps.filled(name + ".bias", 1, out, T(0), group);
    }

    ag::Var<T> operator()(const ag::Var<T>& x) const {
        auto y = ag::matmul(x, weight);
        return bias.defined() ? ag::add_rowvec(y, bias) : y;
    }
};

template <typename T>
struct LayerNorm {
    ag::Var<T> gain, bias;

    LayerNorm() = default;
    LayerNorm(ParamStore<T>& ps, const std::string& name, std::size_t dim, const std::string& group) {
        gain = ps.filled(name + ".gain", 1, dim, T(1), group);
        bias = ps.filled(name + ".bias", 1, dim, T(0), group);
    }

    ag::Var<T> operator()(const ag::Var<T>& x) const { return ag::layer_norm(x, gain, bias); }
};

template <typename T>
struct MultiHeadAttention {
    Linear<T> q, k, v, out;
    std::size_t heads = 1;

    MultiHeadAttention() = default;
    MultiHeadAttention(ParamStore<T>& ps, const std::string& name, std::size_t dim, std::size_t n_heads,
                       Rng& rng, const std::string& group)
        : heads(n_heads) {
        if (dim % n_heads != 0) throw Error("attention width not divisible by head count");
        q = Linear<T>(ps, name + ".q", dim, dim, rng, group);
        k = Linear<T>(ps, name + ".k", dim, dim, rng, group);
        v = Linear<T>(ps, name + ".v", dim, dim, rng, group);
        out = Linear<T>(ps, name + ".out", dim, dim, rng, group);
    }

    // `key_valid` (empty = all valid) excludes padded keys from every query.
    ag::Var<T> operator()(const ag::Var<T>& x, const std::vector<bool>& key_valid) const {
        const std::size_t dim = x.cols(), hd = dim / heads;
        auto qx = q(x), kx = k(x), vx = v(x);
        const T s = T(1) / std::sqrt(static_cast<T>(hd));
        std::vector<ag::Var<T>> outs;
        outs.reserve(heads);
        for (std::size_t h = 0; h < heads; ++h) {
            auto qh = ag::slice_cols(qx, h * hd, (h + 1) * hd);
            auto kh = ag::slice_cols(kx, h * hd, (h + 1) * hd);
            auto vh = ag::slice_cols(vx, h * hd, (h + 1) * hd);
            auto att = ag::softmax_rows(ag::scale(ag::matmul_nt(qh, kh), s), key_valid);
            outs.push_back(ag::matmul(att, vh));
        }
        return out(heads == 1 ? outs.front() : ag::concat_cols(outs));
    }
};

// Pre-norm transformer block.
template <typename T>
struct TransformerBlock {
    LayerNorm<T> ln1, ln2;
    MultiHeadAttention<T> attn;
    Linear<T> fc1, fc2;

    TransformerBlock() = default;
    TransformerBlock(ParamStore<T>& ps, const std::string& name, std::size_t dim, std::size_t heads,
                     std::size_t mlp_dim, Rng& rng, const std::string& group)
        : ln1(ps, name + ".ln1", dim, group),
          ln2(ps, name + ".ln2", dim, group),
          attn(ps, name + ".attn", dim, heads, rng, group),
          fc1(ps, name + ".fc1", dim, mlp_dim, rng, group),
          fc2(ps, name + ".fc2", mlp_dim, dim, rng, group) {}

    ag::Var<T> operator()(const ag::Var<T>& x, const std::vector<bool>& key_valid, const Mode& mode) const {
        auto h = ag::add(x, dropout(attn(ln1(x), key_valid), mode));
        return ag::add(h, dropout(fc2(ag::gelu(fc1(ln2(h)))), mode));
    }
};

}  // namespace nn
}  // namespace code
