#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "dyad/tape.hpp"
#include "dyad/tensor.hpp"

namespace dyad {

struct ParamEntry {
    std::string name;
    Tensor value;
    bool requires_grad = true;
};

// Ordered name -> tensor map; iteration order is insertion order so every
// walk over the parameters is deterministic.
class ParamStore {
public:
    std::size_t add(std::string name, Tensor value, bool requires_grad = true) {
        if (index_.count(name)) throw std::invalid_argument("param store: duplicate name " + name);
        index_[name] = entries_.size();
        entries_.push_back({std::move(name), std::move(value), requires_grad});
        return entries_.size() - 1;
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }
    Tensor& at(const std::string& name) { return entries_[index_at(name)].value; }
    const Tensor& at(const std::string& name) const { return entries_[index_at(name)].value; }
    std::size_t index_at(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("param store: no entry " + name);
        return it->second;
    }

    std::size_t size() const { return entries_.size(); }
    ParamEntry& entry(std::size_t i) { return entries_[i]; }
    const ParamEntry& entry(std::size_t i) const { return entries_[i]; }
    auto begin() { return entries_.begin(); }
    auto end() { return entries_.end(); }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }

    std::size_t total_scalars() const {
        std::size_t n = 0;
        for (const auto& e : entries_) n += e.value.numel();
        return n;
    }

private:
    std::vector<ParamEntry> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Binding a store into a tape. Values may be overridden (the
// finite-difference driver perturbs coordinates through this hook).

template <typename T>
struct BoundParams {
    std::vector<typename TapeT<T>::Id> ids;  // aligned with store order
    const ParamStore* store = nullptr;

    typename TapeT<T>::Id id_of(const std::string& name) const {
        return ids[store->index_at(name)];
    }
};

template <typename T>
BoundParams<T> bind_params(TapeT<T>& tape, const ParamStore& store, bool trainable,
                           const std::vector<TensorT<T>>* override_values = nullptr) {
    BoundParams<T> bound;
    bound.store = &store;
    bound.ids.reserve(store.size());
    for (std::size_t i = 0; i < store.size(); ++i) {
        const auto& e = store.entry(i);
        TensorT<T> v = override_values ? (*override_values)[i] : e.value.template cast<T>();
        bound.ids.push_back(tape.input(std::move(v), trainable && e.requires_grad));
    }
    return bound;
}

template <typename T>
std::vector<TensorT<T>> param_values(const ParamStore& store) {
    std::vector<TensorT<T>> out;
    out.reserve(store.size());
    for (const auto& e : store) out.push_back(e.value.template cast<T>());
    return out;
}

// Gradients aligned with the store; parameters the loss never reached get
// zeros of the right shape.
template <typename T>
std::vector<TensorT<T>> collect_grads(const TapeT<T>& tape, const BoundParams<T>& bound) {
    std::vector<TensorT<T>> grads;
    grads.reserve(bound.ids.size());
    for (auto id : bound.ids) grads.push_back(tape.grad_or_zero(id));
    return grads;
}

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    float lr = 1e-4f;
};

struct AdamState {
    AdamConfig cfg;
    std::vector<Tensor> m;
    std::vector<Tensor> v;
    std::int64_t step = 0;

    static AdamState init(const ParamStore& store, AdamConfig cfg = {}) {
        AdamState s;
        s.cfg = cfg;
        for (const auto& e : store) {
            s.m.push_back(Tensor::zeros(e.value.shape));
            s.v.push_back(Tensor::zeros(e.value.shape));
        }
        return s;
    }
};

// Bias-corrected Adam update in place; advances state.step by exactly 1.
inline void adam_step(ParamStore& store, const std::vector<Tensor>& grads, AdamState& state) {
    if (grads.size() != store.size() || state.m.size() != store.size()) {
        throw std::invalid_argument("adam_step: gradient count mismatch");
    }
    state.step += 1;
    const double b1 = state.cfg.beta1, b2 = state.cfg.beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < store.size(); ++i) {
        auto& e = store.entry(i);
        if (!e.requires_grad) continue;
        if (!grads[i].same_shape(e.value)) {
            throw std::invalid_argument("adam_step: shape mismatch for " + e.name);
        }
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (std::size_t j = 0; j < e.value.numel(); ++j) {
            const double g = grads[i].data[j];
            m.data[j] = static_cast<float>(b1 * m.data[j] + (1.0 - b1) * g);
            v.data[j] = static_cast<float>(b2 * v.data[j] + (1.0 - b2) * g * g);
            const double mhat = m.data[j] / bc1;
            const double vhat = v.data[j] / bc2;
            e.value.data[j] -= static_cast<float>(state.cfg.lr * mhat / (std::sqrt(vhat) + state.cfg.eps));
        }
    }
}

// ---------------------------------------------------------------------------
// Central finite differences over a flat double parameter vector; the
// independent oracle for every gradient in the project.

inline std::vector<Tensor64> finite_diff_grad(
    const std::function<double(const std::vector<Tensor64>&)>& f,
    std::vector<Tensor64> theta,
    double step = 1e-5) {
    if (step <= 0.0) throw std::invalid_argument("finite_diff_grad: step must be > 0");
    std::vector<Tensor64> grads;
    grads.reserve(theta.size());
    for (const auto& t : theta) grads.push_back(Tensor64::zeros(t.shape));
    for (std::size_t p = 0; p < theta.size(); ++p) {
        for (std::size_t j = 0; j < theta[p].numel(); ++j) {
            const double orig = theta[p].data[j];
            theta[p].data[j] = orig + step;
            const double fp = f(theta);
            theta[p].data[j] = orig - step;
            const double fm = f(theta);
            theta[p].data[j] = orig;
            if (!std::isfinite(fp) || !std::isfinite(fm)) {
                throw std::runtime_error("finite_diff_grad: non-finite objective");
            }
            grads[p].data[j] = (fp - fm) / (2.0 * step);
        }
    }
    return grads;
}

// Relative error between analytic and finite-difference gradients:
// ||a - f|| / max(||f||, floor), taken over the concatenated vector.
inline double grad_rel_err(const std::vector<Tensor64>& analytic,
                           const std::vector<Tensor64>& fd,
                           double floor = 1e-8) {
    double num = 0.0, den = 0.0;
    for (std::size_t p = 0; p < analytic.size(); ++p) {
        for (std::size_t j = 0; j < analytic[p].numel(); ++j) {
            const double d = analytic[p].data[j] - fd[p].data[j];
            num += d * d;
            den += fd[p].data[j] * fd[p].data[j];
        }
    }
    return std::sqrt(num) / std::max(std::sqrt(den), floor);
}

}  // namespace dyad
