#pragma once

// Named parameter storage, layer helpers and the Adam optimizer.

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "tpie/autodiff.hpp"
#include "tpie/rng.hpp"
#include "tpie/tensor.hpp"

namespace tpie {

/// Parameters keyed by name. Iteration order is the sorted name order, which
/// fixes the order of every reduction over parameters.
template <typename T = float>
class ParameterStore {
   public:
    using Map = std::map<std::string, Tensor<T>>;

    void set(const std::string& name, Tensor<T> value) { params_[name] = std::move(value); }

    const Tensor<T>& get(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) throw ContractError("missing parameter '" + name + "'");
        return it->second;
    }
    Tensor<T>& get(const std::string& name) {
        auto it = params_.find(name);
        if (it == params_.end()) throw ContractError("missing parameter '" + name + "'");
        return it->second;
    }

    bool contains(const std::string& name) const { return params_.count(name) > 0; }
    const Map& all() const { return params_; }
    Map& all() { return params_; }
    bool empty() const { return params_.empty(); }

    std::vector<std::string> names_with_prefix(const std::string& prefix) const {
        std::vector<std::string> out;
        for (const auto& [k, v] : params_)
            if (k.compare(0, prefix.size(), prefix) == 0) out.push_back(k);
        return out;
    }

    std::size_t count(const std::string& prefix = "") const {
        std::size_t n = 0;
        for (const auto& name : names_with_prefix(prefix)) n += params_.at(name).size();
        return n;
    }

    template <typename U>
    ParameterStore<U> cast() const {
        ParameterStore<U> out;
        for (const auto& [k, v] : params_) out.set(k, v.template cast<U>());
        return out;
    }

    friend bool operator==(const ParameterStore& a, const ParameterStore& b) { return a.params_ == b.params_; }

   private:
    Map params_;
};

/// Parameters of one store placed on a tape.
template <typename T>
class Bound {
   public:
    Bound(Tape<T>& tape, const ParameterStore<T>& store, const std::string& prefix, bool trainable = true)
        : tape_(&tape) {
        for (const auto& name : store.names_with_prefix(prefix)) {
            vars_.emplace(name, trainable ? tape.parameter(store.get(name)) : tape.constant(store.get(name)));
        }
    }

    Var<T> operator[](const std::string& name) const {
        auto it = vars_.find(name);
        if (it == vars_.end()) throw ContractError("parameter '" + name + "' is not bound");
        return it->second;
    }

    const std::map<std::string, Var<T>>& vars() const { return vars_; }
    Tape<T>& tape() const { return *tape_; }

    /// Σ‖p‖² over all bound parameters.
    Var<T> squared_norm() const {
        Var<T> acc = tape_->constant(Tensor<T>::scalar(0));
        for (const auto& [name, v] : vars_) acc = add(acc, sum_squares(v));
        return acc;
    }

   private:
    Tape<T>* tape_;
    std::map<std::string, Var<T>> vars_;
};

namespace nn {

/// Stable 64-bit FNV-1a, used to derive per-parameter RNG streams from names.
inline std::uint64_t name_hash(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Uniform(-1/√fan_in, 1/√fan_in) weights and biases; `zero` gives zeros.
template <typename T>
void init_conv(ParameterStore<T>& store, const std::string& name, std::size_t cin, std::size_t cout, std::size_t k,
               std::uint64_t seed, bool zero = false) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(cin * k * k));
    CounterRng rng(seed, name_hash(name));
    Tensor<T> w(Shape{cout, cin, k, k}), b(Shape{cout});
    if (!zero) {
        for (auto& v : w.data()) v = static_cast<T>(rng.uniform(-bound, bound));
        for (auto& v : b.data()) v = static_cast<T>(rng.uniform(-bound, bound));
    }
    store.set(name + ".w", std::move(w));
    store.set(name + ".b", std::move(b));
}

template <typename T>
void init_linear(ParameterStore<T>& store, const std::string& name, std::size_t in, std::size_t out,
                 std::uint64_t seed) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    CounterRng rng(seed, name_hash(name));
    Tensor<T> w(Shape{out, in}), b(Shape{out});
    for (auto& v : w.data()) v = static_cast<T>(rng.uniform(-bound, bound));
    for (auto& v : b.data()) v = static_cast<T>(rng.uniform(-bound, bound));
    store.set(name + ".w", std::move(w));
    store.set(name + ".b", std::move(b));
}

/// 3×3 (or k×k) periodic convolution plus bias.
template <typename T>
Var<T> conv(const Bound<T>& p, const std::string& name, Var<T> x, std::size_t stride = 1) {
    return bias_add(conv2d(x, p[name + ".w"], stride, Padding::wrap), p[name + ".b"]);
}

template <typename T>
Var<T> dense(const Bound<T>& p, const std::string& name, Var<T> x) {
    return linear(x, p[name + ".w"], p[name + ".b"]);
}

}  // namespace nn

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double decay = 1e-8;            // per-step multiplicative decay of lr ...
    std::uint64_t decay_after = 1000;  // ... once this many steps have been taken
};

/// Adam state for one group of parameters. Moments are stored in float32 (the
/// checkpoint precision) and updated in float64 arithmetic.
class Adam {
   public:
    Adam() = default;
    explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

    const AdamConfig& config() const { return cfg_; }
    void set_config(const AdamConfig& cfg) { cfg_ = cfg; }
    std::uint64_t steps() const { return steps_; }
    void set_steps(std::uint64_t s) { steps_ = s; }

    /// Learning rate applied at the next step.
    double current_lr() const {
        const std::uint64_t next = steps_ + 1;
        if (next <= cfg_.decay_after) return cfg_.lr;
        return cfg_.lr * std::pow(1.0 - cfg_.decay, static_cast<double>(next - cfg_.decay_after));
    }

    /// One update of every parameter in `names` from the matching gradients.
    template <typename T, typename G>
    void step(ParameterStore<T>& store, const std::vector<std::string>& names, const G& grad_of) {
        const double lr = current_lr();
        ++steps_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
        for (const auto& name : names) {
            auto& p = store.get(name);
            const Tensor<T>& g = grad_of(name);
            require_shape(g.shape(), p.shape(), "Adam::step");
            auto& m = moment(m_, name, p.shape());
            auto& v = moment(v_, name, p.shape());
            for (std::size_t i = 0; i < p.size(); ++i) {
                const double gi = static_cast<double>(g[i]);
                const double mi = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
                const double vi = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
                m[i] = static_cast<float>(mi);
                v[i] = static_cast<float>(vi);
                const double upd = lr * (mi / bc1) / (std::sqrt(vi / bc2) + cfg_.eps);
                p[i] = static_cast<T>(static_cast<double>(p[i]) - upd);
            }
        }
    }

    std::map<std::string, Tensor<float>>& first_moments() { return m_; }
    std::map<std::string, Tensor<float>>& second_moments() { return v_; }
    const std::map<std::string, Tensor<float>>& first_moments() const { return m_; }
    const std::map<std::string, Tensor<float>>& second_moments() const { return v_; }

    friend bool operator==(const Adam& a, const Adam& b) {
        return a.steps_ == b.steps_ && a.m_ == b.m_ && a.v_ == b.v_;
    }

   private:
    static Tensor<float>& moment(std::map<std::string, Tensor<float>>& mm, const std::string& name,
                                  const Shape& shape) {
        auto it = mm.find(name);
        if (it == mm.end()) it = mm.emplace(name, Tensor<float>(shape)).first;
        return it->second;
    }

    AdamConfig cfg_;
    std::uint64_t steps_ = 0;
    std::map<std::string, Tensor<float>> m_, v_;
};

}  // namespace tpie
