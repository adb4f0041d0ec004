#pragma once

// Shared helpers for the unit and acceptance suites: finite-difference
// gradient oracles and band-limited random fields.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <vector>

#include "tpie/autodiff.hpp"
#include "tpie/diffeo.hpp"
#include "tpie/rng.hpp"

namespace tpie::testing {

using BuildFn = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

struct GradCheck {
    double max_rel_error = 0.0;  // per input: ‖analytic − numeric‖∞ / ‖numeric‖∞
    double max_abs_numeric = 0.0;
};

/// Compares reverse-mode gradients of `build` with central differences for
/// every element of every input.
inline GradCheck check_gradients(const std::vector<Tensor<double>>& inputs, const BuildFn& build,
                                 double step = 1e-5) {
    auto eval = [&](const std::vector<Tensor<double>>& xs) {
        Tape<double> tape;
        std::vector<Var<double>> vars;
        for (const auto& x : xs) vars.push_back(tape.parameter(x));
        return build(tape, vars).value().item();
    };

    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (const auto& x : inputs) vars.push_back(tape.parameter(x));
    const auto loss = build(tape, vars);
    const auto grads = tape.backward(loss);

    GradCheck result;
    auto work = inputs;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        double err = 0.0, scale = 0.0;
        for (std::size_t i = 0; i < inputs[k].size(); ++i) {
            const double orig = work[k][i];
            work[k][i] = orig + step;
            const double fp = eval(work);
            work[k][i] = orig - step;
            const double fm = eval(work);
            work[k][i] = orig;
            const double numeric = (fp - fm) / (2 * step);
            err = std::max(err, std::abs(numeric - grads[vars[k]][i]));
            scale = std::max(scale, std::abs(numeric));
        }
        result.max_abs_numeric = std::max(result.max_abs_numeric, scale);
        result.max_rel_error = std::max(result.max_rel_error, err / std::max(scale, 1e-12));
    }
    return result;
}

/// Weighted sum Σ r_i·y_i with fixed random weights, so every output element
/// contributes a distinct cotangent.
inline Var<double> random_projection(Var<double> y, std::uint64_t seed) {
    CounterRng rng(seed, 99);
    auto w = rng.normal_tensor<double>(y.shape());
    return sum(mul(y, y.tape->constant(std::move(w))));
}

inline Tensor<double> random_tensor(Shape shape, std::uint64_t seed, double scale = 1.0) {
    CounterRng rng(seed);
    Tensor<double> t(std::move(shape));
    for (auto& v : t.data()) v = scale * rng.normal();
    return t;
}

/// Random periodic field built from Fourier modes with |k|∞ <= max_freq
/// (no constant mode), rescaled so the largest vector norm equals max_norm.
/// Also usable as an analytic function of continuous position.
struct BandLimitedField {
    struct Mode {
        int ky, kx;
        double amp, phase;
    };
    std::size_t n = 32;
    std::vector<std::vector<Mode>> modes;  // per component
    double factor = 1.0;

    BandLimitedField(std::size_t extent, int max_freq, double max_norm, std::uint64_t seed) : n(extent) {
        CounterRng rng(seed, 7);
        modes.resize(2);
        for (auto& comp : modes) {
            for (int ky = -max_freq; ky <= max_freq; ++ky)
                for (int kx = -max_freq; kx <= max_freq; ++kx) {
                    if (ky == 0 && kx == 0) continue;
                    comp.push_back({ky, kx, rng.normal(), rng.uniform(0.0, 2 * std::numbers::pi)});
                }
        }
        double best = 0;
        for (std::size_t y = 0; y < n; ++y)
            for (std::size_t x = 0; x < n; ++x) {
                const auto v = raw(double(y), double(x));
                best = std::max(best, std::hypot(v[0], v[1]));
            }
        factor = max_norm / best;
    }

    std::array<double, 2> raw(double y, double x) const {
        std::array<double, 2> out{};
        for (std::size_t c = 0; c < 2; ++c)
            for (const auto& m : modes[c])
                out[c] += m.amp * std::cos(2 * std::numbers::pi * (m.ky * y + m.kx * x) / double(n) + m.phase);
        return out;
    }

    std::array<double, 2> at(double y, double x) const {
        auto v = raw(y, x);
        return {v[0] * factor, v[1] * factor};
    }

    template <typename T>
    VelocityField<T> sampled() const {
        Grid g({n, n});
        VelocityField<T> v(g);
        for (std::size_t y = 0; y < n; ++y)
            for (std::size_t x = 0; x < n; ++x) {
                const auto a = at(double(y), double(x));
                v.components[y * n + x] = static_cast<T>(a[0]);
                v.components[n * n + y * n + x] = static_cast<T>(a[1]);
            }
        return v;
    }
};

/// Explicit Euler integration of dphi/dt = v(phi) from every grid point,
/// with v multilinearly interpolated between grid samples (periodic).
inline Tensor<double> euler_flow(const VelocityField<double>& v, int substeps) {
    const auto g = v.grid.layout();
    const std::size_t n = g.count, d = g.dim;
    Tensor<double> pos(v.components.shape());
    for (std::size_t a = 0; a < d; ++a)
        for (std::size_t p = 0; p < n; ++p) pos[a * n + p] = double(g.coord(p, a));
    const double h = 1.0 / substeps;
    for (int s = 0; s < substeps; ++s) {
        for (std::size_t p = 0; p < n; ++p) {
            std::array<double, 3> x{};
            for (std::size_t a = 0; a < d; ++a) x[a] = pos[a * n + p];
            const auto st = detail::make_stencil<double>(g, std::span<const double, 3>(x), false);
            for (std::size_t a = 0; a < d; ++a) {
                double vel = 0;
                for (std::size_t k = 0; k < st.corners; ++k) vel += st.weight[k] * v.components[a * n + st.offset[k]];
                pos[a * n + p] += h * vel;
            }
        }
    }
    for (std::size_t a = 0; a < d; ++a)
        for (std::size_t p = 0; p < n; ++p)
            pos[a * n + p] = detail::wrap_offset(pos[a * n + p] - double(g.coord(p, a)), g.ext[a]);
    return pos;
}

}  // namespace tpie::testing
