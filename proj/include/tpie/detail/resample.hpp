#pragma once

// Periodic multilinear resampling kernels on 2-D and 3-D grids.
//
// Fields are stored channel-major over a flattened spatial grid: value of
// channel c at flat point p lives at `field[c * n + p]`. A displacement field
// has one channel per spatial axis, in spatial-axis order (axis 0 is the
// slowest-varying one). Every routine here is a pure loop with a fixed
// accumulation order so results are bitwise reproducible.

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>

#include "tpie/tensor.hpp"

namespace tpie::detail {

struct GridExtents {
    std::size_t dim = 0;
    std::array<std::size_t, 3> ext{1, 1, 1};
    std::array<std::size_t, 3> stride{1, 1, 1};
    std::size_t count = 0;

    static GridExtents from(std::span<const std::size_t> extents) {
        require(extents.size() == 2 || extents.size() == 3,
                "spatial grids must be 2-D or 3-D, got " + std::to_string(extents.size()) + "-D");
        GridExtents g;
        g.dim = extents.size();
        for (std::size_t a = 0; a < g.dim; ++a) g.ext[a] = extents[a];
        std::size_t s = 1;
        for (std::size_t a = g.dim; a-- > 0;) {
            g.stride[a] = s;
            s *= g.ext[a];
        }
        g.count = s;
        return g;
    }

    /// Integer coordinate of flat point p along axis a.
    std::size_t coord(std::size_t p, std::size_t a) const { return (p / stride[a]) % ext[a]; }
};

inline std::int64_t wrap_index(std::int64_t i, std::int64_t n) {
    std::int64_t r = i % n;
    return r < 0 ? r + n : r;
}

/// Wraps a periodic offset into (-n/2, n/2].
template <typename T>
T wrap_offset(T v, std::size_t n) {
    const T len = static_cast<T>(n);
    const T half = len / 2;
    T r = std::fmod(v, len);
    if (r > half) r -= len;
    if (r <= -half) r += len;
    return r;
}

/// Corner offsets and weights of the multilinear stencil around a point.
template <typename T>
struct Stencil {
    std::size_t corners = 0;
    std::array<std::size_t, 8> offset{};
    std::array<T, 8> weight{};
    // d weight / d position along each axis, per corner.
    std::array<std::array<T, 8>, 3> dweight{};
};

template <typename T>
Stencil<T> make_stencil(const GridExtents& g, std::span<const T, 3> pos, bool with_derivative) {
    std::array<std::size_t, 3> lo{}, hi{};
    std::array<T, 3> frac{};
    for (std::size_t a = 0; a < g.dim; ++a) {
        const T fl = std::floor(pos[a]);
        frac[a] = pos[a] - fl;
        const auto n = static_cast<std::int64_t>(g.ext[a]);
        const auto i0 = wrap_index(static_cast<std::int64_t>(fl), n);
        lo[a] = static_cast<std::size_t>(i0);
        hi[a] = static_cast<std::size_t>(i0 + 1 == n ? 0 : i0 + 1);
    }
    Stencil<T> s;
    s.corners = std::size_t{1} << g.dim;
    for (std::size_t c = 0; c < s.corners; ++c) {
        std::size_t off = 0;
        T w = 1;
        for (std::size_t a = 0; a < g.dim; ++a) {
            const bool upper = (c >> (g.dim - 1 - a)) & 1U;
            off += (upper ? hi[a] : lo[a]) * g.stride[a];
            w *= upper ? frac[a] : T(1) - frac[a];
        }
        s.offset[c] = off;
        s.weight[c] = w;
        if (with_derivative) {
            for (std::size_t k = 0; k < g.dim; ++k) {
                T dw = 1;
                for (std::size_t a = 0; a < g.dim; ++a) {
                    const bool upper = (c >> (g.dim - 1 - a)) & 1U;
                    if (a == k) {
                        dw *= upper ? T(1) : T(-1);
                    } else {
                        dw *= upper ? frac[a] : T(1) - frac[a];
                    }
                }
                s.dweight[k][c] = dw;
            }
        }
    }
    return s;
}

template <typename T>
std::array<T, 3> sample_position(const GridExtents& g, const T* disp, std::size_t p) {
    std::array<T, 3> pos{};
    for (std::size_t a = 0; a < g.dim; ++a) {
        pos[a] = static_cast<T>(g.coord(p, a)) + disp[a * g.count + p];
    }
    return pos;
}

/// out(x) = field(x + disp(x)) for every channel; periodic on every axis.
template <typename T>
void resample_forward(const GridExtents& g, std::size_t channels, const T* field, const T* disp, T* out) {
    const std::size_t n = g.count;
    for (std::size_t p = 0; p < n; ++p) {
        const auto pos = sample_position(g, disp, p);
        const auto st = make_stencil<T>(g, std::span<const T, 3>(pos), false);
        for (std::size_t c = 0; c < channels; ++c) {
            const T* f = field + c * n;
            T acc = 0;
            for (std::size_t k = 0; k < st.corners; ++k) acc += st.weight[k] * f[st.offset[k]];
            out[c * n + p] = acc;
        }
    }
}

/// Accumulates gradients of resample_forward. Either output pointer may be null.
template <typename T>
void resample_backward(const GridExtents& g, std::size_t channels, const T* field, const T* disp,
                       const T* grad_out, T* grad_field, T* grad_disp) {
    const std::size_t n = g.count;
    for (std::size_t p = 0; p < n; ++p) {
        const auto pos = sample_position(g, disp, p);
        const auto st = make_stencil<T>(g, std::span<const T, 3>(pos), grad_disp != nullptr);
        for (std::size_t c = 0; c < channels; ++c) {
            const T go = grad_out[c * n + p];
            if (grad_field) {
                T* gf = grad_field + c * n;
                for (std::size_t k = 0; k < st.corners; ++k) gf[st.offset[k]] += st.weight[k] * go;
            }
            if (grad_disp) {
                const T* f = field + c * n;
                for (std::size_t a = 0; a < g.dim; ++a) {
                    T d = 0;
                    for (std::size_t k = 0; k < st.corners; ++k) d += st.dweight[a][k] * f[st.offset[k]];
                    grad_disp[a * n + p] += d * go;
                }
            }
        }
    }
}

/// Periodic central difference along spatial axis `axis`, half-step scaled.
template <typename T>
void central_diff_forward(const GridExtents& g, std::size_t channels, std::size_t axis, const T* in, T* out) {
    const std::size_t n = g.count;
    const std::size_t ext = g.ext[axis];
    const std::size_t st = g.stride[axis];
    for (std::size_t c = 0; c < channels; ++c) {
        const T* f = in + c * n;
        T* o = out + c * n;
        for (std::size_t p = 0; p < n; ++p) {
            const std::size_t i = g.coord(p, axis);
            const std::size_t base = p - i * st;
            const std::size_t ip = (i + 1 == ext ? 0 : i + 1);
            const std::size_t im = (i == 0 ? ext - 1 : i - 1);
            o[p] = (f[base + ip * st] - f[base + im * st]) / T(2);
        }
    }
}

template <typename T>
void central_diff_backward(const GridExtents& g, std::size_t channels, std::size_t axis, const T* grad_out,
                           T* grad_in) {
    const std::size_t n = g.count;
    const std::size_t ext = g.ext[axis];
    const std::size_t st = g.stride[axis];
    for (std::size_t c = 0; c < channels; ++c) {
        const T* go = grad_out + c * n;
        T* gi = grad_in + c * n;
        for (std::size_t p = 0; p < n; ++p) {
            const std::size_t i = g.coord(p, axis);
            const std::size_t base = p - i * st;
            const std::size_t ip = (i + 1 == ext ? 0 : i + 1);
            const std::size_t im = (i == 0 ? ext - 1 : i - 1);
            gi[base + ip * st] += go[p] / T(2);
            gi[base + im * st] -= go[p] / T(2);
        }
    }
}

}  // namespace tpie::detail
