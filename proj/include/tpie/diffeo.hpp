#pragma once

// Stationary-velocity-field diffeomorphisms on a periodic grid.
//
// A deformation stores displacements u with phi(x) = x + u(x). Vector
// components are ordered like the spatial axes of the grid (component 0 is
// the displacement along axis 0, i.e. rows for 2-D images). Grid spacing is
// one unit and every axis wraps around.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "tpie/autodiff.hpp"
#include "tpie/detail/resample.hpp"
#include "tpie/tensor.hpp"

namespace tpie {

struct Grid {
    std::vector<std::size_t> extents;

    explicit Grid(std::vector<std::size_t> ext) : extents(std::move(ext)) {
        require(extents.size() == 2 || extents.size() == 3, "Grid: dimension must be 2 or 3");
        for (auto e : extents) require(e >= 4, "Grid: every extent must be >= 4, got " + shape_str(extents));
    }

    std::size_t dim() const { return extents.size(); }
    std::size_t count() const { return numel(extents); }

    /// Shape of a d-component vector field on this grid.
    Shape vector_shape() const {
        Shape s{dim()};
        s.insert(s.end(), extents.begin(), extents.end());
        return s;
    }

    detail::GridExtents layout() const { return detail::GridExtents::from(extents); }

    friend bool operator==(const Grid&, const Grid&) = default;
};

template <typename T = float>
struct VelocityField {
    Grid grid;
    Tensor<T> components;  // [d, spatial...]

    explicit VelocityField(Grid g) : grid(std::move(g)), components(grid.vector_shape()) {}

    VelocityField(Grid g, Tensor<T> c) : grid(std::move(g)), components(std::move(c)) {
        require_shape(components.shape(), grid.vector_shape(), "VelocityField");
    }

    /// Largest vector magnitude over the grid.
    T max_norm() const {
        const std::size_t n = grid.count();
        T best = 0;
        for (std::size_t p = 0; p < n; ++p) {
            T s = 0;
            for (std::size_t a = 0; a < grid.dim(); ++a) s += components[a * n + p] * components[a * n + p];
            best = std::max(best, std::sqrt(s));
        }
        return best;
    }

    VelocityField negated() const {
        VelocityField out(grid, components);
        for (auto& v : out.components.data()) v = -v;
        return out;
    }
};

template <typename T = float>
struct DeformationField {
    Grid grid;
    Tensor<T> displacement;  // [d, spatial...]
    bool from_exponential = false;

    explicit DeformationField(Grid g) : grid(std::move(g)), displacement(grid.vector_shape()) {}

    DeformationField(Grid g, Tensor<T> u, bool from_exp = false)
        : grid(std::move(g)), displacement(std::move(u)), from_exponential(from_exp) {
        require_shape(displacement.shape(), grid.vector_shape(), "DeformationField");
    }

    static DeformationField identity(Grid g) { return DeformationField(std::move(g)); }

    static DeformationField translation(Grid g, std::span<const T> shift) {
        require(shift.size() == g.dim(), "translation: vector has wrong dimension");
        DeformationField out(std::move(g));
        const std::size_t n = out.grid.count();
        for (std::size_t a = 0; a < out.grid.dim(); ++a)
            std::fill_n(out.displacement.ptr() + a * n, n, shift[a]);
        return out;
    }

    /// Wraps every component into (-extent/2, extent/2].
    void wrap() {
        const std::size_t n = grid.count();
        for (std::size_t a = 0; a < grid.dim(); ++a)
            for (std::size_t p = 0; p < n; ++p)
                displacement[a * n + p] = detail::wrap_offset(displacement[a * n + p], grid.extents[a]);
    }
};

struct TopologyReport {
    double min_det = 0.0;
    double frac_nonpositive = 0.0;
};

/// Smallest K >= 4 with max|v| / 2^K <= 0.5 grid units.
template <typename T>
int min_squarings(const VelocityField<T>& v) {
    const double m = static_cast<double>(v.max_norm());
    int k = 4;
    while (m / std::ldexp(1.0, k) > 0.5) ++k;
    return k;
}

namespace detail {

/// One self-composition u <- u + u∘(x + u) on a single field.
template <typename T>
void square_in_place(const GridExtents& g, Tensor<T>& u, Tensor<T>& scratch) {
    resample_forward(g, g.dim, u.ptr(), u.ptr(), scratch.ptr());
    for (std::size_t i = 0; i < u.size(); ++i) u[i] = u[i] + scratch[i];
}

}  // namespace detail

/// Group exponential of v by scaling and squaring with K squarings.
template <typename T>
DeformationField<T> exponentiate(const VelocityField<T>& v, int squarings) {
    require(squarings >= 0, "exponentiate: squarings must be >= 0");
    if (!v.components.all_finite()) throw ContractError("exponentiate: velocity field has non-finite values");
    const auto g = v.grid.layout();
    const T s = static_cast<T>(std::ldexp(1.0, -squarings));
    Tensor<T> u(v.components.shape());
    for (std::size_t i = 0; i < u.size(); ++i) u[i] = v.components[i] * s;
    Tensor<T> scratch(u.shape());
    for (int k = 0; k < squarings; ++k) detail::square_in_place(g, u, scratch);
    DeformationField<T> out(v.grid, std::move(u), true);
    out.wrap();
    return out;
}

template <typename T>
DeformationField<T> exponentiate(const VelocityField<T>& v) {
    if (!v.components.all_finite()) throw ContractError("exponentiate: velocity field has non-finite values");
    return exponentiate(v, min_squarings(v));
}

/// Inverse map of exp(v), which for a stationary field is exp(-v).
template <typename T>
DeformationField<T> invert(const VelocityField<T>& v, int squarings) {
    return exponentiate(v.negated(), squarings);
}

template <typename T>
DeformationField<T> invert(const VelocityField<T>& v) {
    return exponentiate(v.negated());
}

/// (outer ∘ inner)(x) = outer(inner(x)).
template <typename T>
DeformationField<T> compose(const DeformationField<T>& outer, const DeformationField<T>& inner) {
    require(outer.grid == inner.grid, "compose: deformations live on different grids");
    const auto g = outer.grid.layout();
    Tensor<T> u(inner.displacement.shape());
    detail::resample_forward(g, g.dim, outer.displacement.ptr(), inner.displacement.ptr(), u.ptr());
    for (std::size_t i = 0; i < u.size(); ++i) u[i] += inner.displacement[i];
    DeformationField<T> out(outer.grid, std::move(u), false);
    out.wrap();
    return out;
}

/// out(x) = image(phi(x)) for image [C, spatial...], multilinear and periodic.
template <typename T>
Tensor<T> warp(const Tensor<T>& image, const DeformationField<T>& phi) {
    const auto& ext = phi.grid.extents;
    if (image.rank() != ext.size() + 1 || !std::equal(ext.begin(), ext.end(), image.shape().begin() + 1)) {
        throw ContractError("warp: image " + shape_str(image.shape()) + " does not match grid " + shape_str(ext));
    }
    const auto g = phi.grid.layout();
    Tensor<T> out(image.shape());
    detail::resample_forward(g, image.dim(0), image.ptr(), phi.displacement.ptr(), out.ptr());
    return out;
}

/// Determinant of the Jacobian of phi at every grid point, from periodic
/// central differences of the displacement.
template <typename T>
Tensor<T> jacobian_determinant(const DeformationField<T>& phi) {
    const auto g = phi.grid.layout();
    const std::size_t n = g.count, d = g.dim;
    const auto& u = phi.displacement;
    Tensor<T> det(Shape(phi.grid.extents.begin(), phi.grid.extents.end()));
    for (std::size_t p = 0; p < n; ++p) {
        T j[3][3] = {};
        for (std::size_t axis = 0; axis < d; ++axis) {
            const std::size_t i = g.coord(p, axis);
            const std::size_t base = p - i * g.stride[axis];
            const std::size_t ip = (i + 1 == g.ext[axis] ? 0 : i + 1);
            const std::size_t im = (i == 0 ? g.ext[axis] - 1 : i - 1);
            for (std::size_t comp = 0; comp < d; ++comp) {
                const T diff = u[comp * n + base + ip * g.stride[axis]] - u[comp * n + base + im * g.stride[axis]];
                j[comp][axis] = detail::wrap_offset(diff, g.ext[comp]) / T(2) + (comp == axis ? T(1) : T(0));
            }
        }
        if (d == 2) {
            det[p] = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        } else {
            det[p] = j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1]) -
                     j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0]) +
                     j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0]);
        }
    }
    return det;
}

template <typename T>
TopologyReport topology_report(const DeformationField<T>& phi) {
    const auto det = jacobian_determinant(phi);
    TopologyReport r;
    r.min_det = static_cast<double>(*std::min_element(det.data().begin(), det.data().end()));
    const auto bad = std::count_if(det.data().begin(), det.data().end(), [](T v) { return v <= T(0); });
    r.frac_nonpositive = static_cast<double>(bad) / static_cast<double>(det.size());
    return r;
}

/// Differentiable scaling and squaring for a batch of velocities v[B,d,spatial...].
/// Bitwise identical to the value version before wrapping.
template <typename T>
Var<T> exponentiate(Var<T> v, int squarings) {
    require(squarings >= 0, "exponentiate: squarings must be >= 0");
    Var<T> u = scale(v, static_cast<T>(std::ldexp(1.0, -squarings)));
    for (int k = 0; k < squarings; ++k) u = add(u, resample(u, u));
    return u;
}

/// Rasterised overlay of every `spacing`-th grid line as seen through phi,
/// i.e. the image warp(lines, phi), drawn at `scale` pixels per grid unit.
/// Values are 1 on lines and 0 elsewhere. 2-D only.
template <typename T>
Tensor<float> render_deformation_grid(const DeformationField<T>& phi, std::size_t spacing = 4, std::size_t scale = 4) {
    require(phi.grid.dim() == 2, "render_deformation_grid: 2-D deformations only");
    require(spacing >= 1 && scale >= 1, "render_deformation_grid: spacing and scale must be positive");
    const auto g = phi.grid.layout();
    const std::size_t h = g.ext[0] * scale, w = g.ext[1] * scale;
    const double half_width = 0.5 / static_cast<double>(scale) + 1e-9;
    Tensor<float> out(Shape{h, w});
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            const std::array<T, 3> pos{static_cast<T>(static_cast<double>(y) / scale),
                                       static_cast<T>(static_cast<double>(x) / scale), T(0)};
            const auto st = detail::make_stencil<T>(g, std::span<const T, 3>(pos), false);
            bool on_line = false;
            for (std::size_t a = 0; a < 2; ++a) {
                double u = 0;
                for (std::size_t k = 0; k < st.corners; ++k)
                    u += static_cast<double>(st.weight[k] * phi.displacement[a * g.count + st.offset[k]]);
                const double target = static_cast<double>(pos[a]) + u;
                const double r = std::fmod(std::fmod(target, double(spacing)) + spacing, double(spacing));
                if (std::min(r, spacing - r) < half_width) on_line = true;
            }
            out[y * w + x] = on_line ? 1.0f : 0.0f;
        }
    }
    return out;
}

}  // namespace tpie
