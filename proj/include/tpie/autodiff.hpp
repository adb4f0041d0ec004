#pragma once

// Minimal reverse-mode automatic differentiation over dense tensors.
//
// A Tape records every operation executed in a forward pass as a node holding
// its output value, the ids of its inputs and a backward rule. Tape::backward
// walks the nodes in exact reverse order and returns gradients without
// touching the tape, so it can be called any number of times.
//
// Spatial tensors use the layout [batch, channel, spatial...].

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "tpie/detail/resample.hpp"
#include "tpie/tensor.hpp"

namespace tpie {

template <typename T>
class Tape;

/// Handle to a node on a tape.
template <typename T>
struct Var {
    Tape<T>* tape = nullptr;
    std::size_t id = 0;

    const Tensor<T>& value() const { return tape->value(*this); }
    const Shape& shape() const { return value().shape(); }
};

template <typename T>
struct BackwardContext {
    std::span<const Tensor<T>* const> in;
    const Tensor<T>& out;
    const Tensor<T>& grad_out;
    // Null where the corresponding input does not need a gradient.
    std::span<Tensor<T>* const> grad_in;
};

template <typename T>
using BackwardFn = std::function<void(const BackwardContext<T>&)>;

/// Gradients produced by one reverse pass, indexed by tape node.
template <typename T>
class Gradients {
   public:
    Gradients() = default;
    explicit Gradients(std::vector<Tensor<T>> grads) : grads_(std::move(grads)) {}

    /// Gradient of the loss w.r.t. a leaf; exact zeros when the leaf did not
    /// contribute.
    const Tensor<T>& operator[](Var<T> v) const { return grads_.at(v.id); }

   private:
    std::vector<Tensor<T>> grads_;
};

template <typename T>
class Tape {
   public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// A leaf that receives a gradient (network parameter).
    Var<T> parameter(Tensor<T> value) { return push(std::move(value), {}, {}, true); }

    /// A leaf treated as a constant.
    Var<T> constant(Tensor<T> value) { return push(std::move(value), {}, {}, false); }

    Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn<T> fn) {
        return record(std::move(value), std::vector<Var<T>>(inputs), std::move(fn));
    }

    Var<T> record(Tensor<T> value, const std::vector<Var<T>>& inputs, BackwardFn<T> fn) {
        std::vector<std::size_t> ids;
        ids.reserve(inputs.size());
        bool needs = false;
        for (const auto& v : inputs) {
            require(v.tape == this, "operation mixes variables from different tapes");
            ids.push_back(v.id);
            needs = needs || nodes_[v.id].requires_grad;
        }
        return push(std::move(value), std::move(ids), needs ? std::move(fn) : BackwardFn<T>{}, needs);
    }

    const Tensor<T>& value(Var<T> v) const { return nodes_.at(v.id).value; }
    bool requires_grad(Var<T> v) const { return nodes_.at(v.id).requires_grad; }
    std::size_t size() const { return nodes_.size(); }

    Gradients<T> backward(Var<T> loss) const {
        require(loss.tape == this, "backward: loss belongs to another tape");
        const auto& lv = value(loss);
        require(lv.size() == 1, "backward: loss must be a scalar, got shape " + shape_str(lv.shape()));

        std::vector<Tensor<T>> grads(nodes_.size());
        grads[loss.id] = Tensor<T>(lv.shape(), T(1));

        std::vector<const Tensor<T>*> in_vals;
        std::vector<Tensor<T>*> in_grads;
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            const Node& node = nodes_[i];
            if (!node.backward || grads[i].empty()) continue;
            in_vals.clear();
            in_grads.clear();
            for (std::size_t id : node.inputs) {
                in_vals.push_back(&nodes_[id].value);
                if (nodes_[id].requires_grad) {
                    if (grads[id].empty()) grads[id] = Tensor<T>(nodes_[id].value.shape());
                    in_grads.push_back(&grads[id]);
                } else {
                    in_grads.push_back(nullptr);
                }
            }
            node.backward(BackwardContext<T>{in_vals, node.value, grads[i], in_grads});
            if (!node.inputs.empty()) grads[i] = Tensor<T>();  // interior gradient no longer needed
        }
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            if (nodes_[i].inputs.empty() && nodes_[i].requires_grad && grads[i].empty()) {
                grads[i] = Tensor<T>(nodes_[i].value.shape());
            }
        }
        return Gradients<T>(std::move(grads));
    }

   private:
    struct Node {
        Tensor<T> value;
        std::vector<std::size_t> inputs;
        BackwardFn<T> backward;
        bool requires_grad = false;
    };

    Var<T> push(Tensor<T> value, std::vector<std::size_t> inputs, BackwardFn<T> fn, bool requires_grad) {
        nodes_.push_back(Node{std::move(value), std::move(inputs), std::move(fn), requires_grad});
        return Var<T>{this, nodes_.size() - 1};
    }

    std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    const auto& x = a.value();
    const auto& y = b.value();
    require_shape(y.shape(), x.shape(), "add");
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
    return a.tape->record(std::move(out), {a, b}, [](const BackwardContext<T>& c) {
        for (std::size_t k = 0; k < 2; ++k) {
            if (!c.grad_in[k]) continue;
            auto& g = *c.grad_in[k];
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += c.grad_out[i];
        }
    });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
    const auto& x = a.value();
    const auto& y = b.value();
    require_shape(y.shape(), x.shape(), "sub");
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
    return a.tape->record(std::move(out), {a, b}, [](const BackwardContext<T>& c) {
        if (auto* g = c.grad_in[0]) {
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += c.grad_out[i];
        }
        if (auto* g = c.grad_in[1]) {
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= c.grad_out[i];
        }
    });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
    const auto& x = a.value();
    const auto& y = b.value();
    require_shape(y.shape(), x.shape(), "mul");
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
    return a.tape->record(std::move(out), {a, b}, [](const BackwardContext<T>& c) {
        const auto& x = *c.in[0];
        const auto& y = *c.in[1];
        if (auto* g = c.grad_in[0]) {
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += c.grad_out[i] * y[i];
        }
        if (auto* g = c.grad_in[1]) {
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += c.grad_out[i] * x[i];
        }
    });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
    const auto& x = a.value();
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * s;
    return a.tape->record(std::move(out), {a}, [s](const BackwardContext<T>& c) {
        auto& g = *c.grad_in[0];
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += c.grad_out[i] * s;
    });
}

/// Multiplies batch item b by coeffs[b].
template <typename T>
Var<T> scale_per_sample(Var<T> a, std::vector<T> coeffs) {
    const auto& x = a.value();
    require(x.rank() >= 1 && coeffs.size() == x.dim(0), "scale_per_sample: coefficient count mismatch");
    const std::size_t per = x.size() / x.dim(0);
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * coeffs[i / per];
    return a.tape->record(std::move(out), {a}, [coeffs = std::move(coeffs), per](const BackwardContext<T>& c) {
        auto& g = *c.grad_in[0];
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += c.grad_out[i] * coeffs[i / per];
    });
}

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
    auto out = a.value().reshaped(std::move(shape));
    return a.tape->record(std::move(out), {a}, [](const BackwardContext<T>& c) {
        auto& g = *c.grad_in[0];
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += c.grad_out[i];
    });
}

// ---------------------------------------------------------------------------
// Activations

template <typename T>
Var<T> leaky_relu(Var<T> a, T slope) {
    const auto& x = a.value();
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] >= T(0) ? x[i] : slope * x[i];
    return a.tape->record(std::move(out), {a}, [slope](const BackwardContext<T>& c) {
        const auto& x = *c.in[0];
        auto& g = *c.grad_in[0];
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += c.grad_out[i] * (x[i] >= T(0) ? T(1) : slope);
    });
}

template <typename T>
T sigmoid(T x) {
    return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

template <typename T>
Var<T> silu(Var<T> a) {
    const auto& x = a.value();
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * sigmoid(x[i]);
    return a.tape->record(std::move(out), {a}, [](const BackwardContext<T>& c) {
        const auto& x = *c.in[0];
        auto& g = *c.grad_in[0];
        for (std::size_t i = 0; i < g.size(); ++i) {
            const T s = sigmoid(x[i]);
            g[i] += c.grad_out[i] * (s + x[i] * s * (T(1) - s));
        }
    });
}

template <typename T>
Var<T> tanh(Var<T> a) {
    const auto& x = a.value();
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(x[i]);
    return a.tape->record(std::move(out), {a}, [](const BackwardContext<T>& c) {
        const auto& y = c.out;
        auto& g = *c.grad_in[0];
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += c.grad_out[i] * (T(1) - y[i] * y[i]);
    });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Var<T> sum(Var<T> a) {
    const auto& x = a.value();
    return a.tape->record(Tensor<T>::scalar(x.sum()), {a}, [](const BackwardContext<T>& c) {
        auto& g = *c.grad_in[0];
        const T go = c.grad_out[0];
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += go;
    });
}

template <typename T>
Var<T> sum_squares(Var<T> a) {
    const auto& x = a.value();
    return a.tape->record(Tensor<T>::scalar(x.sum_squares()), {a}, [](const BackwardContext<T>& c) {
        const auto& x = *c.in[0];
        auto& g = *c.grad_in[0];
        const T go = c.grad_out[0];
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += T(2) * x[i] * go;
    });
}

// ---------------------------------------------------------------------------
// Dense layers

/// x[B,N] · weight[M,N]ᵀ + bias[M].
template <typename T>
Var<T> linear(Var<T> input, Var<T> weight, Var<T> bias) {
    const auto& x = input.value();
    const auto& w = weight.value();
    const auto& b = bias.value();
    if (x.rank() != 2 || w.rank() != 2 || b.rank() != 1 || w.dim(1) != x.dim(1) || b.dim(0) != w.dim(0)) {
        throw ContractError("linear: incompatible shapes input " + shape_str(x.shape()) + ", weight " +
                            shape_str(w.shape()) + ", bias " + shape_str(b.shape()));
    }
    const std::size_t batch = x.dim(0), n = x.dim(1), m = w.dim(0);
    Tensor<T> out(Shape{batch, m});
    for (std::size_t i = 0; i < batch; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
            T acc = b[j];
            for (std::size_t k = 0; k < n; ++k) acc += x[i * n + k] * w[j * n + k];
            out[i * m + j] = acc;
        }
    }
    return input.tape->record(std::move(out), {input, weight, bias}, [batch, n, m](const BackwardContext<T>& c) {
        const auto& x = *c.in[0];
        const auto& w = *c.in[1];
        const auto& go = c.grad_out;
        if (auto* gx = c.grad_in[0]) {
            for (std::size_t i = 0; i < batch; ++i)
                for (std::size_t j = 0; j < m; ++j)
                    for (std::size_t k = 0; k < n; ++k) (*gx)[i * n + k] += go[i * m + j] * w[j * n + k];
        }
        if (auto* gw = c.grad_in[1]) {
            for (std::size_t i = 0; i < batch; ++i)
                for (std::size_t j = 0; j < m; ++j)
                    for (std::size_t k = 0; k < n; ++k) (*gw)[j * n + k] += go[i * m + j] * x[i * n + k];
        }
        if (auto* gb = c.grad_in[2]) {
            for (std::size_t i = 0; i < batch; ++i)
                for (std::size_t j = 0; j < m; ++j) (*gb)[j] += go[i * m + j];
        }
    });
}

enum class Padding { zero, wrap };

namespace detail {

struct Conv2dGeometry {
    std::size_t batch, cin, cout, h, w, k, stride, oh, ow;
    std::ptrdiff_t pad;
    // Source column (or -1 for zero padding) for each (kx, ox), likewise rows.
    std::vector<std::ptrdiff_t> col_src, row_src;
};

inline Conv2dGeometry conv2d_geometry(const Shape& in, const Shape& ker, std::size_t stride, Padding padding) {
    if (in.size() != 4 || ker.size() != 4 || ker[1] != in[1] || ker[2] != ker[3] || ker[2] % 2 == 0) {
        throw ContractError("conv2d: incompatible shapes input " + shape_str(in) + ", kernel " + shape_str(ker));
    }
    require(stride >= 1, "conv2d: stride must be >= 1");
    Conv2dGeometry g{};
    g.batch = in[0];
    g.cin = in[1];
    g.h = in[2];
    g.w = in[3];
    g.cout = ker[0];
    g.k = ker[2];
    g.stride = stride;
    g.pad = static_cast<std::ptrdiff_t>(g.k / 2);
    g.oh = (g.h - 1) / stride + 1;
    g.ow = (g.w - 1) / stride + 1;
    auto table = [&](std::size_t n_out, std::size_t n_in) {
        std::vector<std::ptrdiff_t> t(g.k * n_out);
        for (std::size_t kk = 0; kk < g.k; ++kk) {
            for (std::size_t o = 0; o < n_out; ++o) {
                auto i = static_cast<std::ptrdiff_t>(o * stride + kk) - g.pad;
                const auto n = static_cast<std::ptrdiff_t>(n_in);
                if (padding == Padding::wrap) {
                    i = static_cast<std::ptrdiff_t>(wrap_index(i, n));
                } else if (i < 0 || i >= n) {
                    i = -1;
                }
                t[kk * n_out + o] = i;
            }
        }
        return t;
    };
    g.row_src = table(g.oh, g.h);
    g.col_src = table(g.ow, g.w);
    return g;
}

}  // namespace detail

namespace detail {

/// Unfolds one image x[Cin,H,W] into columns [Cin·k·k, OH·OW].
template <typename T>
void im2col(const Conv2dGeometry& g, const T* x, T* col) {
    const std::size_t plane = g.oh * g.ow;
    for (std::size_t ci = 0; ci < g.cin; ++ci) {
        const T* src = x + ci * g.h * g.w;
        for (std::size_t ky = 0; ky < g.k; ++ky) {
            for (std::size_t kx = 0; kx < g.k; ++kx) {
                T* dst = col + ((ci * g.k + ky) * g.k + kx) * plane;
                const auto* cols = &g.col_src[kx * g.ow];
                for (std::size_t oy = 0; oy < g.oh; ++oy) {
                    const auto iy = g.row_src[ky * g.oh + oy];
                    T* drow = dst + oy * g.ow;
                    if (iy < 0) {
                        std::fill_n(drow, g.ow, T(0));
                        continue;
                    }
                    const T* row = src + static_cast<std::size_t>(iy) * g.w;
                    std::size_t lo = 0, hi = 0;
                    if (g.stride == 1) {
                        // Interior outputs read a contiguous input span.
                        const auto d = static_cast<std::ptrdiff_t>(kx) - g.pad;
                        lo = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, -d));
                        hi = static_cast<std::size_t>(
                            std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(g.ow), static_cast<std::ptrdiff_t>(g.w) - d));
                        if (hi > lo) std::copy_n(row + static_cast<std::ptrdiff_t>(lo) + d, hi - lo, drow + lo);
                        else hi = lo;
                    }
                    for (std::size_t ox = 0; ox < g.ow; ++ox) {
                        if (ox == lo && hi > lo) {
                            ox = hi - 1;
                            continue;
                        }
                        const auto ix = cols[ox];
                        drow[ox] = ix >= 0 ? row[ix] : T(0);
                    }
                }
            }
        }
    }
}

/// Adjoint of im2col: scatters columns back onto gx[Cin,H,W].
template <typename T>
void col2im_add(const Conv2dGeometry& g, const T* col, T* gx) {
    const std::size_t plane = g.oh * g.ow;
    for (std::size_t ci = 0; ci < g.cin; ++ci) {
        T* dst = gx + ci * g.h * g.w;
        for (std::size_t ky = 0; ky < g.k; ++ky) {
            for (std::size_t kx = 0; kx < g.k; ++kx) {
                const T* src = col + ((ci * g.k + ky) * g.k + kx) * plane;
                const auto* cols = &g.col_src[kx * g.ow];
                for (std::size_t oy = 0; oy < g.oh; ++oy) {
                    const auto iy = g.row_src[ky * g.oh + oy];
                    if (iy < 0) continue;
                    T* drow = dst + static_cast<std::size_t>(iy) * g.w;
                    const T* srow = src + oy * g.ow;
                    for (std::size_t ox = 0; ox < g.ow; ++ox) {
                        const auto ix = cols[ox];
                        if (ix >= 0) drow[ix] += srow[ox];
                    }
                }
            }
        }
    }
}

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

}  // namespace detail

/// 2-D cross-correlation with an odd square kernel and "same" padding,
/// evaluated per image as a [Cout, Cin·k·k] × [Cin·k·k, OH·OW] product.
template <typename T>
Var<T> conv2d(Var<T> input, Var<T> kernel, std::size_t stride, Padding padding) {
    using Mat = detail::RowMatrix<T>;
    const auto& x = input.value();
    const auto& w = kernel.value();
    auto geo = std::make_shared<detail::Conv2dGeometry>(detail::conv2d_geometry(x.shape(), w.shape(), stride, padding));
    const auto& g = *geo;
    const std::size_t kdim = g.cin * g.k * g.k, plane = g.oh * g.ow;
    const auto ki = static_cast<Eigen::Index>(kdim), pi = static_cast<Eigen::Index>(plane),
               ci = static_cast<Eigen::Index>(g.cout);
    Tensor<T> out(Shape{g.batch, g.cout, g.oh, g.ow});
    // Columns are kept for the kernel gradient when one will be needed.
    const bool keep = input.tape->requires_grad(kernel);
    auto cols = std::make_shared<std::vector<T>>(keep ? g.batch * kdim * plane : kdim * plane);
    const Eigen::Map<const Mat> wm(w.ptr(), ci, ki);
    for (std::size_t b = 0; b < g.batch; ++b) {
        T* col = cols->data() + (keep ? b * kdim * plane : 0);
        detail::im2col(g, x.ptr() + b * g.cin * g.h * g.w, col);
        Eigen::Map<Mat>(out.ptr() + b * g.cout * plane, ci, pi).noalias() = wm * Eigen::Map<const Mat>(col, ki, pi);
    }
    if (!keep) cols.reset();
    return input.tape->record(std::move(out), {input, kernel}, [geo, cols, ki, pi, ci](const BackwardContext<T>& c) {
        const auto& g = *geo;
        const Eigen::Map<const Mat> wm(c.in[1]->ptr(), ci, ki);
        auto* gx = c.grad_in[0];
        auto* gw = c.grad_in[1];
        const std::size_t per = static_cast<std::size_t>(ki * pi);
        Mat gcol(ki, pi);
        Mat gw_acc = Mat::Zero(ci, ki);
        for (std::size_t b = 0; b < g.batch; ++b) {
            const Eigen::Map<const Mat> go(c.grad_out.ptr() + b * g.cout * g.oh * g.ow, ci, pi);
            if (gw) {
                const Eigen::Map<const Mat> col(cols->data() + b * per, ki, pi);
                gw_acc.noalias() += go * col.transpose();
            }
            if (gx) {
                gcol.noalias() = wm.transpose() * go;
                detail::col2im_add(g, gcol.data(), gx->ptr() + b * g.cin * g.h * g.w);
            }
        }
        if (gw) {
            Eigen::Map<Mat> gwm(gw->ptr(), ci, ki);
            gwm += gw_acc;
        }
    });
}

/// Adds bias[C] to every spatial position of x[B,C,...].
template <typename T>
Var<T> bias_add(Var<T> input, Var<T> bias) {
    const auto& x = input.value();
    const auto& b = bias.value();
    require(x.rank() >= 2 && b.rank() == 1 && b.dim(0) == x.dim(1),
            "bias_add: bias " + shape_str(b.shape()) + " does not match input " + shape_str(x.shape()));
    const std::size_t ch = x.dim(1), plane = x.size() / (x.dim(0) * ch);
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + b[(i / plane) % ch];
    return input.tape->record(std::move(out), {input, bias}, [ch, plane](const BackwardContext<T>& c) {
        if (auto* g = c.grad_in[0]) {
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += c.grad_out[i];
        }
        if (auto* g = c.grad_in[1]) {
            for (std::size_t i = 0; i < c.grad_out.size(); ++i) (*g)[(i / plane) % ch] += c.grad_out[i];
        }
    });
}

/// Adds a per-sample channel vector v[B,C] to every spatial position of x[B,C,...].
template <typename T>
Var<T> add_channel_vector(Var<T> input, Var<T> vec) {
    const auto& x = input.value();
    const auto& v = vec.value();
    require(x.rank() >= 2 && v.rank() == 2 && v.dim(0) == x.dim(0) && v.dim(1) == x.dim(1),
            "add_channel_vector: " + shape_str(v.shape()) + " does not match " + shape_str(x.shape()));
    const std::size_t plane = x.size() / (x.dim(0) * x.dim(1));
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + v[i / plane];
    return input.tape->record(std::move(out), {input, vec}, [plane](const BackwardContext<T>& c) {
        if (auto* g = c.grad_in[0]) {
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += c.grad_out[i];
        }
        if (auto* g = c.grad_in[1]) {
            for (std::size_t i = 0; i < c.grad_out.size(); ++i) (*g)[i / plane] += c.grad_out[i];
        }
    });
}

// ---------------------------------------------------------------------------
// Resolution changes and layout

/// Block mean over factor×factor windows of x[B,C,H,W].
template <typename T>
Var<T> avg_pool2(Var<T> input, std::size_t factor) {
    const auto& x = input.value();
    require(x.rank() == 4, "avg_pool2: expected [B,C,H,W], got " + shape_str(x.shape()));
    require(factor >= 1 && x.dim(2) % factor == 0 && x.dim(3) % factor == 0,
            "avg_pool2: extents " + shape_str(x.shape()) + " not divisible by " + std::to_string(factor));
    const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t oh = h / factor, ow = w / factor;
    const T inv = T(1) / static_cast<T>(factor * factor);
    Tensor<T> out(Shape{x.dim(0), x.dim(1), oh, ow});
    for (std::size_t p = 0; p < planes; ++p) {
        for (std::size_t oy = 0; oy < oh; ++oy) {
            for (std::size_t ox = 0; ox < ow; ++ox) {
                T acc = 0;
                for (std::size_t dy = 0; dy < factor; ++dy)
                    for (std::size_t dx = 0; dx < factor; ++dx)
                        acc += x[(p * h + oy * factor + dy) * w + ox * factor + dx];
                out[(p * oh + oy) * ow + ox] = acc * inv;
            }
        }
    }
    return input.tape->record(std::move(out), {input}, [planes, h, w, oh, ow, factor, inv](const BackwardContext<T>& c) {
        auto& g = *c.grad_in[0];
        for (std::size_t p = 0; p < planes; ++p)
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < w; ++x)
                    g[(p * h + y) * w + x] += c.grad_out[(p * oh + y / factor) * ow + x / factor] * inv;
    });
}

/// Doubles H and W of x[B,C,H,W] by periodic bilinear interpolation (pixel
/// centres: fine sample 2j sits a quarter cell before coarse sample j).
template <typename T>
Var<T> upsample2(Var<T> input) {
    const auto& x = input.value();
    require(x.rank() == 4, "upsample2: expected [B,C,H,W], got " + shape_str(x.shape()));
    const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t oh = 2 * h, ow = 2 * w;
    // Each fine index maps to (near, far) coarse neighbours weighted 3/4, 1/4.
    auto taps = [](std::size_t fine, std::size_t n) {
        const std::size_t j = fine / 2;
        const std::size_t far = (fine % 2 == 0) ? (j == 0 ? n - 1 : j - 1) : (j + 1 == n ? 0 : j + 1);
        return std::pair<std::size_t, std::size_t>{j, far};
    };
    Tensor<T> out(Shape{x.dim(0), x.dim(1), oh, ow});
    for (std::size_t p = 0; p < planes; ++p) {
        const T* src = x.ptr() + p * h * w;
        for (std::size_t y = 0; y < oh; ++y) {
            const auto [y0, y1] = taps(y, h);
            for (std::size_t xx = 0; xx < ow; ++xx) {
                const auto [x0, x1] = taps(xx, w);
                out[(p * oh + y) * ow + xx] = T(0.5625) * src[y0 * w + x0] + T(0.1875) * src[y0 * w + x1] +
                                               T(0.1875) * src[y1 * w + x0] + T(0.0625) * src[y1 * w + x1];
            }
        }
    }
    return input.tape->record(std::move(out), {input}, [planes, h, w, oh, ow, taps](const BackwardContext<T>& c) {
        auto& g = *c.grad_in[0];
        for (std::size_t p = 0; p < planes; ++p) {
            T* dst = g.ptr() + p * h * w;
            for (std::size_t y = 0; y < oh; ++y) {
                const auto [y0, y1] = taps(y, h);
                for (std::size_t xx = 0; xx < ow; ++xx) {
                    const auto [x0, x1] = taps(xx, w);
                    const T go = c.grad_out[(p * oh + y) * ow + xx];
                    dst[y0 * w + x0] += T(0.5625) * go;
                    dst[y0 * w + x1] += T(0.1875) * go;
                    dst[y1 * w + x0] += T(0.1875) * go;
                    dst[y1 * w + x1] += T(0.0625) * go;
                }
            }
        }
    });
}

/// Concatenates [B,Ci,...] tensors along the channel axis.
template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& parts) {
    require(!parts.empty(), "concat_channels: nothing to concatenate");
    const auto& first = parts.front().value();
    require(first.rank() >= 2, "concat_channels: expected [B,C,...]");
    const std::size_t batch = first.dim(0);
    const std::size_t plane = first.size() / (batch * first.dim(1));
    std::vector<std::size_t> chans;
    std::size_t total = 0;
    for (const auto& v : parts) {
        const auto& t = v.value();
        Shape want = first.shape();
        want[1] = t.rank() >= 2 ? t.dim(1) : 0;
        require_shape(t.shape(), want, "concat_channels");
        chans.push_back(t.dim(1));
        total += t.dim(1);
    }
    Shape s = first.shape();
    s[1] = total;
    Tensor<T> out(s);
    for (std::size_t b = 0; b < batch; ++b) {
        std::size_t c0 = 0;
        for (std::size_t k = 0; k < parts.size(); ++k) {
            const auto& t = parts[k].value();
            std::copy_n(t.ptr() + b * chans[k] * plane, chans[k] * plane, out.ptr() + (b * total + c0) * plane);
            c0 += chans[k];
        }
    }
    return parts.front().tape->record(std::move(out), parts, [chans, total, batch, plane](const BackwardContext<T>& c) {
        for (std::size_t b = 0; b < batch; ++b) {
            std::size_t c0 = 0;
            for (std::size_t k = 0; k < chans.size(); ++k) {
                if (auto* g = c.grad_in[k]) {
                    const T* src = c.grad_out.ptr() + (b * total + c0) * plane;
                    T* dst = g->ptr() + b * chans[k] * plane;
                    for (std::size_t i = 0; i < chans[k] * plane; ++i) dst[i] += src[i];
                }
                c0 += chans[k];
            }
        }
    });
}

/// Broadcasts x[B,C] over an H×W plane, giving [B,C,H,W].
template <typename T>
Var<T> tile_spatial(Var<T> input, std::size_t h, std::size_t w) {
    const auto& x = input.value();
    require(x.rank() == 2, "tile_spatial: expected [B,C], got " + shape_str(x.shape()));
    const std::size_t plane = h * w;
    Tensor<T> out(Shape{x.dim(0), x.dim(1), h, w});
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i / plane];
    return input.tape->record(std::move(out), {input}, [plane](const BackwardContext<T>& c) {
        auto& g = *c.grad_in[0];
        for (std::size_t i = 0; i < c.grad_out.size(); ++i) g[i / plane] += c.grad_out[i];
    });
}

// ---------------------------------------------------------------------------
// Periodic spatial operators

inline detail::GridExtents spatial_extents(const Shape& s) {
    require(s.size() == 4 || s.size() == 5, "expected [B,C,spatial...] with 2 or 3 spatial axes, got " + shape_str(s));
    return detail::GridExtents::from(std::span<const std::size_t>(s).subspan(2));
}

/// Periodic central difference of x[B,C,spatial...] along a spatial axis.
template <typename T>
Var<T> central_diff(Var<T> input, std::size_t axis) {
    const auto& x = input.value();
    const auto g = spatial_extents(x.shape());
    require(axis < g.dim, "central_diff: axis out of range");
    const std::size_t planes = x.dim(0) * x.dim(1);
    Tensor<T> out(x.shape());
    detail::central_diff_forward(g, planes, axis, x.ptr(), out.ptr());
    return input.tape->record(std::move(out), {input}, [g, planes, axis](const BackwardContext<T>& c) {
        detail::central_diff_backward(g, planes, axis, c.grad_out.ptr(), c.grad_in[0]->ptr());
    });
}

/// Periodic multilinear resampling: out(x) = field(x + disp(x)).
/// field: [B,C,spatial...]; disp: [B,d,spatial...] with d spatial axes.
/// Differentiable w.r.t. both arguments.
template <typename T>
Var<T> resample(Var<T> field, Var<T> disp) {
    const auto& f = field.value();
    const auto& u = disp.value();
    const auto g = spatial_extents(f.shape());
    Shape want = f.shape();
    want[1] = g.dim;
    if (u.shape() != want) {
        throw ContractError("resample: displacement " + shape_str(u.shape()) + " does not match field " +
                            shape_str(f.shape()));
    }
    const std::size_t batch = f.dim(0), ch = f.dim(1), n = g.count;
    Tensor<T> out(f.shape());
    for (std::size_t b = 0; b < batch; ++b) {
        detail::resample_forward(g, ch, f.ptr() + b * ch * n, u.ptr() + b * g.dim * n, out.ptr() + b * ch * n);
    }
    return field.tape->record(std::move(out), {field, disp}, [g, batch, ch, n](const BackwardContext<T>& c) {
        const auto& f = *c.in[0];
        const auto& u = *c.in[1];
        for (std::size_t b = 0; b < batch; ++b) {
            detail::resample_backward(g, ch, f.ptr() + b * ch * n, u.ptr() + b * g.dim * n,
                                      c.grad_out.ptr() + b * ch * n,
                                      c.grad_in[0] ? c.grad_in[0]->ptr() + b * ch * n : nullptr,
                                      c.grad_in[1] ? c.grad_in[1]->ptr() + b * g.dim * n : nullptr);
        }
    });
}

}  // namespace tpie
