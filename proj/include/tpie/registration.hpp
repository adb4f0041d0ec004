#pragma once

// Registration autoencoder: [template, target] -> latent velocity code ->
// full-resolution stationary velocity field, trained with the image-match plus
// smoothness loss through the differentiable exponential map.

#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "tpie/autodiff.hpp"
#include "tpie/diffeo.hpp"
#include "tpie/nn.hpp"
#include "tpie/rng.hpp"

namespace tpie {

class TrainingError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

struct RegistrationConfig {
    std::size_t image_size = 32;  // square images, divisible by 8
    std::size_t width = 16;
    std::size_t latent_channels = 16;
    double sigma = 10.0;
    double weight_decay = 1e-5;
    double clamp = 4.0;  // |v| per component stays below this
    int squarings = 6;
    double leak = 0.2;

    std::size_t latent_size() const { return image_size / 8; }
};

inline void validate(const RegistrationConfig& c) {
    require(c.image_size >= 8 && c.image_size % 8 == 0, "registration: image_size must be a positive multiple of 8");
    require(c.width > 0 && c.latent_channels > 0, "registration: width and latent_channels must be positive");
    require(c.sigma > 0, "registration: sigma must be > 0");
    require(c.weight_decay >= 0, "registration: weight_decay must be >= 0");
    require(c.clamp > 0, "registration: clamp must be > 0");
    require(c.squarings >= 0, "registration: squarings must be >= 0");
}

/// Adds freshly initialised encoder and decoder parameters under `registration/`.
template <typename T>
void init_registration(ParameterStore<T>& store, const RegistrationConfig& c, std::uint64_t seed) {
    validate(c);
    const std::size_t w = c.width, lc = c.latent_channels;
    nn::init_conv(store, "registration/enc0", 2, w, 3, seed);
    nn::init_conv(store, "registration/enc1", w, w, 3, seed);
    nn::init_conv(store, "registration/enc2", w, 2 * w, 3, seed);
    nn::init_conv(store, "registration/enc3", 2 * w, 2 * w, 3, seed);
    nn::init_conv(store, "registration/enc4", 2 * w, lc, 3, seed);
    nn::init_conv(store, "registration/dec0", lc, 2 * w, 3, seed);
    nn::init_conv(store, "registration/dec1", 2 * w, 2 * w, 3, seed);
    nn::init_conv(store, "registration/dec2", 2 * w, w, 3, seed);
    nn::init_conv(store, "registration/dec3", w, w, 3, seed);
    nn::init_conv(store, "registration/dec4", w, 2, 3, seed, /*zero=*/true);
}

/// Encoder on a batch of channel-stacked pairs x[B,2,H,W] -> [B,C,H/8,W/8].
template <typename T>
Var<T> encode(const Bound<T>& p, Var<T> pairs, const RegistrationConfig& c) {
    const auto& s = pairs.shape();
    if (s.size() != 4 || s[1] != 2 || s[2] != c.image_size || s[3] != c.image_size) {
        throw ContractError("encode: expected [B,2," + std::to_string(c.image_size) + "," +
                            std::to_string(c.image_size) + "], got " + shape_str(s));
    }
    const T leak = static_cast<T>(c.leak);
    Var<T> h = leaky_relu(nn::conv(p, "registration/enc0", pairs), leak);
    h = leaky_relu(nn::conv(p, "registration/enc1", h, 2), leak);
    h = leaky_relu(nn::conv(p, "registration/enc2", h, 2), leak);
    h = leaky_relu(nn::conv(p, "registration/enc3", h, 2), leak);
    return nn::conv(p, "registration/enc4", h);
}

/// Decoder on latents [B,C,H/8,W/8] -> velocities [B,2,H,W], soft-clamped
/// per component to (-clamp, clamp).
template <typename T>
Var<T> decode(const Bound<T>& p, Var<T> latent, const RegistrationConfig& c) {
    const auto& s = latent.shape();
    const std::size_t ls = c.latent_size();
    if (s.size() != 4 || s[1] != c.latent_channels || s[2] != ls || s[3] != ls) {
        throw ContractError("decode: expected [B," + std::to_string(c.latent_channels) + "," + std::to_string(ls) +
                            "," + std::to_string(ls) + "], got " + shape_str(s));
    }
    const T leak = static_cast<T>(c.leak);
    Var<T> h = leaky_relu(nn::conv(p, "registration/dec0", latent), leak);
    h = leaky_relu(nn::conv(p, "registration/dec1", upsample2(h)), leak);
    h = leaky_relu(nn::conv(p, "registration/dec2", upsample2(h)), leak);
    h = leaky_relu(nn::conv(p, "registration/dec3", upsample2(h)), leak);
    const Var<T> raw = nn::conv(p, "registration/dec4", h);
    const T k = static_cast<T>(c.clamp);
    return scale(tanh(scale(raw, T(1) / k)), k);
}

/// Template warped by the inverse deformation exp(-v): m ∘ exp(-v).
template <typename T>
Var<T> warp_by_inverse(Var<T> templates, Var<T> velocity, int squarings) {
    return resample(templates, exponentiate(scale(velocity, T(-1)), squarings));
}

/// Per-sample ‖∇v‖² with periodic central differences, [B] values summed.
template <typename T>
Var<T> smoothness(Var<T> velocity) {
    Var<T> acc = sum_squares(central_diff(velocity, 0));
    return add(acc, sum_squares(central_diff(velocity, 1)));
}

/// Batch-mean of σ‖m∘exp(-v) − f‖² + ‖∇v‖², plus weight_decay·‖ω‖² when
/// parameters are given.
template <typename T>
Var<T> registration_loss(Var<T> templates, Var<T> targets, Var<T> velocity, double sigma, double weight_decay,
                         const Bound<T>* params, int squarings) {
    require(sigma > 0, "registration_loss: sigma must be > 0");
    require_shape(targets.shape(), templates.shape(), "registration_loss");
    Shape vs = templates.shape();
    vs[1] = 2;
    require_shape(velocity.shape(), vs, "registration_loss velocity");
    const T inv_b = T(1) / static_cast<T>(templates.shape()[0]);
    const Var<T> warped = warp_by_inverse(templates, velocity, squarings);
    Var<T> loss = add(scale(sum_squares(sub(warped, targets)), static_cast<T>(sigma)), smoothness(velocity));
    loss = scale(loss, inv_b);
    if (params && weight_decay > 0) loss = add(loss, scale(params->squared_norm(), static_cast<T>(weight_decay)));
    return loss;
}

/// Stacks templates and targets [N,1,H,W] into pairs [B,2,H,W] for the given indices.
template <typename T>
Tensor<T> gather_pairs(const Tensor<T>& templates, const Tensor<T>& targets, const std::vector<std::size_t>& idx) {
    const std::size_t plane = templates.dim(2) * templates.dim(3);
    Tensor<T> out(Shape{idx.size(), 2, templates.dim(2), templates.dim(3)});
    for (std::size_t b = 0; b < idx.size(); ++b) {
        std::copy_n(templates.ptr() + idx[b] * plane, plane, out.ptr() + (2 * b) * plane);
        std::copy_n(targets.ptr() + idx[b] * plane, plane, out.ptr() + (2 * b + 1) * plane);
    }
    return out;
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& items, const std::vector<std::size_t>& idx) {
    const std::size_t n = items.size() / items.dim(0);
    Shape s = items.shape();
    s[0] = idx.size();
    Tensor<T> out(s);
    for (std::size_t b = 0; b < idx.size(); ++b) std::copy_n(items.ptr() + idx[b] * n, n, out.ptr() + b * n);
    return out;
}

/// Single-pair encode: template m[1,H,W], target f[1,H,W] -> γ[C,H/8,W/8].
template <typename T>
Tensor<T> encode(const ParameterStore<T>& store, const Tensor<T>& m, const Tensor<T>& f, const RegistrationConfig& c) {
    require_shape(f.shape(), m.shape(), "encode");
    Tape<T> tape;
    Bound<T> p(tape, store, "registration/enc", false);
    const Tensor<T> ms = m.reshaped({1, 1, m.dim(1), m.dim(2)});
    const Tensor<T> fs = f.reshaped({1, 1, f.dim(1), f.dim(2)});
    auto out = encode(p, tape.constant(gather_pairs(ms, fs, {0})), c);
    return out.value().slice_batch(0);
}

/// Batched encode of every pair: [N,C,H/8,W/8].
template <typename T>
Tensor<T> encode_all(const ParameterStore<T>& store, const Tensor<T>& templates, const Tensor<T>& targets,
                     const RegistrationConfig& c, std::size_t chunk = 32) {
    const std::size_t n = templates.dim(0), ls = c.latent_size();
    Tensor<T> out(Shape{n, c.latent_channels, ls, ls});
    const std::size_t per = c.latent_channels * ls * ls;
    for (std::size_t start = 0; start < n; start += chunk) {
        std::vector<std::size_t> idx;
        for (std::size_t i = start; i < std::min(n, start + chunk); ++i) idx.push_back(i);
        Tape<T> tape;
        Bound<T> p(tape, store, "registration/enc", false);
        auto z = encode(p, tape.constant(gather_pairs(templates, targets, idx)), c);
        std::copy_n(z.value().ptr(), idx.size() * per, out.ptr() + start * per);
    }
    return out;
}

/// Single-latent decode: γ[C,h,w] -> VelocityField on the image grid.
template <typename T>
VelocityField<T> decode(const ParameterStore<T>& store, const Tensor<T>& latent, const RegistrationConfig& c) {
    require(latent.rank() == 3, "decode: expected [C,H,W], got " + shape_str(latent.shape()));
    Tape<T> tape;
    Bound<T> p(tape, store, "registration/dec", false);
    Shape s{1};
    s.insert(s.end(), latent.shape().begin(), latent.shape().end());
    auto v = decode(p, tape.constant(latent.reshaped(s)), c);
    return VelocityField<T>(Grid({c.image_size, c.image_size}), v.value().slice_batch(0));
}

struct RegistrationTrainOptions {
    std::size_t max_epochs = 200;
    std::size_t batch_size = 8;
    double tolerance = 1e-4;  // relative improvement between consecutive epoch windows
    std::size_t patience = 5;  // window length in epochs
    std::uint64_t seed = 0;
};

/// Progress of a (possibly interrupted) optimisation run.
struct StageState {
    std::size_t epoch = 0;
    bool converged = false;
    std::size_t run_start = 0;  // index in `curve` where the current run began
    std::vector<double> curve;  // epoch-mean loss

    /// Records an epoch mean. The run has converged once the mean over the
    /// last `window` epochs improves on the mean over the `window` epochs
    /// before it by less than `tolerance` (relative).
    void record(double mean, double tolerance, std::size_t window) {
        curve.push_back(mean);
        ++epoch;
        if (window == 0 || curve.size() - run_start < 2 * window) return;
        const auto last = curve.end() - static_cast<std::ptrdiff_t>(window);
        const auto prev = last - static_cast<std::ptrdiff_t>(window);
        const double a = std::accumulate(prev, last, 0.0) / static_cast<double>(window);
        const double b = std::accumulate(last, curve.end(), 0.0) / static_cast<double>(window);
        if ((a - b) / std::max(std::abs(a), 1e-30) < tolerance) converged = true;
    }

    /// Starts a new run on top of the recorded history.
    void restart() {
        converged = false;
        run_start = curve.size();
    }

    bool done(std::size_t max_epochs) const { return converged || epoch >= max_epochs; }

    friend bool operator==(const StageState&, const StageState&) = default;
};

/// Epoch order for registration training: a permutation keyed by (seed, epoch).
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::uint64_t stream, std::size_t epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    CounterRng rng(seed, stream);
    auto r = rng.split(epoch);
    r.shuffle(order.begin(), order.end());
    return order;
}

inline std::string describe_batch(const std::vector<std::size_t>& idx) {
    std::ostringstream os;
    for (std::size_t i = 0; i < idx.size(); ++i) os << (i ? "," : "") << idx[i];
    return os.str();
}

/// One optimisation step on the pairs `idx`; returns the batch loss.
template <typename T>
double registration_step(ParameterStore<T>& store, Adam& adam, const Tensor<T>& templates, const Tensor<T>& targets,
                         const std::vector<std::size_t>& idx, const RegistrationConfig& c) {
    Tape<T> tape;
    Bound<T> p(tape, store, "registration/");
    const auto pairs = tape.constant(gather_pairs(templates, targets, idx));
    const auto m = tape.constant(gather_rows(templates, idx));
    const auto f = tape.constant(gather_rows(targets, idx));
    const auto v = decode(p, encode(p, pairs, c), c);
    const auto loss = registration_loss(m, f, v, c.sigma, c.weight_decay, &p, c.squarings);
    const double value = static_cast<double>(loss.value().item());
    if (!std::isfinite(value)) {
        throw TrainingError("registration: non-finite loss on batch [" + describe_batch(idx) + "]");
    }
    const auto grads = tape.backward(loss);
    std::vector<std::string> names;
    for (const auto& [name, var] : p.vars()) names.push_back(name);
    adam.step(store, names, [&](const std::string& name) -> const Tensor<T>& { return grads[p[name]]; });
    return value;
}

/// Runs registration epochs until convergence or `opt.max_epochs`, continuing
/// from `state`. `should_stop` is polled after every epoch.
template <typename T, typename Stop>
void train_registration(ParameterStore<T>& store, Adam& adam, StageState& state, const Tensor<T>& templates,
                        const Tensor<T>& targets, const RegistrationConfig& c, const RegistrationTrainOptions& opt,
                        Stop&& should_stop) {
    validate(c);
    require(templates.rank() == 4 && templates.dim(0) > 0, "train_registration: empty dataset");
    require_shape(targets.shape(), templates.shape(), "train_registration");
    require(opt.batch_size > 0, "train_registration: batch_size must be > 0");
    const std::size_t n = templates.dim(0);
    while (!state.done(opt.max_epochs)) {
        const auto order = epoch_order(n, opt.seed, 0x5245, state.epoch);
        double total = 0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < n; start += opt.batch_size) {
            std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(std::min(n, start + opt.batch_size)));
            total += registration_step(store, adam, templates, targets, idx, c);
            ++batches;
        }
        state.record(total / static_cast<double>(batches), opt.tolerance, opt.patience);
        if (should_stop(state)) return;
    }
}

template <typename T>
void train_registration(ParameterStore<T>& store, Adam& adam, StageState& state, const Tensor<T>& templates,
                        const Tensor<T>& targets, const RegistrationConfig& c, const RegistrationTrainOptions& opt) {
    train_registration(store, adam, state, templates, targets, c, opt, [](const StageState&) { return false; });
}

/// Per-pair SSD of m∘exp(-v) against f for every pair, using the trained
/// network end to end.
template <typename T>
std::vector<double> registered_ssd(const ParameterStore<T>& store, const Tensor<T>& templates, const Tensor<T>& targets,
                                   const RegistrationConfig& c) {
    const std::size_t n = templates.dim(0);
    const auto latents = encode_all(store, templates, targets, c);
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto v = decode(store, latents.slice_batch(i), c);
        const auto phi = exponentiate(v.negated(), c.squarings);
        const auto warped = warp(templates.slice_batch(i), phi);
        const auto f = targets.slice_batch(i);
        double s = 0;
        for (std::size_t k = 0; k < f.size(); ++k) {
            const double d = static_cast<double>(warped[k]) - static_cast<double>(f[k]);
            s += d * d;
        }
        out[i] = s;
    }
    return out;
}

}  // namespace tpie
