#pragma once

// Latent conditional diffusion: latent standardisation, the noise schedule and
// its closed-form forward process, the conditioned UNet-lite denoiser,
// classifier-free guidance, the reverse step and the training loss.

#include <cctype>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "tpie/autodiff.hpp"
#include "tpie/nn.hpp"
#include "tpie/registration.hpp"
#include "tpie/rng.hpp"

namespace tpie {

// ---------------------------------------------------------------------------
// Scaling module

struct LatentStats {
    double max_abs = 1.0;
    double mean = 0.0;
    double rms_dev = 1.0;

    friend bool operator==(const LatentStats&, const LatentStats&) = default;
};

/// γ' = γ / max|γ|, then (γ' − mean γ') / rms(γ' − mean γ'). A zero or
/// constant latent gives zeros with stats {1, mean γ', 0}.
template <typename T>
std::pair<Tensor<T>, LatentStats> scale_psi(const Tensor<T>& latent) {
    require(latent.size() > 0, "scale_psi: empty latent");
    require(latent.all_finite(), "scale_psi: latent has non-finite values");
    const double d = static_cast<double>(latent.size());
    double mx = 0;
    for (T v : latent.data()) mx = std::max(mx, std::abs(static_cast<double>(v)));
    const double inv = mx > 0 ? 1.0 / mx : 1.0;
    double mean = 0;
    for (T v : latent.data()) mean += static_cast<double>(v) * inv;
    mean /= d;
    double var = 0;
    for (T v : latent.data()) {
        const double c = static_cast<double>(v) * inv - mean;
        var += c * c;
    }
    const double rms = std::sqrt(var / d);
    Tensor<T> out(latent.shape());
    if (mx == 0 || rms == 0) return {std::move(out), LatentStats{1.0, mean, 0.0}};
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = static_cast<T>((static_cast<double>(latent[i]) * inv - mean) / rms);
    return {std::move(out), LatentStats{mx, mean, rms}};
}

/// (scaled · rms_dev + mean) · max_abs.
template <typename T>
Tensor<T> unscale_psi(const Tensor<T>& scaled, const LatentStats& s) {
    Tensor<T> out(scaled.shape());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = static_cast<T>((static_cast<double>(scaled[i]) * s.rms_dev + s.mean) * s.max_abs);
    return out;
}

/// Element-wise mean of per-sample statistics.
inline LatentStats aggregate_stats(const std::vector<LatentStats>& all) {
    require(!all.empty(), "aggregate_stats: no samples");
    LatentStats a{0, 0, 0};
    for (const auto& s : all) {
        a.max_abs += s.max_abs;
        a.mean += s.mean;
        a.rms_dev += s.rms_dev;
    }
    const double n = static_cast<double>(all.size());
    return {a.max_abs / n, a.mean / n, a.rms_dev / n};
}

// ---------------------------------------------------------------------------
// Noise schedule and the two processes

/// Steps are numbered 1..T. `timesteps[τ-1]` is the denoiser time index for
/// step τ; it differs from τ only in a respaced schedule.
struct NoiseSchedule {
    std::vector<double> betas, alphas, alpha_bars;
    std::vector<int> timesteps;

    static NoiseSchedule from_betas(std::vector<double> betas) {
        require(!betas.empty(), "NoiseSchedule: need at least one step");
        NoiseSchedule s;
        s.betas = std::move(betas);
        double ab = 1.0;
        for (std::size_t i = 0; i < s.betas.size(); ++i) {
            const double b = s.betas[i];
            require(b >= 0 && b < 1, "NoiseSchedule: beta must lie in [0,1)");
            s.alphas.push_back(1.0 - b);
            ab *= 1.0 - b;
            s.alpha_bars.push_back(ab);
            s.timesteps.push_back(static_cast<int>(i + 1));
        }
        return s;
    }

    static NoiseSchedule linear(int steps = 500, double beta_start = 1e-4, double beta_end = 0.02) {
        require(steps >= 1, "NoiseSchedule: steps must be >= 1");
        std::vector<double> b(static_cast<std::size_t>(steps));
        for (int i = 0; i < steps; ++i)
            b[static_cast<std::size_t>(i)] =
                steps == 1 ? beta_start : beta_start + (beta_end - beta_start) * i / static_cast<double>(steps - 1);
        return from_betas(std::move(b));
    }

    int steps() const { return static_cast<int>(betas.size()); }

    void check_step(int tau) const {
        if (tau < 1 || tau > steps()) {
            throw ContractError("diffusion step " + std::to_string(tau) + " outside [1, " + std::to_string(steps()) +
                                "]");
        }
    }
    double beta(int tau) const { return check_step(tau), betas[static_cast<std::size_t>(tau - 1)]; }
    double alpha(int tau) const { return check_step(tau), alphas[static_cast<std::size_t>(tau - 1)]; }
    double alpha_bar(int tau) const { return check_step(tau), alpha_bars[static_cast<std::size_t>(tau - 1)]; }
    int timestep(int tau) const { return check_step(tau), timesteps[static_cast<std::size_t>(tau - 1)]; }

    /// `n` evenly spaced steps of this schedule, with betas recomputed so the
    /// cumulative products match the original at the kept steps.
    NoiseSchedule respaced(int n) const {
        require(n >= 1 && n <= steps(), "respaced: steps must lie in [1, T]");
        if (n == steps()) return *this;
        std::vector<int> keep;
        for (int k = 0; k < n; ++k) {
            const double pos = n == 1 ? steps() : 1.0 + (steps() - 1) * k / static_cast<double>(n - 1);
            keep.push_back(static_cast<int>(std::lround(pos)));
        }
        NoiseSchedule s;
        double prev = 1.0;
        for (int t : keep) {
            const double ab = alpha_bar(t);
            s.betas.push_back(1.0 - ab / prev);
            s.alphas.push_back(ab / prev);
            s.alpha_bars.push_back(ab);
            s.timesteps.push_back(timestep(t));
            prev = ab;
        }
        return s;
    }
};

/// √ᾱ_τ γ0 + √(1−ᾱ_τ) ε.
template <typename T>
Tensor<T> q_sample(const Tensor<T>& x0, int tau, const Tensor<T>& eps, const NoiseSchedule& s) {
    require_shape(eps.shape(), x0.shape(), "q_sample");
    const double ab = s.alpha_bar(tau);
    const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
    Tensor<T> out(x0.shape());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = static_cast<T>(a * static_cast<double>(x0[i]) + b * static_cast<double>(eps[i]));
    return out;
}

/// 1/√α_τ (γ_τ − (1−α_τ)/√(1−ᾱ_τ) Ẑ) + √β_τ ρ.
template <typename T>
Tensor<T> p_sample_step(const Tensor<T>& x, int tau, const Tensor<T>& z, const Tensor<T>& rho, const NoiseSchedule& s) {
    require_shape(z.shape(), x.shape(), "p_sample_step");
    require_shape(rho.shape(), x.shape(), "p_sample_step noise");
    const double a = s.alpha(tau), ab = s.alpha_bar(tau), sigma = std::sqrt(s.beta(tau));
    const double inv_sqrt_a = 1.0 / std::sqrt(a);
    const double coef = (1.0 - a) / std::sqrt(1.0 - ab);
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = static_cast<T>(inv_sqrt_a * (static_cast<double>(x[i]) - coef * static_cast<double>(z[i])) +
                                sigma * static_cast<double>(rho[i]));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Conditioning

constexpr std::size_t kTextDim = 64;

namespace detail {

inline std::uint64_t token_hash(const std::string& token) {
    std::uint64_t h = 0xcbf29ce484222325ULL ^ 0x7470696574657874ULL;  // fixed seed
    for (unsigned char c : token) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    h ^= h >> 33;
    h *= 0xff51afd7ed558ccdULL;
    h ^= h >> 33;
    return h;
}

}  // namespace detail

/// Lower-cased tokens: maximal runs of ASCII letters/digits or non-ASCII bytes.
inline std::vector<std::string> tokenize(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (unsigned char c : text) {
        if (std::isalnum(c) || c >= 0x80) {
            cur.push_back(static_cast<char>(c < 0x80 ? std::tolower(c) : c));
        } else if (!cur.empty()) {
            out.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

struct TokenSlot {
    std::size_t bucket;
    int sign;
};

inline TokenSlot token_slot(const std::string& token) {
    const auto h = detail::token_hash(token);
    return {static_cast<std::size_t>(h % kTextDim), ((h >> 40) & 1) ? 1 : -1};
}

/// Signed hashed bag of tokens, L2-normalised (zero stays zero).
inline Tensor<float> embed_text(const std::string& instruction) {
    std::vector<double> acc(kTextDim, 0.0);
    for (const auto& tok : tokenize(instruction)) {
        const auto slot = token_slot(tok);
        acc[slot.bucket] += slot.sign;
    }
    double norm = 0;
    for (double v : acc) norm += v * v;
    norm = std::sqrt(norm);
    Tensor<float> out(Shape{kTextDim});
    if (norm > 0)
        for (std::size_t i = 0; i < kTextDim; ++i) out[i] = static_cast<float>(acc[i] / norm);
    return out;
}

/// Periodic central-difference gradient of m[1,H,W] (one channel per axis),
/// block-averaged by `factor`: [2, H/factor, W/factor].
template <typename T>
Tensor<T> embed_image(const Tensor<T>& image, std::size_t factor = 8) {
    require(image.rank() == 3 && image.dim(0) == 1, "embed_image: expected [1,H,W], got " + shape_str(image.shape()));
    const std::size_t h = image.dim(1), w = image.dim(2);
    require(factor >= 1 && h % factor == 0 && w % factor == 0,
            "embed_image: extents " + shape_str(image.shape()) + " not divisible by " + std::to_string(factor));
    const std::vector<std::size_t> ext{h, w};
    const auto g = detail::GridExtents::from(ext);
    Tensor<T> grad(Shape{2, h, w});
    detail::central_diff_forward(g, 1, 0, image.ptr(), grad.ptr());
    detail::central_diff_forward(g, 1, 1, image.ptr(), grad.ptr() + h * w);
    const std::size_t oh = h / factor, ow = w / factor;
    Tensor<T> out(Shape{2, oh, ow});
    const T inv = T(1) / static_cast<T>(factor * factor);
    for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t x = 0; x < ow; ++x) {
                T acc = 0;
                for (std::size_t dy = 0; dy < factor; ++dy)
                    for (std::size_t dx = 0; dx < factor; ++dx)
                        acc += grad[(c * h + y * factor + dy) * w + x * factor + dx];
                out[(c * oh + y) * ow + x] = acc * inv;
            }
    return out;
}

template <typename T = float>
struct ConditioningBundle {
    Tensor<T> image_channels;  // [d,H,W]
    Tensor<T> text;            // [64]
    bool null_image = false;
    bool null_text = false;

    /// Copy with the given conditions replaced by their null encodings.
    ConditioningBundle nulled(bool image, bool txt) const {
        ConditioningBundle c = *this;
        if (image) {
            c.null_image = true;
            c.image_channels.fill(T(0));
        }
        if (txt) {
            c.null_text = true;
            c.text.fill(T(0));
        }
        return c;
    }
};

template <typename T>
ConditioningBundle<T> make_conditioning(const Tensor<T>& tmpl, const std::string& instruction, std::size_t factor = 8) {
    return {embed_image(tmpl, factor), embed_text(instruction).template cast<T>(), false, false};
}

struct DropoutDraw {
    bool image = false, text = false, both = false;
};

/// Three independent events with probability p each: drop image, drop text,
/// drop both.
inline DropoutDraw draw_dropout(CounterRng& rng, double p_drop) {
    require(p_drop >= 0 && p_drop <= 0.5, "condition_dropout: p_drop must lie in [0, 0.5]");
    DropoutDraw d;
    d.image = rng.bernoulli(p_drop);
    d.text = rng.bernoulli(p_drop);
    d.both = rng.bernoulli(p_drop);
    return d;
}

template <typename T>
ConditioningBundle<T> condition_dropout(const ConditioningBundle<T>& cond, CounterRng& rng, double p_drop) {
    const auto d = draw_dropout(rng, p_drop);
    return cond.nulled(d.image || d.both, d.text || d.both);
}

struct GuidanceConfig {
    double image = 1.5;  // δ_I
    double text = 7.5;   // δ_T
};

// ---------------------------------------------------------------------------
// Denoiser

struct DenoiserConfig {
    std::size_t latent_channels = 16;
    std::size_t latent_size = 4;
    std::size_t image_channels = 2;
    std::size_t width = 32;
    std::size_t text_channels = 4;
    std::size_t time_freqs = 64;
    std::size_t time_dim = 64;
    double lambda = 0.1;
    double weight_decay = 1e-5;
    double p_drop = 0.05;
};

inline void validate(const DenoiserConfig& c) {
    require(c.latent_size >= 2 && c.latent_size % 2 == 0, "denoiser: latent_size must be even and >= 2");
    require(c.width > 0 && c.latent_channels > 0 && c.time_freqs > 0 && c.time_dim > 0,
            "denoiser: widths must be positive");
    require(c.lambda >= 0, "denoiser: lambda must be >= 0");
    require(c.weight_decay >= 0, "denoiser: weight_decay must be >= 0");
    require(c.p_drop >= 0 && c.p_drop <= 0.5, "denoiser: p_drop must lie in [0, 0.5]");
}

template <typename T>
void init_denoiser(ParameterStore<T>& store, const DenoiserConfig& c, std::uint64_t seed) {
    validate(c);
    const std::size_t w = c.width, td = c.time_dim;
    nn::init_linear(store, "diffusion/time0", 2 * c.time_freqs, td, seed);
    nn::init_linear(store, "diffusion/time1", td, td, seed);
    nn::init_linear(store, "diffusion/text", kTextDim, c.text_channels, seed);
    nn::init_conv(store, "diffusion/in", c.latent_channels + c.image_channels + c.text_channels, w, 3, seed);
    nn::init_linear(store, "diffusion/in_t", td, w, seed);
    nn::init_conv(store, "diffusion/down", w, w, 3, seed);
    nn::init_linear(store, "diffusion/down_t", td, w, seed);
    nn::init_conv(store, "diffusion/mid0", w, 2 * w, 3, seed);
    nn::init_linear(store, "diffusion/mid0_t", td, 2 * w, seed);
    nn::init_conv(store, "diffusion/mid1", 2 * w, 2 * w, 3, seed);
    nn::init_conv(store, "diffusion/up", 3 * w, w, 3, seed);
    nn::init_linear(store, "diffusion/up_t", td, w, seed);
    nn::init_conv(store, "diffusion/out", w, c.latent_channels, 3, seed);
}

/// Sinusoidal features [sin(τ f_i), cos(τ f_i)] with f_i = 10000^(−i/F).
template <typename T>
Tensor<T> time_features(const std::vector<int>& taus, std::size_t freqs) {
    Tensor<T> out(Shape{taus.size(), 2 * freqs});
    for (std::size_t b = 0; b < taus.size(); ++b) {
        for (std::size_t i = 0; i < freqs; ++i) {
            const double f = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(freqs));
            const double a = static_cast<double>(taus[b]) * f;
            out[b * 2 * freqs + i] = static_cast<T>(std::sin(a));
            out[b * 2 * freqs + freqs + i] = static_cast<T>(std::cos(a));
        }
    }
    return out;
}

/// Noise prediction for x[B,C,h,w] at denoiser times `taus`, with image
/// conditions img[B,d,h,w] and text embeddings text[B,64].
template <typename T>
Var<T> predict_noise(const Bound<T>& p, Var<T> x, const std::vector<int>& taus, Var<T> img, Var<T> text,
                     const DenoiserConfig& c) {
    const std::size_t b = x.shape().at(0), n = c.latent_size;
    require_shape(x.shape(), Shape{b, c.latent_channels, n, n}, "predict_noise latent");
    require_shape(img.shape(), Shape{b, c.image_channels, n, n}, "predict_noise image condition");
    require_shape(text.shape(), Shape{b, kTextDim}, "predict_noise text condition");
    require(taus.size() == b, "predict_noise: one time index per sample required");
    auto& tape = p.tape();
    const Var<T> te = nn::dense(p, "diffusion/time1",
                                silu(nn::dense(p, "diffusion/time0", tape.constant(time_features<T>(taus, c.time_freqs)))));
    const Var<T> tx = tile_spatial(nn::dense(p, "diffusion/text", text), n, n);
    Var<T> h = concat_channels<T>({x, img, tx});
    h = silu(add_channel_vector(nn::conv(p, "diffusion/in", h), nn::dense(p, "diffusion/in_t", te)));
    const Var<T> skip = silu(add_channel_vector(nn::conv(p, "diffusion/down", h), nn::dense(p, "diffusion/down_t", te)));
    h = avg_pool2(skip, 2);
    h = silu(add_channel_vector(nn::conv(p, "diffusion/mid0", h), nn::dense(p, "diffusion/mid0_t", te)));
    h = silu(nn::conv(p, "diffusion/mid1", h));
    h = concat_channels<T>({upsample2(h), skip});
    h = silu(add_channel_vector(nn::conv(p, "diffusion/up", h), nn::dense(p, "diffusion/up_t", te)));
    return nn::conv(p, "diffusion/out", h);
}

/// Stacks per-sample conditions into batched image [B,d,h,w] and text [B,64] tensors.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> stack_conditions(const std::vector<ConditioningBundle<T>>& conds) {
    std::vector<Tensor<T>> imgs, texts;
    for (const auto& c : conds) {
        imgs.push_back(c.image_channels);
        texts.push_back(c.text);
    }
    return {stack(imgs), stack(texts)};
}

/// Single-sample noise prediction (no gradient).
template <typename T>
Tensor<T> predict_noise(const ParameterStore<T>& store, const Tensor<T>& x, int tau, const ConditioningBundle<T>& cond,
                        const DenoiserConfig& c) {
    Tape<T> tape;
    Bound<T> p(tape, store, "diffusion/", false);
    Shape s{1};
    s.insert(s.end(), x.shape().begin(), x.shape().end());
    auto [img, txt] = stack_conditions<T>({cond});
    auto z = predict_noise(p, tape.constant(x.reshaped(s)), {tau}, tape.constant(std::move(img)),
                           tape.constant(std::move(txt)), c);
    return z.value().slice_batch(0);
}

/// Guided prediction for a batch: the three branches (∅,∅), (∇m,∅), (∇m,Λ)
/// run as one batch of 3B and are merged as
/// Z00 + δ_I (Z10 − Z00) + δ_T (Z11 − Z10).
template <typename T>
Tensor<T> cfg_predict_batch(const ParameterStore<T>& store, const Tensor<T>& x, const std::vector<int>& taus,
                            const Tensor<T>& img, const Tensor<T>& text, const GuidanceConfig& guide,
                            const DenoiserConfig& c) {
    require(std::isfinite(guide.image) && std::isfinite(guide.text) && guide.image >= 0 && guide.text >= 0,
            "guidance scales must be finite and non-negative");
    const std::size_t b = x.dim(0);
    const std::size_t xs = x.size() / b, is = img.size() / b, ts = text.size() / b;
    Shape xshape = x.shape(), ishape = img.shape(), tshape = text.shape();
    xshape[0] = ishape[0] = tshape[0] = 3 * b;
    Tensor<T> x3(xshape), i3(ishape), t3(tshape);
    std::vector<int> tau3;
    for (std::size_t k = 0; k < 3; ++k) {
        std::copy_n(x.ptr(), b * xs, x3.ptr() + k * b * xs);
        if (k >= 1) std::copy_n(img.ptr(), b * is, i3.ptr() + k * b * is);
        if (k == 2) std::copy_n(text.ptr(), b * ts, t3.ptr() + k * b * ts);
        tau3.insert(tau3.end(), taus.begin(), taus.end());
    }
    Tape<T> tape;
    Bound<T> p(tape, store, "diffusion/", false);
    const auto z = predict_noise(p, tape.constant(std::move(x3)), tau3, tape.constant(std::move(i3)),
                                 tape.constant(std::move(t3)), c);
    const auto& zv = z.value();
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < b * xs; ++i) {
        const double z00 = zv[i], z10 = zv[b * xs + i], z11 = zv[2 * b * xs + i];
        out[i] = static_cast<T>(z00 + guide.image * (z10 - z00) + guide.text * (z11 - z10));
    }
    return out;
}

template <typename T>
Tensor<T> cfg_predict(const ParameterStore<T>& store, const Tensor<T>& x, int tau, const ConditioningBundle<T>& cond,
                      const GuidanceConfig& guide, const DenoiserConfig& c) {
    Shape s{1};
    s.insert(s.end(), x.shape().begin(), x.shape().end());
    auto [img, txt] = stack_conditions<T>({cond});
    return cfg_predict_batch(store, x.reshaped(s), {tau}, img, txt, guide, c).slice_batch(0);
}

// ---------------------------------------------------------------------------
// Loss and training

/// Batch inputs of the noise-matching loss; all tensors have leading axis B.
template <typename T>
struct DiffusionBatch {
    Tensor<T> x0, eps, img, text;
    std::vector<int> taus;  // schedule steps, 1..T
};

/// Batch mean of ‖ε − Z‖² + λ‖γ0 − γ̂0‖², plus weight_decay·‖θ‖², where
/// γ_τ = q_sample(γ0, τ, ε) and γ̂0 = (γ_τ − √(1−ᾱ_τ) Z) / √ᾱ_τ.
template <typename T>
Var<T> diffusion_loss(const Bound<T>& p, const DiffusionBatch<T>& batch, const NoiseSchedule& s,
                      const DenoiserConfig& c) {
    auto& tape = p.tape();
    const std::size_t b = batch.x0.dim(0), per = batch.x0.size() / b;
    require(batch.taus.size() == b, "diffusion_loss: one step per sample required");
    require_shape(batch.eps.shape(), batch.x0.shape(), "diffusion_loss noise");
    Tensor<T> xt(batch.x0.shape());
    std::vector<T> sqrt_ab(b), sqrt_1mab(b), inv_sqrt_ab(b);
    std::vector<int> model_t(b);
    for (std::size_t k = 0; k < b; ++k) {
        const double ab = s.alpha_bar(batch.taus[k]);
        sqrt_ab[k] = static_cast<T>(std::sqrt(ab));
        sqrt_1mab[k] = static_cast<T>(std::sqrt(1.0 - ab));
        inv_sqrt_ab[k] = static_cast<T>(1.0 / std::sqrt(ab));
        model_t[k] = s.timestep(batch.taus[k]);
        for (std::size_t i = 0; i < per; ++i) {
            const std::size_t j = k * per + i;
            xt[j] = static_cast<T>(std::sqrt(ab) * static_cast<double>(batch.x0[j]) +
                                   std::sqrt(1.0 - ab) * static_cast<double>(batch.eps[j]));
        }
    }
    const Var<T> xt_v = tape.constant(xt);
    const Var<T> z = predict_noise(p, xt_v, model_t, tape.constant(batch.img), tape.constant(batch.text), c);
    const Var<T> noise_term = sum_squares(sub(tape.constant(batch.eps), z));
    // γ̂0 − γ0 = (γτ − √(1−ᾱ)Z)/√ᾱ − γ0
    const Var<T> x0_hat = scale_per_sample(sub(xt_v, scale_per_sample(z, sqrt_1mab)), inv_sqrt_ab);
    const Var<T> recon_term = sum_squares(sub(tape.constant(batch.x0), x0_hat));
    Var<T> loss = scale(add(noise_term, scale(recon_term, static_cast<T>(c.lambda))), T(1) / static_cast<T>(b));
    if (c.weight_decay > 0) loss = add(loss, scale(p.squared_norm(), static_cast<T>(c.weight_decay)));
    return loss;
}

/// Training set for the denoiser: ψ-scaled latents with their conditions.
template <typename T = float>
struct LatentDataset {
    Tensor<T> latents;  // [N,C,h,w], scaled
    Tensor<T> images;   // [N,d,h,w]
    Tensor<T> texts;    // [N,64]
};

struct DiffusionTrainOptions {
    std::size_t max_epochs = 600;
    std::size_t batch_size = 32;
    double tolerance = 1e-4;
    std::size_t patience = 5;
    std::uint64_t seed = 0;
};

/// Draws τ, ε and condition dropout for the samples `idx` of one batch.
template <typename T>
DiffusionBatch<T> draw_batch(const LatentDataset<T>& data, const std::vector<std::size_t>& idx,
                             const NoiseSchedule& s, double p_drop, CounterRng rng) {
    DiffusionBatch<T> batch;
    batch.x0 = gather_rows(data.latents, idx);
    batch.img = gather_rows(data.images, idx);
    batch.text = gather_rows(data.texts, idx);
    batch.eps = Tensor<T>(batch.x0.shape());
    const std::size_t per = batch.x0.size() / idx.size();
    const std::size_t ip = batch.img.size() / idx.size(), tp = batch.text.size() / idx.size();
    for (std::size_t k = 0; k < idx.size(); ++k) {
        batch.taus.push_back(1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(s.steps()))));
        for (std::size_t i = 0; i < per; ++i) batch.eps[k * per + i] = static_cast<T>(rng.normal());
        const auto d = draw_dropout(rng, p_drop);
        if (d.image || d.both) std::fill_n(batch.img.ptr() + k * ip, ip, T(0));
        if (d.text || d.both) std::fill_n(batch.text.ptr() + k * tp, tp, T(0));
    }
    return batch;
}

template <typename T>
double diffusion_step(ParameterStore<T>& store, Adam& adam, const DiffusionBatch<T>& batch, const NoiseSchedule& s,
                      const DenoiserConfig& c, const std::vector<std::size_t>& idx) {
    Tape<T> tape;
    Bound<T> p(tape, store, "diffusion/");
    const auto loss = diffusion_loss(p, batch, s, c);
    const double value = static_cast<double>(loss.value().item());
    if (!std::isfinite(value)) throw TrainingError("diffusion: non-finite loss on batch [" + describe_batch(idx) + "]");
    const auto grads = tape.backward(loss);
    std::vector<std::string> names;
    for (const auto& [name, var] : p.vars()) names.push_back(name);
    adam.step(store, names, [&](const std::string& name) -> const Tensor<T>& { return grads[p[name]]; });
    return value;
}

/// Denoiser epochs over the latent set until convergence or the epoch cap.
template <typename T, typename Stop>
void train_diffusion(ParameterStore<T>& store, Adam& adam, StageState& state, const LatentDataset<T>& data,
                     const NoiseSchedule& s, const DenoiserConfig& c, const DiffusionTrainOptions& opt,
                     Stop&& should_stop) {
    validate(c);
    require(data.latents.rank() == 4 && data.latents.dim(0) > 0, "train_diffusion: empty latent set");
    require(opt.batch_size > 0, "train_diffusion: batch_size must be > 0");
    const std::size_t n = data.latents.dim(0);
    while (!state.done(opt.max_epochs)) {
        const auto order = epoch_order(n, opt.seed, 0x4446, state.epoch);
        const CounterRng epoch_rng = CounterRng(opt.seed, 0x4E4F).split(state.epoch);
        double total = 0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < n; start += opt.batch_size) {
            std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(std::min(n, start + opt.batch_size)));
            const auto batch = draw_batch(data, idx, s, c.p_drop, epoch_rng.split(batches));
            total += diffusion_step(store, adam, batch, s, c, idx);
            ++batches;
        }
        state.record(total / static_cast<double>(batches), opt.tolerance, opt.patience);
        if (should_stop(state)) return;
    }
}

template <typename T>
void train_diffusion(ParameterStore<T>& store, Adam& adam, StageState& state, const LatentDataset<T>& data,
                     const NoiseSchedule& s, const DenoiserConfig& c, const DiffusionTrainOptions& opt) {
    train_diffusion(store, adam, state, data, s, c, opt, [](const StageState&) { return false; });
}

// ---------------------------------------------------------------------------
// Reverse chain

/// Runs the guided reverse chain for a batch of conditions. Sample k draws
/// its initial latent and step noise from `rngs[k]`.
template <typename T>
Tensor<T> sample_latents(const ParameterStore<T>& store, const DenoiserConfig& c, const NoiseSchedule& s,
                         const Tensor<T>& img, const Tensor<T>& text, const GuidanceConfig& guide,
                         std::vector<CounterRng> rngs) {
    const std::size_t b = rngs.size();
    require(b > 0 && img.dim(0) == b && text.dim(0) == b, "sample_latents: one RNG stream per condition required");
    const Shape shape{b, c.latent_channels, c.latent_size, c.latent_size};
    const std::size_t per = numel(shape) / b;
    Tensor<T> x(shape);
    for (std::size_t k = 0; k < b; ++k)
        for (std::size_t i = 0; i < per; ++i) x[k * per + i] = static_cast<T>(rngs[k].normal());
    for (int tau = s.steps(); tau >= 1; --tau) {
        const std::vector<int> taus(b, s.timestep(tau));
        const auto z = cfg_predict_batch(store, x, taus, img, text, guide, c);
        Tensor<T> rho(shape);
        if (tau > 1)
            for (std::size_t k = 0; k < b; ++k)
                for (std::size_t i = 0; i < per; ++i) rho[k * per + i] = static_cast<T>(rngs[k].normal());
        x = p_sample_step(x, tau, z, rho, s);
        if (!x.all_finite()) throw TrainingError("sampling: non-finite latent at step " + std::to_string(tau));
    }
    return x;
}

}  // namespace tpie
