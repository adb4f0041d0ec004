#pragma once

// End-to-end orchestration: configuration, the model checkpoint, alternating
// joint training, guided sampling, evaluation and pixel-wise statistics.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "tpie/checkpoint.hpp"
#include "tpie/datagen.hpp"
#include "tpie/diffeo.hpp"
#include "tpie/diffusion.hpp"
#include "tpie/io.hpp"
#include "tpie/nn.hpp"
#include "tpie/registration.hpp"

namespace tpie {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration

struct TrainConfig {
    std::uint64_t seed = 0;
    RegistrationConfig registration;
    DenoiserConfig denoiser;
    int schedule_steps = 500;
    double beta_start = 1e-4;
    double beta_end = 0.02;

    double lr_registration = 1e-3;
    double lr_diffusion = 1e-5;
    double lr_decay = 1e-8;
    std::uint64_t lr_decay_after = 1000;
    double r = 1.0;  // joint loss weight of the diffusion term

    std::size_t registration_epochs = 200;
    std::size_t registration_batch = 8;
    std::size_t diffusion_epochs = 600;
    std::size_t diffusion_batch = 32;
    std::size_t finetune_steps = 600;
    std::size_t finetune_batch = 8;
    std::size_t outer_iterations = 2;
    double tolerance = 1e-4;
    std::size_t patience = 20;  // registration convergence window in epochs
    std::size_t diffusion_patience = 100;

    GuidanceConfig guidance;
    int sample_steps = 500;

    NoiseSchedule schedule() const { return NoiseSchedule::linear(schedule_steps, beta_start, beta_end); }

    /// Denoiser shapes follow the registration latent.
    DenoiserConfig denoiser_config() const {
        DenoiserConfig d = denoiser;
        d.latent_channels = registration.latent_channels;
        d.latent_size = registration.latent_size();
        d.image_channels = 2;
        return d;
    }
};

inline void validate(const TrainConfig& c) {
    validate(c.registration);
    validate(c.denoiser_config());
    require(c.schedule_steps >= 1, "config: schedule_steps must be >= 1");
    require(c.beta_start > 0 && c.beta_end < 1 && c.beta_start <= c.beta_end,
            "config: need 0 < beta_start <= beta_end < 1");
    require(c.lr_registration >= 0 && c.lr_diffusion >= 0, "config: learning rates must be >= 0");
    require(c.lr_decay >= 0 && c.lr_decay < 1, "config: lr_decay must lie in [0,1)");
    require(c.r >= 0, "config: r must be >= 0");
    require(c.registration_batch > 0 && c.diffusion_batch > 0 && c.finetune_batch > 0,
            "config: batch sizes must be positive");
    require(c.outer_iterations >= 1, "config: outer_iterations must be >= 1");
    require(c.guidance.image >= 0 && c.guidance.text >= 0, "config: guidance scales must be >= 0");
    require(c.sample_steps >= 1 && c.sample_steps <= c.schedule_steps, "config: sample_steps must lie in [1, T]");
}

inline json to_json(const TrainConfig& c) {
    const auto& rg = c.registration;
    const auto& dn = c.denoiser;
    return json{
        {"seed", c.seed},
        {"registration",
         {{"image_size", rg.image_size},
          {"width", rg.width},
          {"latent_channels", rg.latent_channels},
          {"sigma", rg.sigma},
          {"weight_decay", rg.weight_decay},
          {"clamp", rg.clamp},
          {"squarings", rg.squarings},
          {"leak", rg.leak}}},
        {"denoiser",
         {{"width", dn.width},
          {"text_channels", dn.text_channels},
          {"time_freqs", dn.time_freqs},
          {"time_dim", dn.time_dim},
          {"lambda", dn.lambda},
          {"weight_decay", dn.weight_decay},
          {"p_drop", dn.p_drop}}},
        {"schedule", {{"steps", c.schedule_steps}, {"beta_start", c.beta_start}, {"beta_end", c.beta_end}}},
        {"lr_registration", c.lr_registration},
        {"lr_diffusion", c.lr_diffusion},
        {"lr_decay", c.lr_decay},
        {"lr_decay_after", c.lr_decay_after},
        {"r", c.r},
        {"registration_epochs", c.registration_epochs},
        {"registration_batch", c.registration_batch},
        {"diffusion_epochs", c.diffusion_epochs},
        {"diffusion_batch", c.diffusion_batch},
        {"finetune_steps", c.finetune_steps},
        {"finetune_batch", c.finetune_batch},
        {"outer_iterations", c.outer_iterations},
        {"tolerance", c.tolerance},
        {"patience", c.patience},
        {"diffusion_patience", c.diffusion_patience},
        {"guidance", {{"image", c.guidance.image}, {"text", c.guidance.text}}},
        {"sample_steps", c.sample_steps},
    };
}

namespace detail {

/// Copies j[key] into `out` if present; every key of `j` must be consumed.
class JsonReader {
   public:
    JsonReader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
        if (!j_.is_object()) throw ContractError(where_ + ": expected a JSON object");
    }

    template <typename V>
    void get(const char* key, V& out) {
        seen_.push_back(key);
        if (!j_.contains(key)) return;
        try {
            out = j_.at(key).get<V>();
        } catch (const json::exception&) {
            throw ContractError(where_ + "." + key + ": wrong type");
        }
    }

    JsonReader child(const char* key) {
        seen_.push_back(key);
        static const json empty = json::object();
        return JsonReader(j_.contains(key) ? j_.at(key) : empty, where_ + "." + key);
    }

    void finish() const {
        for (const auto& [k, v] : j_.items())
            if (std::find(seen_.begin(), seen_.end(), k) == seen_.end())
                throw ContractError(where_ + ": unknown key '" + k + "'");
    }

   private:
    const json& j_;
    std::string where_;
    std::vector<std::string> seen_;
};

}  // namespace detail

/// Overlays the keys present in `j` on `base`; unknown keys are rejected.
inline TrainConfig config_from_json(const json& j, TrainConfig c = {}) {
    detail::JsonReader r(j, "config");
    r.get("seed", c.seed);
    {
        auto s = r.child("registration");
        s.get("image_size", c.registration.image_size);
        s.get("width", c.registration.width);
        s.get("latent_channels", c.registration.latent_channels);
        s.get("sigma", c.registration.sigma);
        s.get("weight_decay", c.registration.weight_decay);
        s.get("clamp", c.registration.clamp);
        s.get("squarings", c.registration.squarings);
        s.get("leak", c.registration.leak);
        s.finish();
    }
    {
        auto s = r.child("denoiser");
        s.get("width", c.denoiser.width);
        s.get("text_channels", c.denoiser.text_channels);
        s.get("time_freqs", c.denoiser.time_freqs);
        s.get("time_dim", c.denoiser.time_dim);
        s.get("lambda", c.denoiser.lambda);
        s.get("weight_decay", c.denoiser.weight_decay);
        s.get("p_drop", c.denoiser.p_drop);
        s.finish();
    }
    {
        auto s = r.child("schedule");
        s.get("steps", c.schedule_steps);
        s.get("beta_start", c.beta_start);
        s.get("beta_end", c.beta_end);
        s.finish();
    }
    r.get("lr_registration", c.lr_registration);
    r.get("lr_diffusion", c.lr_diffusion);
    r.get("lr_decay", c.lr_decay);
    r.get("lr_decay_after", c.lr_decay_after);
    r.get("r", c.r);
    r.get("registration_epochs", c.registration_epochs);
    r.get("registration_batch", c.registration_batch);
    r.get("diffusion_epochs", c.diffusion_epochs);
    r.get("diffusion_batch", c.diffusion_batch);
    r.get("finetune_steps", c.finetune_steps);
    r.get("finetune_batch", c.finetune_batch);
    r.get("outer_iterations", c.outer_iterations);
    r.get("tolerance", c.tolerance);
    r.get("patience", c.patience);
    r.get("diffusion_patience", c.diffusion_patience);
    {
        auto s = r.child("guidance");
        s.get("image", c.guidance.image);
        s.get("text", c.guidance.text);
        s.finish();
    }
    r.get("sample_steps", c.sample_steps);
    r.finish();
    validate(c);
    return c;
}

// ---------------------------------------------------------------------------
// Model checkpoint

enum class Phase { registration, diffusion, finetune, done };

inline const char* phase_name(Phase p) {
    switch (p) {
        case Phase::registration: return "registration";
        case Phase::diffusion: return "diffusion";
        case Phase::finetune: return "finetune";
        case Phase::done: return "done";
    }
    return "?";
}

inline Phase parse_phase(const std::string& s) {
    for (Phase p : {Phase::registration, Phase::diffusion, Phase::finetune, Phase::done})
        if (s == phase_name(p)) return p;
    throw io::IoError("unknown training phase '" + s + "'");
}

struct JointRecord {
    std::size_t outer = 0;
    double loss_registration = 0;  // L_ω: last registration epoch mean
    double loss_diffusion = 0;     // L_θ: last diffusion epoch mean
    double r = 0;
    double joint = 0;  // L_ω + r·L_θ

    friend bool operator==(const JointRecord&, const JointRecord&) = default;
};

struct JointState {
    std::size_t outer = 0;
    Phase phase = Phase::registration;
    StageState registration, diffusion;
    std::size_t registration_base = 0;  // epoch count when this outer iteration's stage began
    std::size_t diffusion_base = 0;
    std::size_t finetune_step = 0;
    std::vector<double> finetune_curve;
    std::vector<JointRecord> history;

    friend bool operator==(const JointState&, const JointState&) = default;
};

struct ModelCheckpoint {
    TrainConfig config;
    ParameterStore<float> params;
    Adam adam_registration, adam_diffusion;
    LatentStats latent_stats;
    JointState state;
};

/// Fresh model: initialised parameters, empty optimiser state.
inline ModelCheckpoint init_model(const TrainConfig& c) {
    validate(c);
    ModelCheckpoint m;
    m.config = c;
    init_registration(m.params, c.registration, c.seed);
    init_denoiser(m.params, c.denoiser_config(), c.seed);
    m.adam_registration = Adam(AdamConfig{c.lr_registration, 0.9, 0.999, 1e-8, c.lr_decay, c.lr_decay_after});
    m.adam_diffusion = Adam(AdamConfig{c.lr_diffusion, 0.9, 0.999, 1e-8, c.lr_decay, c.lr_decay_after});
    return m;
}

namespace detail {

inline json stage_json(const StageState& s) {
    return {{"epoch", s.epoch}, {"converged", s.converged}, {"run_start", s.run_start}, {"curve", s.curve}};
}

inline StageState stage_from(const json& j) {
    StageState s;
    s.epoch = j.at("epoch").get<std::size_t>();
    s.converged = j.at("converged").get<bool>();
    s.run_start = j.at("run_start").get<std::size_t>();
    s.curve = j.at("curve").get<std::vector<double>>();
    return s;
}

inline void put_moments(CheckpointFile& f, const std::string& prefix, const Adam& a) {
    for (const auto& [k, v] : a.first_moments()) f.tensors.emplace(prefix + "m/" + k, v);
    for (const auto& [k, v] : a.second_moments()) f.tensors.emplace(prefix + "v/" + k, v);
}

inline void take_moments(const CheckpointFile& f, const std::string& prefix, Adam& a) {
    for (const auto& [k, v] : f.tensors) {
        if (k.compare(0, prefix.size() + 2, prefix + "m/") == 0) a.first_moments().emplace(k.substr(prefix.size() + 2), v);
        if (k.compare(0, prefix.size() + 2, prefix + "v/") == 0) a.second_moments().emplace(k.substr(prefix.size() + 2), v);
    }
}

}  // namespace detail

inline CheckpointFile to_file(const ModelCheckpoint& m) {
    CheckpointFile f;
    for (const auto& [k, v] : m.params.all()) f.tensors.emplace("params/" + k, v);
    detail::put_moments(f, "adam/registration/", m.adam_registration);
    detail::put_moments(f, "adam/diffusion/", m.adam_diffusion);
    json history = json::array();
    for (const auto& h : m.state.history) {
        history.push_back({{"outer", h.outer},
                           {"loss_registration", h.loss_registration},
                           {"loss_diffusion", h.loss_diffusion},
                           {"r", h.r},
                           {"joint", h.joint}});
    }
    f.meta = {
        {"config", to_json(m.config)},
        {"latent_stats",
         {{"max_abs", m.latent_stats.max_abs}, {"mean", m.latent_stats.mean}, {"rms_dev", m.latent_stats.rms_dev}}},
        {"optimizer", {{"registration_steps", m.adam_registration.steps()}, {"diffusion_steps", m.adam_diffusion.steps()}}},
        {"state",
         {{"outer", m.state.outer},
          {"phase", phase_name(m.state.phase)},
          {"registration", detail::stage_json(m.state.registration)},
          {"diffusion", detail::stage_json(m.state.diffusion)},
          {"registration_base", m.state.registration_base},
          {"diffusion_base", m.state.diffusion_base},
          {"finetune_step", m.state.finetune_step},
          {"finetune_curve", m.state.finetune_curve},
          {"history", history}}},
    };
    return f;
}

inline ModelCheckpoint from_file(const CheckpointFile& f) {
    ModelCheckpoint m;
    try {
        m.config = config_from_json(f.meta.at("config"));
        for (const auto& [k, v] : f.tensors)
            if (k.compare(0, 7, "params/") == 0) m.params.set(k.substr(7), v);
        const auto& c = m.config;
        m.adam_registration = Adam(AdamConfig{c.lr_registration, 0.9, 0.999, 1e-8, c.lr_decay, c.lr_decay_after});
        m.adam_diffusion = Adam(AdamConfig{c.lr_diffusion, 0.9, 0.999, 1e-8, c.lr_decay, c.lr_decay_after});
        detail::take_moments(f, "adam/registration/", m.adam_registration);
        detail::take_moments(f, "adam/diffusion/", m.adam_diffusion);
        const auto& opt = f.meta.at("optimizer");
        m.adam_registration.set_steps(opt.at("registration_steps").get<std::uint64_t>());
        m.adam_diffusion.set_steps(opt.at("diffusion_steps").get<std::uint64_t>());
        const auto& ls = f.meta.at("latent_stats");
        m.latent_stats = {ls.at("max_abs").get<double>(), ls.at("mean").get<double>(), ls.at("rms_dev").get<double>()};
        const auto& s = f.meta.at("state");
        m.state.outer = s.at("outer").get<std::size_t>();
        m.state.phase = parse_phase(s.at("phase").get<std::string>());
        m.state.registration = detail::stage_from(s.at("registration"));
        m.state.diffusion = detail::stage_from(s.at("diffusion"));
        m.state.registration_base = s.at("registration_base").get<std::size_t>();
        m.state.diffusion_base = s.at("diffusion_base").get<std::size_t>();
        m.state.finetune_step = s.at("finetune_step").get<std::size_t>();
        m.state.finetune_curve = s.at("finetune_curve").get<std::vector<double>>();
        for (const auto& h : s.at("history")) {
            m.state.history.push_back({h.at("outer").get<std::size_t>(), h.at("loss_registration").get<double>(),
                                       h.at("loss_diffusion").get<double>(), h.at("r").get<double>(),
                                       h.at("joint").get<double>()});
        }
    } catch (const json::exception& e) {
        throw io::IoError(std::string("checkpoint metadata: ") + e.what());
    } catch (const ContractError& e) {
        throw io::IoError(std::string("checkpoint metadata: ") + e.what());
    }
    // Every parameter of the configured architecture must be present.
    ParameterStore<float> expected;
    init_registration(expected, m.config.registration, 0);
    init_denoiser(expected, m.config.denoiser_config(), 0);
    for (const auto& [k, v] : expected.all()) {
        if (!m.params.contains(k)) throw io::IoError("checkpoint is missing parameter '" + k + "'");
        if (m.params.get(k).shape() != v.shape()) throw io::IoError("checkpoint parameter '" + k + "' has wrong shape");
    }
    return m;
}

inline void save_model(const std::filesystem::path& path, const ModelCheckpoint& m) { save_checkpoint(path, to_file(m)); }

inline ModelCheckpoint load_model(const std::filesystem::path& path) {
    try {
        return from_file(load_checkpoint(path));
    } catch (const io::IoError& e) {
        const std::string what = e.what();
        if (what.rfind(path.string(), 0) == 0) throw;
        throw io::IoError(path.string() + ": " + what);
    }
}

// ---------------------------------------------------------------------------
// Training data

struct TrainingData {
    Tensor<float> templates, targets;  // [N,1,H,W]
    Tensor<float> images;              // [N,2,h,w] conditioning
    Tensor<float> texts;               // [N,64]
};

inline TrainingData make_training_data(const LoadedPairs& pairs, std::size_t factor = 8) {
    TrainingData d;
    d.templates = pairs.templates;
    d.targets = pairs.targets;
    std::vector<Tensor<float>> imgs, texts;
    for (std::size_t i = 0; i < pairs.records.size(); ++i) {
        imgs.push_back(embed_image(pairs.templates.slice_batch(i), factor));
        texts.push_back(embed_text(pairs.records[i].instruction));
    }
    d.images = stack(imgs);
    d.texts = stack(texts);
    return d;
}

struct EncodedLatents {
    LatentDataset<float> dataset;  // ψ-scaled latents with conditions
    std::vector<LatentStats> stats;
    LatentStats aggregate;
};

inline EncodedLatents encode_training_latents(const ModelCheckpoint& m, const TrainingData& d) {
    EncodedLatents e;
    const auto raw = encode_all(m.params, d.templates, d.targets, m.config.registration);
    Tensor<float> scaled(raw.shape());
    const std::size_t per = raw.size() / raw.dim(0);
    for (std::size_t i = 0; i < raw.dim(0); ++i) {
        auto [s, st] = scale_psi(raw.slice_batch(i));
        std::copy_n(s.ptr(), per, scaled.ptr() + i * per);
        e.stats.push_back(st);
    }
    e.aggregate = aggregate_stats(e.stats);
    e.dataset = {std::move(scaled), d.images, d.texts};
    return e;
}

// ---------------------------------------------------------------------------
// Joint training

/// Called after every registration or diffusion epoch and after the
/// fine-tuning stage; returning true stops training with resumable state.
using StopHook = std::function<bool(const ModelCheckpoint&)>;

namespace detail {

/// One decoder update on denoised latents: each pair's latent is noised at a
/// random step, denoised in one shot by the current denoiser (full
/// conditioning), mapped back through ψ⁻¹ with the dataset-aggregate
/// statistics used at sampling time, and decoded; the registration loss on
/// the result trains the decoder only.
inline double finetune_step(ModelCheckpoint& m, const TrainingData& d, const EncodedLatents& enc,
                            const std::vector<std::size_t>& idx, CounterRng rng) {
    const auto& c = m.config;
    const auto dc = c.denoiser_config();
    const auto sched = c.schedule();
    const std::size_t per = enc.dataset.latents.size() / enc.dataset.latents.dim(0);
    const std::size_t b = idx.size();
    Tensor<float> x0 = gather_rows(enc.dataset.latents, idx);
    Tensor<float> xt(x0.shape());
    std::vector<int> taus(b), model_t(b);
    for (std::size_t k = 0; k < b; ++k) {
        taus[k] = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(sched.steps())));
        model_t[k] = sched.timestep(taus[k]);
        const double ab = sched.alpha_bar(taus[k]);
        for (std::size_t i = 0; i < per; ++i)
            xt[k * per + i] = static_cast<float>(std::sqrt(ab) * x0[k * per + i] + std::sqrt(1 - ab) * rng.normal());
    }
    Tensor<float> z;
    {
        Tape<float> tape;
        Bound<float> p(tape, m.params, "diffusion/", false);
        z = predict_noise(p, tape.constant(xt), model_t, tape.constant(gather_rows(enc.dataset.images, idx)),
                          tape.constant(gather_rows(enc.dataset.texts, idx)), dc)
                .value();
    }
    Tensor<float> latents(x0.shape());
    for (std::size_t k = 0; k < b; ++k) {
        const double ab = sched.alpha_bar(taus[k]);
        Tensor<float> hat(Shape(x0.shape().begin() + 1, x0.shape().end()));
        for (std::size_t i = 0; i < per; ++i)
            hat[i] = static_cast<float>((xt[k * per + i] - std::sqrt(1 - ab) * z[k * per + i]) / std::sqrt(ab));
        const auto un = unscale_psi(hat, m.latent_stats);
        std::copy_n(un.ptr(), per, latents.ptr() + k * per);
    }
    Tape<float> tape;
    Bound<float> p(tape, m.params, "registration/dec");
    const auto v = decode(p, tape.constant(latents), c.registration);
    auto loss = registration_loss(tape.constant(gather_rows(d.templates, idx)), tape.constant(gather_rows(d.targets, idx)),
                                  v, c.registration.sigma, c.registration.weight_decay, &p, c.registration.squarings);
    loss = scale(loss, static_cast<float>(c.r));
    const double value = static_cast<double>(loss.value().item());
    if (!std::isfinite(value)) throw TrainingError("finetune: non-finite loss on batch [" + describe_batch(idx) + "]");
    const auto grads = tape.backward(loss);
    std::vector<std::string> names;
    for (const auto& [name, var] : p.vars()) names.push_back(name);
    m.adam_registration.step(m.params, names, [&](const std::string& n) -> const Tensor<float>& { return grads[p[n]]; });
    return value;
}

}  // namespace detail

/// Alternating training: (a) registration to convergence, (b) denoiser on the
/// ψ-scaled encoder latents to convergence, (c) a fixed budget of decoder
/// fine-tuning on denoised latents; repeated until the joint loss
/// L_ω + r·L_θ stops improving or the outer cap is hit. With r = 0 the
/// registration network is trained once and never touched again.
/// Continues from `m.state`, so an interrupted run can be resumed.
inline void train_joint(ModelCheckpoint& m, const TrainingData& d, const StopHook& stop = {}) {
    const auto& c = m.config;
    validate(c);
    require(d.templates.rank() == 4 && d.templates.dim(0) > 0, "train_joint: empty training set");
    require(d.templates.dim(2) == c.registration.image_size && d.templates.dim(3) == c.registration.image_size,
            "train_joint: images are " + shape_str(d.templates.shape()) + " but the model expects " +
                std::to_string(c.registration.image_size) + "x" + std::to_string(c.registration.image_size));
    m.adam_registration.set_config(AdamConfig{c.lr_registration, 0.9, 0.999, 1e-8, c.lr_decay, c.lr_decay_after});
    m.adam_diffusion.set_config(AdamConfig{c.lr_diffusion, 0.9, 0.999, 1e-8, c.lr_decay, c.lr_decay_after});
    auto& st = m.state;
    bool halted = false;
    auto poll = [&](const StageState&) { return halted = stop && stop(m); };
    const auto sched = c.schedule();
    const auto dc = c.denoiser_config();
    const std::size_t n = d.templates.dim(0);

    while (st.phase != Phase::done) {
        if (st.phase == Phase::registration) {
            if (st.outer == 0 || c.r > 0) {
                RegistrationTrainOptions opt{st.registration_base + c.registration_epochs, c.registration_batch,
                                             c.tolerance, c.patience, c.seed};
                train_registration(m.params, m.adam_registration, st.registration, d.templates, d.targets,
                                   c.registration, opt, poll);
                if (!st.registration.done(opt.max_epochs)) return;
            }
            st.phase = Phase::diffusion;
            st.diffusion_base = st.diffusion.epoch;
            st.diffusion.restart();
            if (halted) return;
        }
        if (st.phase == Phase::diffusion) {
            const auto enc = encode_training_latents(m, d);
            m.latent_stats = enc.aggregate;
            DiffusionTrainOptions opt{st.diffusion_base + c.diffusion_epochs, c.diffusion_batch, c.tolerance,
                                      c.diffusion_patience, c.seed};
            train_diffusion(m.params, m.adam_diffusion, st.diffusion, enc.dataset, sched, dc, opt, poll);
            if (!st.diffusion.done(opt.max_epochs)) return;
            st.phase = Phase::finetune;
            st.finetune_step = 0;
            if (halted) return;
        }
        if (st.phase == Phase::finetune) {
            if (c.r > 0 && c.finetune_steps > 0) {
                const auto enc = encode_training_latents(m, d);
                while (st.finetune_step < c.finetune_steps) {
                    const auto order = epoch_order(n, c.seed, 0x4654 + st.outer, st.finetune_step / ((n + c.finetune_batch - 1) / c.finetune_batch));
                    const std::size_t within = st.finetune_step % ((n + c.finetune_batch - 1) / c.finetune_batch);
                    const std::size_t start = within * c.finetune_batch;
                    std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                                 order.begin() + static_cast<std::ptrdiff_t>(std::min(n, start + c.finetune_batch)));
                    const auto rng = CounterRng(c.seed, 0x4655 + st.outer).split(st.finetune_step);
                    st.finetune_curve.push_back(detail::finetune_step(m, d, enc, idx, rng));
                    ++st.finetune_step;
                }
            }
            const double lw = st.registration.curve.empty() ? 0.0 : st.registration.curve.back();
            const double lt = st.diffusion.curve.empty() ? 0.0 : st.diffusion.curve.back();
            st.history.push_back({st.outer, lw, lt, c.r, lw + c.r * lt});
            bool finished = st.outer + 1 >= c.outer_iterations;
            if (st.history.size() >= 2) {
                const double prev = st.history[st.history.size() - 2].joint;
                const double cur = st.history.back().joint;
                if ((prev - cur) / std::max(std::abs(prev), 1e-30) < c.tolerance) finished = true;
            }
            if (finished) {
                st.phase = Phase::done;
            } else {
                ++st.outer;
                st.phase = Phase::registration;
                st.registration_base = st.registration.epoch;
                st.registration.restart();
            }
            if (stop && stop(m)) return;
        }
    }
}

// ---------------------------------------------------------------------------
// Sampling

struct SampleResult {
    Tensor<float> image;  // [1,H,W]
    DeformationField<float> deformation;
    VelocityField<float> velocity;
    Tensor<float> latent;  // ψ⁻¹-mapped latent fed to the decoder
    TopologyReport topology;
};

/// Guided reverse chains for a batch of templates. Sample k uses the RNG
/// stream `streams[k]` of `seed`; the result for a given (template,
/// instruction, seed, stream) does not depend on the rest of the batch.
inline std::vector<SampleResult> sample_batch(const ModelCheckpoint& m, const std::vector<Tensor<float>>& templates,
                                              const std::vector<std::string>& instructions,
                                              const GuidanceConfig& guide, int steps, std::uint64_t seed,
                                              const std::vector<std::uint64_t>& streams) {
    const auto& c = m.config;
    require(templates.size() == instructions.size() && templates.size() == streams.size() && !templates.empty(),
            "sample: templates, instructions and streams must have equal non-zero length");
    const std::size_t sz = c.registration.image_size;
    for (const auto& t : templates) {
        if (t.shape() != Shape{1, sz, sz}) {
            throw ContractError("sample: template " + shape_str(t.shape()) + " does not match the trained resolution [1," +
                                std::to_string(sz) + "," + std::to_string(sz) + "]");
        }
    }
    const auto sched = c.schedule().respaced(steps);
    std::vector<ConditioningBundle<float>> conds;
    std::vector<CounterRng> rngs;
    for (std::size_t k = 0; k < templates.size(); ++k) {
        conds.push_back(make_conditioning(templates[k], instructions[k]));
        rngs.push_back(CounterRng(seed, 0x534D).split(streams[k]));
    }
    auto [img, txt] = stack_conditions(conds);
    const auto latents = sample_latents(m.params, c.denoiser_config(), sched, img, txt, guide, rngs);
    std::vector<SampleResult> out;
    for (std::size_t k = 0; k < templates.size(); ++k) {
        auto latent = unscale_psi(latents.slice_batch(k), m.latent_stats);
        auto v = decode(m.params, latent, c.registration);
        auto phi = exponentiate(v.negated(), std::max(c.registration.squarings, min_squarings(v)));
        auto image = warp(templates[k], phi);
        auto topo = topology_report(phi);
        out.push_back({std::move(image), std::move(phi), std::move(v), std::move(latent), topo});
    }
    return out;
}

inline SampleResult sample(const ModelCheckpoint& m, const Tensor<float>& tmpl, const std::string& instruction,
                           const GuidanceConfig& guide, int steps, std::uint64_t seed) {
    return std::move(sample_batch(m, {tmpl}, {instruction}, guide, steps, seed, {0}).front());
}

// ---------------------------------------------------------------------------
// Evaluation

/// Fixed random 3-layer convolutional feature map: 16 features per image.
class ProxyFeatures {
   public:
    ProxyFeatures() {
        CounterRng rng(1234, 0x4644);
        w1_ = scaled(rng.normal_tensor<double>({8, 1, 3, 3}), 1.0 / 3.0);
        w2_ = scaled(rng.normal_tensor<double>({16, 8, 3, 3}), 1.0 / std::sqrt(72.0));
        w3_ = scaled(rng.normal_tensor<double>({16, 16, 3, 3}), 1.0 / 12.0);
    }

    /// images [N,1,H,W] -> features [N,16]
    Tensor<double> operator()(const Tensor<double>& images) const {
        Tape<double> tape;
        auto h = tanh(conv2d(tape.constant(images), tape.constant(w1_), 2, Padding::zero));
        h = tanh(conv2d(h, tape.constant(w2_), 2, Padding::zero));
        h = tanh(conv2d(h, tape.constant(w3_), 2, Padding::zero));
        const auto& v = h.value();
        const std::size_t n = v.dim(0), ch = v.dim(1), plane = v.dim(2) * v.dim(3);
        Tensor<double> out(Shape{n, ch});
        for (std::size_t i = 0; i < n * ch; ++i) {
            double s = 0;
            for (std::size_t p = 0; p < plane; ++p) s += v[i * plane + p];
            out[i] = s / static_cast<double>(plane);
        }
        return out;
    }

   private:
    static Tensor<double> scaled(Tensor<double> t, double s) {
        for (auto& v : t.data()) v *= s;
        return t;
    }
    Tensor<double> w1_, w2_, w3_;
};

/// Fréchet distance between Gaussian fits of two feature sets [N,F]:
/// ‖μ1−μ2‖² + tr(Σ1 + Σ2 − 2 (Σ1^½ Σ2 Σ1^½)^½).
inline double frechet_distance(const Tensor<double>& a, const Tensor<double>& b) {
    require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(1), "frechet_distance: feature sets must be [N,F]");
    require(a.dim(0) >= 2 && b.dim(0) >= 2, "frechet_distance: need at least two samples per set");
    using Mat = Eigen::MatrixXd;
    auto load = [](const Tensor<double>& t) {
        Mat m(static_cast<Eigen::Index>(t.dim(0)), static_cast<Eigen::Index>(t.dim(1)));
        for (Eigen::Index i = 0; i < m.rows(); ++i)
            for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = t[static_cast<std::size_t>(i * m.cols() + j)];
        return m;
    };
    const Mat fa = load(a), fb = load(b);
    const Eigen::RowVectorXd ma = fa.colwise().mean(), mb = fb.colwise().mean();
    const Mat ca = fa.rowwise() - ma, cb = fb.rowwise() - mb;
    const Mat sa = ca.transpose() * ca / static_cast<double>(fa.rows() - 1);
    const Mat sb = cb.transpose() * cb / static_cast<double>(fb.rows() - 1);
    Eigen::SelfAdjointEigenSolver<Mat> ea(sa);
    const Mat root_a = ea.eigenvectors() * ea.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() *
                       ea.eigenvectors().transpose();
    const Mat inner = root_a * sb * root_a;
    Eigen::SelfAdjointEigenSolver<Mat> ei(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
    const double cross = ei.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
    const double d = (ma - mb).squaredNorm() + sa.trace() + sb.trace() - 2.0 * cross;
    return std::max(d, 0.0);
}

inline double proxy_frechet(const std::vector<Tensor<float>>& real, const std::vector<Tensor<float>>& fake) {
    const ProxyFeatures net;
    auto feats = [&](const std::vector<Tensor<float>>& imgs) { return net(stack(imgs).cast<double>()); };
    return frechet_distance(feats(real), feats(fake));
}

struct SampleRecord {
    std::size_t index = 0;
    double ssd = 0;
    double identity_ssd = 0;
    double min_det = 0;
    double frac_nonpositive = 0;
};

struct EvalReport {
    std::string split;
    std::size_t n = 0;
    double positivity_rate = 0;  // fraction of samples with det > 0 everywhere
    double min_det = 0;
    double ssd_mean = 0, ssd_median = 0, ssd_max = 0;
    double identity_ssd_mean = 0;
    double proxy_fd = 0;
    std::vector<SampleRecord> samples;
};

inline double ssd(const Tensor<float>& a, const Tensor<float>& b) {
    require_shape(b.shape(), a.shape(), "ssd");
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        s += d * d;
    }
    return s;
}

/// Samples one edit per record of `split` (all records when n_samples is 0)
/// and scores it against the true target.
inline EvalReport evaluate(const ModelCheckpoint& m, const DatasetManifest& manifest, const std::string& split,
                           std::size_t n_samples, std::uint64_t seed, const GuidanceConfig& guide, int steps,
                           std::vector<Tensor<float>>* generated = nullptr) {
    auto records = manifest.split(split);
    if (n_samples > 0 && records.size() > n_samples) records.resize(n_samples);
    if (records.empty()) throw ContractError("evaluate: split '" + split + "' is empty");
    const auto pairs = load_pairs(manifest, records);
    const std::size_t n = records.size();
    std::vector<std::optional<SampleResult>> results(n);
    const std::size_t workers = std::min(worker_count(), n);
    const std::size_t chunk = (n + workers - 1) / workers;
    parallel_for(workers, workers, [&](std::size_t w) {
        std::vector<Tensor<float>> ts;
        std::vector<std::string> ins;
        std::vector<std::uint64_t> streams;
        for (std::size_t i = w * chunk; i < std::min(n, (w + 1) * chunk); ++i) {
            ts.push_back(pairs.templates.slice_batch(i));
            ins.push_back(records[i].instruction);
            streams.push_back(i);
        }
        if (ts.empty()) return;
        auto out = sample_batch(m, ts, ins, guide, steps, seed, streams);
        for (std::size_t k = 0; k < out.size(); ++k) results[w * chunk + k].emplace(std::move(out[k]));
    });
    EvalReport rep;
    rep.split = split;
    rep.n = n;
    std::vector<Tensor<float>> real, fake;
    std::vector<double> ssds;
    std::size_t positive = 0;
    rep.min_det = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
        const auto target = pairs.targets.slice_batch(i);
        const auto tmpl = pairs.templates.slice_batch(i);
        SampleRecord r;
        r.index = records[i].index;
        const auto& res = *results[i];
        r.ssd = ssd(res.image, target);
        r.identity_ssd = ssd(tmpl, target);
        r.min_det = res.topology.min_det;
        r.frac_nonpositive = res.topology.frac_nonpositive;
        positive += r.frac_nonpositive == 0 ? 1 : 0;
        rep.min_det = std::min(rep.min_det, r.min_det);
        rep.samples.push_back(r);
        ssds.push_back(r.ssd);
        rep.identity_ssd_mean += r.identity_ssd / static_cast<double>(n);
        real.push_back(target);
        fake.push_back(res.image);
    }
    rep.positivity_rate = static_cast<double>(positive) / static_cast<double>(n);
    for (double s : ssds) rep.ssd_mean += s / static_cast<double>(n);
    std::sort(ssds.begin(), ssds.end());
    rep.ssd_median = n % 2 ? ssds[n / 2] : 0.5 * (ssds[n / 2 - 1] + ssds[n / 2]);
    rep.ssd_max = ssds.back();
    rep.proxy_fd = n >= 2 ? proxy_frechet(real, fake) : 0.0;
    if (generated) *generated = std::move(fake);
    return rep;
}

inline json to_json(const EvalReport& r) {
    json samples = json::array();
    for (const auto& s : r.samples) {
        samples.push_back({{"index", s.index},
                           {"ssd", s.ssd},
                           {"identity_ssd", s.identity_ssd},
                           {"min_det", s.min_det},
                           {"frac_nonpositive", s.frac_nonpositive}});
    }
    return {{"split", r.split},
            {"n", r.n},
            {"positivity_rate", r.positivity_rate},
            {"min_det", r.min_det},
            {"ssd_mean", r.ssd_mean},
            {"ssd_median", r.ssd_median},
            {"ssd_max", r.ssd_max},
            {"identity_ssd_mean", r.identity_ssd_mean},
            {"proxy_fd", r.proxy_fd},
            {"samples", samples}};
}

// ---------------------------------------------------------------------------
// Pixel-wise statistics

struct PixelStats {
    Tensor<float> mean, std, lower, upper;
};

/// Per-pixel mean, population standard deviation, and mean ± 2·std.
inline PixelStats pixelwise_stats(const std::vector<Tensor<float>>& samples) {
    require(samples.size() >= 2, "pixelwise_stats: need at least two samples");
    for (const auto& s : samples) require_shape(s.shape(), samples.front().shape(), "pixelwise_stats");
    const std::size_t n = samples.front().size();
    const double k = static_cast<double>(samples.size());
    PixelStats p{Tensor<float>(samples.front().shape()), Tensor<float>(samples.front().shape()),
                 Tensor<float>(samples.front().shape()), Tensor<float>(samples.front().shape())};
    for (std::size_t i = 0; i < n; ++i) {
        double mu = 0;
        for (const auto& s : samples) mu += s[i];
        mu /= k;
        double var = 0;
        for (const auto& s : samples) var += (s[i] - mu) * (s[i] - mu);
        const double sd = std::sqrt(var / k);
        p.mean[i] = static_cast<float>(mu);
        p.std[i] = static_cast<float>(sd);
        p.lower[i] = static_cast<float>(mu - 2 * sd);
        p.upper[i] = static_cast<float>(mu + 2 * sd);
    }
    return p;
}

/// Writes mean/std/lower/upper as rawf32 and PGM (clamped to [0,1]).
inline void save_pixel_stats(const std::filesystem::path& dir, const PixelStats& p) {
    const std::pair<const char*, const Tensor<float>*> items[] = {
        {"mean", &p.mean}, {"std", &p.std}, {"lower", &p.lower}, {"upper", &p.upper}};
    for (const auto& [name, t] : items) {
        io::save_rawf32(dir / (std::string(name) + ".rawf32"), *t);
        io::save_pgm(dir / (std::string(name) + ".pgm"), *t);
    }
}

}  // namespace tpie
