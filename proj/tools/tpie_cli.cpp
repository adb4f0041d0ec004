// tpie: synthetic data generation, joint training, guided sampling,
// evaluation and confidence rendering from the command line.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "tpie/pipeline.hpp"

namespace fs = std::filesystem;
using namespace tpie;

namespace {

struct Globals {
    std::optional<std::uint64_t> seed;
    std::string config;
    std::string out;
};

TrainConfig load_config(const Globals& g) {
    TrainConfig c;
    if (!g.config.empty()) {
        json j;
        try {
            j = json::parse(io::read_file(g.config));
        } catch (const json::exception& e) {
            throw io::IoError(g.config + ": " + e.what());
        }
        c = config_from_json(j);
    }
    if (g.seed) c.seed = *g.seed;
    validate(c);
    return c;
}

void write_json(const fs::path& path, const json& j) { io::write_file(path, j.dump(2) + "\n"); }

int gen_data(const Globals& g, std::size_t n) {
    const auto c = load_config(g);
    DataConfig dc;
    dc.size = c.registration.image_size;
    dc.squarings = c.registration.squarings;
    const auto m = generate_dataset(n, dc, c.seed, g.out);
    std::cerr << "wrote " << m.records.size() << " pairs to " << g.out << "\n";
    return 0;
}

void log_progress(const ModelCheckpoint& m, std::size_t& reg_seen, std::size_t& diff_seen) {
    const auto& st = m.state;
    for (; reg_seen < st.registration.curve.size(); ++reg_seen)
        std::cerr << "registration epoch " << reg_seen + 1 << " loss " << st.registration.curve[reg_seen] << "\n";
    for (; diff_seen < st.diffusion.curve.size(); ++diff_seen)
        std::cerr << "diffusion epoch " << diff_seen + 1 << " loss " << st.diffusion.curve[diff_seen] << "\n";
}

int train(const Globals& g, const std::string& manifest_path, const std::string& resume,
          std::optional<std::size_t> stop_after) {
    ModelCheckpoint model;
    if (!resume.empty()) {
        model = load_model(resume);
        if (!g.config.empty() || g.seed) {
            const auto c = load_config(g);
            if (to_json(c) != to_json(model.config)) {
                std::cerr << "note: --config/--seed differ from the checkpoint; using the new values\n";
                model.config = c;
            }
        }
    } else {
        model = init_model(load_config(g));
    }
    const auto manifest = load_manifest(manifest_path);
    const auto records = manifest.split("train");
    if (records.empty()) throw ContractError(manifest_path + ": no training records");
    const auto data = make_training_data(load_pairs(manifest, records));

    const std::size_t start = model.state.registration.epoch + model.state.diffusion.epoch;
    std::size_t reg_seen = model.state.registration.curve.size(), diff_seen = model.state.diffusion.curve.size();
    ModelCheckpoint last_good = model;
    bool stopped = false;
    const StopHook hook = [&](const ModelCheckpoint& m) {
        log_progress(m, reg_seen, diff_seen);
        last_good = m;
        const std::size_t done = m.state.registration.epoch + m.state.diffusion.epoch - start;
        stopped = stop_after && done >= *stop_after && m.state.phase != Phase::done;
        return stopped;
    };
    try {
        train_joint(model, data, hook);
    } catch (const TrainingError&) {
        save_model(g.out, last_good);
        std::cerr << "last good state written to " << g.out << "\n";
        throw;
    }
    save_model(g.out, model);
    if (stopped) {
        std::cerr << "stopped in phase " << phase_name(model.state.phase) << "; resume with --resume " << g.out << "\n";
    } else {
        for (const auto& h : model.state.history)
            std::cerr << "outer " << h.outer << " joint loss " << h.joint << "\n";
    }
    return 0;
}

struct SampleArgs {
    std::string checkpoint, tmpl, instruction;
    std::optional<double> guidance_image, guidance_text;
    std::optional<int> steps;
    std::size_t samples = 70;
};

GuidanceConfig guidance_of(const ModelCheckpoint& m, const SampleArgs& a) {
    GuidanceConfig gc = m.config.guidance;
    if (a.guidance_image) gc.image = *a.guidance_image;
    if (a.guidance_text) gc.text = *a.guidance_text;
    require(gc.image >= 0 && gc.text >= 0, "guidance scales must be >= 0");
    return gc;
}

int steps_of(const ModelCheckpoint& m, const SampleArgs& a) {
    const int s = a.steps.value_or(m.config.sample_steps);
    require(s >= 1 && s <= m.config.schedule_steps,
            "--steps must lie in [1, " + std::to_string(m.config.schedule_steps) + "]");
    return s;
}

std::uint64_t seed_of(const Globals& g, const ModelCheckpoint& m) { return g.seed.value_or(m.config.seed); }

int sample_cmd(const Globals& g, const SampleArgs& a) {
    const auto model = load_model(a.checkpoint);
    const auto tmpl = io::load_rawf32(a.tmpl);
    const auto r = sample(model, tmpl, a.instruction, guidance_of(model, a), steps_of(model, a), seed_of(g, model));
    const fs::path out(g.out);
    io::save_rawf32(out / "edited.rawf32", r.image);
    io::save_pgm(out / "edited.pgm", r.image);
    io::save_rawf32(out / "deformation.rawf32", r.deformation.displacement);
    io::save_rawf32(out / "velocity.rawf32", r.velocity.components);
    io::save_pgm(out / "grid.pgm", render_deformation_grid(r.deformation));
    write_json(out / "topology.json", {{"min_det", r.topology.min_det},
                                       {"frac_nonpositive", r.topology.frac_nonpositive}});
    if (r.topology.frac_nonpositive > 0)
        std::cerr << "warning: deformation folds at " << r.topology.frac_nonpositive * 100 << "% of grid points\n";
    return 0;
}

int eval_cmd(const Globals& g, const std::string& checkpoint, const std::string& manifest_path, const std::string& split,
             std::size_t n, const SampleArgs& a) {
    const auto model = load_model(checkpoint);
    const auto manifest = load_manifest(manifest_path);
    const auto rep = evaluate(model, manifest, split, n, seed_of(g, model), guidance_of(model, a), steps_of(model, a));
    write_json(g.out, to_json(rep));
    std::cerr << "n " << rep.n << " positivity " << rep.positivity_rate << " ssd " << rep.ssd_mean << " proxy_fd "
              << rep.proxy_fd << "\n";
    return 0;
}

int render_cmd(const Globals& g, const SampleArgs& a) {
    const auto model = load_model(a.checkpoint);
    const auto tmpl = io::load_rawf32(a.tmpl);
    std::vector<Tensor<float>> ts(a.samples, tmpl);
    std::vector<std::string> ins(a.samples, a.instruction);
    std::vector<std::uint64_t> streams(a.samples);
    for (std::size_t k = 0; k < a.samples; ++k) streams[k] = k;
    const auto results =
        sample_batch(model, ts, ins, guidance_of(model, a), steps_of(model, a), seed_of(g, model), streams);
    std::vector<Tensor<float>> images;
    for (const auto& r : results) images.push_back(r.image);
    save_pixel_stats(g.out, pixelwise_stats(images));
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Topology-preserving image editing on synthetic growth data"};
    app.require_subcommand(1);
    app.fallthrough();
    Globals g;
    app.add_option("--seed", g.seed, "Random seed (overrides the config)");
    app.add_option("--config", g.config, "JSON training configuration")->check(CLI::ExistingFile);

    std::size_t n = 0;
    auto* gen = app.add_subcommand("gen-data", "Generate a synthetic growth dataset");
    gen->add_option("--n", n, "Number of pairs")->required();
    gen->add_option("--out", g.out, "Output directory")->required();

    std::string manifest, resume;
    std::optional<std::size_t> stop_after;
    auto* tr = app.add_subcommand("train", "Joint training");
    tr->add_option("--manifest", manifest, "Dataset manifest")->required()->check(CLI::ExistingFile);
    tr->add_option("--out", g.out, "Checkpoint path")->required();
    tr->add_option("--resume", resume, "Continue from a checkpoint")->check(CLI::ExistingFile);
    tr->add_option("--stop-after-epochs", stop_after, "Stop after this many epochs and save");

    SampleArgs sa;
    auto add_sampling = [&](CLI::App* sc) {
        sc->add_option("--guidance-image", sa.guidance_image, "Image guidance scale");
        sc->add_option("--guidance-text", sa.guidance_text, "Text guidance scale");
        sc->add_option("--steps", sa.steps, "Reverse diffusion steps");
    };
    auto* sm = app.add_subcommand("sample", "Edit one template");
    sm->add_option("--checkpoint", sa.checkpoint, "Model checkpoint")->required()->check(CLI::ExistingFile);
    sm->add_option("--template", sa.tmpl, "Template image (.rawf32)")->required()->check(CLI::ExistingFile);
    sm->add_option("--instruction", sa.instruction, "Edit instruction")->required();
    sm->add_option("--out", g.out, "Output directory")->required();
    add_sampling(sm);

    std::string split = "test";
    std::size_t n_samples = 0;
    auto* ev = app.add_subcommand("eval", "Evaluate sampled edits against true targets");
    ev->add_option("--checkpoint", sa.checkpoint, "Model checkpoint")->required()->check(CLI::ExistingFile);
    ev->add_option("--manifest", manifest, "Dataset manifest")->required()->check(CLI::ExistingFile);
    ev->add_option("--split", split, "Split to evaluate")->check(CLI::IsMember({"train", "val", "test"}));
    ev->add_option("--n-samples", n_samples, "Limit on evaluated pairs (0 = all)");
    ev->add_option("--out", g.out, "Report path (JSON)")->required();
    add_sampling(ev);

    auto* rd = app.add_subcommand("render", "Pixel-wise mean, std and bounds over repeated edits");
    rd->add_option("--checkpoint", sa.checkpoint, "Model checkpoint")->required()->check(CLI::ExistingFile);
    rd->add_option("--template", sa.tmpl, "Template image (.rawf32)")->required()->check(CLI::ExistingFile);
    rd->add_option("--instruction", sa.instruction, "Edit instruction")->required();
    rd->add_option("--samples", sa.samples, "Number of edits")->check(CLI::Range(2, 100000));
    rd->add_option("--out", g.out, "Output directory")->required();
    add_sampling(rd);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, std::cerr, std::cerr);
    } catch (const CLI::ParseError& e) {
        app.exit(e, std::cerr, std::cerr);
        return 1;
    }

    try {
        if (*gen) return gen_data(g, n);
        if (*tr) return train(g, manifest, resume, stop_after);
        if (*sm) return sample_cmd(g, sa);
        if (*ev) return eval_cmd(g, sa.checkpoint, manifest, split, n_samples, sa);
        if (*rd) return render_cmd(g, sa);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
