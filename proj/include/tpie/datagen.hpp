#pragma once

// Synthetic growth scenes: soft-edged blobs whose radii grow linearly with a
// simulated age. A pair (t0, t1) yields the scene at t0, a radial expansion
// velocity field, and the template warped by that field's flow.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <array>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <numeric>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include "json.hpp"

#include "tpie/diffeo.hpp"
#include "tpie/io.hpp"
#include "tpie/rng.hpp"

namespace tpie {

struct Blob {
    double cy = 0, cx = 0;
    double radius = 2;  // at age 0
    double rate = 0.3;  // radius growth per 24 simulated hours
};

struct ShapeScene {
    std::size_t size = 32;
    double edge = 0.5;  // soft-edge width
    std::vector<Blob> blobs;

    double radius_at(const Blob& b, double hours) const { return b.radius + b.rate * hours / 24.0; }
};

constexpr int kMaxAgeHours = 240;
constexpr int kAgeStepHours = 12;
constexpr double kBlobMargin = 2.0;

struct DataConfig {
    std::size_t size = 32;
    double edge = 0.5;
    int squarings = 6;
    int min_gap_steps = 4;  // t1 - t0 in units of 12 h
    int max_gap_steps = 8;
};

namespace detail {

inline double torus_offset(double a, double b, std::size_t n) {
    return tpie::detail::wrap_offset(a - b, n);
}

/// Distance from a blob centre to the edge of its lattice cell.
inline double cell_room(const ShapeScene& s, const Blob& b) {
    const double q = static_cast<double>(s.size) / 4.0;
    const double dy = std::abs(torus_offset(b.cy, std::round(b.cy / q) * q, s.size));
    const double dx = std::abs(torus_offset(b.cx, std::round(b.cx / q) * q, s.size));
    return q - std::max(dy, dx);
}

}  // namespace detail

/// Checks every blob keeps the margin to its cell boundary at the maximum age.
inline bool scene_fits(const ShapeScene& s) {
    for (const auto& b : s.blobs)
        if (s.radius_at(b, kMaxAgeHours) + kBlobMargin > detail::cell_room(s, b)) return false;
    return true;
}

/// 1-3 blobs in distinct cells of a 2×2 lattice, with small jitter. Growth
/// that would break the margin is shrunk deterministically until it fits.
inline ShapeScene random_scene(CounterRng& rng, const DataConfig& cfg) {
    require(cfg.size >= 16 && cfg.size % 8 == 0, "random_scene: size must be a multiple of 8, at least 16");
    ShapeScene s;
    s.size = cfg.size;
    s.edge = cfg.edge;
    const double unit = static_cast<double>(cfg.size) / 32.0;
    const double q = static_cast<double>(cfg.size) / 4.0;
    std::vector<int> cells{0, 1, 2, 3};
    rng.shuffle(cells.begin(), cells.end());
    const auto count = 1 + rng.below(3);
    for (std::uint64_t k = 0; k < count; ++k) {
        Blob b;
        b.cy = q * (1 + 2 * (cells[k] / 2)) + rng.uniform(-0.5, 0.5) * unit;
        b.cx = q * (1 + 2 * (cells[k] % 2)) + rng.uniform(-0.5, 0.5) * unit;
        b.radius = rng.uniform(2.0, 2.5) * unit;
        b.rate = rng.uniform(0.25, 0.3) * unit;
        s.blobs.push_back(b);
    }
    while (!scene_fits(s))
        for (auto& b : s.blobs) b.rate *= 0.9;
    return s;
}

/// Intensity image [1,H,W] of the scene at `hours`: max over blobs of
/// sigmoid((r - d) / edge) with periodic distances.
inline Tensor<float> render_scene(const ShapeScene& s, double hours) {
    Tensor<float> img(Shape{1, s.size, s.size});
    for (std::size_t y = 0; y < s.size; ++y) {
        for (std::size_t x = 0; x < s.size; ++x) {
            double v = 0;
            for (const auto& b : s.blobs) {
                const double dy = detail::torus_offset(double(y), b.cy, s.size);
                const double dx = detail::torus_offset(double(x), b.cx, s.size);
                const double d = std::sqrt(dy * dy + dx * dx);
                v = std::max(v, 1.0 / (1.0 + std::exp(-(s.radius_at(b, hours) - d) / s.edge)));
            }
            img[y * s.size + x] = static_cast<float>(v);
        }
    }
    return img;
}

/// Sum of radial expansion fields g·exp(-|x-c|²/2s²)(x-c)/s with s the radius
/// at t0, scaled so each blob's boundary moves by its growth over (t0, t1).
inline VelocityField<float> growth_velocity(const ShapeScene& s, double t0, double t1) {
    const Grid grid({s.size, s.size});
    VelocityField<float> v(grid);
    const std::size_t n = grid.count();
    for (const auto& b : s.blobs) {
        const double sr = s.radius_at(b, t0);
        const double g = b.rate * (t1 - t0) / 24.0 / std::exp(-0.5);
        for (std::size_t y = 0; y < s.size; ++y) {
            for (std::size_t x = 0; x < s.size; ++x) {
                const double dy = detail::torus_offset(double(y), b.cy, s.size);
                const double dx = detail::torus_offset(double(x), b.cx, s.size);
                const double e = g * std::exp(-(dy * dy + dx * dx) / (2 * sr * sr)) / sr;
                v.components[y * s.size + x] += static_cast<float>(e * dy);
                v.components[n + y * s.size + x] += static_cast<float>(e * dx);
            }
        }
    }
    return v;
}

struct GeneratedPair {
    Tensor<float> tmpl;    // [1,H,W]
    Tensor<float> target;  // [1,H,W]
    VelocityField<float> velocity;
};

/// Template at t0, ground-truth velocity, and target = template ∘ exp(-v).
inline GeneratedPair generate_pair(const ShapeScene& s, int t0, int t1, int squarings = 6) {
    require(0 <= t0 && t0 <= t1 && t1 <= kMaxAgeHours,
            "generate_pair: need 0 <= t0 <= t1 <= 240, got " + std::to_string(t0) + ", " + std::to_string(t1));
    auto tmpl = render_scene(s, t0);
    auto v = growth_velocity(s, t0, t1);
    auto target = warp(tmpl, invert(v, squarings));
    return {std::move(tmpl), std::move(target), std::move(v)};
}

inline std::string render_instruction(int t0, int t1) {
    return "plant at " + std::to_string(t0) + " hours. how does it look at " + std::to_string(t1) + " hours?";
}

struct ManifestRecord {
    std::size_t index = 0;
    std::string template_path, target_path, velocity_path;
    std::string instruction;
    int age_from_h = 0, age_to_h = 0;
    std::uint64_t seed = 0;
    std::string split;
};

struct DatasetManifest {
    std::filesystem::path root;  // directory the record paths are relative to
    std::vector<ManifestRecord> records;

    std::vector<ManifestRecord> split(const std::string& name) const {
        std::vector<ManifestRecord> out;
        for (const auto& r : records)
            if (r.split == name) out.push_back(r);
        return out;
    }
};

inline nlohmann::json to_json(const ManifestRecord& r) {
    return nlohmann::json{{"index", r.index},
                          {"template_path", r.template_path},
                          {"target_path", r.target_path},
                          {"velocity_path", r.velocity_path},
                          {"instruction", r.instruction},
                          {"age_from_h", r.age_from_h},
                          {"age_to_h", r.age_to_h},
                          {"seed", r.seed},
                          {"split", r.split}};
}

inline std::string encode_manifest(const DatasetManifest& m) {
    std::string out;
    for (const auto& r : m.records) out += to_json(r).dump() + "\n";
    return out;
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
    DatasetManifest m;
    m.root = path.parent_path();
    const auto text = io::read_file(path);
    std::size_t start = 0, line_no = 0;
    while (start < text.size()) {
        auto end = text.find('\n', start);
        if (end == std::string::npos) end = text.size();
        const auto line = text.substr(start, end - start);
        start = end + 1;
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            ManifestRecord r;
            r.index = j.value("index", m.records.size());
            r.template_path = j.at("template_path").get<std::string>();
            r.target_path = j.at("target_path").get<std::string>();
            r.velocity_path = j.value("velocity_path", std::string{});
            r.instruction = j.at("instruction").get<std::string>();
            r.age_from_h = j.at("age_from_h").get<int>();
            r.age_to_h = j.at("age_to_h").get<int>();
            r.seed = j.at("seed").get<std::uint64_t>();
            r.split = j.value("split", std::string("train"));
            m.records.push_back(std::move(r));
        } catch (const nlohmann::json::exception& e) {
            throw io::IoError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return m;
}

/// Split sizes for n items: 80% / 10% / rest.
inline std::array<std::size_t, 3> split_sizes(std::size_t n) {
    const auto train = static_cast<std::size_t>(std::llround(0.8 * static_cast<double>(n)));
    const auto val = static_cast<std::size_t>(std::llround(0.1 * static_cast<double>(n)));
    return {train, val, n - train - val};
}

/// Number of workers allowed by TPIE_THREADS (absent or invalid: 1).
inline std::size_t worker_count() {
    const char* env = std::getenv("TPIE_THREADS");
    if (!env) return 1;
    try {
        const long v = std::stol(env);
        return v > 0 ? static_cast<std::size_t>(v) : 1;
    } catch (...) {
        return 1;
    }
}

/// Runs fn(i) for i in [0, n) on up to `workers` threads. Each index is
/// handled exactly once; callers write results into per-index slots so the
/// merge order does not depend on scheduling.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn&& fn) {
    workers = std::max<std::size_t>(1, std::min(workers, n));
    if (workers == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (std::size_t i = w; i < n; i += workers) fn(i);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

/// Draws the scene and age pair of item i of a dataset seeded by `seed`.
inline std::tuple<ShapeScene, int, int, std::uint64_t> dataset_item(std::size_t i, const DataConfig& cfg,
                                                                   std::uint64_t seed) {
    auto rng = CounterRng(seed, 0x4441).split(i);
    const std::uint64_t item_seed = rng.next_u64();
    auto scene = random_scene(rng, cfg);
    const int steps = kMaxAgeHours / kAgeStepHours;
    const int t0 = kAgeStepHours * static_cast<int>(rng.below(static_cast<std::uint64_t>(steps + 1)));
    const auto gap = cfg.min_gap_steps +
                     static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.max_gap_steps - cfg.min_gap_steps + 1)));
    const int t1 = std::min(kMaxAgeHours, t0 + kAgeStepHours * gap);
    return {std::move(scene), t0, t1, item_seed};
}

/// Writes n pairs (rawf32 + PGM mirrors + ground-truth velocity) and
/// `manifest.jsonl` into `out`; records are split 80/10/10 by a seeded shuffle.
inline DatasetManifest generate_dataset(std::size_t n, const DataConfig& cfg, std::uint64_t seed,
                                        const std::filesystem::path& out) {
    require(n >= 10, "generate_dataset: need at least 10 pairs, got " + std::to_string(n));
    require(cfg.min_gap_steps >= 0 && cfg.max_gap_steps >= cfg.min_gap_steps, "generate_dataset: bad age gap range");
    std::error_code ec;
    std::filesystem::create_directories(out / "images", ec);
    if (ec || !std::filesystem::is_directory(out / "images")) {
        throw io::IoError("cannot create output directory " + (out / "images").string());
    }
    DatasetManifest m;
    m.root = out;
    m.records.resize(n);

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    CounterRng(seed, 0x5350).shuffle(order.begin(), order.end());
    const auto sizes = split_sizes(n);
    std::vector<std::string> split_of(n);
    for (std::size_t k = 0; k < n; ++k)
        split_of[order[k]] = k < sizes[0] ? "train" : (k < sizes[0] + sizes[1] ? "val" : "test");

    parallel_for(n, worker_count(), [&](std::size_t i) {
        auto [scene, t0, t1, item_seed] = dataset_item(i, cfg, seed);
        const auto pair = generate_pair(scene, t0, t1, cfg.squarings);
        char stem[32];
        std::snprintf(stem, sizeof stem, "images/%05zu", i);
        ManifestRecord r;
        r.index = i;
        r.template_path = std::string(stem) + "_template.rawf32";
        r.target_path = std::string(stem) + "_target.rawf32";
        r.velocity_path = std::string(stem) + "_velocity.rawf32";
        r.instruction = render_instruction(t0, t1);
        r.age_from_h = t0;
        r.age_to_h = t1;
        r.seed = item_seed;
        r.split = split_of[i];
        io::save_rawf32(out / r.template_path, pair.tmpl);
        io::save_rawf32(out / r.target_path, pair.target);
        io::save_rawf32(out / r.velocity_path, pair.velocity.components);
        io::save_pgm(out / (std::string(stem) + "_template.pgm"), pair.tmpl);
        io::save_pgm(out / (std::string(stem) + "_target.pgm"), pair.target);
        m.records[i] = std::move(r);
    });
    io::write_file(out / "manifest.jsonl", encode_manifest(m));
    return m;
}

/// Images of a set of records stacked as [N,1,H,W].
struct LoadedPairs {
    Tensor<float> templates, targets;
    std::vector<ManifestRecord> records;
};

inline LoadedPairs load_pairs(const DatasetManifest& m, const std::vector<ManifestRecord>& records) {
    require(!records.empty(), "load_pairs: no records");
    std::vector<Tensor<float>> ts, fs;
    for (const auto& r : records) {
        ts.push_back(io::load_rawf32(m.root / r.template_path));
        fs.push_back(io::load_rawf32(m.root / r.target_path));
        require(ts.back().rank() == 3 && ts.back().dim(0) == 1, "load_pairs: images must be [1,H,W]");
        require_shape(fs.back().shape(), ts.back().shape(), "load_pairs");
        require_shape(ts.back().shape(), ts.front().shape(), "load_pairs");
    }
    return {stack(ts), stack(fs), records};
}

}  // namespace tpie
