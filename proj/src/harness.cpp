#include "occmesh/harness.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "occmesh/md_block.hpp"
#include "occmesh/ops.hpp"
#include "occmesh/optim.hpp"
#include "occmesh/rng.hpp"
#include "occmesh/sd_block.hpp"

namespace occmesh::harness {

namespace {

enum : std::uint64_t { kOrderStream = 0x6f72646572ULL, kPlanStream = 0x706c616eULL };

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

metrics::Points points_at(const std::vector<double>& flat, Index frame, Index count) {
    metrics::Points p(count, 3);
    const double* src = flat.data() + frame * count * 3;
    std::copy(src, src + count * 3, p.data());
    return p;
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, Index epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    KeyedRng rng({seed, static_cast<std::uint64_t>(epoch), kOrderStream});
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    return order;
}

}  // namespace

std::string TrainLog::csv() const {
    std::string s = "step,l3d,l2d,lv,lvert,total\n";
    for (const auto& r : steps) {
        s += std::to_string(r.step) + "," + fmt(r.loss.l3d) + "," + fmt(r.loss.l2d) + "," + fmt(r.loss.lv) + "," +
             fmt(r.loss.lvert) + "," + fmt(r.loss.total) + "\n";
    }
    return s;
}

std::uint64_t TrainLog::hash() const { return fnv1a64(csv()); }

Batch make_batch(std::span<const synth::Sample> data, std::span<const std::size_t> indices) {
    if (indices.empty()) throw std::invalid_argument("make_batch: no sequences selected");
    const auto& first = data[indices[0]];
    const Index T = first.body.frames, K = first.body.joints, V = first.body.vertices, H = first.image_size;
    const Index N = static_cast<Index>(indices.size());
    std::vector<double> img, j3, v3, j2;
    img.reserve(static_cast<std::size_t>(N * T * H * H));
    j3.reserve(static_cast<std::size_t>(N * T * K * 3));
    v3.reserve(static_cast<std::size_t>(N * T * V * 3));
    j2.reserve(static_cast<std::size_t>(N * T * K * 2));
    for (std::size_t i : indices) {
        const auto& s = data[i];
        if (s.body.frames != T || s.body.joints != K || s.body.vertices != V || s.image_size != H) {
            throw ShapeError("make_batch: sequence " + std::to_string(i) + " differs in shape from the first");
        }
        img.insert(img.end(), s.images.begin(), s.images.end());
        j3.insert(j3.end(), s.body.joints3d.begin(), s.body.joints3d.end());
        v3.insert(v3.end(), s.body.vertices3d.begin(), s.body.vertices3d.end());
        j2.insert(j2.end(), s.body.joints2d.begin(), s.body.joints2d.end());
    }
    Batch b;
    b.sequences = N;
    b.frames = T;
    b.images = Tensor({N * T, 1, H, H}, std::move(img));
    b.targets.joints3d = Tensor({N * T, K, 3}, std::move(j3));
    b.targets.vertices3d = Tensor({N * T, V, 3}, std::move(v3));
    b.targets.joints2d = Tensor({N * T, K, 2}, std::move(j2));
    return b;
}

Index check_dataset(const std::vector<synth::Sample>& data, const model::ModelConfig& config) {
    if (data.empty()) throw std::invalid_argument("dataset is empty");
    const Index T = data[0].body.frames;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto& s = data[i];
        if (s.image_size != config.image_size || s.body.joints != config.joints ||
            s.body.vertices != config.vertices || s.body.frames != T) {
            throw ShapeError("sequence " + std::to_string(i) + " (T=" + std::to_string(s.body.frames) +
                             ", K=" + std::to_string(s.body.joints) + ", V=" + std::to_string(s.body.vertices) +
                             ", image " + std::to_string(s.image_size) + ") does not match the model config (K=" +
                             std::to_string(config.joints) + ", V=" + std::to_string(config.vertices) + ", image " +
                             std::to_string(config.image_size) + ")");
        }
    }
    if (config.image_channels != 1) throw ShapeError("synthetic data has one image channel");
    return T;
}

RunConfig prepare_config(RunConfig config, Index frames) {
    if (config.rest_template && config.model.template_points.empty() && config.model.joints == 14) {
        synth::SceneSpec spec;
        spec.joints = config.model.joints;
        spec.vertices = config.model.vertices;
        config.model.template_points = synth::rest_template(spec);
        const auto& m = config.model;
        if (m.camera_prior == std::array<double, 3>{1.0, 0.0, 0.0} &&
            m.camera_scale == std::array<double, 3>{1.0, 1.0, 1.0}) {
            const auto cam = synth::default_camera(m.image_size);
            config.model.camera_prior = {cam.s, cam.tx, cam.ty};
            config.model.camera_scale = {0.1 * cam.s, 1.0, 1.0};
        }
    }
    config.finalize(frames);
    return config;
}

TrainResult train(const RunConfig& config, const std::vector<synth::Sample>& train_data,
                  const std::vector<synth::Sample>* validation, const StepCallback& on_step) {
    const auto t0 = std::chrono::steady_clock::now();
    const Index T = check_dataset(train_data, config.model);
    TrainResult result;
    result.config = prepare_config(config, T);
    const RunConfig& cfg = result.config;
    if (validation && !validation->empty()) check_dataset(*validation, cfg.model);

    result.params = model::ModelParams::init(cfg.model, cfg.seed);
    AdamW opt(result.params.trainable(), cfg.optim);
    const auto weights = cfg.effective_weights();
    const std::size_t n = train_data.size();
    const auto batch = static_cast<std::size_t>(cfg.batch);
    std::uint64_t step = 0;

    for (Index epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = learning_rate(cfg.optim, epoch);
        const auto order = epoch_order(n, cfg.seed, epoch);
        for (std::size_t start = 0; start < n; start += batch) {
            const std::span<const std::size_t> idx(order.data() + start, std::min(batch, n - start));
            const Batch b = make_batch(train_data, idx);
            const auto plan = md::make_shuffle_plan(b.sequences, cfg.model.feature_channels, T,
                                                    hash_key({cfg.seed, step, kPlanStream}), md::ShuffleMode::Train);
            const auto out = model::forward(b.images, b.sequences, result.params, cfg.model, plan);
            const auto terms =
                losses::total_loss({out.joints3d, out.vertices3d, out.joints2d}, b.targets, T, weights, cfg.velocity);
            StepRecord rec{step, terms.values()};
            if (!std::isfinite(rec.loss.total)) {
                throw TrainingError(step, "non-finite loss at step " + std::to_string(step) + " (epoch " +
                                              std::to_string(epoch) + ")");
            }
            backward(terms.total);
            opt.step(lr);
            result.log.steps.push_back(rec);
            if (on_step) on_step(epoch, rec);
            ++step;
        }
        if (validation && !validation->empty() && cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0) {
            result.log.epochs.push_back({epoch, evaluate(result.params, cfg, *validation)});
        }
    }
    result.steps = step;
    result.log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return result;
}

TrainResult train(const RunConfig& config) {
    if (config.train_data.empty()) throw std::invalid_argument("train: no training dataset configured (data.train)");
    const auto data = synth::read_dataset(config.train_data);
    if (!config.test_data.empty() && config.eval_every > 0) {
        const auto val = synth::read_dataset(config.test_data);
        return train(config, data, &val);
    }
    return train(config, data);
}

metrics::SequencePrediction ground_truth(const synth::Sample& s) {
    metrics::SequencePrediction p;
    for (Index t = 0; t < s.body.frames; ++t) {
        p.joints.push_back(points_at(s.body.joints3d, t, s.body.joints));
        p.vertices.push_back(points_at(s.body.vertices3d, t, s.body.vertices));
    }
    return p;
}

std::vector<metrics::SequencePrediction> predict(const model::ModelParams& params, const RunConfig& config,
                                                 const std::vector<synth::Sample>& data, Index chunk) {
    const Index T = check_dataset(data, config.model);
    if (config.model.md_enabled && config.model.md.frames != T) {
        throw ShapeError("predict: model expects " + std::to_string(config.model.md.frames) + " frames, data has " +
                         std::to_string(T));
    }
    NoGradGuard no_grad;
    std::vector<metrics::SequencePrediction> out;
    std::vector<std::size_t> idx(data.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    const auto step = static_cast<std::size_t>(std::max<Index>(chunk, 1));
    for (std::size_t start = 0; start < data.size(); start += step) {
        const std::span<const std::size_t> part(idx.data() + start, std::min(step, data.size() - start));
        const Batch b = make_batch(data, part);
        const auto plan = md::identity_plan(b.sequences, config.model.feature_channels, T);
        const auto o = model::forward(b.images, b.sequences, params, config.model, plan);
        for (Index s = 0; s < b.sequences; ++s) {
            metrics::SequencePrediction p;
            for (Index t = 0; t < T; ++t) {
                p.joints.push_back(points_at(o.joints3d.values(), s * T + t, config.model.joints));
                p.vertices.push_back(points_at(o.vertices3d.values(), s * T + t, config.model.vertices));
            }
            out.push_back(std::move(p));
        }
    }
    return out;
}

metrics::MetricReport evaluate(const model::ModelParams& params, const RunConfig& config,
                               const std::vector<synth::Sample>& data, Index chunk) {
    const auto preds = predict(params, config, data, chunk);
    std::vector<metrics::SequenceMetrics> per;
    per.reserve(preds.size());
    for (std::size_t i = 0; i < preds.size(); ++i) {
        per.push_back(metrics::evaluate_sequence(preds[i], ground_truth(data[i]), 30.0));
    }
    return metrics::aggregate(std::move(per));
}

GradTarget parse_grad_target(const std::string& name) {
    if (name == "sd") return GradTarget::Sd;
    if (name == "md") return GradTarget::Md;
    if (name == "losses") return GradTarget::Losses;
    if (name == "model") return GradTarget::Model;
    if (name == "all") return GradTarget::All;
    throw std::invalid_argument("unknown gradcheck target '" + name + "' (expected sd, md, losses, model or all)");
}

namespace {

Tensor random_tensor(const Shape& shape, KeyedRng& rng, double lo, double hi, bool grad) {
    std::vector<double> v(static_cast<std::size_t>(numel(shape)));
    for (auto& e : v) e = rng.uniform(lo, hi);
    Tensor t(shape, std::move(v));
    if (grad) t.set_requires_grad(true);
    return t;
}

GradCheckReport check_sd(const GradCheckOptions& opts, std::uint64_t seed) {
    KeyedRng rng({seed, 1});
    sd::SdConfig cfg;
    cfg.channels = 8;
    cfg.groups = 2;
    auto params = sd::SdParams::init(cfg, seed, "sd");
    Tensor x = random_tensor({2, 8, 4, 4}, rng, -1.0, 1.0, true);
    Tensor w = random_tensor({2, 8, 4, 4}, rng, -1.0, 1.0, false);
    auto named = params.named("sd");
    named.push_back({"x", x});
    return grad_check([&] { return ops::sum(ops::mul(sd::sd_forward(x, params, cfg), w)); }, named, opts);
}

GradCheckReport check_md(const GradCheckOptions& opts, std::uint64_t seed) {
    KeyedRng rng({seed, 2});
    md::MdConfig cfg;
    cfg.frames = 4;
    cfg.groups = 2;
    const Index B = 2, C = 3;
    auto params = md::MdParams::init(cfg, seed, "md");
    const auto plan = md::make_shuffle_plan(B, C, cfg.frames, seed, md::ShuffleMode::Train);
    Tensor x = random_tensor({B * cfg.frames, C, 3, 3}, rng, -1.0, 1.0, true);
    Tensor w = random_tensor(x.shape(), rng, -1.0, 1.0, false);
    auto named = params.named("md");
    named.push_back({"x", x});
    return grad_check([&] { return ops::sum(ops::mul(md::md_forward(x, B, params, cfg, plan), w)); }, named, opts);
}

GradCheckReport check_losses(const GradCheckOptions& opts, std::uint64_t seed) {
    KeyedRng rng({seed, 3});
    const Index N = 2, T = 4, K = 3, V = 5;
    Tensor j3 = random_tensor({N * T, K, 3}, rng, -2.0, 2.0, true);
    Tensor v3 = random_tensor({N * T, V, 3}, rng, -2.0, 2.0, true);
    Tensor j2 = random_tensor({N * T, K, 2}, rng, -2.0, 2.0, true);
    losses::Targets gt{random_tensor({N * T, K, 3}, rng, -2.0, 2.0, false),
                       random_tensor({N * T, V, 3}, rng, -2.0, 2.0, false),
                       random_tensor({N * T, K, 2}, rng, -2.0, 2.0, false)};
    const losses::LossWeights w{1.0, 0.5, 2.0, 0.75};
    std::vector<NamedTensor> named{{"joints3d", j3}, {"vertices3d", v3}, {"joints2d", j2}};
    GradCheckReport joints = grad_check(
        [&] { return losses::total_loss({j3, v3, j2}, gt, T, w).total; }, named, opts);
    losses::VelocityOptions vel{losses::SpeedNormalization::JointsTimesGaps, losses::VelocitySource::Vertices};
    GradCheckReport verts = grad_check(
        [&] { return losses::total_loss({j3, v3, j2}, gt, T, w, vel).total; }, named, opts);
    for (auto& p : verts.params) {
        p.name += "[vertex-velocity]";
        joints.params.push_back(p);
    }
    joints.max_rel_error = std::max(joints.max_rel_error, verts.max_rel_error);
    joints.checked += verts.checked;
    joints.pass = joints.pass && verts.pass;
    if (joints.failure.empty()) joints.failure = verts.failure;
    return joints;
}

GradCheckReport check_model(const GradCheckOptions& opts, std::uint64_t seed) {
    KeyedRng rng({seed, 4});
    model::ModelConfig cfg;
    cfg.image_size = 16;
    cfg.backbone_channels = {4, 4};
    cfg.feature_channels = 8;
    cfg.joints = 2;
    cfg.vertices = 4;
    cfg.layers = 1;
    cfg.heads = 2;
    cfg.model_dim = 8;
    cfg.ffn_mult = 2;
    cfg.sd.channels = 8;
    cfg.sd.groups = 2;
    cfg.md.frames = 2;
    cfg.output_scale = 1.0;
    cfg.zero_init_heads = false;
    cfg.camera_scale = {0.5, 1.0, 1.0};
    for (int i = 0; i < (2 + 4) * 3; ++i) cfg.template_points.push_back(rng.uniform(-1.0, 1.0));
    const Index B = 2;
    auto params = model::ModelParams::init(cfg, seed);
    Tensor images = random_tensor({B * 2, 1, 16, 16}, rng, 0.0, 1.0, false);
    const auto plan = md::make_shuffle_plan(B, cfg.feature_channels, 2, seed, md::ShuffleMode::Train);
    KeyedRng wr({seed, 5});
    Tensor wj = random_tensor({B * 2, 2, 3}, wr, -1.0, 1.0, false);
    Tensor wv = random_tensor({B * 2, 4, 3}, wr, -1.0, 1.0, false);
    Tensor w2 = random_tensor({B * 2, 2, 2}, wr, -1.0, 1.0, false);
    auto f = [&] {
        const auto o = model::forward(images, B, params, cfg, plan);
        return ops::add(ops::add(ops::sum(ops::mul(o.joints3d, wj)), ops::sum(ops::mul(o.vertices3d, wv))),
                        ops::sum(ops::mul(o.joints2d, w2)));
    };
    return grad_check(f, params.trainable(), opts);
}

}  // namespace

GradCheckRun gradcheck_cmd(GradTarget target, const GradCheckOptions& options, std::uint64_t seed) {
    GradCheckRun run;
    auto add = [&](const std::string& name, GradCheckReport r) {
        run.pass = run.pass && r.pass;
        run.reports.emplace(name, std::move(r));
    };
    const bool all = target == GradTarget::All;
    if (all || target == GradTarget::Sd) add("sd", check_sd(options, seed));
    if (all || target == GradTarget::Md) add("md", check_md(options, seed));
    if (all || target == GradTarget::Losses) add("losses", check_losses(options, seed));
    if (all || target == GradTarget::Model) add("model", check_model(options, seed));
    return run;
}

std::vector<std::string> export_heatmaps(const model::ModelParams& params, const RunConfig& config,
                                         const synth::Sample& sample, Index sequence_index,
                                         const std::vector<Index>& frames, const std::string& out_dir) {
    const std::vector<synth::Sample> one{sample};
    const Index T = check_dataset(one, config.model);
    std::filesystem::create_directories(out_dir);
    NoGradGuard no_grad;
    const Batch b = make_batch(one, std::vector<std::size_t>{0});
    model::ForwardTaps taps;
    model::forward(b.images, 1, params, config.model, md::identity_plan(1, config.model.feature_channels, T), &taps);
    const std::pair<const char*, const Tensor*> named[] = {
        {"backbone", &taps.backbone}, {"post_sd", &taps.post_sd}, {"post_md", &taps.post_md}};
    std::vector<std::string> written;
    for (Index t : frames) {
        if (t < 0 || t >= T) throw std::out_of_range("export_heatmaps: frame " + std::to_string(t) + " outside [0, " +
                                                     std::to_string(T) + ")");
        for (const auto& [tap, tensor] : named) {
            const Index C = tensor->dim(1), H = tensor->dim(2), W = tensor->dim(3);
            const auto& v = tensor->values();
            const std::string path = (std::filesystem::path(out_dir) / ("seq" + std::to_string(sequence_index) + "_t" +
                                                                        std::to_string(t) + "_" + tap + ".csv"))
                                         .string();
            std::ofstream out(path, std::ios::trunc);
            if (!out) throw std::runtime_error("export_heatmaps: cannot write " + path);
            out << "# tap=" << tap << " shape=" << H << "x" << W << "\n";
            for (Index y = 0; y < H; ++y) {
                for (Index x = 0; x < W; ++x) {
                    double m = 0.0;
                    for (Index c = 0; c < C; ++c) m += v[static_cast<std::size_t>(((t * C + c) * H + y) * W + x)];
                    out << (x ? "," : "") << fmt(m / static_cast<double>(C));
                }
                out << "\n";
            }
            if (!out) throw std::runtime_error("export_heatmaps: write failed for " + path);
            written.push_back(path);
        }
    }
    return written;
}

void tune_allocator() {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

}  // namespace occmesh::harness
