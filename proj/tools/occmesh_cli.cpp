#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "occmesh/checkpoint.hpp"
#include "occmesh/config.hpp"
#include "occmesh/harness.hpp"
#include "occmesh/synthdata.hpp"

using namespace occmesh;

namespace {

void print_report(const metrics::MetricReport& r, std::ostream& out) {
    char line[256];
    std::snprintf(line, sizeof line, "mpjpe_mm=%.6f pa_mpjpe_mm=%.6f mpvpe_mm=%.6f accel_error_mm_s2=%.6f sequences=%zu\n",
                  r.mpjpe, r.pa_mpjpe, r.mpvpe, r.accel_error, r.per_sequence.size());
    out << line;
}

std::vector<Index> parse_frames(const std::string& text) {
    std::vector<Index> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(std::stoll(item));
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    harness::tune_allocator();
    CLI::App app{"Occlusion-robust mesh regression: data generation, training, evaluation and checks"};
    app.require_subcommand(1);

    std::string config_path, out_path, ckpt_path, data_path, ablation, log_path, frames_text = "0";
    std::uint64_t seed = 0;
    bool seed_set = false;
    double occlusion = 0.5;
    Index count = 200, first = 0, frames = 8, image_size = 64, sequence = 0;
    bool no_distractor = false;
    std::string target = "all";
    double fault_scale = 1.0;

    auto* gen = app.add_subcommand("gen-data", "Generate a synthetic occluded-motion dataset");
    gen->add_option("--out", out_path, "Output dataset file")->required();
    gen->add_option("--seed", seed, "Scene seed");
    gen->add_option("--occlusion-level", occlusion, "Occlusion level in [0, 1]")->check(CLI::Range(0.0, 1.0));
    gen->add_option("--count", count, "Number of sequences");
    gen->add_option("--first-index", first, "Index of the first sequence");
    gen->add_option("--frames", frames, "Frames per sequence");
    gen->add_option("--image-size", image_size, "Image side in pixels");
    gen->add_flag("--no-distractor", no_distractor, "Omit the distractor body");

    auto* tr = app.add_subcommand("train", "Train a model and write a checkpoint");
    tr->add_option("--config", config_path, "Run config file");
    tr->add_option("--data", data_path, "Training dataset (overrides data.train)");
    tr->add_option("--out", out_path, "Checkpoint path")->required();
    tr->add_option("--log", log_path, "TrainLog CSV path (default: <out>.log.csv)");
    tr->add_option("--seed", seed, "Training seed (overrides train.seed)")->each([&](const std::string&) { seed_set = true; });
    tr->add_option("--ablation", ablation, "Enabled components: any of sd,md,vel, or none");

    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
    ev->add_option("--ckpt", ckpt_path, "Checkpoint")->required();
    ev->add_option("--data", data_path, "Dataset")->required();
    ev->add_option("--out", out_path, "Also write the report to this file");

    auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
    gc->add_option("target", target, "sd, md, losses, model or all");
    gc->add_option("--seed", seed, "Fixture seed");
    gc->add_option("--fault-scale", fault_scale, "Multiply analytic gradients (fault injection)");

    auto* hm = app.add_subcommand("export-heatmaps", "Write channel-mean feature maps as CSV");
    hm->add_option("--ckpt", ckpt_path, "Checkpoint")->required();
    hm->add_option("--data", data_path, "Dataset")->required();
    hm->add_option("--out", out_path, "Output directory")->required();
    hm->add_option("--sequence", sequence, "Sequence index");
    hm->add_option("--frames", frames_text, "Comma-separated frame indices");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*gen) {
            synth::SceneSpec spec;
            spec.seed = seed;
            spec.occlusion_level = occlusion;
            spec.frames = frames;
            spec.image_size = image_size;
            spec.distractor = !no_distractor;
            const auto data = synth::generate_dataset(spec, count, first);
            synth::write_dataset(out_path, data);
            std::cout << "wrote " << data.size() << " sequences to " << out_path << "\n";
            return 0;
        }
        if (*tr) {
            harness::RunConfig cfg = config_path.empty() ? harness::RunConfig{} : harness::load_config(config_path);
            if (!data_path.empty()) cfg.train_data = data_path;
            if (seed_set) cfg.seed = seed;
            if (!ablation.empty()) harness::apply_ablation(cfg, ablation);
            const auto result = harness::train(cfg);
            harness::save_checkpoint(out_path, result.config, result.params, result.steps);
            const std::string log = log_path.empty() ? out_path + ".log.csv" : log_path;
            std::ofstream(log) << result.log.csv();
            const auto& last = result.log.steps.back().loss;
            std::printf("steps=%llu final_total=%.6f log_hash=%016llx wall_s=%.1f\n",
                        static_cast<unsigned long long>(result.steps), last.total,
                        static_cast<unsigned long long>(result.log.hash()), result.log.wall_seconds);
            return 0;
        }
        if (*ev) {
            const auto ck = harness::load_checkpoint(ckpt_path);
            const auto data = synth::read_dataset(data_path);
            const auto report = harness::evaluate(ck.params, ck.config, data);
            print_report(report, std::cout);
            if (!out_path.empty()) {
                std::ofstream out(out_path);
                print_report(report, out);
            }
            return 0;
        }
        if (*gc) {
            GradCheckOptions opts;
            opts.analytic_scale = fault_scale;
            const auto run = harness::gradcheck_cmd(harness::parse_grad_target(target), opts, seed == 0 ? 7 : seed);
            for (const auto& [name, report] : run.reports) {
                std::printf("%-8s %s max_rel_err=%.3e checked=%lld%s%s\n", name.c_str(), report.pass ? "PASS" : "FAIL",
                            report.max_rel_error, static_cast<long long>(report.checked),
                            report.failure.empty() ? "" : " ", report.failure.c_str());
                if (!report.pass) {
                    for (const auto& p : report.params) {
                        if (p.max_rel_error > opts.tol) {
                            std::printf("    %s rel_err=%.3e at %lld (analytic %.6e, numeric %.6e)\n", p.name.c_str(),
                                        p.max_rel_error, static_cast<long long>(p.worst_index), p.worst_analytic,
                                        p.worst_numeric);
                        }
                    }
                }
            }
            return run.pass ? 0 : 1;
        }
        if (*hm) {
            const auto ck = harness::load_checkpoint(ckpt_path);
            const auto data = synth::read_dataset(data_path);
            if (sequence < 0 || sequence >= static_cast<Index>(data.size())) {
                throw std::out_of_range("--sequence " + std::to_string(sequence) + " outside the dataset");
            }
            const auto paths = harness::export_heatmaps(ck.params, ck.config, data[static_cast<std::size_t>(sequence)],
                                                        sequence, parse_frames(frames_text), out_path);
            for (const auto& p : paths) std::cout << p << "\n";
            return 0;
        }
    } catch (const harness::TrainingError& e) {
        std::cerr << "training aborted: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
