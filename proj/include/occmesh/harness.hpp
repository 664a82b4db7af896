#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "occmesh/config.hpp"
#include "occmesh/gradcheck.hpp"
#include "occmesh/losses.hpp"
#include "occmesh/metrics.hpp"
#include "occmesh/model.hpp"
#include "occmesh/synthdata.hpp"

namespace occmesh::harness {

// Raised when the loss turns non-finite; carries the offending step.
class TrainingError : public std::runtime_error {
public:
    TrainingError(std::uint64_t step, const std::string& what) : std::runtime_error(what), step_(step) {}
    std::uint64_t step() const { return step_; }

private:
    std::uint64_t step_;
};

struct StepRecord {
    std::uint64_t step = 0;
    losses::LossBreakdown loss;
};

struct EpochReport {
    Index epoch = 0;
    metrics::MetricReport report;
};

struct TrainLog {
    std::vector<StepRecord> steps;
    std::vector<EpochReport> epochs;
    double wall_seconds = 0.0;

    // "step,l3d,l2d,lv,lvert,total" followed by one line per step.
    std::string csv() const;
    // FNV-1a of csv(); independent of wall time.
    std::uint64_t hash() const;
};

struct TrainResult {
    RunConfig config;  // as trained, with the template filled in
    model::ModelParams params;
    TrainLog log;
    std::uint64_t steps = 0;
};

// Called after every optimizer step with (epoch, record).
using StepCallback = std::function<void(Index, const StepRecord&)>;

// Batched tensors for a slice of sequences, frames of each sequence
// consecutive.
struct Batch {
    Index sequences = 0;
    Index frames = 0;
    Tensor images;  // [(N*T), 1, Hi, Wi]
    losses::Targets targets;
};

Batch make_batch(std::span<const synth::Sample> data, std::span<const std::size_t> indices);

// Checks that every sample matches the config's image size, joints,
// vertices and one common frame count; returns that frame count.
Index check_dataset(const std::vector<synth::Sample>& data, const model::ModelConfig& config);

// Fills the model template and camera prior from the synthetic generator (when
// requested) and syncs derived fields for sequences of `frames` frames.
RunConfig prepare_config(RunConfig config, Index frames);

TrainResult train(const RunConfig& config, const std::vector<synth::Sample>& train_data,
                  const std::vector<synth::Sample>* validation = nullptr, const StepCallback& on_step = {});
TrainResult train(const RunConfig& config);

// Eval mode: identity shuffle plans, no autodiff recording. Sequences are
// processed in chunks of `chunk` and reduced in dataset order.
metrics::MetricReport evaluate(const model::ModelParams& params, const RunConfig& config,
                               const std::vector<synth::Sample>& data, Index chunk = 16);

// Per-sequence predictions in eval mode, mm.
std::vector<metrics::SequencePrediction> predict(const model::ModelParams& params, const RunConfig& config,
                                                 const std::vector<synth::Sample>& data, Index chunk = 16);

metrics::SequencePrediction ground_truth(const synth::Sample& sample);

enum class GradTarget { Sd, Md, Losses, Model, All };
GradTarget parse_grad_target(const std::string& name);

struct GradCheckRun {
    std::map<std::string, GradCheckReport> reports;
    bool pass = true;
};

// Module checks at fixed tiny shapes with random parameters.
GradCheckRun gradcheck_cmd(GradTarget target, const GradCheckOptions& options = {}, std::uint64_t seed = 7);

// Writes <out_dir>/seq<s>_t<t>_<tap>.csv for the requested frames of one
// sequence: a header line "# tap=<name> shape=HxW" then H rows of W values
// (channel means). Returns the written paths.
std::vector<std::string> export_heatmaps(const model::ModelParams& params, const RunConfig& config,
                                         const synth::Sample& sample, Index sequence_index,
                                         const std::vector<Index>& frames, const std::string& out_dir);

// Raises mmap/trim thresholds so large tape buffers are recycled instead of
// being returned to the kernel after every step.
void tune_allocator();

}  // namespace occmesh::harness
