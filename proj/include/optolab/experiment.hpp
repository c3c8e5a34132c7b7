#pragma once

// Training runs, sweeps and analysis jobs over run directories.
//
// Run directory layout:
//   config.json          resolved config (every default expanded)
//   metrics.jsonl        one MetricsRecord per eval point, byte-deterministic
//   timing.jsonl         wall-clock per eval point (kept apart from metrics)
//   checkpoints/step_N/  periodic checkpoints
//   final/               checkpoint after the last step
//   analysis.jsonl       appended by analysis jobs

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "optolab/analysis.hpp"
#include "optolab/checkpoint.hpp"
#include "optolab/clamps.hpp"
#include "optolab/config_json.hpp"

namespace optolab {

constexpr int kMetricsSchema = 1;

struct ExperimentConfig {
    std::string name = "default";
    WorldConfig world;
    ModelConfig model;
    AdamConfig adam;
    std::size_t batch_size = 32;
    std::uint64_t total_sequences = 1'000'000;
    std::uint64_t eval_every = 3200;         // sequences
    std::uint64_t checkpoint_every = 51'200;  // sequences (1600 steps); 0 disables periodic checkpoints
    std::size_t eval_size = 2048;            // per split
    std::uint64_t eval_seed = 7;
    bool head_metrics = true;                // induction / previous-token scores at each eval
    double stop_loss = 0.0;                  // stop once the train eval loss falls below this; 0 never stops
    ClampPlan clamps;
    std::uint64_t seed_init = 1;
    std::uint64_t seed_data = 0;
    std::string note;

    /// Throws ConfigError listing every problem.
    void validate() const;
    std::uint64_t total_steps() const { return total_sequences / batch_size; }
    std::uint64_t eval_steps() const { return eval_every / batch_size; }
    std::uint64_t checkpoint_steps() const { return checkpoint_every / batch_size; }
};

Json to_json(const ExperimentConfig& c);
/// Strict reader. Model label count and exemplar width default to the world's.
ExperimentConfig experiment_from_json(const Json& j);
/// Reads an optional config file, applies dotted overrides, validates.
ExperimentConfig load_experiment_config(const std::optional<std::filesystem::path>& path,
                                        const std::vector<std::string>& overrides = {});
std::string config_hash(const ExperimentConfig& c);

struct SplitMetrics {
    double loss = 0.0;
    double accuracy = 0.0;
};

struct MetricsRecord {
    std::uint64_t step = 0;
    std::uint64_t sequences = 0;
    std::optional<double> train_batch_loss;  // mean training-batch loss since the previous record
    SplitMetrics train, test_exemplars, test_relabel;
    std::vector<double> induction;   // layer-1 heads
    std::vector<double> prev_token;  // layer-0 heads
};

Json to_json(const MetricsRecord& r, const ExperimentConfig& c, const std::string& hash);
MetricsRecord metrics_from_json(const Json& j);
/// Parses a metrics log. Throws on a missing file, an empty log, or a schema mismatch.
std::vector<MetricsRecord> read_metrics(const std::filesystem::path& path);
std::vector<TracePoint> loss_trace(const std::vector<MetricsRecord>& records, Split split = Split::Train);

struct RunOptions {
    bool resume = false;
    std::ostream* log = nullptr;  // progress lines; nullptr is silent
};

struct RunResult {
    std::filesystem::path dir;
    std::vector<MetricsRecord> metrics;
    ModelParams final_params;
    std::uint64_t steps_done = 0;
    bool stopped_early = false;
};

/// Trains per `cfg` into `out`. Throws ConfigError before any work, NumericalError on a non-finite loss.
RunResult run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& out, const RunOptions& opt = {});

// ---- sweeps ----

enum class SweepAxis { Classes, Labels };
enum class SweepKind { Full, BIsolated, CIsolated, Composite };
const char* sweep_kind_name(SweepKind k);
SweepAxis parse_sweep_axis(const std::string& s);
SweepKind parse_sweep_kind(const std::string& s);

/// The base config with the axis value and the kind's clamp plan applied.
/// B isolated: layer-1 and copy clamps. C isolated: perfect match clamp. Composite: layer-1 clamp.
ExperimentConfig sweep_point(const ExperimentConfig& base, SweepAxis axis, std::size_t value, SweepKind kind, int head);

struct SweepPointResult {
    std::size_t value = 0;
    SweepKind kind = SweepKind::Full;
    std::filesystem::path dir;
    bool ok = false;
    std::string error;
    std::optional<double> learning_time;
};

/// Runs every (value, kind) point into out/<axis>_<value>/<kind>; failures are recorded and the sweep continues.
std::vector<SweepPointResult> run_sweep(const ExperimentConfig& base, SweepAxis axis, const std::vector<std::size_t>& values,
                                        const std::filesystem::path& out, const std::vector<SweepKind>& kinds, int head,
                                        const RunOptions& opt = {});

// ---- analysis jobs ----

enum class AnalysisJob { Ablations, Induction, Composition, Progress, Phase, ErrorSubsets };
AnalysisJob parse_analysis_job(const std::string& s);
const char* analysis_job_name(AnalysisJob j);

/// Runs a job on a run directory (or a bare checkpoint directory for weight/activation jobs);
/// records are returned and appended to <run>/analysis.jsonl when a run directory is given.
std::vector<Json> analyze(const std::filesystem::path& target, AnalysisJob job);

/// The standard ablation battery: knockout and all-but-one of every layer-1 head, both
/// output cuts, preserving ablations of all layer-0 heads and of the identified previous-token set.
std::vector<AblationSpec> ablation_battery(const ModelParams& params, const EvalSet& set);

// ---- toy runs ----

/// Trains the toy model and writes metrics.jsonl (model=toy) into `out`; returns the trace.
ToyTrace run_toy(const ToyConfig& cfg, const std::filesystem::path& out, std::uint64_t log_every = 10);

}  // namespace optolab
