#pragma once

// Metrics over trained models and loss traces.

#include <optional>
#include <utility>
#include <vector>

#include "optolab/ablations.hpp"
#include "optolab/clamps.hpp"
#include "optolab/transformer.hpp"

namespace optolab {

// ---- attention metrics ----

/// Per head of `layer`: mean over sequences of query-row attention to the
/// correct label token minus attention to the incorrect one.
std::vector<double> induction_strengths(const ActivationRecord& rec, const SequenceBatch& batch, std::size_t layer = 1);
/// Averaged over a whole evaluation set with the unclamped model.
std::vector<double> induction_strengths(const ModelParams& params, const EvalSet& set);

/// Per layer-0 head: mean attention from position t to t-1 over t >= 1.
std::vector<double> prev_token_scores(const ActivationRecord& rec);
std::vector<double> prev_token_scores(const ModelParams& params, const EvalSet& set);
/// Heads whose previous-token score exceeds `threshold`.
std::vector<int> identify_pt_heads(const std::vector<double>& scores, double threshold = 0.5);

/// Both per-head metrics from one pass over the set.
struct HeadMetrics {
    std::vector<double> induction;   // layer-1 heads
    std::vector<double> prev_token;  // layer-0 heads
};
HeadMetrics head_metrics(const ModelParams& params, const EvalSet& set);

// ---- weight metrics ----

/// ||W_O W_slot||_F / (||W_O||_F ||W_slot||_F) for W_O [a, d] and W_slot [d, b].
double composition_score(const Tensor& w_out, const Tensor& w_slot);
double composition_score(const ModelParams& params, int l1_head, int l2_head, Slot slot);
/// [heads, heads, 3] table over (layer-0 head, layer-1 head, {Q, K, V}).
Tensor composition_table(const ModelParams& params);

/// Spearman rank correlation with average ranks for ties.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

// ---- loss-trace statistics ----

struct TracePoint {
    double x = 0.0;  // sequences seen (or steps)
    double loss = 0.0;
};

struct PhaseStatsOptions {
    double band_lo = 0.60;
    double band_hi = 0.75;
    double min_plateau_span = 2e4;
    double fit_stop_loss = 0.05;
};

struct PhaseStats {
    std::optional<double> plateau_span;    // present only if >= min_plateau_span
    std::optional<double> plateau_start, plateau_end;
    std::optional<double> transition_start, transition_end;  // last 0.9 ln2 / first 0.1 ln2 crossing
    std::optional<double> transition_duration;
    std::optional<double> learning_time;   // first 0.4 ln2 crossing
    std::optional<double> exp_fit_r2;      // linear fit of log-loss until loss < fit_stop_loss
};

PhaseStats phase_change_stats(const std::vector<TracePoint>& trace, const PhaseStatsOptions& opt = {});

/// First x at which the linearly interpolated trace falls to `level` or below.
std::optional<double> first_crossing_below(const std::vector<TracePoint>& trace, double level);
/// Last x at which the trace comes down through `level` (start of its final stay below).
std::optional<double> last_crossing_below(const std::vector<TracePoint>& trace, double level);

/// Coefficient of determination of a least-squares line through (x, y).
double linear_fit_r2(const std::vector<double>& x, const std::vector<double>& y);

// ---- progress measures ----

enum class ProgressMeasure { PerfectPrevToken, PerfectInduction };

/// Loss of each checkpoint's parameters with the chosen perfecting clamp applied post hoc.
/// `heads` are layer-0 heads for PerfectPrevToken, layer-1 heads for PerfectInduction.
std::vector<double> progress_vs_clamping(const std::vector<ModelParams>& checkpoints, const EvalSet& set,
                                         ProgressMeasure measure, const std::vector<int>& heads);

}  // namespace optolab
