#pragma once

// Training-time activation clamps. A clamp replaces an activation throughout
// training with a fixed or constructed value under an explicit gradient
// policy, isolating the learning dynamics of the remaining computation.

#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "optolab/transformer.hpp"

namespace optolab {

/// [T, T] pattern with weight 1 on the previous position; position 0 attends to itself.
Tensor prev_token_pattern(std::size_t T);

/// [B, T, T]; the query (last) row puts (1+s)/2 on the correct label token and
/// (1-s)/2 on the incorrect one. Other rows are zero and meant to stay unclamped.
Tensor induction_pattern(const SequenceBatch& batch, double strength);

/// [B, T, T] mask selecting the query row of every sequence.
std::vector<std::uint8_t> query_row_mask(std::size_t batch, std::size_t T);

/// Token positions feeding each position of the layer-2 input under the
/// layer-1 clamp: 0 -> 0, t -> t-1 for 0 < t < T-1, T-1 -> T-1.
std::vector<std::size_t> shifted_positions(std::size_t T);

enum class ClampKind {
    PtAttend,       // layer-0 heads attend to the previous token
    Layer1Full,     // all of layer 0 replaced by an ideal previous-token layer
    IhMatch,        // one layer-1 head's query row set to a (noisy) induction pattern
    Copy,           // output logits set to one layer-1 head's attention logits to the label tokens
    Layer1AndCopy,  // Layer1Full and Copy together
    HeadKnockout,   // head outputs set to zero
    DonorGraft,     // residual after layer 0 taken from a donor model
};

const char* clamp_kind_name(ClampKind kind);
ClampKind parse_clamp_kind(const std::string& name);

struct ClampSpec {
    ClampKind kind = ClampKind::PtAttend;
    std::vector<int> heads{2};   // PtAttend: layer-0 heads; HeadKnockout: heads of `layer`
    int layer = 1;               // HeadKnockout
    int head = 3;                // IhMatch, Copy, Layer1AndCopy: the layer-1 head
    double strength = 1.0;       // IhMatch
    /// Gradient policy of the layer-1 patterns carried from the shifted pass (Layer1Full).
    GradPolicy pattern_policy = GradPolicy::Flow;
    std::shared_ptr<const ModelParams> donor;  // DonorGraft
    std::string donor_path;                    // checkpoint the experiment driver loads
    std::uint64_t start_step = 0;              // active for start_step <= step < end_step
    std::uint64_t end_step = std::numeric_limits<std::uint64_t>::max();

    bool active(std::uint64_t step) const { return step >= start_step && step < end_step; }
    /// Throws ConfigError on out-of-range heads, |s| > 1, or a missing/mismatched donor.
    void validate(const ModelConfig& cfg) const;
    std::string describe() const;
};

using ClampPlan = std::vector<ClampSpec>;

/// Activation sites a clamp writes; used to reject overlapping combinations.
std::set<Site> clamp_sites(const ClampSpec& spec, const ModelConfig& cfg);
/// Validates every spec and checks that clamps active at the same time touch disjoint sites.
void validate_plan(const ClampPlan& plan, const ModelConfig& cfg);

struct ClampedForward {
    ModelGraph main;                 // the pass whose logits feed the loss
    std::optional<ModelGraph> shifted;  // Layer1Full first pass
    std::optional<ModelGraph> donor;    // DonorGraft donor pass
    NodeId logits;                   // final logits (differs from main.logits under Copy)
    NodeId copy_logits;              // the gathered attention logits under Copy
};

/// Builds the clamped forward pass(es) for one batch. `extra` is merged into
/// the main pass cache (e.g. for ablations on top of clamps).
ClampedForward apply_clamped(Graph& g, const ParamNodes& params, const SequenceBatch& batch,
                             const std::vector<ClampSpec>& clamps, const ClampCache& extra = {});

/// Loss builder applying the clamps of `plan` active at `step`.
LossBuilder clamp_loss_builder(const ClampPlan& plan, std::uint64_t step);
std::vector<ClampSpec> active_clamps(const ClampPlan& plan, std::uint64_t step);

/// Output-logit values the Copy clamp produces from a head's [B, T, T] attention logits: [B, L]
/// rows with the two in-context labels set to the query-row attention logits, -1e9 elsewhere.
Tensor copy_clamp_values(const Tensor& attn_logits, const SequenceBatch& batch, std::size_t n_labels);

}  // namespace optolab
