#pragma once

// Post-hoc ablations of a trained model. Two-pass modes build an unablated
// pass and an ablated pass in one graph; the ablated pass reads the preserved
// activations from the first.

#include <compare>
#include <string>
#include <vector>

#include "optolab/clamps.hpp"
#include "optolab/transformer.hpp"

namespace optolab {

enum class AblationMode { None, Knockout, AllButOne, PatternPreserving, ValuePreserving, Path, CutToOutput };
const char* ablation_mode_name(AblationMode mode);

struct HeadRef {
    int layer = 0;
    int head = 0;
    friend auto operator<=>(const HeadRef&, const HeadRef&) = default;
};

struct AblationSpec {
    AblationMode mode = AblationMode::None;
    /// Knockout: heads to zero. AllButOne: the single surviving head (its layer is ablated).
    /// Pattern/ValuePreserving: layer-0 heads whose outputs are removed.
    std::vector<HeadRef> heads;
    int l1_head = -1;               // Path: surviving layer-0 head
    int l2_head = -1;               // Path: surviving layer-1 head
    bool preserve_patterns = true;  // Path: keep layer-1 patterns (else values) from the clean pass
    int layer = 0;                  // CutToOutput
    /// Layer-1 heads whose query row is set to the perfect induction pattern.
    std::vector<int> perfect_match_heads;

    static AblationSpec none() { return {}; }
    static AblationSpec knockout(std::vector<HeadRef> heads);
    static AblationSpec all_but_one(int layer, int head);
    static AblationSpec pattern_preserving(std::vector<int> layer0_heads);
    static AblationSpec value_preserving(std::vector<int> layer0_heads);
    static AblationSpec path(int l1_head, int l2_head, bool preserve_patterns);
    static AblationSpec cut_to_output(int layer);

    /// Throws ConfigError when heads are out of range or no head survives where one must.
    void validate(const ModelConfig& cfg) const;
    std::string describe() const;
};

/// Builds the ablated forward pass and its last-token loss.
BuiltLoss apply_ablation(Graph& g, const ParamNodes& params, const SequenceBatch& batch, const AblationSpec& spec);
LossBuilder ablation_loss_builder(const AblationSpec& spec);

struct AblationResult {
    double accuracy = 0.0;
    double loss = 0.0;
    std::vector<std::uint8_t> correct;  // per sequence, eval-set order
};

AblationResult ablation_eval(const ModelParams& params, const EvalSet& set, const AblationSpec& spec);

/// Accuracy of `probe` on the sequences `base` gets wrong. Throws if `base` makes no mistakes.
double error_subset_accuracy(const ModelParams& params, const EvalSet& set, const AblationSpec& base,
                             const AblationSpec& probe, std::size_t* subset_size = nullptr);

}  // namespace optolab
