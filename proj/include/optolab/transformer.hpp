#pragma once

// Causal attention-only transformer with rotary positions and layer norm on
// every read from the residual stream. Layers and heads are 0-based here:
// layer 0 is "Layer 1" in the usual prose, layer 1 is "Layer 2".
//
// The model is expressed as a node sub-graph (apply_model) so several model
// applications can share one Graph and clamp each other's activations.

#include <compare>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "optolab/autodiff.hpp"
#include "optolab/taskgen.hpp"
#include "optolab/tensor.hpp"

namespace optolab {

struct ModelConfig {
    std::size_t d_model = 64;
    std::size_t n_layers = 2;
    std::size_t heads = 8;
    std::size_t n_labels = 5;
    std::size_t exemplar_dim = 512;
    double rope_base = 10000.0;
    double ln_eps = 1e-5;

    std::size_t head_dim() const { return d_model / heads; }
    void validate() const;  // throws ConfigError
    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Named parameter tensors in a fixed order. Per-layer projections are stored
/// head-major: W_Q/W_K/W_V are [d, heads*head_dim] with head h in columns
/// [h*hd, (h+1)*hd); W_O is [heads*head_dim, d] with head h in the matching rows.
struct ModelParams {
    ModelConfig config;
    std::vector<std::string> names;
    std::vector<Tensor> tensors;

    std::size_t index(const std::string& name) const;
    Tensor& get(const std::string& name) { return tensors[index(name)]; }
    const Tensor& get(const std::string& name) const { return tensors[index(name)]; }
    std::size_t parameter_count() const;
    bool all_finite() const;
};

enum class Slot { Q, K, V, O };
const char* slot_name(Slot slot);

std::string param_name(std::size_t layer, Slot slot);
std::string ln_gain_name(std::size_t layer);
std::string ln_bias_name(std::size_t layer);
inline const char* kExemplarProj = "embed.exemplar";
inline const char* kLabelEmbed = "embed.label";
inline const char* kUnembed = "unembed";

/// One head's block: [d, hd] for Q/K/V, [hd, d] for O.
Tensor head_weight(const ModelParams& params, std::size_t layer, Slot slot, std::size_t head);

/// Gaussian weights with std 1/sqrt(fan_in); layer-norm gain 1, bias 0.
ModelParams init_params(const ModelConfig& config, std::uint64_t seed);

// ---- clamp sites ----

enum class SiteKind : std::uint8_t { Embed, Norm, Q, K, V, AttnLogits, Pattern, HeadOut, Resid, Logits };
const char* site_kind_name(SiteKind kind);

struct Site {
    SiteKind kind = SiteKind::Embed;
    int layer = -1;
    int head = -1;

    static Site embed() { return {SiteKind::Embed, -1, -1}; }
    static Site norm(int l) { return {SiteKind::Norm, l, -1}; }
    static Site q(int l, int h) { return {SiteKind::Q, l, h}; }
    static Site k(int l, int h) { return {SiteKind::K, l, h}; }
    static Site v(int l, int h) { return {SiteKind::V, l, h}; }
    static Site attn_logits(int l, int h) { return {SiteKind::AttnLogits, l, h}; }
    static Site pattern(int l, int h) { return {SiteKind::Pattern, l, h}; }
    static Site head_out(int l, int h) { return {SiteKind::HeadOut, l, h}; }
    /// Residual stream after layer l (the input read by layer l+1).
    static Site resid(int l) { return {SiteKind::Resid, l, -1}; }
    static Site logits() { return {SiteKind::Logits, -1, -1}; }

    std::string str() const;
    friend auto operator<=>(const Site&, const Site&) = default;
};

/// Substitutions keyed by site; node-valued sources refer to the graph the model is applied in.
using ClampCache = std::map<Site, Substitution>;

/// Parameter handles inside a Graph, aligned with ModelParams::tensors.
struct ParamNodes {
    std::vector<NodeId> ids;
    const ModelParams* params = nullptr;
    NodeId operator()(const std::string& name) const { return ids.at(params->index(name)); }
};

/// Leaves with requires_grad; bound to the current values.
ParamNodes add_param_leaves(Graph& g, const ModelParams& params);
/// Constants (no gradient), e.g. for donor models.
ParamNodes add_param_constants(Graph& g, const ModelParams& params);

/// Node handles of one model application. Heads of a layer whose output
/// residual is fully clamped are not built and hold invalid ids.
struct ModelGraph {
    struct Layer {
        NodeId input, norm;
        std::vector<NodeId> q, k, v, attn_logits, pattern, head_out;
        NodeId resid;
        bool built = true;
    };
    NodeId embed;
    std::vector<Layer> layers;
    NodeId logits;
    std::size_t batch = 0, seq_len = 0;

    NodeId at(const Site& site) const;
};

/// Appends one forward pass. Every cache entry must name a site that gets built.
/// A valid `embed` node is used as the token embedding instead of building one.
ModelGraph apply_model(Graph& g, const ParamNodes& params, const SequenceBatch& batch,
                       const ClampCache& cache = {}, NodeId embed = {});

/// Token embeddings only (exemplar projection or label embedding), [B, T, d].
NodeId embed_tokens(Graph& g, const ParamNodes& params, const SequenceBatch& batch);

// ---- activation record ----

struct HeadRecord {
    Tensor q, k, v;        // [B, T, hd], q and k after rotary
    Tensor attn_logits;    // [B, T, T], scaled, before masking
    Tensor pattern;        // [B, T, T]
    Tensor out;            // [B, T, d]
};

struct LayerRecord {
    Tensor input, norm;    // [B, T, d]
    std::vector<HeadRecord> heads;
    Tensor resid;          // [B, T, d]
    bool built = true;
};

struct ActivationRecord {
    Tensor embed;
    std::vector<LayerRecord> layers;
    Tensor logits;         // [B, T, L]
};

ActivationRecord extract_record(const Graph& g, const ModelGraph& mg);

struct ForwardResult {
    Tensor logits;
    ActivationRecord record;
};

/// Single pass; cache sources must be tensors since the graph is internal.
ForwardResult forward_with_all_aux(const ModelParams& params, const SequenceBatch& batch,
                                   const ClampCache& cache = {});

// ---- loss and accuracy ----

/// Mean cross-entropy at the final position.
NodeId loss_last_token(Graph& g, NodeId logits, const SequenceBatch& batch);
double loss_last_token(const Tensor& logits, std::span<const std::uint32_t> targets);
/// Per-sequence argmax correctness at the final position (ties count as wrong).
std::vector<std::uint8_t> correct_last_token(const Tensor& logits, std::span<const std::uint32_t> targets);
double accuracy_last_token(const Tensor& logits, std::span<const std::uint32_t> targets);

// ---- optimisation ----

class NumericalError : public std::runtime_error {
public:
    NumericalError(const std::string& what, std::uint64_t step)
        : std::runtime_error(what), step_(step) {}
    std::uint64_t step() const { return step_; }

private:
    std::uint64_t step_;
};

struct AdamConfig {
    double lr = 1e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    std::uint64_t step = 0;
    std::vector<Tensor> m, v;
    static AdamState zeros_like(const ModelParams& params);
};

void adam_update(std::vector<Tensor>& params, const std::vector<Tensor>& grads, AdamState& state,
                 const AdamConfig& cfg);

struct BuiltLoss {
    NodeId loss;
    NodeId logits;  // [B, T, L] logits the loss is computed from
};

/// Builds the (possibly clamped) loss for one batch inside a fresh graph.
using LossBuilder = std::function<BuiltLoss(Graph&, const ParamNodes&, const SequenceBatch&)>;

BuiltLoss plain_loss(Graph& g, const ParamNodes& p, const SequenceBatch& batch);

struct StepMetrics {
    double loss = 0.0;
    double accuracy = 0.0;
};

/// One Adam update. Throws NumericalError (with the 1-based step index) on a non-finite loss.
StepMetrics train_step(ModelParams& params, AdamState& adam, const SequenceBatch& batch,
                       const LossBuilder& build, const AdamConfig& cfg,
                       std::vector<Tensor>* grads_out = nullptr);

/// Forward-only loss and accuracy of `build` over a batch.
StepMetrics evaluate_batch(const ModelParams& params, const SequenceBatch& batch, const LossBuilder& build,
                           std::vector<std::uint8_t>* correct_out = nullptr);

/// Size-weighted loss and accuracy over every chunk of an evaluation set.
StepMetrics evaluate_set(const ModelParams& params, const EvalSet& set, const LossBuilder& build,
                         std::vector<std::uint8_t>* correct_out = nullptr);

}  // namespace optolab
