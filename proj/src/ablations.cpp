#include "optolab/ablations.hpp"

#include <algorithm>
#include <sstream>

namespace optolab {

const char* ablation_mode_name(AblationMode mode) {
    switch (mode) {
        case AblationMode::None: return "none";
        case AblationMode::Knockout: return "knockout";
        case AblationMode::AllButOne: return "all_but_one";
        case AblationMode::PatternPreserving: return "pattern_preserving";
        case AblationMode::ValuePreserving: return "value_preserving";
        case AblationMode::Path: return "path";
        case AblationMode::CutToOutput: return "cut_to_output";
    }
    return "?";
}

AblationSpec AblationSpec::knockout(std::vector<HeadRef> heads) {
    AblationSpec s;
    s.mode = AblationMode::Knockout;
    s.heads = std::move(heads);
    return s;
}

AblationSpec AblationSpec::all_but_one(int layer, int head) {
    AblationSpec s;
    s.mode = AblationMode::AllButOne;
    s.heads = {{layer, head}};
    return s;
}

namespace {

AblationSpec preserving(AblationMode mode, const std::vector<int>& l0_heads) {
    AblationSpec s;
    s.mode = mode;
    for (int h : l0_heads) s.heads.push_back({0, h});
    return s;
}

}  // namespace

AblationSpec AblationSpec::pattern_preserving(std::vector<int> layer0_heads) {
    return preserving(AblationMode::PatternPreserving, layer0_heads);
}

AblationSpec AblationSpec::value_preserving(std::vector<int> layer0_heads) {
    return preserving(AblationMode::ValuePreserving, layer0_heads);
}

AblationSpec AblationSpec::path(int l1_head, int l2_head, bool preserve_patterns) {
    AblationSpec s;
    s.mode = AblationMode::Path;
    s.l1_head = l1_head;
    s.l2_head = l2_head;
    s.preserve_patterns = preserve_patterns;
    return s;
}

AblationSpec AblationSpec::cut_to_output(int layer) {
    AblationSpec s;
    s.mode = AblationMode::CutToOutput;
    s.layer = layer;
    return s;
}

void AblationSpec::validate(const ModelConfig& cfg) const {
    const int H = static_cast<int>(cfg.heads), Lyr = static_cast<int>(cfg.n_layers);
    auto bad = [&](const std::string& why) { throw ConfigError(describe() + ": " + why); };
    for (const auto& h : heads)
        if (h.layer < 0 || h.layer >= Lyr || h.head < 0 || h.head >= H) bad("head reference out of range");
    for (int h : perfect_match_heads)
        if (h < 0 || h >= H) bad("perfect-match head out of range");
    if (mode != AblationMode::None && mode != AblationMode::Knockout && cfg.n_layers != 2)
        bad("this ablation assumes a 2-layer model");
    switch (mode) {
        case AblationMode::None:
        case AblationMode::Knockout: break;
        case AblationMode::AllButOne:
            if (heads.size() != 1) bad("needs exactly one surviving head");
            break;
        case AblationMode::PatternPreserving:
        case AblationMode::ValuePreserving:
            if (heads.empty()) bad("no heads to ablate");
            for (const auto& h : heads)
                if (h.layer != 0) bad("only layer-0 heads can be ablated here");
            if (mode == AblationMode::PatternPreserving && !perfect_match_heads.empty())
                bad("perfect match conflicts with preserved layer-1 patterns");
            break;
        case AblationMode::Path:
            if (l1_head < 0 || l1_head >= H || l2_head < 0 || l2_head >= H) bad("path needs one head per layer");
            if (preserve_patterns &&
                std::find(perfect_match_heads.begin(), perfect_match_heads.end(), l2_head) != perfect_match_heads.end())
                bad("perfect match conflicts with preserved layer-1 patterns");
            break;
        case AblationMode::CutToOutput:
            if (layer < 0 || layer >= Lyr) bad("layer out of range");
            if (layer == 0 && !perfect_match_heads.empty()) bad("perfect match conflicts with preserved layer-1 patterns");
            break;
    }
}

std::string AblationSpec::describe() const {
    std::ostringstream os;
    os << ablation_mode_name(mode);
    switch (mode) {
        case AblationMode::None: break;
        case AblationMode::Knockout:
        case AblationMode::AllButOne:
        case AblationMode::PatternPreserving:
        case AblationMode::ValuePreserving:
            os << "(";
            for (std::size_t i = 0; i < heads.size(); ++i) os << (i ? "," : "") << "L" << heads[i].layer << "H" << heads[i].head;
            os << ")";
            break;
        case AblationMode::Path:
            os << "(L0H" << l1_head << "->L1H" << l2_head << "," << (preserve_patterns ? "patterns" : "values") << ")";
            break;
        case AblationMode::CutToOutput: os << "(layer=" << layer << ")"; break;
    }
    if (!perfect_match_heads.empty()) {
        os << "+perfect_match(";
        for (std::size_t i = 0; i < perfect_match_heads.size(); ++i) os << (i ? "," : "") << perfect_match_heads[i];
        os << ")";
    }
    return os.str();
}

BuiltLoss apply_ablation(Graph& g, const ParamNodes& params, const SequenceBatch& batch, const AblationSpec& spec) {
    const auto& cfg = params.params->config;
    spec.validate(cfg);
    const std::size_t B = batch.size(), T = batch.seq_len, d = cfg.d_model;
    const int H = static_cast<int>(cfg.heads);
    ClampCache cache;
    auto zero = [&](int layer, int head) {
        cache[Site::head_out(layer, head)] = Substitution::constant(Tensor({B, T, d}));
    };

    bool two_pass = false;
    switch (spec.mode) {
        case AblationMode::PatternPreserving:
        case AblationMode::ValuePreserving:
        case AblationMode::Path: two_pass = true; break;
        case AblationMode::CutToOutput: two_pass = spec.layer == 0; break;
        default: break;
    }
    std::optional<ModelGraph> clean;
    if (two_pass) clean = apply_model(g, params, batch);
    auto keep_from_clean = [&](SiteKind kind, int head) {
        const auto& l = clean->layers[1];
        const NodeId src = kind == SiteKind::Pattern ? l.pattern[static_cast<std::size_t>(head)]
                                                     : l.v[static_cast<std::size_t>(head)];
        cache[Site{kind, 1, head}] = Substitution::frozen(src);
    };

    switch (spec.mode) {
        case AblationMode::None: break;
        case AblationMode::Knockout:
            for (const auto& h : spec.heads) zero(h.layer, h.head);
            break;
        case AblationMode::AllButOne:
            for (int h = 0; h < H; ++h)
                if (h != spec.heads[0].head) zero(spec.heads[0].layer, h);
            break;
        case AblationMode::PatternPreserving:
        case AblationMode::ValuePreserving: {
            for (const auto& h : spec.heads) zero(0, h.head);
            const SiteKind kind = spec.mode == AblationMode::PatternPreserving ? SiteKind::Pattern : SiteKind::V;
            for (int h = 0; h < H; ++h) keep_from_clean(kind, h);
            break;
        }
        case AblationMode::Path:
            for (int h = 0; h < H; ++h) {
                if (h != spec.l1_head) zero(0, h);
                if (h != spec.l2_head) zero(1, h);
            }
            keep_from_clean(spec.preserve_patterns ? SiteKind::Pattern : SiteKind::V, spec.l2_head);
            break;
        case AblationMode::CutToOutput:
            if (spec.layer == 0) {
                for (int h = 0; h < H; ++h) {
                    zero(0, h);
                    keep_from_clean(SiteKind::Pattern, h);
                    keep_from_clean(SiteKind::V, h);
                }
            } else {
                for (int h = 0; h < H; ++h) zero(spec.layer, h);
            }
            break;
    }
    for (int h : spec.perfect_match_heads) {
        const Site s = Site::pattern(1, h);
        if (cache.count(s)) throw ConfigError(spec.describe() + ": perfect match conflicts with a preserved pattern");
        cache[s] = Substitution::constant(induction_pattern(batch, 1.0), query_row_mask(B, T));
    }
    ModelGraph mg = apply_model(g, params, batch, cache);
    return {loss_last_token(g, mg.logits, batch), mg.logits};
}

LossBuilder ablation_loss_builder(const AblationSpec& spec) {
    return [spec](Graph& g, const ParamNodes& p, const SequenceBatch& b) { return apply_ablation(g, p, b, spec); };
}

AblationResult ablation_eval(const ModelParams& params, const EvalSet& set, const AblationSpec& spec) {
    spec.validate(params.config);
    AblationResult r;
    StepMetrics m = evaluate_set(params, set, ablation_loss_builder(spec), &r.correct);
    r.accuracy = m.accuracy;
    r.loss = m.loss;
    return r;
}

double error_subset_accuracy(const ModelParams& params, const EvalSet& set, const AblationSpec& base,
                             const AblationSpec& probe, std::size_t* subset_size) {
    const AblationResult b = ablation_eval(params, set, base);
    const AblationResult p = ablation_eval(params, set, probe);
    std::size_t n = 0, hits = 0;
    for (std::size_t i = 0; i < b.correct.size(); ++i) {
        if (b.correct[i]) continue;
        ++n;
        hits += p.correct[i];
    }
    if (subset_size) *subset_size = n;
    if (n == 0) throw std::runtime_error("error_subset_accuracy: " + base.describe() + " makes no mistakes on this set");
    return static_cast<double>(hits) / static_cast<double>(n);
}

}  // namespace optolab
