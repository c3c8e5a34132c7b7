#include "optolab/clamps.hpp"

#include <cmath>
#include <sstream>

namespace optolab {

Tensor prev_token_pattern(std::size_t T) {
    if (T == 0) throw std::invalid_argument("prev_token_pattern: T must be positive");
    Tensor p({T, T});
    p.at(0, 0) = 1.0;
    for (std::size_t t = 1; t < T; ++t) p.at(t, t - 1) = 1.0;
    return p;
}

Tensor induction_pattern(const SequenceBatch& batch, double strength) {
    if (!(std::abs(strength) <= 1.0)) throw std::invalid_argument("induction strength must lie in [-1, 1]");
    const std::size_t B = batch.size(), T = batch.seq_len;
    if (batch.correct_pos.size() != B || batch.incorrect_pos.size() != B)
        throw std::invalid_argument("induction_pattern: batch lacks label-position metadata");
    Tensor p({B, T, T});
    for (std::size_t b = 0; b < B; ++b) {
        const std::size_t row = (b * T + T - 1) * T;
        p[row + batch.correct_pos[b]] = (1.0 + strength) / 2.0;
        p[row + batch.incorrect_pos[b]] = (1.0 - strength) / 2.0;
    }
    return p;
}

std::vector<std::uint8_t> query_row_mask(std::size_t batch, std::size_t T) {
    std::vector<std::uint8_t> m(batch * T * T, 0);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t c = 0; c < T; ++c) m[(b * T + T - 1) * T + c] = 1;
    return m;
}

std::vector<std::size_t> shifted_positions(std::size_t T) {
    std::vector<std::size_t> s(T);
    for (std::size_t t = 0; t < T; ++t) s[t] = (t == 0 || t + 1 == T) ? t : t - 1;
    return s;
}

const char* clamp_kind_name(ClampKind kind) {
    switch (kind) {
        case ClampKind::PtAttend: return "pt_attend";
        case ClampKind::Layer1Full: return "layer1_full";
        case ClampKind::IhMatch: return "ih_match";
        case ClampKind::Copy: return "copy";
        case ClampKind::Layer1AndCopy: return "layer1_and_copy";
        case ClampKind::HeadKnockout: return "head_knockout";
        case ClampKind::DonorGraft: return "donor_graft";
    }
    return "?";
}

ClampKind parse_clamp_kind(const std::string& name) {
    for (ClampKind k : {ClampKind::PtAttend, ClampKind::Layer1Full, ClampKind::IhMatch, ClampKind::Copy,
                        ClampKind::Layer1AndCopy, ClampKind::HeadKnockout, ClampKind::DonorGraft})
        if (name == clamp_kind_name(k)) return k;
    throw ConfigError("unknown clamp kind '" + name + "'");
}

void ClampSpec::validate(const ModelConfig& cfg) const {
    auto head_ok = [&](int h) { return h >= 0 && static_cast<std::size_t>(h) < cfg.heads; };
    const std::string what = describe();
    if (cfg.n_layers != 2 && kind != ClampKind::HeadKnockout)
        throw ConfigError(what + ": clamps other than head_knockout assume a 2-layer model");
    switch (kind) {
        case ClampKind::PtAttend:
            if (heads.empty()) throw ConfigError(what + ": needs at least one head");
            for (int h : heads)
                if (!head_ok(h)) throw ConfigError(what + ": head " + std::to_string(h) + " out of range");
            break;
        case ClampKind::HeadKnockout:
            if (layer < 0 || static_cast<std::size_t>(layer) >= cfg.n_layers)
                throw ConfigError(what + ": layer out of range");
            for (int h : heads)
                if (!head_ok(h)) throw ConfigError(what + ": head " + std::to_string(h) + " out of range");
            break;
        case ClampKind::IhMatch:
            if (!(std::abs(strength) <= 1.0)) throw ConfigError(what + ": |strength| must be <= 1");
            [[fallthrough]];
        case ClampKind::Copy:
        case ClampKind::Layer1AndCopy:
            if (!head_ok(head)) throw ConfigError(what + ": head " + std::to_string(head) + " out of range");
            break;
        case ClampKind::Layer1Full: break;
        case ClampKind::DonorGraft:
            if (!donor) throw ConfigError(what + ": donor parameters not loaded");
            if (!(donor->config == cfg)) throw ConfigError(what + ": donor model config differs");
            break;
    }
    if (start_step >= end_step) throw ConfigError(what + ": empty active step range");
}

std::string ClampSpec::describe() const {
    std::ostringstream os;
    os << clamp_kind_name(kind);
    auto list = [&] {
        os << "heads=";
        for (std::size_t i = 0; i < heads.size(); ++i) os << (i ? "," : "") << heads[i];
    };
    switch (kind) {
        case ClampKind::PtAttend: os << "("; list(); os << ")"; break;
        case ClampKind::HeadKnockout: os << "(layer=" << layer << ","; list(); os << ")"; break;
        case ClampKind::IhMatch: os << "(head=" << head << ",s=" << strength << ")"; break;
        case ClampKind::Copy:
        case ClampKind::Layer1AndCopy: os << "(head=" << head << ")"; break;
        case ClampKind::Layer1Full:
            os << "(policy=" << (pattern_policy == GradPolicy::Flow ? "flow" : "constant") << ")";
            break;
        case ClampKind::DonorGraft: os << "(" << donor_path << ")"; break;
    }
    return os.str();
}

std::set<Site> clamp_sites(const ClampSpec& spec, const ModelConfig& cfg) {
    std::set<Site> s;
    const int H = static_cast<int>(cfg.heads);
    auto layer0 = [&] {
        s.insert(Site::resid(0));
        for (int h = 0; h < H; ++h) {
            s.insert(Site::pattern(0, h));
            s.insert(Site::head_out(0, h));
        }
    };
    switch (spec.kind) {
        case ClampKind::PtAttend:
            for (int h : spec.heads) s.insert(Site::pattern(0, h));
            break;
        case ClampKind::HeadKnockout:
            for (int h : spec.heads) s.insert(Site::head_out(spec.layer, h));
            break;
        case ClampKind::IhMatch: s.insert(Site::pattern(1, spec.head)); break;
        case ClampKind::Copy: s.insert(Site::logits()); break;
        case ClampKind::Layer1AndCopy: s.insert(Site::logits()); [[fallthrough]];
        case ClampKind::Layer1Full:
            layer0();
            for (int h = 0; h < H; ++h) s.insert(Site::pattern(1, h));
            break;
        case ClampKind::DonorGraft: layer0(); break;
    }
    return s;
}

void validate_plan(const ClampPlan& plan, const ModelConfig& cfg) {
    std::vector<std::string> problems;
    for (const auto& c : plan) {
        try {
            c.validate(cfg);
        } catch (const ConfigError& e) {
            problems.push_back(e.what());
        }
    }
    for (std::size_t i = 0; i < plan.size(); ++i)
        for (std::size_t j = i + 1; j < plan.size(); ++j) {
            const auto& a = plan[i];
            const auto& b = plan[j];
            if (a.end_step <= b.start_step || b.end_step <= a.start_step) continue;
            auto sa = clamp_sites(a, cfg);
            for (const Site& s : clamp_sites(b, cfg))
                if (sa.count(s)) {
                    problems.push_back(a.describe() + " and " + b.describe() + " both write " + s.str());
                    break;
                }
        }
    if (problems.empty()) return;
    std::string msg = "invalid clamp plan:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ConfigError(msg);
}

namespace {

std::vector<std::int64_t> copy_gather_map(const SequenceBatch& batch, std::size_t n_labels) {
    const std::size_t B = batch.size(), T = batch.seq_len;
    std::vector<std::int64_t> map(B * T * n_labels, -1);
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t pos : {std::size_t(batch.correct_pos[b]), std::size_t(batch.incorrect_pos[b])}) {
            const Token& tok = batch.tokens[b * T + pos];
            if (tok.kind != TokenKind::Label || tok.id >= n_labels)
                throw std::invalid_argument("copy clamp: recorded label position does not hold a label");
            map[(b * T + T - 1) * n_labels + tok.id] = static_cast<std::int64_t>((b * T + T - 1) * T + pos);
        }
    }
    return map;
}

}  // namespace

Tensor copy_clamp_values(const Tensor& attn_logits, const SequenceBatch& batch, std::size_t n_labels) {
    const std::size_t B = batch.size(), T = batch.seq_len;
    if (attn_logits.shape() != Shape{B, T, T}) throw ShapeError("copy_clamp_values: attention logits shape");
    auto map = copy_gather_map(batch, n_labels);
    Tensor out({B, n_labels}, -1e9);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t l = 0; l < n_labels; ++l) {
            const auto src = map[(b * T + T - 1) * n_labels + l];
            if (src >= 0) out.at(b, l) = attn_logits[static_cast<std::size_t>(src)];
        }
    return out;
}

ClampedForward apply_clamped(Graph& g, const ParamNodes& params, const SequenceBatch& batch,
                             const std::vector<ClampSpec>& clamps, const ClampCache& extra) {
    const auto& cfg = params.params->config;
    const std::size_t B = batch.size(), T = batch.seq_len, d = cfg.d_model;
    ClampCache cache = extra;
    auto put = [&](const Site& s, Substitution sub) {
        if (!cache.emplace(s, std::move(sub)).second) throw ConfigError("two clamps write " + s.str());
    };

    ClampedForward out;
    bool layer1 = false;
    const ClampSpec* copy = nullptr;
    for (const auto& spec : clamps) {
        spec.validate(cfg);
        switch (spec.kind) {
            case ClampKind::PtAttend: {
                const Tensor pt = prev_token_pattern(T);
                Tensor full({B, T, T});
                for (std::size_t b = 0; b < B; ++b)
                    std::copy(pt.data().begin(), pt.data().end(), full.data().begin() + static_cast<std::ptrdiff_t>(b * T * T));
                for (int h : spec.heads) put(Site::pattern(0, h), Substitution::constant(full));
                break;
            }
            case ClampKind::HeadKnockout:
                for (int h : spec.heads) put(Site::head_out(spec.layer, h), Substitution::constant(Tensor({B, T, d})));
                break;
            case ClampKind::IhMatch:
                put(Site::pattern(1, spec.head),
                    Substitution::constant(induction_pattern(batch, spec.strength), query_row_mask(B, T)));
                break;
            case ClampKind::DonorGraft: {
                ParamNodes donor = add_param_constants(g, *spec.donor);
                ClampCache stop;  // only layer 0 of the donor is needed
                out.donor = apply_model(g, donor, batch, stop);
                put(Site::resid(0), Substitution::frozen(out.donor->layers[0].resid));
                break;
            }
            case ClampKind::Layer1AndCopy:
                copy = &spec;
                [[fallthrough]];
            case ClampKind::Layer1Full:
                if (layer1) throw ConfigError("layer-1 clamp given twice");
                layer1 = true;
                break;
            case ClampKind::Copy:
                if (copy) throw ConfigError("copy clamp given twice");
                copy = &spec;
                break;
        }
    }

    NodeId embed;
    if (layer1) {
        const ClampSpec* l1 = nullptr;
        for (const auto& s : clamps)
            if (s.kind == ClampKind::Layer1Full || s.kind == ClampKind::Layer1AndCopy) l1 = &s;
        embed = embed_tokens(g, params, batch);
        const auto pos = shifted_positions(T);
        std::vector<std::int64_t> map(B * T * d);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t t = 0; t < T; ++t)
                for (std::size_t j = 0; j < d; ++j)
                    map[(b * T + t) * d + j] = static_cast<std::int64_t>((b * T + pos[t]) * d + j);
        NodeId shifted = g.gather_elements(embed, {B, T, d}, std::move(map), 0.0);
        out.shifted = apply_model(g, params, batch, {{Site::resid(0), Substitution::flow(shifted)}}, embed);
        for (std::size_t h = 0; h < cfg.heads; ++h)
            put(Site::pattern(1, static_cast<int>(h)),
                Substitution{out.shifted->layers[1].pattern[h], l1->pattern_policy, {}});
        put(Site::resid(0), Substitution::flow(embed));
    }
    out.main = apply_model(g, params, batch, cache, embed);
    out.logits = out.main.logits;

    if (copy) {
        const ModelGraph& src = layer1 ? *out.shifted : out.main;
        NodeId attn = src.layers[1].attn_logits[static_cast<std::size_t>(copy->head)];
        out.copy_logits = g.gather_elements(attn, {B, T, cfg.n_labels}, copy_gather_map(batch, cfg.n_labels), -1e9);
        std::vector<std::uint8_t> mask(B * T * cfg.n_labels, 0);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t l = 0; l < cfg.n_labels; ++l) mask[(b * T + T - 1) * cfg.n_labels + l] = 1;
        // Non-query rows keep the model's own logits; only the query row feeds the loss.
        out.logits = g.detach(out.main.logits);
        g.substitute(out.logits, Substitution::flow(out.copy_logits, std::move(mask)));
    }
    return out;
}

std::vector<ClampSpec> active_clamps(const ClampPlan& plan, std::uint64_t step) {
    std::vector<ClampSpec> out;
    for (const auto& c : plan)
        if (c.active(step)) out.push_back(c);
    return out;
}

LossBuilder clamp_loss_builder(const ClampPlan& plan, std::uint64_t step) {
    auto active = active_clamps(plan, step);
    if (active.empty()) return plain_loss;
    return [active = std::move(active)](Graph& g, const ParamNodes& p, const SequenceBatch& batch) {
        ClampedForward f = apply_clamped(g, p, batch, active);
        return BuiltLoss{loss_last_token(g, f.logits, batch), f.logits};
    };
}

}  // namespace optolab
