#include "optolab/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "optolab/rng.hpp"

namespace optolab {

void ModelConfig::validate() const {
    std::vector<std::string> problems;
    if (d_model == 0) problems.push_back("d_model must be positive");
    if (heads == 0) problems.push_back("heads must be positive");
    if (heads != 0 && d_model % heads != 0) problems.push_back("heads must divide d_model");
    if (heads != 0 && (d_model / heads) % 2 != 0) problems.push_back("head_dim must be even for rotary");
    if (n_layers == 0) problems.push_back("n_layers must be positive");
    if (n_labels < 2) problems.push_back("n_labels must be >= 2");
    if (exemplar_dim == 0) problems.push_back("exemplar_dim must be positive");
    if (!(rope_base > 0.0)) problems.push_back("rope_base must be positive");
    if (!(ln_eps > 0.0)) problems.push_back("ln_eps must be positive");
    if (problems.empty()) return;
    std::string msg = "invalid model config:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ConfigError(msg);
}

const char* slot_name(Slot slot) {
    switch (slot) {
        case Slot::Q: return "q";
        case Slot::K: return "k";
        case Slot::V: return "v";
        case Slot::O: return "o";
    }
    return "?";
}

std::string param_name(std::size_t layer, Slot slot) {
    return "layer" + std::to_string(layer) + ".w" + slot_name(slot);
}
std::string ln_gain_name(std::size_t layer) { return "layer" + std::to_string(layer) + ".ln.gain"; }
std::string ln_bias_name(std::size_t layer) { return "layer" + std::to_string(layer) + ".ln.bias"; }

std::size_t ModelParams::index(const std::string& name) const {
    auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end()) throw std::out_of_range("no parameter named '" + name + "'");
    return static_cast<std::size_t>(it - names.begin());
}

std::size_t ModelParams::parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.size();
    return n;
}

bool ModelParams::all_finite() const {
    return std::all_of(tensors.begin(), tensors.end(), [](const Tensor& t) { return t.all_finite(); });
}

Tensor head_weight(const ModelParams& params, std::size_t layer, Slot slot, std::size_t head) {
    const auto& cfg = params.config;
    const std::size_t d = cfg.d_model, hd = cfg.head_dim();
    if (layer >= cfg.n_layers || head >= cfg.heads) throw std::out_of_range("head_weight: bad layer/head");
    const Tensor& w = params.get(param_name(layer, slot));
    if (slot == Slot::O) {
        Tensor out({hd, d});
        std::copy_n(w.data().data() + head * hd * d, hd * d, out.data().data());
        return out;
    }
    Tensor out({d, hd});
    for (std::size_t r = 0; r < d; ++r)
        for (std::size_t c = 0; c < hd; ++c) out.at(r, c) = w.at(r, head * hd + c);
    return out;
}

ModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    ModelParams p;
    p.config = config;
    const std::size_t d = config.d_model;
    CounterRng root(seed);
    auto gaussian = [&](const std::string& name, Shape shape, std::size_t fan_in, double gain = 1.0) {
        CounterRng rng = root.split(p.names.size());
        Tensor t(std::move(shape));
        const double sd = gain / std::sqrt(static_cast<double>(fan_in));
        for (double& x : t.data()) x = sd * rng.normal();
        p.names.push_back(name);
        p.tensors.push_back(std::move(t));
    };
    auto filled = [&](const std::string& name, Shape shape, double v) {
        p.names.push_back(name);
        p.tensors.emplace_back(std::move(shape), v);
    };
    // Small embeddings keep the residual stream near the norm's linear regime early on,
    // which gives a clean plateau before the induction circuit forms.
    constexpr double kEmbedGain = 0.25;
    gaussian(kExemplarProj, {config.exemplar_dim, d}, config.exemplar_dim, kEmbedGain);
    // A label lookup is a one-hot input over n_labels.
    gaussian(kLabelEmbed, {config.n_labels, d}, config.n_labels, kEmbedGain);
    for (std::size_t l = 0; l < config.n_layers; ++l) {
        filled(ln_gain_name(l), {d}, 1.0);
        filled(ln_bias_name(l), {d}, 0.0);
        gaussian(param_name(l, Slot::Q), {d, d}, d);
        gaussian(param_name(l, Slot::K), {d, d}, d);
        gaussian(param_name(l, Slot::V), {d, d}, d);
        // Concatenated head outputs span d_model.
        gaussian(param_name(l, Slot::O), {d, d}, d);
    }
    gaussian(kUnembed, {d, config.n_labels}, d);
    return p;
}

const char* site_kind_name(SiteKind kind) {
    switch (kind) {
        case SiteKind::Embed: return "embed";
        case SiteKind::Norm: return "norm";
        case SiteKind::Q: return "q";
        case SiteKind::K: return "k";
        case SiteKind::V: return "v";
        case SiteKind::AttnLogits: return "attn_logits";
        case SiteKind::Pattern: return "pattern";
        case SiteKind::HeadOut: return "head_out";
        case SiteKind::Resid: return "resid";
        case SiteKind::Logits: return "logits";
    }
    return "?";
}

std::string Site::str() const {
    std::string s = site_kind_name(kind);
    if (layer >= 0) s += ".L" + std::to_string(layer);
    if (head >= 0) s += ".H" + std::to_string(head);
    return s;
}

ParamNodes add_param_leaves(Graph& g, const ModelParams& params) {
    ParamNodes p;
    p.params = &params;
    for (std::size_t i = 0; i < params.tensors.size(); ++i) {
        NodeId id = g.leaf(params.names[i], true);
        g.bind(id, params.tensors[i]);
        p.ids.push_back(id);
    }
    return p;
}

ParamNodes add_param_constants(Graph& g, const ModelParams& params) {
    ParamNodes p;
    p.params = &params;
    for (std::size_t i = 0; i < params.tensors.size(); ++i) p.ids.push_back(g.constant(params.tensors[i], params.names[i]));
    return p;
}

NodeId ModelGraph::at(const Site& s) const {
    auto layer = [&]() -> const Layer& {
        if (s.layer < 0 || static_cast<std::size_t>(s.layer) >= layers.size())
            throw GraphError("site " + s.str() + ": layer out of range");
        return layers[static_cast<std::size_t>(s.layer)];
    };
    auto head = [&](const std::vector<NodeId>& v) {
        if (s.head < 0 || static_cast<std::size_t>(s.head) >= v.size())
            throw GraphError("site " + s.str() + " was not built");
        return v[static_cast<std::size_t>(s.head)];
    };
    switch (s.kind) {
        case SiteKind::Embed: return embed;
        case SiteKind::Norm: return layer().norm;
        case SiteKind::Q: return head(layer().q);
        case SiteKind::K: return head(layer().k);
        case SiteKind::V: return head(layer().v);
        case SiteKind::AttnLogits: return head(layer().attn_logits);
        case SiteKind::Pattern: return head(layer().pattern);
        case SiteKind::HeadOut: return head(layer().head_out);
        case SiteKind::Resid: return layer().resid;
        case SiteKind::Logits: return logits;
    }
    throw GraphError("bad site");
}

NodeId embed_tokens(Graph& g, const ParamNodes& params, const SequenceBatch& batch) {
    const auto& cfg = params.params->config;
    if (batch.exemplar_table.rank() != 2 || batch.exemplar_table.dim(1) != cfg.exemplar_dim)
        throw ShapeError("batch exemplar table " + shape_str(batch.exemplar_table.shape()) +
                         " does not match exemplar_dim " + std::to_string(cfg.exemplar_dim));
    const std::size_t u = batch.exemplar_table.dim(0);
    NodeId proj = g.matmul(g.constant(batch.exemplar_table, "exemplars"), params(kExemplarProj));
    NodeId table = g.concat({proj, params(kLabelEmbed)}, 0);
    std::vector<std::size_t> ids;
    ids.reserve(batch.tokens.size());
    for (const Token& t : batch.tokens) {
        switch (t.kind) {
            case TokenKind::Exemplar:
                if (t.id >= u) throw std::out_of_range("exemplar token outside the batch table");
                ids.push_back(t.id);
                break;
            case TokenKind::Label:
                if (t.id >= cfg.n_labels) throw std::out_of_range("label token " + std::to_string(t.id) + " >= n_labels");
                ids.push_back(u + t.id);
                break;
            default: throw std::invalid_argument("unknown token kind");
        }
    }
    return g.gather_rows(table, std::move(ids), {batch.size(), batch.seq_len, cfg.d_model});
}

ModelGraph apply_model(Graph& g, const ParamNodes& params, const SequenceBatch& batch, const ClampCache& cache,
                       NodeId embed) {
    const auto& cfg = params.params->config;
    const std::size_t hd = cfg.head_dim();
    if (batch.tokens.size() != batch.size() * batch.seq_len) throw ShapeError("batch token count mismatch");

    std::set<Site> used;
    auto site = [&](NodeId id, const Site& s) {
        auto it = cache.find(s);
        if (it != cache.end()) {
            g.substitute(id, it->second);
            used.insert(s);
        }
        return id;
    };

    ModelGraph mg;
    mg.batch = batch.size();
    mg.seq_len = batch.seq_len;
    mg.embed = embed.valid() ? embed : site(embed_tokens(g, params, batch), Site::embed());
    NodeId x = mg.embed;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const int li = static_cast<int>(l);
        ModelGraph::Layer layer;
        layer.input = x;
        auto whole = cache.find(Site::resid(li));
        if (whole != cache.end() && whole->second.mask.empty()) {
            // The layer's output is replaced outright, so its internals are never built.
            layer.built = false;
            layer.resid = site(g.detach(x), Site::resid(li));
            x = layer.resid;
            mg.layers.push_back(std::move(layer));
            continue;
        }
        layer.norm = site(g.layer_norm(x, params(ln_gain_name(l)), params(ln_bias_name(l)), cfg.ln_eps), Site::norm(li));
        NodeId q_all = g.matmul(layer.norm, params(param_name(l, Slot::Q)));
        NodeId k_all = g.matmul(layer.norm, params(param_name(l, Slot::K)));
        NodeId v_all = g.matmul(layer.norm, params(param_name(l, Slot::V)));
        NodeId wo = params(param_name(l, Slot::O));
        NodeId resid = x;
        for (std::size_t h = 0; h < cfg.heads; ++h) {
            const int hi = static_cast<int>(h);
            NodeId q = site(g.rotary(g.slice(q_all, 2, h * hd, hd), cfg.rope_base), Site::q(li, hi));
            NodeId k = site(g.rotary(g.slice(k_all, 2, h * hd, hd), cfg.rope_base), Site::k(li, hi));
            NodeId v = site(g.slice(v_all, 2, h * hd, hd), Site::v(li, hi));
            NodeId logits = site(g.scale(g.matmul(q, k, true), scale), Site::attn_logits(li, hi));
            NodeId pattern = site(g.masked_softmax(logits, true), Site::pattern(li, hi));
            NodeId z = g.matmul(pattern, v);
            NodeId out = site(g.matmul(z, g.slice(wo, 0, h * hd, hd)), Site::head_out(li, hi));
            layer.q.push_back(q);
            layer.k.push_back(k);
            layer.v.push_back(v);
            layer.attn_logits.push_back(logits);
            layer.pattern.push_back(pattern);
            layer.head_out.push_back(out);
            resid = g.add(resid, out);
        }
        layer.resid = site(resid, Site::resid(li));
        x = layer.resid;
        mg.layers.push_back(std::move(layer));
    }
    mg.logits = site(g.matmul(x, params(kUnembed)), Site::logits());

    for (const auto& [s, sub] : cache) {
        if (!used.count(s)) throw GraphError("clamp site " + s.str() + " does not exist in this model application");
    }
    return mg;
}

ActivationRecord extract_record(const Graph& g, const ModelGraph& mg) {
    ActivationRecord r;
    r.embed = g.value(mg.embed);
    for (const auto& layer : mg.layers) {
        LayerRecord lr;
        lr.built = layer.built;
        lr.input = g.value(layer.input);
        if (layer.built) {
            lr.norm = g.value(layer.norm);
            for (std::size_t h = 0; h < layer.q.size(); ++h) {
                lr.heads.push_back({g.value(layer.q[h]), g.value(layer.k[h]), g.value(layer.v[h]),
                                    g.value(layer.attn_logits[h]), g.value(layer.pattern[h]),
                                    g.value(layer.head_out[h])});
            }
        }
        lr.resid = g.value(layer.resid);
        r.layers.push_back(std::move(lr));
    }
    r.logits = g.value(mg.logits);
    return r;
}

ForwardResult forward_with_all_aux(const ModelParams& params, const SequenceBatch& batch, const ClampCache& cache) {
    for (const auto& [s, sub] : cache) {
        if (std::holds_alternative<NodeId>(sub.source))
            throw GraphError("forward_with_all_aux: clamp " + s.str() + " refers to a node of another graph");
    }
    Graph g;
    ParamNodes p = add_param_constants(g, params);
    ModelGraph mg = apply_model(g, p, batch, cache);
    g.evaluate();
    ForwardResult out;
    out.record = extract_record(g, mg);
    out.logits = out.record.logits;
    return out;
}

// ---- loss and accuracy ----

NodeId loss_last_token(Graph& g, NodeId logits, const SequenceBatch& batch) {
    std::vector<std::size_t> rows, targets;
    for (std::size_t b = 0; b < batch.size(); ++b) {
        rows.push_back(b * batch.seq_len + batch.seq_len - 1);
        targets.push_back(batch.targets[b]);
    }
    return g.cross_entropy(logits, std::move(rows), std::move(targets));
}

namespace {

std::size_t check_logits(const Tensor& logits, std::size_t n) {
    if (logits.rank() != 3 || logits.dim(0) != n)
        throw ShapeError("logits " + shape_str(logits.shape()) + " for " + std::to_string(n) + " targets");
    return logits.dim(2);
}

}  // namespace

double loss_last_token(const Tensor& logits, std::span<const std::uint32_t> targets) {
    const std::size_t c = check_logits(logits, targets.size());
    const std::size_t t = logits.dim(1);
    double total = 0.0;
    for (std::size_t b = 0; b < targets.size(); ++b) {
        if (targets[b] >= c) throw std::out_of_range("target " + std::to_string(targets[b]) + " outside [0, L)");
        const double* row = logits.data().data() + (b * t + t - 1) * c;
        const double mx = *std::max_element(row, row + c);
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
        total += mx + std::log(z) - row[targets[b]];
    }
    return total / static_cast<double>(targets.size());
}

std::vector<std::uint8_t> correct_last_token(const Tensor& logits, std::span<const std::uint32_t> targets) {
    const std::size_t c = check_logits(logits, targets.size());
    const std::size_t t = logits.dim(1);
    std::vector<std::uint8_t> out(targets.size());
    for (std::size_t b = 0; b < targets.size(); ++b) {
        const double* row = logits.data().data() + (b * t + t - 1) * c;
        bool ok = true;
        for (std::size_t j = 0; j < c; ++j)
            if (j != targets[b] && row[j] >= row[targets[b]]) ok = false;
        out[b] = ok;
    }
    return out;
}

double accuracy_last_token(const Tensor& logits, std::span<const std::uint32_t> targets) {
    auto ok = correct_last_token(logits, targets);
    return static_cast<double>(std::count(ok.begin(), ok.end(), 1)) / static_cast<double>(ok.size());
}

// ---- optimisation ----

AdamState AdamState::zeros_like(const ModelParams& params) {
    AdamState s;
    for (const auto& t : params.tensors) {
        s.m.emplace_back(t.shape());
        s.v.emplace_back(t.shape());
    }
    return s;
}

void adam_update(std::vector<Tensor>& params, const std::vector<Tensor>& grads, AdamState& state,
                 const AdamConfig& cfg) {
    if (grads.size() != params.size() || state.m.size() != params.size())
        throw std::invalid_argument("adam_update: parameter/gradient/state counts differ");
    ++state.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto p = params[i].data();
        auto g = grads[i].data();
        auto m = state.m[i].data();
        auto v = state.v[i].data();
        if (g.size() != p.size()) throw ShapeError("adam_update: gradient shape mismatch");
        for (std::size_t j = 0; j < p.size(); ++j) {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            const double mh = m[j] / bc1, vh = v[j] / bc2;
            p[j] -= cfg.lr * mh / (std::sqrt(vh) + cfg.eps);
        }
    }
}

BuiltLoss plain_loss(Graph& g, const ParamNodes& p, const SequenceBatch& batch) {
    ModelGraph mg = apply_model(g, p, batch);
    return {loss_last_token(g, mg.logits, batch), mg.logits};
}

StepMetrics train_step(ModelParams& params, AdamState& adam, const SequenceBatch& batch, const LossBuilder& build,
                       const AdamConfig& cfg, std::vector<Tensor>* grads_out) {
    Graph g;
    ParamNodes p = add_param_leaves(g, params);
    BuiltLoss built = build(g, p, batch);
    g.evaluate();
    StepMetrics m;
    m.loss = g.value(built.loss).item();
    if (!std::isfinite(m.loss))
        throw NumericalError("non-finite loss at step " + std::to_string(adam.step + 1), adam.step + 1);
    m.accuracy = accuracy_last_token(g.value(built.logits), batch.targets);
    g.backward(built.loss);
    std::vector<Tensor> grads;
    grads.reserve(p.ids.size());
    for (NodeId id : p.ids) grads.push_back(g.grad(id));
    adam_update(params.tensors, grads, adam, cfg);
    if (grads_out) *grads_out = std::move(grads);
    return m;
}

StepMetrics evaluate_batch(const ModelParams& params, const SequenceBatch& batch, const LossBuilder& build,
                           std::vector<std::uint8_t>* correct_out) {
    Graph g;
    ParamNodes p = add_param_constants(g, params);
    BuiltLoss built = build(g, p, batch);
    g.evaluate();
    StepMetrics m;
    m.loss = g.value(built.loss).item();
    auto ok = correct_last_token(g.value(built.logits), batch.targets);
    m.accuracy = static_cast<double>(std::count(ok.begin(), ok.end(), 1)) / static_cast<double>(ok.size());
    if (correct_out) *correct_out = std::move(ok);
    return m;
}

StepMetrics evaluate_set(const ModelParams& params, const EvalSet& set, const LossBuilder& build,
                         std::vector<std::uint8_t>* correct_out) {
    if (set.chunks.empty()) throw std::invalid_argument("evaluate_set: empty evaluation set");
    double loss = 0.0, hits = 0.0;
    std::size_t n = 0;
    if (correct_out) correct_out->clear();
    for (const auto& chunk : set.chunks) {
        std::vector<std::uint8_t> ok;
        StepMetrics m = evaluate_batch(params, chunk, build, &ok);
        loss += m.loss * static_cast<double>(chunk.size());
        hits += static_cast<double>(std::count(ok.begin(), ok.end(), 1));
        n += chunk.size();
        if (correct_out) correct_out->insert(correct_out->end(), ok.begin(), ok.end());
    }
    return {loss / static_cast<double>(n), hits / static_cast<double>(n)};
}

}  // namespace optolab
