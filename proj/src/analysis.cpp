#include "optolab/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <stdexcept>

namespace optolab {

namespace {

void require_layers(const ActivationRecord& rec, std::size_t layer, const char* who) {
    if (layer >= rec.layers.size() || !rec.layers[layer].built)
        throw std::runtime_error(std::string(who) + ": layer " + std::to_string(layer) + " not in record");
}

// Sums (not means) so set-level averages weight every sequence equally.
void accumulate_induction(const ActivationRecord& rec, const SequenceBatch& batch, std::size_t layer,
                          std::vector<double>& sum) {
    require_layers(rec, layer, "induction_strengths");
    if (batch.correct_pos.size() != batch.size() || batch.incorrect_pos.size() != batch.size())
        throw std::runtime_error("induction_strengths: batch lacks label positions");
    const auto& heads = rec.layers[layer].heads;
    const std::size_t T = batch.seq_len, q = T - 1;
    sum.resize(heads.size(), 0.0);
    for (std::size_t h = 0; h < heads.size(); ++h) {
        const auto p = heads[h].pattern.data();
        for (std::size_t b = 0; b < batch.size(); ++b) {
            const std::size_t row = (b * T + q) * T;
            sum[h] += p[row + batch.correct_pos[b]] - p[row + batch.incorrect_pos[b]];
        }
    }
}

void accumulate_prev_token(const ActivationRecord& rec, std::vector<double>& sum, std::size_t& rows) {
    require_layers(rec, 0, "prev_token_scores");
    const auto& heads = rec.layers[0].heads;
    sum.resize(heads.size(), 0.0);
    if (heads.empty()) return;
    const Shape& s = heads[0].pattern.shape();
    const std::size_t B = s.at(0), T = s.at(1);
    for (std::size_t h = 0; h < heads.size(); ++h) {
        const auto p = heads[h].pattern.data();
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t t = 1; t < T; ++t) sum[h] += p[(b * T + t) * T + t - 1];
    }
    rows += B * (T > 0 ? T - 1 : 0);
}

std::vector<double> scaled(std::vector<double> v, double n) {
    if (n <= 0) throw std::runtime_error("empty evaluation set");
    for (double& x : v) x /= n;
    return v;
}

}  // namespace

std::vector<double> induction_strengths(const ActivationRecord& rec, const SequenceBatch& batch, std::size_t layer) {
    std::vector<double> sum;
    accumulate_induction(rec, batch, layer, sum);
    return scaled(std::move(sum), static_cast<double>(batch.size()));
}

std::vector<double> induction_strengths(const ModelParams& params, const EvalSet& set) {
    return head_metrics(params, set).induction;
}

std::vector<double> prev_token_scores(const ActivationRecord& rec) {
    std::vector<double> sum;
    std::size_t rows = 0;
    accumulate_prev_token(rec, sum, rows);
    return scaled(std::move(sum), static_cast<double>(rows));
}

std::vector<double> prev_token_scores(const ModelParams& params, const EvalSet& set) {
    return head_metrics(params, set).prev_token;
}

std::vector<int> identify_pt_heads(const std::vector<double>& scores, double threshold) {
    std::vector<int> out;
    for (std::size_t h = 0; h < scores.size(); ++h)
        if (scores[h] > threshold) out.push_back(static_cast<int>(h));
    return out;
}

HeadMetrics head_metrics(const ModelParams& params, const EvalSet& set) {
    if (params.config.n_layers < 2) throw ConfigError("head_metrics: needs a 2-layer model");
    std::vector<double> ind, pt;
    std::size_t rows = 0;
    for (const auto& chunk : set.chunks) {
        const ForwardResult fr = forward_with_all_aux(params, chunk);
        accumulate_induction(fr.record, chunk, 1, ind);
        accumulate_prev_token(fr.record, pt, rows);
    }
    return {scaled(std::move(ind), static_cast<double>(set.size())), scaled(std::move(pt), static_cast<double>(rows))};
}

// ---- composition ----

double composition_score(const Tensor& w_out, const Tensor& w_slot) {
    if (w_out.rank() != 2 || w_slot.rank() != 2 || w_out.dim(1) != w_slot.dim(0))
        throw std::invalid_argument("composition_score: shapes " + shape_str(w_out.shape()) + " and " +
                                    shape_str(w_slot.shape()) + " do not chain");
    const double no = frobenius_norm(w_out), ns = frobenius_norm(w_slot);
    if (no == 0.0 || ns == 0.0) throw std::runtime_error("composition_score: zero-norm weight matrix");
    const std::size_t a = w_out.dim(0), d = w_out.dim(1), b = w_slot.dim(1);
    double acc = 0.0;
    std::vector<double> row(b);
    for (std::size_t i = 0; i < a; ++i) {
        std::fill(row.begin(), row.end(), 0.0);
        for (std::size_t k = 0; k < d; ++k) {
            const double x = w_out.at(i, k);
            for (std::size_t j = 0; j < b; ++j) row[j] += x * w_slot.at(k, j);
        }
        for (double v : row) acc += v * v;
    }
    return std::sqrt(acc) / (no * ns);
}

double composition_score(const ModelParams& params, int l1_head, int l2_head, Slot slot) {
    if (slot == Slot::O) throw std::invalid_argument("composition_score: slot must be Q, K or V");
    if (params.config.n_layers < 2) throw ConfigError("composition_score: needs a 2-layer model");
    return composition_score(head_weight(params, 0, Slot::O, l1_head), head_weight(params, 1, slot, l2_head));
}

Tensor composition_table(const ModelParams& params) {
    const std::size_t H = params.config.heads;
    Tensor t({H, H, 3});
    const Slot slots[3] = {Slot::Q, Slot::K, Slot::V};
    for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < H; ++j)
            for (std::size_t s = 0; s < 3; ++s)
                t[(i * H + j) * 3 + s] = composition_score(params, static_cast<int>(i), static_cast<int>(j), slots[s]);
    return t;
}

namespace {

std::vector<double> average_ranks(const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
        const double rank = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) r[idx[k]] = rank;
        i = j + 1;
    }
    return r;
}

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) throw std::runtime_error("correlation undefined for a constant series");
    return sxy / std::sqrt(sxx * syy);
}

}  // namespace

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("spearman: need two equal-length series");
    return pearson(average_ranks(x), average_ranks(y));
}

// ---- loss traces ----

namespace {

double interp_x(const TracePoint& a, const TracePoint& b, double level) {
    if (a.loss == b.loss) return b.x;
    return a.x + (b.x - a.x) * (a.loss - level) / (a.loss - b.loss);
}

}  // namespace

std::optional<double> first_crossing_below(const std::vector<TracePoint>& trace, double level) {
    for (std::size_t i = 1; i < trace.size(); ++i)
        if (trace[i - 1].loss > level && trace[i].loss <= level) return interp_x(trace[i - 1], trace[i], level);
    return std::nullopt;
}

std::optional<double> last_crossing_below(const std::vector<TracePoint>& trace, double level) {
    for (std::size_t i = trace.size(); i-- > 1;)
        if (trace[i - 1].loss > level && trace[i].loss <= level) return interp_x(trace[i - 1], trace[i], level);
    return std::nullopt;
}

double linear_fit_r2(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 3) throw std::invalid_argument("linear_fit_r2: need at least 3 points");
    const double r = pearson(x, y);
    return r * r;
}

PhaseStats phase_change_stats(const std::vector<TracePoint>& trace, const PhaseStatsOptions& opt) {
    PhaseStats st;
    if (trace.size() < 2) return st;
    for (std::size_t i = 1; i < trace.size(); ++i)
        if (!(trace[i].x > trace[i - 1].x)) throw std::invalid_argument("phase_change_stats: x must increase");
    const double ln2 = std::numbers::ln2;

    // Longest run of points inside the band that is left by falling below it.
    for (std::size_t i = 0; i < trace.size();) {
        auto in_band = [&](std::size_t k) { return trace[k].loss >= opt.band_lo && trace[k].loss <= opt.band_hi; };
        if (!in_band(i)) { ++i; continue; }
        std::size_t j = i;
        while (j + 1 < trace.size() && in_band(j + 1)) ++j;
        const bool exits_below = j + 1 < trace.size() && trace[j + 1].loss < opt.band_lo;
        const double span = trace[j].x - trace[i].x;
        if (exits_below && span >= opt.min_plateau_span && (!st.plateau_span || span > *st.plateau_span)) {
            st.plateau_span = span;
            st.plateau_start = trace[i].x;
            st.plateau_end = trace[j].x;
        }
        i = j + 1;
    }

    st.transition_start = last_crossing_below(trace, 0.9 * ln2);
    if (st.transition_start) {
        std::vector<TracePoint> tail;
        for (const auto& p : trace)
            if (p.x >= *st.transition_start) tail.push_back(p);
        // the 0.9 crossing lies between two samples; restart from the one before it
        auto it = std::lower_bound(trace.begin(), trace.end(), *st.transition_start,
                                   [](const TracePoint& p, double x) { return p.x < x; });
        if (it != trace.begin()) tail.insert(tail.begin(), *(it - 1));
        st.transition_end = first_crossing_below(tail, 0.1 * ln2);
        if (st.transition_end) st.transition_duration = *st.transition_end - *st.transition_start;
    }
    st.learning_time = first_crossing_below(trace, 0.4 * ln2);

    std::vector<double> xs, ys;
    bool reached = false;
    for (const auto& p : trace) {
        if (p.loss < opt.fit_stop_loss) { reached = true; break; }
        if (!(p.loss > 0.0)) break;
        xs.push_back(p.x);
        ys.push_back(std::log(p.loss));
    }
    if (reached && xs.size() >= 3) {
        try {
            st.exp_fit_r2 = linear_fit_r2(xs, ys);
        } catch (const std::runtime_error&) {
            // constant log-loss: no meaningful fit
        }
    }
    return st;
}

// ---- progress measures ----

std::vector<double> progress_vs_clamping(const std::vector<ModelParams>& checkpoints, const EvalSet& set,
                                         ProgressMeasure measure, const std::vector<int>& heads) {
    if (heads.empty()) throw ConfigError("progress_vs_clamping: no heads given");
    ClampPlan plan;
    if (measure == ProgressMeasure::PerfectPrevToken) {
        ClampSpec s;
        s.kind = ClampKind::PtAttend;
        s.heads = heads;
        plan.push_back(s);
    } else {
        for (int h : heads) {
            ClampSpec s;
            s.kind = ClampKind::IhMatch;
            s.head = h;
            s.strength = 1.0;
            plan.push_back(s);
        }
    }
    std::vector<double> out;
    out.reserve(checkpoints.size());
    for (const auto& p : checkpoints) {
        if (!p.all_finite()) throw std::runtime_error("progress_vs_clamping: checkpoint has non-finite tensors");
        validate_plan(plan, p.config);
        out.push_back(evaluate_set(p, set, clamp_loss_builder(plan, 0)).loss);
    }
    return out;
}

}  // namespace optolab
