#include "optolab/toy_model.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "optolab/analysis.hpp"
#include "optolab/rng.hpp"
#include "optolab/taskgen.hpp"
#include "optolab/transformer.hpp"

namespace optolab {

namespace {

double dot(const std::vector<double>& x, const std::vector<double>& y) {
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
    return s;
}

bool three(const ToyVectors& x, const ToyVectors& truth) { return !x.c.empty() || !truth.c.empty(); }

void check_dims(const ToyVectors& x, const ToyVectors& truth) {
    if (x.a.size() != truth.a.size() || x.b.size() != truth.b.size() || x.c.size() != truth.c.size())
        throw std::invalid_argument("toy model: vector dimensions do not match the truth");
}

bool all_zero(const std::vector<double>& v) {
    for (double x : v)
        if (x != 0.0) return false;
    return true;
}

}  // namespace

void ToyConfig::validate() const {
    std::vector<std::string> problems;
    if (n_vectors != 2 && n_vectors != 3) problems.push_back("n_vectors must be 2 or 3");
    if (n_a == 0 || n_b == 0 || (n_vectors == 3 && n_c == 0)) problems.push_back("dimensions must be positive");
    if (!(lr > 0.0) || !std::isfinite(lr)) problems.push_back("lr must be positive");
    if (!(init_std >= 0.0)) problems.push_back("init_std must be non-negative");
    if (n_vectors == 2 && clamp_c) problems.push_back("cannot clamp c in the two-vector variant");
    const bool given = !truth.a.empty() || !truth.b.empty() || !truth.c.empty();
    if (given) {
        if (truth.a.size() != n_a || truth.b.size() != n_b || truth.c.size() != (n_vectors == 3 ? n_c : 0))
            problems.push_back("truth dimensions do not match n_a/n_b/n_c");
        if (all_zero(truth.a) || all_zero(truth.b) || (n_vectors == 3 && all_zero(truth.c)))
            problems.push_back("every true vector needs a nonzero entry");
    }
    if (problems.empty()) return;
    std::string msg = "invalid toy config:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ConfigError(msg);
}

ToyVectors default_truth(const ToyConfig& cfg) {
    CounterRng rng = CounterRng(cfg.seed).split(1);
    auto draw = [&](std::size_t n) {
        std::vector<double> v(n);
        for (double& x : v) x = 0.5 + rng.uniform();
        return v;
    };
    ToyVectors t;
    t.a = draw(cfg.n_a);
    t.b = draw(cfg.n_b);
    if (cfg.n_vectors == 3) t.c = draw(cfg.n_c);
    return t;
}

ToyConfig resolved(const ToyConfig& cfg) {
    ToyConfig out = cfg;
    if (out.truth.a.empty() && out.truth.b.empty() && out.truth.c.empty()) out.truth = default_truth(cfg);
    out.validate();
    return out;
}

double toy_loss(const ToyVectors& x, const ToyVectors& t) {
    check_dims(x, t);
    double s = 0.0;
    if (!three(x, t)) {
        for (std::size_t i = 0; i < t.a.size(); ++i)
            for (std::size_t j = 0; j < t.b.size(); ++j) {
                const double r = t.a[i] * t.b[j] - x.a[i] * x.b[j];
                s += r * r;
            }
        return 0.5 * s;
    }
    for (std::size_t i = 0; i < t.a.size(); ++i)
        for (std::size_t j = 0; j < t.b.size(); ++j)
            for (std::size_t k = 0; k < t.c.size(); ++k) {
                const double r = t.a[i] * t.b[j] * t.c[k] - x.a[i] * x.b[j] * x.c[k];
                s += r * r;
            }
    return 0.5 * s;
}

ToyVectors toy_grads(const ToyVectors& x, const ToyVectors& t) {
    check_dims(x, t);
    // ∂L/∂a_i = −a*_i (b·b*)(c·c*) + a_i |b|² |c|², and symmetrically.
    const bool n3 = three(x, t);
    const double ab = dot(x.a, t.a), bb = dot(x.b, t.b), cc = n3 ? dot(x.c, t.c) : 1.0;
    const double aa = dot(x.a, x.a), b2 = dot(x.b, x.b), c2 = n3 ? dot(x.c, x.c) : 1.0;
    auto part = [](const std::vector<double>& v, const std::vector<double>& tv, double cross, double self) {
        std::vector<double> g(v.size());
        for (std::size_t i = 0; i < v.size(); ++i) g[i] = -tv[i] * cross + v[i] * self;
        return g;
    };
    ToyVectors g;
    g.a = part(x.a, t.a, bb * cc, b2 * c2);
    g.b = part(x.b, t.b, ab * cc, aa * c2);
    if (n3) g.c = part(x.c, t.c, ab * bb, aa * b2);
    return g;
}

ToyTrace toy_train(const ToyConfig& in) {
    const ToyConfig cfg = resolved(in);
    const ToyVectors& t = cfg.truth;
    CounterRng rng = CounterRng(cfg.seed).split(2);
    auto init = [&](const std::vector<double>& truth, bool clamp) {
        std::vector<double> v(truth.size());
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = clamp ? truth[i] : cfg.init_std * rng.normal();
        return v;
    };
    ToyVectors x;
    x.a = init(t.a, cfg.clamp_a);
    x.b = init(t.b, cfg.clamp_b);
    x.c = init(t.c, cfg.clamp_c);

    ToyTrace trace;
    trace.loss.reserve(cfg.steps + 1);
    auto record = [&](std::uint64_t step) {
        if (cfg.record_every && step % cfg.record_every == 0) {
            trace.iterate_steps.push_back(step);
            trace.iterates.push_back(x);
        }
    };
    for (std::uint64_t step = 0;; ++step) {
        const double l = toy_loss(x, t);
        if (!std::isfinite(l) || l > 1e6)
            throw NumericalError("toy model diverged (loss " + std::to_string(l) + ")", step);
        trace.loss.push_back(l);
        record(step);
        if (step == cfg.steps) break;
        const ToyVectors g = toy_grads(x, t);
        auto descend = [&](std::vector<double>& v, const std::vector<double>& gv, bool clamp) {
            if (clamp) return;
            for (std::size_t i = 0; i < v.size(); ++i) v[i] -= cfg.lr * gv[i];
        };
        descend(x.a, g.a, cfg.clamp_a);
        descend(x.b, g.b, cfg.clamp_b);
        descend(x.c, g.c, cfg.clamp_c);
    }
    trace.final = x;
    return trace;
}

SaddleProbe saddle_probe(const ToyVectors& truth, double eps) {
    if (!(eps > 0.0)) throw std::invalid_argument("saddle_probe: eps must be positive");
    const bool n3 = !truth.c.empty();
    SaddleProbe p;
    bool found = false;
    for (std::size_t i = 0; i < truth.a.size() && !found; ++i)
        for (std::size_t j = 0; j < truth.b.size() && !found; ++j)
            for (std::size_t k = 0; k < (n3 ? truth.c.size() : 1) && !found; ++k) {
                const double prod = truth.a[i] * truth.b[j] * (n3 ? truth.c[k] : 1.0);
                if (prod != 0.0) {
                    p.i = i, p.j = j, p.k = k, p.product = prod;
                    found = true;
                }
            }
    if (!found) throw std::invalid_argument("saddle_probe: every true vector must have a nonzero entry");

    ToyVectors zero{std::vector<double>(truth.a.size()), std::vector<double>(truth.b.size()),
                    std::vector<double>(truth.c.size())};
    const double base = toy_loss(zero, truth);
    auto along = [&](double sign_a) {
        ToyVectors x = zero;
        x.a[p.i] = eps * sign_a * truth.a[p.i];
        x.b[p.j] = eps * truth.b[p.j];
        if (n3) x.c[p.k] = eps * truth.c[p.k];
        return toy_loss(x, truth) - base;
    };
    p.down = along(+1.0);
    p.up = along(-1.0);
    return p;
}

std::optional<double> squared_cosine_distance(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size()) throw std::invalid_argument("squared_cosine_distance: size mismatch");
    const double xx = dot(x, x), yy = dot(y, y);
    if (xx == 0.0 || yy == 0.0) return std::nullopt;
    const double xy = dot(x, y);
    return 1.0 - xy * xy / (xx * yy);
}

ToyProgress toy_progress_measures(const std::vector<ToyVectors>& iterates, const ToyVectors& truth) {
    ToyProgress out;
    const bool n3 = !truth.c.empty();
    auto negated = [](std::vector<double> v) {
        for (double& x : v) x = -x;
        return v;
    };
    for (const auto& x : iterates) {
        out.cosine_distance.push_back(squared_cosine_distance(x.a, truth.a));
        double best = std::numeric_limits<double>::infinity();
        for (int sb : {1, -1})
            for (int sc : {1, -1}) {
                if (!n3 && sc < 0) continue;
                ToyVectors probe{x.a, sb > 0 ? truth.b : negated(truth.b), sc > 0 ? truth.c : negated(truth.c)};
                best = std::min(best, toy_loss(probe, truth));
            }
        out.fixed_bc_loss.push_back(best);
    }
    return out;
}

std::optional<std::uint64_t> toy_plateau_length(const std::vector<double>& loss, double fraction) {
    if (loss.empty()) return std::nullopt;
    for (std::size_t t = 1; t < loss.size(); ++t)
        if (loss[t] < fraction * loss[0]) return t;
    return std::nullopt;
}

double toy_log_fit_r2(const std::vector<double>& loss, double floor) {
    std::vector<double> xs, ys;
    for (std::size_t t = 0; t < loss.size() && loss[t] > floor; ++t) {
        xs.push_back(static_cast<double>(t));
        ys.push_back(std::log(loss[t]));
    }
    return linear_fit_r2(xs, ys);
}

}  // namespace optolab
