#include <cmath>
#include <numbers>

#include "doctest.h"
#include "optolab/ablations.hpp"
#include "optolab/analysis.hpp"
#include "optolab/clamps.hpp"

using namespace optolab;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.d_model = 8;
    c.heads = 2;
    c.n_labels = 4;
    c.exemplar_dim = 6;
    return c;
}

World tiny_world(std::size_t dim) {
    WorldConfig w;
    w.train_classes = 6;
    w.test_classes = 2;
    w.labels = 4;
    w.train_pair_fraction = 0.5;
    w.exemplar_dim = dim;
    w.seed = 3;
    return build_world(w);
}

struct Fixture {
    ModelConfig cfg;
    World world;
    ModelParams params;
    Fixture(ModelConfig c, std::uint64_t seed) : cfg(c), world(tiny_world(c.exemplar_dim)), params(init_params(c, seed)) {}
    SequenceBatch batch(std::size_t n, std::uint64_t seed) const {
        CounterRng rng(seed);
        return sample_batch(world, Split::Train, n, rng);
    }
};

// Full 2-layer default-width model on a small-dimension world.
Fixture wide_fixture(std::uint64_t seed) {
    ModelConfig c;
    c.exemplar_dim = 12;
    c.n_labels = 4;
    c.heads = 4;
    c.d_model = 16;
    return Fixture(c, seed);
}

struct Built {
    Graph g;
    ParamNodes pn;
    ClampedForward f;
    NodeId loss;
};

// Builds, evaluates and back-propagates a clamped forward pass.
std::unique_ptr<Built> run_clamped(const ModelParams& p, const SequenceBatch& batch, const std::vector<ClampSpec>& clamps) {
    auto b = std::make_unique<Built>();
    b->pn = add_param_leaves(b->g, p);
    b->f = apply_clamped(b->g, b->pn, batch, clamps);
    b->loss = loss_last_token(b->g, b->f.logits, batch);
    Bindings bind;
    for (std::size_t i = 0; i < b->pn.ids.size(); ++i) bind.emplace_back(b->pn.ids[i], p.tensors[i]);
    b->g.evaluate(bind);
    b->g.backward(b->loss);
    return b;
}

double max_abs(const Tensor& t) {
    double m = 0;
    for (double x : t.data()) m = std::max(m, std::abs(x));
    return m;
}

Tensor naive_matmul(const Tensor& a, const Tensor& b) {
    Tensor c({a.dim(0), b.dim(1)});
    for (std::size_t i = 0; i < a.dim(0); ++i)
        for (std::size_t j = 0; j < b.dim(1); ++j)
            for (std::size_t k = 0; k < a.dim(1); ++k) c.at(i, j) += a.at(i, k) * b.at(k, j);
    return c;
}

Tensor gaussian(Shape s, std::uint64_t seed) {
    Tensor t(std::move(s));
    CounterRng rng(seed);
    for (double& x : t.data()) x = rng.normal();
    return t;
}

}  // namespace

TEST_CASE("previous-token pattern") {
    const Tensor p3 = prev_token_pattern(3);
    CHECK(p3 == Tensor::matrix(3, 3, {1, 0, 0, 1, 0, 0, 0, 1, 0}));
    for (std::size_t T = 1; T <= 6; ++T) {
        const Tensor p = prev_token_pattern(T);
        for (std::size_t r = 0; r < T; ++r) {
            double s = 0;
            for (std::size_t c = 0; c < T; ++c) {
                if (c > r) CHECK(p.at(r, c) == 0.0);
                s += p.at(r, c);
            }
            CHECK(s == 1.0);
        }
    }
    CHECK_THROWS(prev_token_pattern(0));
}

TEST_CASE("induction pattern puts the strength split on the two label tokens") {
    Fixture fx(tiny_config(), 1);
    const SequenceBatch batch = fx.batch(7, 2);
    const std::size_t T = 5;
    for (double s : {0.4, 1.0, -1.0, 0.0}) {
        const Tensor p = induction_pattern(batch, s);
        REQUIRE(p.shape() == Shape{7, T, T});
        for (std::size_t b = 0; b < 7; ++b)
            for (std::size_t r = 0; r < T; ++r)
                for (std::size_t c = 0; c < T; ++c) {
                    double want = 0.0;
                    if (r == T - 1 && c == batch.correct_pos[b]) want = (1 + s) / 2;
                    if (r == T - 1 && c == batch.incorrect_pos[b]) want = (1 - s) / 2;
                    CHECK(p[(b * T + r) * T + c] == want);
                }
    }
    const Tensor p = induction_pattern(batch, 0.4);
    CHECK(p[(0 * T + 4) * T + batch.correct_pos[0]] == doctest::Approx(0.7).epsilon(1e-15));
    CHECK(p[(0 * T + 4) * T + batch.incorrect_pos[0]] == doctest::Approx(0.3).epsilon(1e-15));
    CHECK_THROWS(induction_pattern(batch, 1.5));

    const auto mask = query_row_mask(2, T);
    REQUIRE(mask.size() == 2 * T * T);
    for (std::size_t i = 0; i < mask.size(); ++i) CHECK(mask[i] == ((i / T) % T == T - 1 ? 1 : 0));
}

TEST_CASE("layer-1 clamp feeds layer 2 the shifted sequence and cuts layer-1 gradients") {
    CHECK(shifted_positions(5) == std::vector<std::size_t>{0, 0, 1, 2, 4});
    Fixture fx(tiny_config(), 4);
    // "A 0 B 1 A"
    SequenceSpec spec{0, 1, 0, 1, true, true};
    SequenceBatch batch = make_batch(fx.world, {spec, fx.batch(1, 9).specs[0]});
    REQUIRE(batch.tokens[1].kind == TokenKind::Label);
    REQUIRE(batch.tokens[1].id == 0);

    ClampSpec c;
    c.kind = ClampKind::Layer1Full;
    auto run = run_clamped(fx.params, batch, {c});
    Graph& g = run->g;
    REQUIRE(run->f.shifted);
    const Tensor& embed = g.value(run->f.main.embed);
    const Tensor& fed = g.value(run->f.shifted->layers[1].input);
    const std::size_t d = fx.cfg.d_model, T = 5;
    const auto pos = shifted_positions(T);
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t j = 0; j < d; ++j)
                CHECK(fed[(b * T + t) * d + j] == embed[(b * T + pos[t]) * d + j]);
    // second pass reads the unshifted embedding
    CHECK(g.value(run->f.main.layers[1].input) == embed);
    // patterns of the second pass are those of the first
    for (std::size_t h = 0; h < fx.cfg.heads; ++h)
        CHECK(g.value(run->f.main.layers[1].pattern[h]) == g.value(run->f.shifted->layers[1].pattern[h]));

    for (Slot s : {Slot::Q, Slot::K, Slot::V, Slot::O}) CHECK(max_abs(g.grad(run->pn(param_name(0, s)))) == 0.0);
    CHECK(max_abs(g.grad(run->pn(ln_gain_name(0)))) == 0.0);
    CHECK(max_abs(g.grad(run->pn(ln_bias_name(0)))) == 0.0);
    // patterns flow back to layer-2 query and key weights
    CHECK(max_abs(g.grad(run->pn(param_name(1, Slot::Q)))) > 0.0);
    CHECK(max_abs(g.grad(run->pn(param_name(1, Slot::K)))) > 0.0);
    CHECK(max_abs(g.grad(run->pn(kLabelEmbed))) > 0.0);

    ClampSpec frozen = c;
    frozen.pattern_policy = GradPolicy::Constant;
    auto run2 = run_clamped(fx.params, batch, {frozen});
    CHECK(run2->g.value(run2->loss) == g.value(run->loss));
    CHECK(max_abs(run2->g.grad(run2->pn(param_name(1, Slot::Q)))) == 0.0);
}

TEST_CASE("copy clamp maps attention logits onto label logits") {
    Fixture fx(tiny_config(), 5);
    SequenceSpec spec{0, 1, 0, 1, true, true};
    SequenceBatch batch = make_batch(fx.world, {spec});
    REQUIRE(batch.correct_pos[0] == 1);
    REQUIRE(batch.incorrect_pos[0] == 3);
    Tensor attn({1, 5, 5}, 0.5);
    attn[4 * 5 + 1] = 2.0;
    attn[4 * 5 + 3] = -1.0;
    CHECK(copy_clamp_values(attn, batch, 5) == Tensor({1, 5}, std::vector<double>{2.0, -1.0, -1e9, -1e9, -1e9}));

    attn[4 * 5 + 3] = 2.0;
    const Tensor equal = copy_clamp_values(attn, batch, 4);
    CHECK(loss_last_token(equal.reshaped({1, 1, 4}), batch.targets) == doctest::Approx(std::numbers::ln2).epsilon(1e-14));

    // inside the model the query-row logits are exactly the gathered values
    const SequenceBatch many = fx.batch(5, 6);
    ClampSpec c;
    c.kind = ClampKind::Copy;
    c.head = 1;
    auto run = run_clamped(fx.params, many, {c});
    const Tensor& logits = run->g.value(run->f.logits);
    const Tensor want = copy_clamp_values(run->g.value(run->f.main.layers[1].attn_logits[1]), many, 4);
    const Tensor& own = run->g.value(run->f.main.logits);
    for (std::size_t b = 0; b < 5; ++b)
        for (std::size_t l = 0; l < 4; ++l) {
            CHECK(logits[(b * 5 + 4) * 4 + l] == want.at(b, l));
            CHECK(logits[(b * 5 + 0) * 4 + l] == own[(b * 5 + 0) * 4 + l]);
        }
    // only the chosen head's query/key weights and the embeddings learn; the unembedding is bypassed
    CHECK(max_abs(run->g.grad(run->pn(kUnembed))) == 0.0);
    CHECK(max_abs(run->g.grad(run->pn(param_name(1, Slot::V)))) == 0.0);
    CHECK(max_abs(run->g.grad(run->pn(param_name(1, Slot::Q)))) > 0.0);
}

TEST_CASE("clamped activations are reported verbatim") {
    Fixture fx(tiny_config(), 7);
    const SequenceBatch batch = fx.batch(4, 8);
    const std::size_t T = 5;
    ClampSpec pt;
    pt.kind = ClampKind::PtAttend;
    pt.heads = {0, 1};
    ClampSpec ih;
    ih.kind = ClampKind::IhMatch;
    ih.head = 1;
    ih.strength = 0.4;
    auto run = run_clamped(fx.params, batch, {pt, ih});
    ActivationRecord rec = extract_record(run->g, run->f.main);
    const Tensor prev = prev_token_pattern(T);
    for (int h : {0, 1})
        for (std::size_t b = 0; b < 4; ++b)
            for (std::size_t i = 0; i < T * T; ++i) CHECK(rec.layers[0].heads[h].pattern[b * T * T + i] == prev[i]);

    const Tensor ind = induction_pattern(batch, 0.4);
    const Tensor& got = rec.layers[1].heads[1].pattern;
    for (std::size_t b = 0; b < 4; ++b)
        for (std::size_t r = 0; r < T; ++r) {
            double s = 0;
            for (std::size_t c = 0; c < T; ++c) {
                const std::size_t i = (b * T + r) * T + c;
                if (r == T - 1) CHECK(got[i] == ind[i]);
                s += got[i];
            }
            CHECK(s == doctest::Approx(1.0).epsilon(1e-14));
        }
    auto strengths = induction_strengths(rec, batch);
    CHECK(strengths[1] == doctest::Approx(0.4).epsilon(1e-14));
    auto pts = prev_token_scores(rec);
    CHECK(pts[0] == 1.0);
    CHECK(identify_pt_heads(pts) == std::vector<int>{0, 1});

    // layer-0 query and key weights are upstream of the constant patterns only
    CHECK(max_abs(run->g.grad(run->pn(param_name(0, Slot::Q)))) == 0.0);
    CHECK(max_abs(run->g.grad(run->pn(param_name(0, Slot::K)))) == 0.0);
    CHECK(max_abs(run->g.grad(run->pn(param_name(0, Slot::V)))) > 0.0);
}

TEST_CASE("induction strength of uniform attention is zero") {
    Fixture fx(tiny_config(), 7);
    const SequenceBatch batch = fx.batch(3, 8);
    ActivationRecord rec;
    rec.layers.resize(2);
    rec.layers[1].heads.resize(1);
    rec.layers[1].heads[0].pattern = Tensor({3, 5, 5}, 0.2);
    CHECK(induction_strengths(rec, batch) == std::vector<double>{0.0});
}

TEST_CASE("clamped gradients match finite differences") {
    Fixture fx(tiny_config(), 13);
    const SequenceBatch batch = fx.batch(3, 14);
    ClampSpec pt;
    pt.kind = ClampKind::PtAttend;
    pt.heads = {1};
    ClampSpec l1;
    l1.kind = ClampKind::Layer1AndCopy;
    l1.head = 0;
    ClampSpec ih;
    ih.kind = ClampKind::IhMatch;
    ih.head = 1;
    ih.strength = 0.2;
    for (const auto& plan : std::vector<std::vector<ClampSpec>>{{pt}, {l1}, {ih}, {pt, ih}}) {
        Graph g;
        ParamNodes pn = add_param_leaves(g, fx.params);
        ClampedForward f = apply_clamped(g, pn, batch, plan);
        NodeId loss = loss_last_token(g, f.logits, batch);
        Bindings bind;
        for (std::size_t i = 0; i < pn.ids.size(); ++i) bind.emplace_back(pn.ids[i], fx.params.tensors[i]);
        auto report = check_gradients(g, bind, loss, 1e-5);
        CAPTURE(plan[0].describe());
        CHECK(report.worst() < 1e-6);
    }
}

TEST_CASE("clamp plans are validated") {
    ModelConfig cfg = tiny_config();
    ClampSpec a;
    a.kind = ClampKind::PtAttend;
    a.heads = {1};
    CHECK_NOTHROW(validate_plan({a}, cfg));
    CHECK_THROWS_AS(validate_plan({a, a}, cfg), ConfigError);
    ClampSpec b = a;
    a.end_step = 10;
    b.start_step = 10;
    CHECK_NOTHROW(validate_plan({a, b}, cfg));
    CHECK(active_clamps({a, b}, 9).size() == 1);
    CHECK(active_clamps({a, b}, 9)[0].end_step == 10);

    ClampSpec bad;
    bad.kind = ClampKind::IhMatch;
    bad.head = 1;
    bad.strength = 1.5;
    CHECK_THROWS_AS(validate_plan({bad}, cfg), ConfigError);
    bad.strength = 1.0;
    bad.head = 2;
    CHECK_THROWS_AS(validate_plan({bad}, cfg), ConfigError);
    ClampSpec donor;
    donor.kind = ClampKind::DonorGraft;
    CHECK_THROWS_AS(validate_plan({donor}, cfg), ConfigError);
    ClampSpec l1;
    l1.kind = ClampKind::Layer1Full;
    ClampSpec pt0 = a;
    pt0.end_step = ClampSpec{}.end_step;
    CHECK_THROWS_AS(validate_plan({l1, pt0}, cfg), ConfigError);
    CHECK(parse_clamp_kind("layer1_and_copy") == ClampKind::Layer1AndCopy);
    CHECK_THROWS_AS(parse_clamp_kind("nope"), ConfigError);
}

TEST_CASE("donor graft with the model itself leaves the loss unchanged and freezes layer 1") {
    Fixture fx(tiny_config(), 21);
    const SequenceBatch batch = fx.batch(4, 22);
    ClampSpec c;
    c.kind = ClampKind::DonorGraft;
    c.donor = std::make_shared<ModelParams>(fx.params);
    auto run = run_clamped(fx.params, batch, {c});
    CHECK(run->g.value(run->loss).item() ==
          doctest::Approx(evaluate_batch(fx.params, batch, plain_loss).loss).epsilon(1e-13));
    for (Slot s : {Slot::Q, Slot::K, Slot::V, Slot::O}) CHECK(max_abs(run->g.grad(run->pn(param_name(0, s)))) == 0.0);
    CHECK(max_abs(run->g.grad(run->pn(kExemplarProj))) == 0.0);
    CHECK(max_abs(run->g.grad(run->pn(param_name(1, Slot::V)))) > 0.0);
}

TEST_CASE("clamp loss builder honours step ranges") {
    Fixture fx(tiny_config(), 3);
    const SequenceBatch batch = fx.batch(4, 5);
    ClampSpec c;
    c.kind = ClampKind::IhMatch;
    c.head = 0;
    c.start_step = 5;
    c.end_step = 8;
    const double plain = evaluate_batch(fx.params, batch, plain_loss).loss;
    CHECK(evaluate_batch(fx.params, batch, clamp_loss_builder({c}, 4)).loss == plain);
    CHECK(evaluate_batch(fx.params, batch, clamp_loss_builder({c}, 5)).loss != plain);
    CHECK(evaluate_batch(fx.params, batch, clamp_loss_builder({c}, 8)).loss == plain);
}

// ---- ablations ----

TEST_CASE("empty knockout equals no ablation bitwise") {
    Fixture fx = wide_fixture(2);
    EvalSet set = make_eval_set(fx.world, Split::Train, 40, 3, 16);
    const AblationResult none = ablation_eval(fx.params, set, AblationSpec::none());
    const AblationResult ko = ablation_eval(fx.params, set, AblationSpec::knockout({}));
    CHECK(none.loss == ko.loss);
    CHECK(none.correct == ko.correct);
    const StepMetrics plain = evaluate_set(fx.params, set, plain_loss);
    CHECK(plain.loss == none.loss);
}

TEST_CASE("all-but-one matches knocking out the other heads") {
    Fixture fx = wide_fixture(3);
    EvalSet set = make_eval_set(fx.world, Split::Train, 24, 4, 12);
    std::vector<HeadRef> others;
    for (int h = 0; h < 4; ++h)
        if (h != 2) others.push_back({1, h});
    const AblationResult a = ablation_eval(fx.params, set, AblationSpec::all_but_one(1, 2));
    const AblationResult b = ablation_eval(fx.params, set, AblationSpec::knockout(others));
    CHECK(a.loss == b.loss);
    CHECK(a.correct == b.correct);
}

TEST_CASE("preserving ablations match a hand-built two-pass oracle") {
    Fixture fx = wide_fixture(4);
    const SequenceBatch batch = fx.batch(6, 5);
    const std::size_t B = 6, T = 5, d = fx.cfg.d_model, H = fx.cfg.heads;
    const ForwardResult clean = forward_with_all_aux(fx.params, batch);

    auto ablated_logits = [&](const AblationSpec& spec) {
        Graph g;
        ParamNodes pn = add_param_constants(g, fx.params);
        BuiltLoss bl = apply_ablation(g, pn, batch, spec);
        g.evaluate();
        return g.value(bl.logits);
    };

    for (bool patterns : {true, false}) {
        ClampCache cache;
        for (std::size_t h = 0; h < H; ++h) {
            if (h == 0 || h == 2) cache[Site::head_out(0, int(h))] = Substitution::constant(Tensor({B, T, d}));
            const auto& rec = clean.record.layers[1].heads[h];
            if (patterns) cache[Site::pattern(1, int(h))] = Substitution::constant(rec.pattern);
            else cache[Site::v(1, int(h))] = Substitution::constant(rec.v);
        }
        const Tensor want = forward_with_all_aux(fx.params, batch, cache).logits;
        const AblationSpec spec = patterns ? AblationSpec::pattern_preserving({0, 2}) : AblationSpec::value_preserving({0, 2});
        CHECK(max_abs_diff(ablated_logits(spec), want) < 1e-12);
    }

    // cutting layer 1 from the output leaves layer 2 untouched, so the logits
    // lose exactly the unembedded layer-1 head outputs
    Tensor resid = clean.record.layers[1].resid;
    for (const auto& h : clean.record.layers[0].heads)
        for (std::size_t i = 0; i < resid.size(); ++i) resid[i] -= h.out[i];
    const Tensor want = naive_matmul(resid.reshaped({B * T, d}), fx.params.get(kUnembed)).reshaped({B, T, 4});
    CHECK(max_abs_diff(ablated_logits(AblationSpec::cut_to_output(0)), want) < 1e-12);

    // a path ablation keeping everything reduces to the clean model only when no heads are cut
    AblationSpec path = AblationSpec::path(1, 3, true);
    ClampCache pc;
    for (std::size_t h = 0; h < H; ++h) {
        if (h != 1) pc[Site::head_out(0, int(h))] = Substitution::constant(Tensor({B, T, d}));
        if (h != 3) pc[Site::head_out(1, int(h))] = Substitution::constant(Tensor({B, T, d}));
    }
    pc[Site::pattern(1, 3)] = Substitution::constant(clean.record.layers[1].heads[3].pattern);
    CHECK(max_abs_diff(ablated_logits(path), forward_with_all_aux(fx.params, batch, pc).logits) < 1e-12);

    // perfect match replaces only the query row
    AblationSpec pm = AblationSpec::none();
    pm.perfect_match_heads = {1};
    ClampCache mc;
    mc[Site::pattern(1, 1)] = Substitution::constant(induction_pattern(batch, 1.0), query_row_mask(B, T));
    CHECK(max_abs_diff(ablated_logits(pm), forward_with_all_aux(fx.params, batch, mc).logits) < 1e-12);
}

TEST_CASE("ablation spec validation") {
    ModelConfig cfg = wide_fixture(1).cfg;
    CHECK_THROWS_AS(AblationSpec::all_but_one(1, 4).validate(cfg), ConfigError);
    CHECK_THROWS_AS(AblationSpec::pattern_preserving({}).validate(cfg), ConfigError);
    CHECK_THROWS_AS(AblationSpec::path(0, -1, true).validate(cfg), ConfigError);
    CHECK_THROWS_AS(AblationSpec::cut_to_output(2).validate(cfg), ConfigError);
    AblationSpec s = AblationSpec::pattern_preserving({0});
    s.perfect_match_heads = {1};
    CHECK_THROWS_AS(s.validate(cfg), ConfigError);
    AblationSpec ok = AblationSpec::value_preserving({0});
    ok.perfect_match_heads = {1};
    CHECK_NOTHROW(ok.validate(cfg));
    CHECK(AblationSpec::path(0, 3, false).describe() == "path(L0H0->L1H3,values)");
}

TEST_CASE("error subset accuracy") {
    Fixture fx = wide_fixture(6);
    EvalSet set = make_eval_set(fx.world, Split::Train, 64, 7, 32);
    std::size_t n = 0;
    const AblationSpec base = AblationSpec::all_but_one(1, 0);
    CHECK(error_subset_accuracy(fx.params, set, base, base, &n) == 0.0);
    CHECK(n > 0);
    const double other = error_subset_accuracy(fx.params, set, base, AblationSpec::none());
    CHECK(other >= 0.0);
    CHECK(other <= 1.0);
}

// ---- composition ----

TEST_CASE("composition score reference values") {
    CHECK(composition_score(Tensor::identity(2), Tensor::identity(2)) == doctest::Approx(1 / std::sqrt(2.0)).epsilon(1e-15));
    // writes into coordinates 0-1, reads from 2-3
    Tensor wo({2, 4}), ws({4, 2});
    wo.at(0, 0) = 1.5;
    wo.at(1, 1) = -0.3;
    ws.at(2, 0) = 2.0;
    ws.at(3, 1) = 0.7;
    CHECK(composition_score(wo, ws) == 0.0);
    CHECK_THROWS(composition_score(Tensor({2, 4}), ws));
    CHECK_THROWS(composition_score(ws, ws));

    const Tensor a = gaussian({8, 64}, 1), b = gaussian({64, 8}, 2);
    const double want = frobenius_norm(naive_matmul(a, b)) / (frobenius_norm(a) * frobenius_norm(b));
    CHECK(std::abs(composition_score(a, b) - want) < 1e-12);

    // random rotation of the shared space via Gram-Schmidt
    Tensor q = gaussian({64, 64}, 3);
    for (std::size_t i = 0; i < 64; ++i) {
        for (std::size_t j = 0; j < i; ++j) {
            double dot = 0;
            for (std::size_t k = 0; k < 64; ++k) dot += q.at(i, k) * q.at(j, k);
            for (std::size_t k = 0; k < 64; ++k) q.at(i, k) -= dot * q.at(j, k);
        }
        double n = 0;
        for (std::size_t k = 0; k < 64; ++k) n += q.at(i, k) * q.at(i, k);
        for (std::size_t k = 0; k < 64; ++k) q.at(i, k) /= std::sqrt(n);
    }
    Tensor qt({64, 64});
    for (std::size_t i = 0; i < 64; ++i)
        for (std::size_t j = 0; j < 64; ++j) qt.at(i, j) = q.at(j, i);
    CHECK(std::abs(composition_score(naive_matmul(a, q), naive_matmul(qt, b)) - want) < 1e-12);
}

TEST_CASE("composition table agrees with per-head scores") {
    ModelParams p = init_params(ModelConfig{}, 9);
    const Tensor t = composition_table(p);
    REQUIRE(t.shape() == Shape{8, 8, 3});
    CHECK(t[(2 * 8 + 5) * 3 + 1] == composition_score(p, 2, 5, Slot::K));
    CHECK(t[(7 * 8 + 0) * 3 + 2] ==
          composition_score(head_weight(p, 0, Slot::O, 7), head_weight(p, 1, Slot::V, 0)));
    for (double x : t.data()) {
        CHECK(x > 0.0);
        CHECK(x <= 1.0);
    }
    CHECK_THROWS(composition_score(p, 0, 0, Slot::O));
}
