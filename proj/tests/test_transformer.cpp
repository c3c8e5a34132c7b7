#include <cmath>
#include <numeric>

#include "doctest.h"
#include "optolab/transformer.hpp"

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

// Naive [m,k] x [k,n].
Tensor naive_matmul(const Tensor& a, const Tensor& b) {
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor c({m, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0;
            for (std::size_t t = 0; t < k; ++t) s += a.at(i, t) * b.at(t, j);
            c.at(i, j) = s;
        }
    return c;
}

Tensor batch_slice(const Tensor& t, std::size_t b) {
    const std::size_t r = t.dim(1), c = t.dim(2);
    std::vector<double> v(t.data().begin() + static_cast<std::ptrdiff_t>(b * r * c),
                          t.data().begin() + static_cast<std::ptrdiff_t>((b + 1) * r * c));
    return Tensor({r, c}, std::move(v));
}

}  // namespace

TEST_CASE("init is deterministic with the documented shapes and scale") {
    ModelConfig cfg;
    ModelParams a = init_params(cfg, 5), b = init_params(cfg, 5), c = init_params(cfg, 6);
    CHECK(a.tensors == b.tensors);
    CHECK(a.tensors != c.tensors);
    CHECK(head_weight(a, 0, Slot::Q, 3).shape() == Shape{64, 8});
    CHECK(head_weight(a, 1, Slot::O, 7).shape() == Shape{8, 64});
    CHECK(cfg.n_layers * cfg.heads == 16);
    CHECK(a.get(ln_gain_name(1)) == Tensor({64}, 1.0));
    CHECK(a.get(ln_bias_name(0)) == Tensor({64}, 0.0));
    const Tensor& wq = a.get(param_name(0, Slot::Q));
    double mean = 0, sq = 0;
    for (double x : wq.data()) mean += x;
    mean /= double(wq.size());
    for (double x : wq.data()) sq += (x - mean) * (x - mean);
    const double sd = std::sqrt(sq / double(wq.size() - 1));
    CHECK(wq.size() >= 4096);
    CHECK(std::abs(sd - 0.125) < 0.1 * 0.125);
}

TEST_CASE("model config validation") {
    ModelConfig c;
    c.heads = 6;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = ModelConfig{};
    c.n_labels = 1;
    CHECK_THROWS_AS(init_params(c, 0), ConfigError);
}

TEST_CASE("last-token loss reference values") {
    std::vector<std::uint32_t> targets{0, 3};
    Tensor uniform({2, 5, 5}, 0.0);
    CHECK(loss_last_token(uniform, targets) == doctest::Approx(std::log(5.0)).epsilon(1e-14));
    Tensor two({2, 5, 5}, -1e9);
    for (std::size_t b = 0; b < 2; ++b) {
        two[(b * 5 + 4) * 5 + targets[b]] = 0.3;
        two[(b * 5 + 4) * 5 + (targets[b] + 1) % 5] = 0.3;
    }
    CHECK(loss_last_token(two, targets) == doctest::Approx(std::log(2.0)).epsilon(1e-14));
    Tensor sharp({2, 5, 5}, 0.0);
    for (std::size_t b = 0; b < 2; ++b) sharp[(b * 5 + 4) * 5 + targets[b]] = 60.0;
    CHECK(loss_last_token(sharp, targets) < 1e-20);
    CHECK_THROWS(loss_last_token(uniform, std::vector<std::uint32_t>{0, 5}));

    // graph node agrees with the direct computation
    Graph g;
    SequenceBatch b;
    b.seq_len = 5;
    b.targets = targets;
    NodeId l = loss_last_token(g, g.constant(two), b);
    g.evaluate();
    CHECK(g.value(l).item() == doctest::Approx(std::log(2.0)).epsilon(1e-14));
}

TEST_CASE("accuracy is shift invariant and counts ties as wrong") {
    std::vector<std::uint32_t> targets{1, 2, 0};
    Tensor logits({3, 1, 3}, 0.0);
    logits[0 * 3 + 1] = 1.0;  // correct
    logits[1 * 3 + 0] = 2.0;  // wrong
    // sequence 2: all tied -> wrong
    CHECK(accuracy_last_token(logits, targets) == doctest::Approx(1.0 / 3.0));
    Tensor shifted = logits;
    for (double& x : shifted.data()) x += 17.25;
    CHECK(correct_last_token(shifted, targets) == correct_last_token(logits, targets));
}

TEST_CASE("first Adam step moves each coordinate by lr against the gradient sign") {
    AdamConfig cfg;
    AdamState st;
    st.m.emplace_back(Shape{2});
    st.v.emplace_back(Shape{2});
    std::vector<Tensor> theta{Tensor({2}, std::vector<double>{1.0, -2.0})};
    // loss 1/2 theta^2 -> gradient theta
    std::vector<Tensor> grad{theta[0]};
    adam_update(theta, grad, st, cfg);
    // m_hat = g, v_hat = g^2 -> step = lr * g / (|g| + eps)
    CHECK(theta[0][0] == doctest::Approx(1.0 - 1e-5 * 1.0 / (1.0 + 1e-8)).epsilon(1e-15));
    CHECK(theta[0][1] == doctest::Approx(-2.0 + 1e-5 * 2.0 / (2.0 + 1e-8)).epsilon(1e-15));
    CHECK(st.step == 1);
}

TEST_CASE("forward pass invariants") {
    ModelConfig cfg;
    cfg.exemplar_dim = 16;
    WorldConfig wc;
    wc.exemplar_dim = 16;
    World w = build_world(wc);
    ModelParams p = init_params(cfg, 1);
    CounterRng rng(4);
    SequenceBatch batch = sample_batch(w, Split::Train, 6, rng);
    ForwardResult f = forward_with_all_aux(p, batch);
    const auto& rec = f.record;
    REQUIRE(rec.layers.size() == 2);
    CHECK(f.logits.shape() == Shape{6, 5, 5});

    SUBCASE("patterns are causal and stochastic") {
        for (const auto& layer : rec.layers)
            for (const auto& h : layer.heads) {
                REQUIRE(h.pattern.shape() == Shape{6, 5, 5});
                for (std::size_t b = 0; b < 6; ++b)
                    for (std::size_t r = 0; r < 5; ++r) {
                        double s = 0;
                        for (std::size_t c = 0; c < 5; ++c) {
                            const double x = h.pattern[(b * 5 + r) * 5 + c];
                            if (c > r) CHECK(x == 0.0);
                            s += x;
                        }
                        CHECK(s == doctest::Approx(1.0).epsilon(1e-14));
                    }
            }
    }

    SUBCASE("residual stream equals embedding plus every head output") {
        Tensor total = rec.embed;
        for (const auto& layer : rec.layers) {
            Tensor before = total;
            for (const auto& h : layer.heads)
                for (std::size_t i = 0; i < total.size(); ++i) total[i] += h.out[i];
            CHECK(max_abs_diff(layer.input, before) < 1e-12);
            CHECK(max_abs_diff(layer.resid, total) < 1e-12);
        }
        Tensor logits({6, 5, 5});
        Tensor flat = rec.layers.back().resid.reshaped({30, 64});
        Tensor ref = naive_matmul(flat, p.get(kUnembed));
        CHECK(max_abs_diff(ref.reshaped({6, 5, 5}), f.logits) < 1e-12);
    }

    SUBCASE("an all-false mask changes nothing") {
        ClampCache cache;
        cache[Site::pattern(1, 2)] =
            Substitution::constant(Tensor({6, 5, 5}, 0.5), std::vector<std::uint8_t>(150, 0));
        cache[Site::head_out(0, 1)] =
            Substitution::constant(Tensor({6, 5, 64}, 0.0), std::vector<std::uint8_t>(6 * 5 * 64, 0));
        CHECK(forward_with_all_aux(p, batch, cache).logits == f.logits);
    }

    SUBCASE("a clamped pattern is reported verbatim and drives the head output") {
        Tensor pat({6, 5, 5}, 0.0);
        for (std::size_t b = 0; b < 6; ++b)
            for (std::size_t r = 0; r < 5; ++r)
                for (std::size_t c = 0; c <= r; ++c) pat[(b * 5 + r) * 5 + c] = double(c + 1 + b) / double((r + 1) * (r + 2 + 2 * b) / 2);
        ClampCache cache{{Site::pattern(1, 2), Substitution::constant(pat)}};
        auto g = forward_with_all_aux(p, batch, cache);
        const auto& h = g.record.layers[1].heads[2];
        CHECK(h.pattern == pat);
        Tensor wo = head_weight(p, 1, Slot::O, 2);
        for (std::size_t b = 0; b < 6; ++b) {
            Tensor expect = naive_matmul(naive_matmul(batch_slice(pat, b), batch_slice(h.v, b)), wo);
            CHECK(max_abs_diff(expect, batch_slice(h.out, b)) < 1e-12);
        }
        // unrelated layer-0 activations are untouched
        CHECK(g.record.layers[0].resid == rec.layers[0].resid);
    }

    SUBCASE("value and attention are computed as documented") {
        const auto& h = rec.layers[0].heads[5];
        Tensor wv = head_weight(p, 0, Slot::V, 5);
        for (std::size_t b = 0; b < 6; ++b) {
            Tensor v = naive_matmul(batch_slice(rec.layers[0].norm, b), wv);
            CHECK(max_abs_diff(v, batch_slice(h.v, b)) < 1e-12);
            for (std::size_t r = 0; r < 5; ++r)
                for (std::size_t c = 0; c < 5; ++c) {
                    double dot = 0;
                    for (std::size_t j = 0; j < 8; ++j) dot += h.q[(b * 5 + r) * 8 + j] * h.k[(b * 5 + c) * 8 + j];
                    CHECK(h.attn_logits[(b * 5 + r) * 5 + c] == doctest::Approx(dot / std::sqrt(8.0)).epsilon(1e-12));
                }
        }
    }
}

TEST_CASE("later positions never influence earlier ones") {
    ModelConfig cfg = tiny_config();
    World w = tiny_world(cfg.exemplar_dim);
    ModelParams p = init_params(cfg, 2);
    CounterRng rng(1);
    SequenceBatch base = sample_batch(w, Split::Train, 3, rng);
    // stretch each episode to 7 tokens with two trailing debug tokens
    auto stretch = [&](std::uint32_t a, std::uint32_t b) {
        SequenceBatch s = base;
        s.seq_len = 7;
        s.tokens.clear();
        for (std::size_t i = 0; i < base.size(); ++i) {
            for (std::size_t t = 0; t < 5; ++t) s.tokens.push_back(base.tokens[i * 5 + t]);
            s.tokens.push_back({TokenKind::Label, a});
            s.tokens.push_back({TokenKind::Exemplar, b});
        }
        return s;
    };
    auto f1 = forward_with_all_aux(p, stretch(0, 0)).logits;
    auto f2 = forward_with_all_aux(p, stretch(3, 1)).logits;
    auto f0 = forward_with_all_aux(p, base).logits;
    for (std::size_t b = 0; b < 3; ++b)
        for (std::size_t t = 0; t < 5; ++t)
            for (std::size_t l = 0; l < 4; ++l) {
                CHECK(f1[(b * 7 + t) * 4 + l] == f2[(b * 7 + t) * 4 + l]);
                CHECK(f1[(b * 7 + t) * 4 + l] == doctest::Approx(f0[(b * 5 + t) * 4 + l]).epsilon(1e-12));
            }
}

TEST_CASE("pattern clamped to itself under FLOW is a bitwise no-op") {
    ModelConfig cfg = tiny_config();
    World w = tiny_world(cfg.exemplar_dim);
    ModelParams p = init_params(cfg, 8);
    CounterRng rng(9);
    SequenceBatch batch = sample_batch(w, Split::Train, 4, rng);
    auto run = [&](bool clamp) {
        Graph g;
        ParamNodes pn = add_param_leaves(g, p);
        ModelGraph mg = apply_model(g, pn, batch);
        if (clamp) {
            g.substitute(mg.layers[1].pattern[0], Substitution::flow(mg.layers[1].pattern[0]));
            g.substitute(mg.layers[0].head_out[1], Substitution::flow(mg.layers[0].head_out[1]));
        }
        NodeId loss = loss_last_token(g, mg.logits, batch);
        g.evaluate();
        g.backward(loss);
        std::vector<Tensor> out{g.value(mg.logits)};
        for (NodeId id : pn.ids) out.push_back(g.grad(id));
        return out;
    };
    CHECK(run(false) == run(true));
}

TEST_CASE("knocked-out heads receive no gradient") {
    ModelConfig cfg;
    cfg.exemplar_dim = 16;
    WorldConfig wc;
    wc.exemplar_dim = 16;
    World w = build_world(wc);
    ModelParams p = init_params(cfg, 3);
    AdamState adam = AdamState::zeros_like(p);
    const std::size_t keep = 4;
    LossBuilder knockout = [&](Graph& g, const ParamNodes& pn, const SequenceBatch& b) {
        ClampCache cache;
        for (int h = 0; h < 8; ++h)
            if (h != int(keep)) cache[Site::head_out(1, h)] = Substitution::constant(Tensor({b.size(), 5, 64}));
        ModelGraph mg = apply_model(g, pn, b, cache);
        return BuiltLoss{loss_last_token(g, mg.logits, b), mg.logits};
    };
    CounterRng rng(5);
    ModelParams start = p;
    for (int step = 0; step < 3; ++step) {
        std::vector<Tensor> grads;
        train_step(p, adam, sample_batch(w, Split::Train, 8, rng), knockout, AdamConfig{}, &grads);
        for (Slot s : {Slot::Q, Slot::K, Slot::V, Slot::O}) {
            const Tensor& gw = grads[p.index(param_name(1, s))];
            for (std::size_t h = 0; h < 8; ++h) {
                double mx = 0;
                for (std::size_t r = 0; r < 64; ++r)
                    for (std::size_t c = 0; c < 8; ++c)
                        mx = std::max(mx, std::abs(s == Slot::O ? gw.at(h * 8 + c, r) : gw.at(r, h * 8 + c)));
                if (h == keep) CHECK(mx > 0.0);
                else CHECK(mx == 0.0);
            }
        }
    }
    for (std::size_t h = 0; h < 8; ++h)
        if (h != keep) CHECK(head_weight(p, 1, Slot::V, h) == head_weight(start, 1, Slot::V, h));
}

TEST_CASE("tiny model gradients match finite differences") {
    ModelConfig cfg = tiny_config();
    World w = tiny_world(cfg.exemplar_dim);
    ModelParams p = init_params(cfg, 11);
    CounterRng rng(12);
    SequenceBatch batch = sample_batch(w, Split::Train, 3, rng);
    Graph g;
    ParamNodes pn = add_param_leaves(g, p);
    ModelGraph mg = apply_model(g, pn, batch);
    NodeId loss = loss_last_token(g, mg.logits, batch);
    Bindings bind;
    for (std::size_t i = 0; i < pn.ids.size(); ++i) bind.emplace_back(pn.ids[i], p.tensors[i]);
    auto report = check_gradients(g, bind, loss, 1e-5);
    CAPTURE(report.worst());
    CHECK(report.worst() < 1e-6);
    // extrapolated differences at a coarser step are tighter still
    auto rich = check_gradients(g, bind, loss, 1e-4, 1e-4, true);
    CAPTURE(rich.worst());
    CHECK(rich.worst() < 1e-7);
}

TEST_CASE("training is deterministic and rejects non-finite losses") {
    ModelConfig cfg = tiny_config();
    World w = tiny_world(cfg.exemplar_dim);
    auto run = [&] {
        ModelParams p = init_params(cfg, 1);
        AdamState a = AdamState::zeros_like(p);
        CounterRng rng(2);
        std::vector<double> losses;
        for (int i = 0; i < 5; ++i) losses.push_back(train_step(p, a, sample_batch(w, Split::Train, 4, rng), plain_loss, AdamConfig{}).loss);
        return std::make_pair(losses, p.tensors);
    };
    CHECK(run() == run());

    ModelParams p = init_params(cfg, 1);
    p.get(kUnembed)[0] = std::numeric_limits<double>::quiet_NaN();
    AdamState a = AdamState::zeros_like(p);
    CounterRng rng(2);
    try {
        train_step(p, a, sample_batch(w, Split::Train, 4, rng), plain_loss, AdamConfig{});
        FAIL("expected NumericalError");
    } catch (const NumericalError& e) {
        CHECK(e.step() == 1);
    }
}

TEST_CASE("clamps on missing sites are rejected") {
    ModelConfig cfg = tiny_config();
    World w = tiny_world(cfg.exemplar_dim);
    ModelParams p = init_params(cfg, 1);
    CounterRng rng(2);
    SequenceBatch batch = sample_batch(w, Split::Train, 2, rng);
    ClampCache cache{{Site::pattern(1, 5), Substitution::constant(Tensor({2, 5, 5}))}};
    CHECK_THROWS_AS(forward_with_all_aux(p, batch, cache), GraphError);
    ClampCache bad_shape{{Site::pattern(1, 1), Substitution::constant(Tensor({2, 4, 4}))}};
    CHECK_THROWS_AS(forward_with_all_aux(p, batch, bad_shape), ShapeError);
}
