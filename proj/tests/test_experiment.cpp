#include <algorithm>
#include <fstream>

#include "doctest.h"
#include "optolab/experiment.hpp"

using namespace optolab;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("optolab_test_" + name)) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

ExperimentConfig tiny() {
    ExperimentConfig c;
    c.name = "tiny";
    c.total_sequences = 640;
    c.eval_every = 320;
    c.checkpoint_every = 320;
    c.eval_size = 32;
    return c;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

bool same_bits(const ModelParams& a, const ModelParams& b) {
    if (a.tensors.size() != b.tensors.size()) return false;
    for (std::size_t i = 0; i < a.tensors.size(); ++i)
        if (a.tensors[i].shape() != b.tensors[i].shape() ||
            !std::ranges::equal(a.tensors[i].data(), b.tensors[i].data()))
            return false;
    return true;
}

}  // namespace

TEST_CASE("config JSON round-trips and is strict") {
    ExperimentConfig c = tiny();
    ClampSpec s;
    s.kind = ClampKind::IhMatch;
    s.strength = -0.5;
    s.start_step = 3;
    c.clamps.push_back(s);
    const Json j = to_json(c);
    CHECK(to_json(experiment_from_json(j)) == j);

    Json bad = j;
    bad["bogus"] = 1;
    CHECK_THROWS_AS(experiment_from_json(bad), ConfigError);
    bad = j;
    bad["world"]["labels"] = -3;
    CHECK_THROWS_AS(experiment_from_json(bad), ConfigError);
    bad = j;
    bad["batch_size"] = "32";
    CHECK_THROWS_AS(experiment_from_json(bad), ConfigError);
    bad = j;
    bad["clamps"][0]["kind"] = "nope";
    CHECK_THROWS(experiment_from_json(bad));
}

TEST_CASE("validation lists every problem") {
    ExperimentConfig c = tiny();
    c.batch_size = 30;
    c.adam.lr = 0.0;
    try {
        c.validate();
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("total_sequences") != std::string::npos);
        CHECK(msg.find("eval_every") != std::string::npos);
        CHECK(msg.find("adam.lr") != std::string::npos);
    }
    ExperimentConfig d = tiny();
    ClampSpec g;
    g.kind = ClampKind::DonorGraft;
    d.clamps.push_back(g);
    CHECK_THROWS_AS(d.validate(), ConfigError);
    d.clamps[0].donor_path = "somewhere";
    CHECK_NOTHROW(d.validate());
}

TEST_CASE("dotted overrides") {
    const ExperimentConfig c = load_experiment_config(std::nullopt, {"world.labels=15", "adam.lr=2e-5", "name=x"});
    CHECK(c.world.labels == 15);
    CHECK(c.model.n_labels == 15);
    CHECK(c.adam.lr == doctest::Approx(2e-5));
    CHECK(c.name == "x");
    CHECK_THROWS_AS(load_experiment_config(std::nullopt, {"nosuch.key=1"}), ConfigError);
    CHECK_THROWS_AS(load_experiment_config(std::nullopt, {"world.labels"}), ConfigError);
    CHECK_THROWS_AS(load_experiment_config(std::nullopt, {"world.nokey=1"}), ConfigError);
    CHECK_THROWS_AS(load_experiment_config(fs::path("/nonexistent/config.json")), ConfigError);
}

TEST_CASE("config hash ignores the note and tracks seeds") {
    ExperimentConfig a = tiny(), b = tiny();
    b.note = "different";
    CHECK(config_hash(a) == config_hash(b));
    b.seed_data = 9;
    CHECK(config_hash(a) != config_hash(b));
    CHECK(config_hash(a).size() == 16);
}

TEST_CASE("checkpoint round trip and corruption") {
    TempDir tmp("ckpt");
    ModelConfig mc;
    mc.d_model = 16;
    mc.heads = 2;
    Checkpoint ck;
    ck.experiment = Json{{"k", 1}};
    ck.config_hash = "abc";
    ck.step = 42;
    ck.params = init_params(mc, 5);
    ck.adam = AdamState::zeros_like(ck.params);
    ck.adam.step = 42;
    ck.adam.m[0].data()[0] = 0.125;
    ck.data_rng = CounterRng(3).split(1);
    ck.data_rng.next_u64();
    ck.run_state = Json{{"batch_loss_sum", 0.1 + 0.2}};
    save_checkpoint(tmp.path / "c", ck);
    CHECK_FALSE(fs::exists(tmp.path / "c.tmp"));

    const Checkpoint back = load_checkpoint(tmp.path / "c");
    CHECK(same_bits(back.params, ck.params));
    CHECK(back.adam.m[0].data()[0] == 0.125);
    CHECK(back.adam.step == 42);
    CHECK(back.step == 42);
    CHECK(back.config_hash == "abc");
    CHECK(back.experiment == ck.experiment);
    CHECK(back.run_state["batch_loss_sum"].get<double>() == 0.1 + 0.2);
    CounterRng r1 = back.data_rng, r2 = ck.data_rng;
    CHECK(r1.next_u64() == r2.next_u64());
    CHECK(same_bits(load_params(tmp.path / "c"), ck.params));

    {
        Json m = Json::parse(slurp(tmp.path / "c" / "manifest.json"));
        m.erase("step");
        fs::copy(tmp.path / "c", tmp.path / "nostep", fs::copy_options::recursive);
        std::ofstream(tmp.path / "nostep" / "manifest.json") << m.dump();
        CHECK_THROWS_AS(load_checkpoint(tmp.path / "nostep"), CheckpointError);
    }
    fs::resize_file(tmp.path / "c" / "tensors.bin", 100);
    CHECK_THROWS_AS(load_checkpoint(tmp.path / "c"), CheckpointError);
    CHECK_THROWS_AS(load_checkpoint(tmp.path / "missing"), CheckpointError);
}

TEST_CASE("runs are deterministic and resume bitwise") {
    TempDir tmp("runs");
    const ExperimentConfig c = tiny();
    const RunResult a = run_experiment(c, tmp.path / "a");
    const RunResult b = run_experiment(c, tmp.path / "b");
    CHECK(slurp(tmp.path / "a" / "metrics.jsonl") == slurp(tmp.path / "b" / "metrics.jsonl"));
    CHECK(same_bits(a.final_params, b.final_params));
    REQUIRE(a.metrics.size() == 3);
    CHECK(a.steps_done == 20);
    for (std::size_t i = 0; i < a.metrics.size(); ++i) CHECK(a.metrics[i].sequences == a.metrics[i].step * c.batch_size);
    CHECK_FALSE(a.metrics[0].train_batch_loss);
    CHECK(a.metrics[1].train_batch_loss);
    CHECK(a.metrics[2].induction.size() == 8);

    // Simulate a crash after the first checkpoint.
    fs::remove_all(tmp.path / "b" / "final");
    fs::remove_all(tmp.path / "b" / "checkpoints" / "step_0000000020");
    RunOptions opt;
    opt.resume = true;
    const RunResult r = run_experiment(c, tmp.path / "b", opt);
    CHECK(slurp(tmp.path / "a" / "metrics.jsonl") == slurp(tmp.path / "b" / "metrics.jsonl"));
    CHECK(same_bits(a.final_params, r.final_params));
    CHECK(r.metrics.size() == 3);

    ExperimentConfig other = c;
    other.seed_init = 99;
    CHECK_THROWS_AS(run_experiment(other, tmp.path / "b", opt), ConfigError);
}

TEST_CASE("an inactive clamp plan reproduces the unclamped run") {
    TempDir tmp("clamp");
    ExperimentConfig c = tiny();
    c.head_metrics = false;
    const RunResult plain = run_experiment(c, tmp.path / "plain");
    ClampSpec s;
    s.start_step = 1000;
    c.clamps.push_back(s);
    const RunResult later = run_experiment(c, tmp.path / "later");
    REQUIRE(plain.metrics.size() == later.metrics.size());
    for (std::size_t i = 0; i < plain.metrics.size(); ++i) {
        CHECK(plain.metrics[i].train.loss == later.metrics[i].train.loss);
        CHECK(plain.metrics[i].test_relabel.loss == later.metrics[i].test_relabel.loss);
    }
    CHECK(same_bits(plain.final_params, later.final_params));
}

TEST_CASE("metrics log errors") {
    TempDir tmp("metrics");
    CHECK_THROWS(read_metrics(tmp.path / "none.jsonl"));
    { std::ofstream(tmp.path / "empty.jsonl"); }
    CHECK_THROWS(read_metrics(tmp.path / "empty.jsonl"));
    { std::ofstream(tmp.path / "old.jsonl") << R"({"schema":0,"step":0})" << "\n"; }
    CHECK_THROWS(read_metrics(tmp.path / "old.jsonl"));
    { std::ofstream(tmp.path / "junk.jsonl") << "{not json\n"; }
    CHECK_THROWS(read_metrics(tmp.path / "junk.jsonl"));
}

TEST_CASE("sweep points and the degenerate sweep") {
    const ExperimentConfig base = tiny();
    const auto b = sweep_point(base, SweepAxis::Labels, 10, SweepKind::BIsolated, 2);
    CHECK(b.world.labels == 10);
    CHECK(b.model.n_labels == 10);
    REQUIRE(b.clamps.size() == 1);
    CHECK(b.clamps[0].kind == ClampKind::Layer1AndCopy);
    CHECK(b.clamps[0].head == 2);
    const auto cc = sweep_point(base, SweepAxis::Classes, 100, SweepKind::CIsolated, 2);
    CHECK(cc.world.train_classes == 100);
    CHECK(cc.clamps.at(0).kind == ClampKind::IhMatch);
    CHECK(cc.clamps.at(0).strength == 1.0);
    CHECK_FALSE(cc.note.empty());
    CHECK(sweep_point(base, SweepAxis::Labels, 5, SweepKind::Composite, 2).clamps.at(0).kind == ClampKind::Layer1Full);
    CHECK(sweep_point(base, SweepAxis::Labels, 5, SweepKind::Full, 2).clamps.empty());
    CHECK_THROWS_AS(parse_sweep_kind("half"), ConfigError);
    CHECK_THROWS_AS(parse_sweep_axis("heads"), ConfigError);

    TempDir tmp("sweep");
    const auto res = run_sweep(base, SweepAxis::Labels, {5}, tmp.path / "s", {SweepKind::Full}, 3);
    REQUIRE(res.size() == 1);
    CHECK(res[0].ok);
    const RunResult direct = run_experiment(sweep_point(base, SweepAxis::Labels, 5, SweepKind::Full, 3), tmp.path / "d");
    CHECK(slurp(res[0].dir / "metrics.jsonl") == slurp(tmp.path / "d" / "metrics.jsonl"));
    CHECK(slurp(tmp.path / "s" / "sweep.jsonl").find("\"ok\":true") != std::string::npos);
    CHECK_THROWS_AS(run_sweep(base, SweepAxis::Labels, {0}, tmp.path / "bad", {SweepKind::Full}, 3), ConfigError);
}

TEST_CASE("analysis jobs on a run directory") {
    TempDir tmp("analyze");
    run_experiment(tiny(), tmp.path / "r");
    const auto comp = analyze(tmp.path / "r", AnalysisJob::Composition);
    REQUIRE(comp.size() == 1);
    CHECK(comp[0]["shape"] == Json::array({8, 8, 3}));
    CHECK(comp[0]["scores"].size() == 8);
    CHECK(comp[0]["scores"][0].size() == 8);
    CHECK(comp[0]["scores"][0][0].size() == 3);

    const auto abl = analyze(tmp.path / "r", AnalysisJob::Ablations);
    std::size_t knock = 0, abo = 0;
    for (const auto& r : abl) {
        const std::string s = r["spec"];
        knock += s.rfind("knockout", 0) == 0;
        abo += s.rfind("all_but_one", 0) == 0;
    }
    CHECK(knock == 8);
    CHECK(abo == 8);
    CHECK(analyze(tmp.path / "r", AnalysisJob::Phase).size() == 3);
    CHECK(analyze(tmp.path / "r", AnalysisJob::Progress).size() == 3);  // two periodic checkpoints plus final
    CHECK_FALSE(analyze(tmp.path / "r", AnalysisJob::Induction).empty());
    CHECK_FALSE(analyze(tmp.path / "r", AnalysisJob::ErrorSubsets).empty());
    // Weight jobs also accept a bare checkpoint directory.
    CHECK(analyze(tmp.path / "r" / "final", AnalysisJob::Composition).size() == 1);
    CHECK_THROWS_AS(analyze(tmp.path / "r" / "final", AnalysisJob::Phase), ConfigError);
    CHECK_THROWS_AS(parse_analysis_job("everything"), ConfigError);

    std::ifstream log(tmp.path / "r" / "analysis.jsonl");
    std::size_t lines = 0;
    for (std::string l; std::getline(log, l);) ++lines;
    CHECK(lines >= 1 + abl.size() + 3 + 3);
}

TEST_CASE("toy runs write toy records") {
    TempDir tmp("toy");
    ToyConfig c;
    c.steps = 200;
    const ToyTrace t = run_toy(c, tmp.path / "t", 50);
    CHECK(t.loss.size() == 201);
    std::ifstream in(tmp.path / "t" / "metrics.jsonl");
    std::vector<Json> recs;
    for (std::string l; std::getline(in, l);) recs.push_back(Json::parse(l));
    REQUIRE(recs.size() == 6);  // steps 0, 50, ..., 200 plus a summary
    for (const auto& r : recs) CHECK(r["model"] == "toy");
    CHECK(recs.back()["kind"] == "summary");
    CHECK_THROWS_AS(run_toy(c, tmp.path / "u", 0), ConfigError);
}
