#include "optolab/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

namespace optolab {

namespace fs = std::filesystem;

// ---- config ----

void ExperimentConfig::validate() const {
    std::vector<std::string> problems;
    auto collect = [&](auto&& fn) {
        try {
            fn();
        } catch (const ConfigError& e) {
            problems.push_back(e.what());
        }
    };
    collect([&] { world.validate(); });
    collect([&] { model.validate(); });
    if (model.n_labels != world.labels)
        problems.push_back("model.n_labels (" + std::to_string(model.n_labels) + ") must equal world.labels (" +
                           std::to_string(world.labels) + ")");
    if (model.exemplar_dim != world.exemplar_dim)
        problems.push_back("model.exemplar_dim must equal world.exemplar_dim");
    if (batch_size == 0) problems.push_back("batch_size must be positive");
    if (batch_size > 0) {
        if (total_sequences == 0 || total_sequences % batch_size) problems.push_back("total_sequences must be a positive multiple of batch_size");
        if (eval_every == 0 || eval_every % batch_size) problems.push_back("eval_every must be a positive multiple of batch_size");
    }
    if (batch_size > 0 && checkpoint_every % batch_size)
        problems.push_back("checkpoint_every must be a multiple of batch_size");
    if (eval_size == 0) problems.push_back("eval_size must be positive");
    if (!(adam.lr > 0.0)) problems.push_back("adam.lr must be positive");
    if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0))
        problems.push_back("adam betas must lie in [0, 1)");
    if (!(adam.eps > 0.0)) problems.push_back("adam.eps must be positive");
    if (!(stop_loss >= 0.0)) problems.push_back("stop_loss must be non-negative");

    // Donors load at run time; validate the plan against a stand-in of the right shape.
    ClampPlan plan = clamps;
    std::shared_ptr<const ModelParams> stand_in;
    for (auto& c : plan)
        if (c.kind == ClampKind::DonorGraft) {
            if (c.donor_path.empty()) problems.push_back("donor_graft clamp needs a donor path");
            if (!stand_in) {
                ModelParams p;
                p.config = model;
                stand_in = std::make_shared<const ModelParams>(std::move(p));
            }
            c.donor = stand_in;
        }
    collect([&] { validate_plan(plan, model); });

    if (problems.empty()) return;
    std::string msg = "invalid experiment config:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ConfigError(msg);
}

Json to_json(const ExperimentConfig& c) {
    Json clamps = Json::array();
    for (const auto& s : c.clamps) clamps.push_back(to_json(s));
    return Json{{"name", c.name},
                {"world", to_json(c.world)},
                {"model", to_json(c.model)},
                {"adam", to_json(c.adam)},
                {"batch_size", c.batch_size},
                {"total_sequences", c.total_sequences},
                {"eval_every", c.eval_every},
                {"checkpoint_every", c.checkpoint_every},
                {"eval_size", c.eval_size},
                {"eval_seed", c.eval_seed},
                {"head_metrics", c.head_metrics},
                {"stop_loss", c.stop_loss},
                {"clamps", clamps},
                {"seed_init", c.seed_init},
                {"seed_data", c.seed_data},
                {"note", c.note}};
}

namespace {

template <class T>
void read_field(const Json& j, const char* key, T& out) {
    auto it = j.find(key);
    if (it == j.end()) return;
    if constexpr (std::is_same_v<T, std::string>) {
        if (!it->is_string()) throw ConfigError(std::string(key) + ": expected a string, got " + it->dump());
        out = it->template get<std::string>();
    } else if constexpr (std::is_same_v<T, bool>) {
        if (!it->is_boolean()) throw ConfigError(std::string(key) + ": expected true or false, got " + it->dump());
        out = it->template get<bool>();
    } else if constexpr (std::is_floating_point_v<T>) {
        if (!it->is_number()) throw ConfigError(std::string(key) + ": expected a number, got " + it->dump());
        out = it->template get<T>();
    } else {
        if (!it->is_number_unsigned()) throw ConfigError(std::string(key) + ": expected a non-negative integer, got " + it->dump());
        out = it->template get<T>();
    }
}

}  // namespace

ExperimentConfig experiment_from_json(const Json& j) {
    if (!j.is_object()) throw ConfigError("experiment config must be an object");
    static const char* known[] = {"name",       "world",     "model",     "adam",         "batch_size", "total_sequences",
                                  "eval_every", "checkpoint_every", "eval_size", "eval_seed", "head_metrics",
                                  "stop_loss",  "clamps",    "seed_init", "seed_data",    "note"};
    std::string unknown;
    for (auto it = j.begin(); it != j.end(); ++it)
        if (std::find_if(std::begin(known), std::end(known), [&](const char* k) { return it.key() == k; }) == std::end(known))
            unknown += (unknown.empty() ? "" : ", ") + it.key();
    if (!unknown.empty()) throw ConfigError("unknown config keys: " + unknown);

    ExperimentConfig c;
    if (j.contains("world")) from_json(j["world"], c.world);
    if (j.contains("model")) from_json(j["model"], c.model);
    if (!j.contains("model") || !j["model"].contains("n_labels")) c.model.n_labels = c.world.labels;
    if (!j.contains("model") || !j["model"].contains("exemplar_dim")) c.model.exemplar_dim = c.world.exemplar_dim;
    if (j.contains("adam")) from_json(j["adam"], c.adam);
    read_field(j, "name", c.name);
    read_field(j, "batch_size", c.batch_size);
    read_field(j, "total_sequences", c.total_sequences);
    read_field(j, "eval_every", c.eval_every);
    read_field(j, "checkpoint_every", c.checkpoint_every);
    read_field(j, "eval_size", c.eval_size);
    read_field(j, "eval_seed", c.eval_seed);
    read_field(j, "head_metrics", c.head_metrics);
    read_field(j, "stop_loss", c.stop_loss);
    read_field(j, "seed_init", c.seed_init);
    read_field(j, "seed_data", c.seed_data);
    read_field(j, "note", c.note);
    if (j.contains("clamps")) {
        if (!j["clamps"].is_array()) throw ConfigError("clamps: expected an array");
        for (std::size_t i = 0; i < j["clamps"].size(); ++i) {
            ClampSpec s;
            from_json(j["clamps"][i], s, "clamps[" + std::to_string(i) + "]");
            c.clamps.push_back(s);
        }
    }
    return c;
}

ExperimentConfig load_experiment_config(const std::optional<fs::path>& path, const std::vector<std::string>& overrides) {
    Json j = Json::object();
    if (path) {
        std::ifstream in(*path);
        if (!in) throw ConfigError("cannot open config file " + path->string());
        j = Json::parse(in, nullptr, false);
        if (j.is_discarded()) throw ConfigError(path->string() + " is not valid JSON");
    }
    // Overrides address sections that may be absent from a sparse file.
    for (const char* section : {"world", "model", "adam"})
        if (!j.contains(section)) j[section] = Json::object();
    for (const auto& o : overrides) apply_override(j, o);
    ExperimentConfig c = experiment_from_json(j);
    c.validate();
    return c;
}

std::string config_hash(const ExperimentConfig& c) {
    Json j = to_json(c);
    j.erase("note");
    return fnv1a_hex(j.dump());
}

// ---- metrics ----

namespace {

Json split_json(const SplitMetrics& m) { return Json{{"loss", m.loss}, {"accuracy", m.accuracy}}; }

SplitMetrics split_from(const Json& j) { return {j.at("loss").get<double>(), j.at("accuracy").get<double>()}; }

void append_line(std::ofstream& out, const Json& j, const fs::path& path) {
    out << j.dump() << '\n';
    out.flush();
    if (!out) throw std::runtime_error("failed writing " + path.string() + " (disk full?)");
}

// Keeps the lines whose "step" is at most `max_step`.
void truncate_log(const fs::path& path, std::uint64_t max_step) {
    std::ifstream in(path);
    if (!in) return;
    std::vector<std::string> keep;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        Json j = Json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.contains("step")) continue;
        if (j["step"].get<std::uint64_t>() <= max_step) keep.push_back(line);
    }
    in.close();
    std::ofstream out(path, std::ios::trunc);
    for (const auto& l : keep) out << l << '\n';
    if (!out) throw std::runtime_error("failed rewriting " + path.string());
}

std::string step_dir_name(std::uint64_t step) {
    std::ostringstream os;
    os << "step_" << std::setw(10) << std::setfill('0') << step;
    return os.str();
}

std::vector<fs::path> checkpoint_dirs(const fs::path& run) {
    std::vector<fs::path> out;
    const fs::path dir = run / "checkpoints";
    if (!fs::exists(dir)) return out;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_directory() && e.path().filename().string().rfind("step_", 0) == 0 && fs::exists(e.path() / "manifest.json"))
            out.push_back(e.path());
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace

Json to_json(const MetricsRecord& r, const ExperimentConfig& c, const std::string& hash) {
    Json j{{"schema", kMetricsSchema},
           {"model", "transformer"},
           {"config_hash", hash},
           {"name", c.name},
           {"seed_init", c.seed_init},
           {"seed_data", c.seed_data},
           {"step", r.step},
           {"sequences", r.sequences}};
    j["train_batch_loss"] = r.train_batch_loss ? Json(*r.train_batch_loss) : Json(nullptr);
    j["train"] = split_json(r.train);
    j["test_exemplars"] = split_json(r.test_exemplars);
    j["test_relabel"] = split_json(r.test_relabel);
    j["induction"] = r.induction;
    j["prev_token"] = r.prev_token;
    return j;
}

MetricsRecord metrics_from_json(const Json& j) {
    if (!j.contains("schema") || j["schema"] != kMetricsSchema)
        throw std::runtime_error("metrics record has schema " + (j.contains("schema") ? j["schema"].dump() : "none") +
                                 ", expected " + std::to_string(kMetricsSchema));
    MetricsRecord r;
    r.step = j.at("step");
    r.sequences = j.at("sequences");
    if (!j.at("train_batch_loss").is_null()) r.train_batch_loss = j["train_batch_loss"].get<double>();
    r.train = split_from(j.at("train"));
    r.test_exemplars = split_from(j.at("test_exemplars"));
    r.test_relabel = split_from(j.at("test_relabel"));
    r.induction = j.at("induction").get<std::vector<double>>();
    r.prev_token = j.at("prev_token").get<std::vector<double>>();
    return r;
}

std::vector<MetricsRecord> read_metrics(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open metrics log " + path.string());
    std::vector<MetricsRecord> out;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (line.empty()) continue;
        Json j = Json::parse(line, nullptr, false);
        if (j.is_discarded()) throw std::runtime_error(path.string() + ":" + std::to_string(n) + ": not valid JSON");
        try {
            out.push_back(metrics_from_json(j));
        } catch (const Json::exception& e) {
            throw std::runtime_error(path.string() + ":" + std::to_string(n) + ": " + e.what());
        }
    }
    if (out.empty()) throw std::runtime_error("metrics log " + path.string() + " is empty");
    return out;
}

std::vector<TracePoint> loss_trace(const std::vector<MetricsRecord>& records, Split split) {
    std::vector<TracePoint> t;
    for (const auto& r : records) {
        const SplitMetrics& m = split == Split::Train ? r.train : split == Split::TestExemplars ? r.test_exemplars : r.test_relabel;
        t.push_back({static_cast<double>(r.sequences), m.loss});
    }
    return t;
}

// ---- training ----

namespace {

struct EvalSets {
    EvalSet train, test_exemplars, test_relabel;
};

EvalSets make_eval_sets(const World& w, const ExperimentConfig& c) {
    return {make_eval_set(w, Split::Train, c.eval_size, c.eval_seed),
            make_eval_set(w, Split::TestExemplars, c.eval_size, c.eval_seed),
            make_eval_set(w, Split::TestRelabel, c.eval_size, c.eval_seed)};
}

MetricsRecord evaluate_all(const ModelParams& p, const EvalSets& sets, const ExperimentConfig& c, std::uint64_t step) {
    MetricsRecord r;
    r.step = step;
    r.sequences = step * c.batch_size;
    const LossBuilder build = clamp_loss_builder(c.clamps, step);
    auto eval = [&](const EvalSet& s) {
        const StepMetrics m = evaluate_set(p, s, build);
        return SplitMetrics{m.loss, m.accuracy};
    };
    r.train = eval(sets.train);
    r.test_exemplars = eval(sets.test_exemplars);
    r.test_relabel = eval(sets.test_relabel);
    if (c.head_metrics && c.model.n_layers >= 2) {
        HeadMetrics hm = head_metrics(p, sets.train);
        r.induction = std::move(hm.induction);
        r.prev_token = std::move(hm.prev_token);
    }
    return r;
}

ClampPlan load_donors(const ClampPlan& plan) {
    ClampPlan out = plan;
    for (auto& c : out)
        if (c.kind == ClampKind::DonorGraft && !c.donor) c.donor = std::make_shared<const ModelParams>(load_params(c.donor_path));
    return out;
}

}  // namespace

RunResult run_experiment(const ExperimentConfig& in, const fs::path& out, const RunOptions& opt) {
    in.validate();
    ExperimentConfig cfg = in;
    cfg.clamps = load_donors(in.clamps);
    validate_plan(cfg.clamps, cfg.model);
    const std::string hash = config_hash(in);
    const World world = build_world(cfg.world);
    const EvalSets sets = make_eval_sets(world, cfg);

    ModelParams params = init_params(cfg.model, cfg.seed_init);
    AdamState adam = AdamState::zeros_like(params);
    CounterRng data_rng = CounterRng(cfg.seed_data).split(3);
    std::uint64_t start = 0;
    // Training-loss accumulator since the last record; checkpointed so resumes stay bitwise.
    double batch_loss = 0.0;
    std::uint64_t batch_count = 0;

    fs::create_directories(out);
    const fs::path metrics_path = out / "metrics.jsonl", timing_path = out / "timing.jsonl";
    RunResult result;
    result.dir = out;
    bool resumed = false;
    if (opt.resume) {
        auto dirs = checkpoint_dirs(out);
        if (!dirs.empty()) {
            Checkpoint ck = load_checkpoint(dirs.back());
            if (ck.config_hash != hash)
                throw ConfigError("checkpoint " + dirs.back().string() + " was written by a different config (" +
                                  ck.config_hash + " vs " + hash + ")");
            params = std::move(ck.params);
            adam = std::move(ck.adam);
            data_rng = ck.data_rng;
            start = ck.step;
            batch_loss = ck.run_state.value("batch_loss_sum", 0.0);
            batch_count = ck.run_state.value("batch_loss_count", std::uint64_t{0});
            truncate_log(metrics_path, start);
            truncate_log(timing_path, start);
            result.metrics = read_metrics(metrics_path);
            resumed = true;
        }
    }
    if (!resumed) {
        fs::remove(metrics_path);
        fs::remove(timing_path);
        fs::remove_all(out / "checkpoints");
        fs::remove_all(out / "final");
    }
    {
        std::ofstream cj(out / "config.json", std::ios::trunc);
        Json resolved = to_json(in);
        resolved["config_hash"] = hash;
        cj << resolved.dump(2) << '\n';
        if (!cj) throw std::runtime_error("failed writing " + (out / "config.json").string());
    }
    std::ofstream metrics(metrics_path, std::ios::app), timing(timing_path, std::ios::app);
    if (!metrics || !timing) throw std::runtime_error("cannot open logs in " + out.string());

    const auto t0 = std::chrono::steady_clock::now();
    auto emit = [&](MetricsRecord r) {
        append_line(metrics, to_json(r, in, hash), metrics_path);
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        append_line(timing, Json{{"step", r.step}, {"sequences", r.sequences}, {"wall_seconds", secs}}, timing_path);
        if (opt.log)
            *opt.log << cfg.name << " seq=" << r.sequences << " train=" << r.train.loss << "/" << r.train.accuracy
                     << " test_ex=" << r.test_exemplars.accuracy << " relabel=" << r.test_relabel.accuracy << " ("
                     << std::fixed << std::setprecision(0) << secs << "s)" << std::defaultfloat << std::setprecision(6)
                     << std::endl;
        result.metrics.push_back(std::move(r));
    };
    auto checkpoint = [&](const fs::path& dir, std::uint64_t step) {
        Checkpoint ck;
        ck.experiment = to_json(in);
        ck.config_hash = hash;
        ck.step = step;
        ck.params = params;
        ck.adam = adam;
        ck.data_rng = data_rng;
        ck.run_state = Json{{"batch_loss_sum", batch_loss}, {"batch_loss_count", batch_count}};
        save_checkpoint(dir, ck);
    };

    if (!resumed) emit(evaluate_all(params, sets, cfg, 0));
    const std::uint64_t total = cfg.total_steps(), every = cfg.eval_steps(), ck_every = cfg.checkpoint_steps();
    std::uint64_t step = start;
    while (step < total) {
        const SequenceBatch batch = sample_batch(world, Split::Train, cfg.batch_size, data_rng);
        const StepMetrics m = train_step(params, adam, batch, clamp_loss_builder(cfg.clamps, step), cfg.adam);
        ++step;
        batch_loss += m.loss;
        ++batch_count;
        if (step % every == 0 || step == total) {
            MetricsRecord r = evaluate_all(params, sets, cfg, step);
            r.train_batch_loss = batch_loss / static_cast<double>(batch_count);
            batch_loss = 0.0;
            batch_count = 0;
            const bool stop = cfg.stop_loss > 0.0 && r.train.loss < cfg.stop_loss;
            emit(std::move(r));
            if (stop) {
                result.stopped_early = step < total;
                break;
            }
        }
        if (ck_every && step % ck_every == 0) checkpoint(out / "checkpoints" / step_dir_name(step), step);
    }
    checkpoint(out / "final", step);
    result.steps_done = step;
    result.final_params = params;
    return result;
}

// ---- sweeps ----

const char* sweep_kind_name(SweepKind k) {
    switch (k) {
        case SweepKind::Full: return "full";
        case SweepKind::BIsolated: return "b_isolated";
        case SweepKind::CIsolated: return "c_isolated";
        case SweepKind::Composite: return "composite";
    }
    return "?";
}

SweepAxis parse_sweep_axis(const std::string& s) {
    if (s == "classes") return SweepAxis::Classes;
    if (s == "labels") return SweepAxis::Labels;
    throw ConfigError("unknown sweep axis '" + s + "' (expected classes or labels)");
}

SweepKind parse_sweep_kind(const std::string& s) {
    for (SweepKind k : {SweepKind::Full, SweepKind::BIsolated, SweepKind::CIsolated, SweepKind::Composite})
        if (s == sweep_kind_name(k)) return k;
    throw ConfigError("unknown sweep kind '" + s + "'");
}

ExperimentConfig sweep_point(const ExperimentConfig& base, SweepAxis axis, std::size_t value, SweepKind kind, int head) {
    ExperimentConfig c = base;
    if (axis == SweepAxis::Classes) {
        c.world.train_classes = value;
        c.note = "class-sweep values are a substitution; the source figure does not state them";
    } else {
        c.world.labels = value;
        c.model.n_labels = value;
    }
    ClampSpec s;
    s.head = head;
    switch (kind) {
        case SweepKind::Full: break;
        case SweepKind::BIsolated:
            s.kind = ClampKind::Layer1AndCopy;
            c.clamps.push_back(s);
            break;
        case SweepKind::CIsolated:
            s.kind = ClampKind::IhMatch;
            s.strength = 1.0;
            c.clamps.push_back(s);
            break;
        case SweepKind::Composite:
            s.kind = ClampKind::Layer1Full;
            c.clamps.push_back(s);
            break;
    }
    c.name = base.name + "/" + (axis == SweepAxis::Classes ? "classes_" : "labels_") + std::to_string(value) + "/" +
             sweep_kind_name(kind);
    return c;
}

std::vector<SweepPointResult> run_sweep(const ExperimentConfig& base, SweepAxis axis, const std::vector<std::size_t>& values,
                                        const fs::path& out, const std::vector<SweepKind>& kinds, int head,
                                        const RunOptions& opt) {
    if (values.empty() || kinds.empty()) throw ConfigError("sweep needs at least one value and one run kind");
    // Fail fast on configs that can never run.
    for (std::size_t v : values)
        for (SweepKind k : kinds) sweep_point(base, axis, v, k, head).validate();

    fs::create_directories(out);
    std::ofstream summary(out / "sweep.jsonl", std::ios::trunc);
    std::vector<SweepPointResult> results;
    for (std::size_t v : values)
        for (SweepKind k : kinds) {
            SweepPointResult r;
            r.value = v;
            r.kind = k;
            r.dir = out / ((axis == SweepAxis::Classes ? "classes_" : "labels_") + std::to_string(v)) / sweep_kind_name(k);
            try {
                RunResult run = run_experiment(sweep_point(base, axis, v, k, head), r.dir, opt);
                r.learning_time = phase_change_stats(loss_trace(run.metrics)).learning_time;
                r.ok = true;
            } catch (const std::exception& e) {
                r.error = e.what();
            }
            Json j{{"axis", axis == SweepAxis::Classes ? "classes" : "labels"},
                   {"value", v},
                   {"kind", sweep_kind_name(k)},
                   {"dir", r.dir.string()},
                   {"ok", r.ok},
                   {"learning_time", r.learning_time ? Json(*r.learning_time) : Json(nullptr)}};
            if (!r.ok) j["error"] = r.error;
            append_line(summary, j, out / "sweep.jsonl");
            results.push_back(std::move(r));
        }
    return results;
}

// ---- analysis ----

AnalysisJob parse_analysis_job(const std::string& s) {
    for (AnalysisJob j : {AnalysisJob::Ablations, AnalysisJob::Induction, AnalysisJob::Composition, AnalysisJob::Progress,
                          AnalysisJob::Phase, AnalysisJob::ErrorSubsets})
        if (s == analysis_job_name(j)) return j;
    throw ConfigError("unknown analysis job '" + s +
                      "' (expected ablations, induction, composition, progress, phase or error_subsets)");
}

const char* analysis_job_name(AnalysisJob j) {
    switch (j) {
        case AnalysisJob::Ablations: return "ablations";
        case AnalysisJob::Induction: return "induction";
        case AnalysisJob::Composition: return "composition";
        case AnalysisJob::Progress: return "progress";
        case AnalysisJob::Phase: return "phase";
        case AnalysisJob::ErrorSubsets: return "error_subsets";
    }
    return "?";
}

std::vector<AblationSpec> ablation_battery(const ModelParams& params, const EvalSet& set) {
    const int H = static_cast<int>(params.config.heads);
    std::vector<AblationSpec> out{AblationSpec::none()};
    for (int h = 0; h < H; ++h) out.push_back(AblationSpec::knockout({{1, h}}));
    for (int h = 0; h < H; ++h) out.push_back(AblationSpec::all_but_one(1, h));
    out.push_back(AblationSpec::cut_to_output(0));
    out.push_back(AblationSpec::cut_to_output(1));
    std::vector<int> all(static_cast<std::size_t>(H));
    for (int h = 0; h < H; ++h) all[static_cast<std::size_t>(h)] = h;
    out.push_back(AblationSpec::pattern_preserving(all));
    out.push_back(AblationSpec::value_preserving(all));
    const auto pt = identify_pt_heads(prev_token_scores(params, set));
    if (!pt.empty()) {
        out.push_back(AblationSpec::pattern_preserving(pt));
        out.push_back(AblationSpec::value_preserving(pt));
    }
    return out;
}

namespace {

Json opt_json(const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); }

int strongest(const std::vector<double>& v) {
    return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace

std::vector<Json> analyze(const fs::path& target, AnalysisJob job) {
    const bool is_run = fs::exists(target / "config.json");
    const fs::path ck_dir = is_run ? target / "final" : target;
    std::vector<Json> out;

    auto checkpoint_config = [&](const fs::path& dir) {
        Checkpoint ck = load_checkpoint(dir);
        if (!ck.experiment.is_object() || ck.experiment.empty())
            throw CheckpointError("checkpoint " + dir.string() + " carries no experiment config");
        return std::make_pair(experiment_from_json(ck.experiment), std::move(ck));
    };

    if (job == AnalysisJob::Phase) {
        if (!is_run) throw ConfigError("phase analysis needs a run directory with metrics.jsonl");
        const auto records = read_metrics(target / "metrics.jsonl");
        for (Split s : {Split::Train, Split::TestExemplars, Split::TestRelabel}) {
            const PhaseStats st = phase_change_stats(loss_trace(records, s));
            out.push_back({{"job", "phase"},
                           {"split", split_name(s)},
                           {"plateau_span", opt_json(st.plateau_span)},
                           {"plateau_start", opt_json(st.plateau_start)},
                           {"plateau_end", opt_json(st.plateau_end)},
                           {"transition_start", opt_json(st.transition_start)},
                           {"transition_end", opt_json(st.transition_end)},
                           {"transition_duration", opt_json(st.transition_duration)},
                           {"learning_time", opt_json(st.learning_time)},
                           {"exp_fit_r2", opt_json(st.exp_fit_r2)}});
        }
    } else {
        auto [cfg, ck] = checkpoint_config(ck_dir);
        const ModelParams& params = ck.params;
        const World world = build_world(cfg.world);
        const EvalSet set = make_eval_set(world, Split::Train, cfg.eval_size, cfg.eval_seed);
        const std::string hash = config_hash(cfg);
        auto base = [&](const char* name) {
            return Json{{"job", name}, {"config_hash", hash}, {"step", ck.step}, {"sequences", ck.step * cfg.batch_size}};
        };
        switch (job) {
            case AnalysisJob::Ablations:
                for (const auto& spec : ablation_battery(params, set)) {
                    const AblationResult r = ablation_eval(params, set, spec);
                    Json j = base("ablation");
                    j["spec"] = spec.describe();
                    j["split"] = split_name(set.split);
                    j["accuracy"] = r.accuracy;
                    j["loss"] = r.loss;
                    out.push_back(j);
                }
                break;
            case AnalysisJob::Induction: {
                const HeadMetrics hm = head_metrics(params, set);
                Json j = base("induction");
                j["split"] = split_name(set.split);
                j["induction"] = hm.induction;
                j["prev_token"] = hm.prev_token;
                j["pt_heads"] = identify_pt_heads(hm.prev_token);
                j["strongest"] = strongest(hm.induction);
                out.push_back(j);
                break;
            }
            case AnalysisJob::Composition: {
                const Tensor t = composition_table(params);
                const std::size_t H = params.config.heads;
                Json scores = Json::array();
                for (std::size_t i = 0; i < H; ++i) {
                    Json row = Json::array();
                    for (std::size_t k = 0; k < H; ++k)
                        row.push_back({t[(i * H + k) * 3], t[(i * H + k) * 3 + 1], t[(i * H + k) * 3 + 2]});
                    scores.push_back(row);
                }
                Json j = base("composition");
                j["shape"] = t.shape();
                j["axes"] = {"layer0_head", "layer1_head", "slot"};
                j["slots"] = {"Q", "K", "V"};
                j["scores"] = scores;
                out.push_back(j);
                break;
            }
            case AnalysisJob::Progress: {
                if (!is_run) throw ConfigError("progress measures need a run directory with checkpoints");
                const HeadMetrics hm = head_metrics(params, set);
                auto pt = identify_pt_heads(hm.prev_token);
                if (pt.empty())
                    for (int h = 0; h < static_cast<int>(params.config.heads); ++h) pt.push_back(h);
                const std::vector<int> ih{strongest(hm.induction)};
                auto dirs = checkpoint_dirs(target);
                dirs.push_back(ck_dir);
                for (const auto& d : dirs) {
                    Checkpoint c = load_checkpoint(d);
                    const std::vector<ModelParams> one{c.params};
                    Json j = base("progress");
                    j["step"] = c.step;
                    j["sequences"] = c.step * cfg.batch_size;
                    j["pt_heads"] = pt;
                    j["ih_head"] = ih[0];
                    j["perfect_prev_token_loss"] = progress_vs_clamping(one, set, ProgressMeasure::PerfectPrevToken, pt)[0];
                    j["perfect_induction_loss"] = progress_vs_clamping(one, set, ProgressMeasure::PerfectInduction, ih)[0];
                    j["plain_loss"] = evaluate_set(c.params, set, plain_loss).loss;
                    out.push_back(j);
                }
                break;
            }
            case AnalysisJob::ErrorSubsets: {
                const HeadMetrics hm = head_metrics(params, set);
                const int top = strongest(hm.induction);
                const AblationSpec b = AblationSpec::all_but_one(1, top);
                for (int h = 0; h < static_cast<int>(params.config.heads); ++h) {
                    if (h == top) continue;
                    Json j = base("error_subset");
                    j["base"] = b.describe();
                    j["probe"] = AblationSpec::all_but_one(1, h).describe();
                    try {
                        std::size_t n = 0;
                        j["accuracy"] = error_subset_accuracy(params, set, b, AblationSpec::all_but_one(1, h), &n);
                        j["subset_size"] = n;
                    } catch (const std::runtime_error& e) {
                        j["accuracy"] = nullptr;
                        j["subset_size"] = 0;
                        j["error"] = e.what();
                    }
                    out.push_back(j);
                }
                AblationSpec perfect = b;
                perfect.perfect_match_heads = {top};
                const AblationResult r = ablation_eval(params, set, perfect);
                Json j = base("error_subset");
                j["base"] = perfect.describe();
                j["errors"] = static_cast<std::size_t>(std::count(r.correct.begin(), r.correct.end(), 0));
                j["set_size"] = set.size();
                out.push_back(j);
                break;
            }
            case AnalysisJob::Phase: break;
        }
    }
    if (is_run) {
        std::ofstream log(target / "analysis.jsonl", std::ios::app);
        for (const auto& j : out) append_line(log, j, target / "analysis.jsonl");
    }
    return out;
}

// ---- toy ----

ToyTrace run_toy(const ToyConfig& in, const fs::path& out, std::uint64_t log_every) {
    if (log_every == 0) throw ConfigError("toy log interval must be positive");
    ToyConfig cfg = resolved(in);
    cfg.record_every = log_every;
    const ToyTrace trace = toy_train(cfg);
    const ToyProgress pm = toy_progress_measures(trace.iterates, cfg.truth);
    const std::string hash = fnv1a_hex(to_json(cfg).dump());

    fs::create_directories(out);
    {
        std::ofstream cj(out / "config.json", std::ios::trunc);
        Json resolved_cfg = to_json(cfg);
        resolved_cfg["config_hash"] = hash;
        cj << resolved_cfg.dump(2) << '\n';
    }
    std::ofstream log(out / "metrics.jsonl", std::ios::trunc);
    for (std::size_t i = 0; i < trace.iterates.size(); ++i) {
        const std::uint64_t step = trace.iterate_steps[i];
        append_line(log,
                    Json{{"schema", kMetricsSchema},
                         {"model", "toy"},
                         {"config_hash", hash},
                         {"step", step},
                         {"loss", trace.loss[step]},
                         {"cosine_distance", opt_json(pm.cosine_distance[i])},
                         {"fixed_bc_loss", pm.fixed_bc_loss[i]}},
                    out / "metrics.jsonl");
    }
    const auto plateau = toy_plateau_length(trace.loss);
    std::optional<double> r2;
    try {
        r2 = toy_log_fit_r2(trace.loss);
    } catch (const std::exception&) {
    }
    append_line(log,
                Json{{"schema", kMetricsSchema},
                     {"model", "toy"},
                     {"config_hash", hash},
                     {"kind", "summary"},
                     {"step", cfg.steps},
                     {"final_loss", trace.loss.back()},
                     {"plateau_length", plateau ? Json(*plateau) : Json(nullptr)},
                     {"log_fit_r2", opt_json(r2)}},
                out / "metrics.jsonl");
    return trace;
}

}  // namespace optolab
