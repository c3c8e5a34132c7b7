// optolab: train, sweep, analyze and toy verbs over run directories.
// Exit codes: 0 success, 2 config error, 3 numerical failure, 1 anything else.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

#include "optolab/experiment.hpp"

using namespace optolab;
namespace fs = std::filesystem;

namespace {

struct Common {
    std::string config;
    std::vector<std::string> overrides;
    std::string out;
    std::optional<std::uint64_t> seed_init, seed_data;
    bool quiet = false;
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--config", c.config, "JSON config file")->check(CLI::ExistingFile);
    cmd->add_option("overrides", c.overrides, "dotted-key overrides, e.g. world.labels=15");
    cmd->add_option("--out", c.out, "output directory")->required();
    cmd->add_option("--seed-init", c.seed_init, "parameter init seed");
    cmd->add_option("--seed-data", c.seed_data, "training data seed");
    cmd->add_flag("-q,--quiet", c.quiet, "no progress lines");
}

ExperimentConfig experiment(const Common& c) {
    std::vector<std::string> ov = c.overrides;
    if (c.seed_init) ov.push_back("seed_init=" + std::to_string(*c.seed_init));
    if (c.seed_data) ov.push_back("seed_data=" + std::to_string(*c.seed_data));
    return load_experiment_config(c.config.empty() ? std::nullopt : std::optional<fs::path>(c.config), ov);
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    for (std::string item; std::getline(ss, item, ',');)
        if (!item.empty()) out.push_back(item);
    return out;
}

ToyConfig toy_config(const Common& c) {
    Json j = Json::object();
    if (!c.config.empty()) {
        std::ifstream in(c.config);
        j = Json::parse(in, nullptr, false);
        if (j.is_discarded()) throw ConfigError(c.config + " is not valid JSON");
    }
    for (const auto& o : c.overrides) apply_override(j, o);
    if (c.seed_init) j["seed"] = *c.seed_init;
    ToyConfig cfg;
    from_json(j, cfg, "toy");
    cfg.validate();
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Induction-head emergence experiments"};
    app.require_subcommand(1);

    Common train_opts;
    bool resume = false;
    auto* train = app.add_subcommand("train", "train one model");
    add_common(train, train_opts);
    train->add_flag("--resume", resume, "continue from the latest checkpoint in --out");

    Common sweep_opts;
    std::string axis;
    std::string values_arg, kinds_arg = "full,b_isolated,c_isolated,composite";
    int head = 3;
    auto* sweep = app.add_subcommand("sweep", "data-dependence sweep");
    add_common(sweep, sweep_opts);
    sweep->add_option("--axis", axis, "classes or labels")->required();
    sweep->add_option("--values", values_arg, "comma-separated axis values, e.g. 5,10,15")->required();
    sweep->add_option("--kinds", kinds_arg, "comma-separated run kinds")->capture_default_str();
    sweep->add_option("--head", head, "layer-1 head used by the isolating clamps")->capture_default_str();

    std::string target;
    std::vector<std::string> jobs;
    auto* analyze_cmd = app.add_subcommand("analyze", "analysis jobs on a run or checkpoint directory");
    analyze_cmd->add_option("target", target, "run or checkpoint directory")->required()->check(CLI::ExistingDirectory);
    analyze_cmd->add_option("--job", jobs,
                            "ablations, induction, composition, progress, phase, error_subsets")
        ->required();

    Common toy_opts;
    std::uint64_t log_every = 10;
    auto* toy = app.add_subcommand("toy", "train the toy model");
    add_common(toy, toy_opts);
    toy->add_option("--log-every", log_every, "steps between records")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*train) {
            const ExperimentConfig cfg = experiment(train_opts);
            RunOptions opt{resume, train_opts.quiet ? nullptr : &std::cerr};
            const RunResult r = run_experiment(cfg, train_opts.out, opt);
            const auto& last = r.metrics.back();
            std::cout << "done: " << r.steps_done << " steps, train acc " << last.train.accuracy << ", test_exemplars acc "
                      << last.test_exemplars.accuracy << ", test_relabel acc " << last.test_relabel.accuracy << "\n";
        } else if (*sweep) {
            const ExperimentConfig cfg = experiment(sweep_opts);
            std::vector<SweepKind> ks;
            for (const auto& k : split_list(kinds_arg)) ks.push_back(parse_sweep_kind(k));
            std::vector<std::size_t> values;
            for (const auto& v : split_list(values_arg)) {
                std::size_t used = 0;
                unsigned long long n = 0;
                try {
                    n = std::stoull(v, &used);
                } catch (const std::exception&) {
                }
                if (used == 0 || used != v.size()) throw ConfigError("sweep value '" + v + "' is not a non-negative integer");
                values.push_back(static_cast<std::size_t>(n));
            }
            RunOptions opt{false, sweep_opts.quiet ? nullptr : &std::cerr};
            const auto results = run_sweep(cfg, parse_sweep_axis(axis), values, sweep_opts.out, ks, head, opt);
            bool all_ok = true;
            for (const auto& r : results) {
                std::cout << axis << "=" << r.value << " " << sweep_kind_name(r.kind) << ": ";
                if (!r.ok) std::cout << "FAILED (" << r.error << ")";
                else if (r.learning_time) std::cout << "learning time " << *r.learning_time;
                else std::cout << "no learning time";
                std::cout << "\n";
                all_ok = all_ok && r.ok;
            }
            return all_ok ? 0 : 1;
        } else if (*analyze_cmd) {
            std::vector<AnalysisJob> parsed;
            for (const auto& j : jobs) parsed.push_back(parse_analysis_job(j));
            for (AnalysisJob j : parsed)
                for (const auto& rec : analyze(target, j)) std::cout << rec.dump() << "\n";
        } else if (*toy) {
            const ToyTrace t = run_toy(toy_config(toy_opts), toy_opts.out, log_every);
            std::cout << "done: final loss " << t.loss.back() << "\n";
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
