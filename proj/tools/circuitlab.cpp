// circuitlab: command-line front end for the experiment pipeline.
#include "circuitlab/labcli/files.hpp"
#include "circuitlab/labcli/report.hpp"
#include "circuitlab/labcli/runner.hpp"
#include "circuitlab/satcore/conflict.hpp"
#include "circuitlab/tinyformer/snapshot.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <iostream>

using namespace clab;
namespace fs = std::filesystem;

namespace {

enum Exit : int { Ok = 0, Validation = 2, Runtime = 3, Diverged = 4, Integrity = 5 };

struct DataArgs {
    std::string snapshot;
    std::string task = "induction";
    std::size_t n = 100;
    std::uint64_t seed = 0;
};

void add_data_args(CLI::App* app, DataArgs& a)
{
    app->add_option("--snapshot", a.snapshot, "Model snapshot")->required()->check(CLI::ExistingFile);
    app->add_option("--task", a.task, "Task to generate data for")->check(CLI::IsMember(task_names()));
    app->add_option("--n", a.n, "Number of examples")->check(CLI::PositiveNumber);
    app->add_option("--seed", a.seed, "Data seed");
}

Algorithm algorithm_arg(const std::string& s)
{
    try {
        return parse_algorithm(s);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
}

int cmd_pretrain(const std::string& config_path, const std::string& out)
{
    const ExperimentConfig c = load_config(config_path);
    const RunSeeds seeds = derive_seeds(c.seed);
    const RunTasks tasks = resolve_tasks(c);
    TinyFormer model(resolve_model(c, tasks, seeds));
    nlohmann::ordered_json j;
    if (tasks.pretrain) {
        PretrainConfig pc = c.pretrain;
        pc.seed = seeds.pretrain;
        PretrainResult r;
        try {
            r = pretrain(model, generate(*tasks.pretrain, c.n_pretrain, seeds.pretrain_data), pc);
        } catch (const std::runtime_error& e) {
            throw DivergenceError(e.what());
        }
        j["initial_loss"] = r.initial_loss;
        j["final_loss"] = r.final_loss;
        for (const auto& [t, a] : r.task_accuracy) j["task_accuracy"][t] = a;
    }
    const fs::path path = out.empty() ? c.out_dir / "pretrained.snap" : fs::path(out);
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    write_snapshot(model, path);
    j["snapshot"] = path.string();
    j["weights_digest"] = model.weights_digest();
    std::cout << j.dump(2) << '\n';
    return Ok;
}

int cmd_run(const std::string& config_path, const std::string& out, const std::optional<std::uint64_t>& seed, std::size_t jobs,
            bool report)
{
    const std::string text = read_file(config_path);
    ExperimentConfig c = parse_config(text, config_path);
    if (!out.empty()) c.out_dir = out;
    if (seed) c.seed = *seed;
    if (jobs) c.jobs = jobs;
    const auto runs = run_experiment(c, text);
    bool diverged = false;
    for (const auto& r : runs) {
        if (report) export_report(r.dir);
        std::cout << r.dir.string() << '\n';
        for (const auto& s : r.strategies) {
            const auto& t = s.trajectory;
            std::cout << "  " << s.strategy.name() << ": " << t.records.size() << " records";
            if (!t.records.empty()) std::cout << ", t_acc " << t.records.back().t_acc << ", p_acc " << t.records.back().p_acc << ", cc " << t.records.back().cc;
            if (t.diverged) std::cout << ", DIVERGED (" << t.error << ")";
            std::cout << '\n';
        }
        diverged = diverged || r.diverged();
    }
    return diverged ? Diverged : Ok;
}

int cmd_discover(const DataArgs& d, const std::string& alg, const std::string& regime, double sparsity, const std::string& out,
                 const std::string& scores_out, bool gates)
{
    const TinyFormer model = read_snapshot(d.snapshot);
    const ComputationalGraph& g = model.graph();
    const Dataset data = generate(default_spec(d.task), d.n, d.seed);
    DiscoveryConfig dc;
    dc.regime = parse_regime(regime);
    dc.sparsity_target = sparsity;
    dc.seed = d.seed;
    const Algorithm a = algorithm_arg(alg);
    const EdgeScores scores = discover_scores(model, data, a, dc);
    Circuit c = threshold_circuit(g, scores, dc);
    c.dataset_digest = dataset_digest(data);
    c.weights_digest = model.weights_digest();
    LogicalCircuit lc;
    if (gates) {
        DiscoveryConfig ns = dc, dn = dc;
        ns.regime = Regime::Ns;
        dn.regime = Regime::Dn;
        lc = classify_gates(g, threshold_circuit(g, discover_scores(model, data, a, ns), ns), threshold_circuit(g, discover_scores(model, data, a, dn), dn));
    }
    write_circuit(out, g, c, gates ? &lc : nullptr);
    if (!scores_out.empty()) write_file(scores_out, scores_to_json(g, scores));
    std::cout << out << ": " << c.size() << " of " << g.edge_count() << " edges\n";
    return Ok;
}

int cmd_conflict(const std::string& snapshot, const std::string& target, const std::vector<std::string>& perv, const std::string& dimacs)
{
    const TinyFormer model = read_snapshot(snapshot);
    const ComputationalGraph& g = model.graph();
    const auto logical = [&](const std::string& path) {
        LogicalCircuit lc;
        read_circuit(path, g, &lc);
        if (lc.labelled_edges().empty()) throw ConfigError(path + ": circuit has no gate labels (discover --gates)");
        return lc;
    };
    const LogicalCircuit t = logical(target);
    std::vector<LogicalCircuit> p;
    for (const auto& path : perv) p.push_back(logical(path));
    const ConflictResult r = circuit_conflict_detail(g, t, p);
    if (!dimacs.empty()) {
        write_file(dimacs, to_dimacs(r.encoding.cnf));
        write_file(dimacs + ".provenance.json", provenance_to_json(r.encoding.cnf));
    }
    std::cout << "cc " << r.cc << (r.sat ? " (satisfiable)" : "") << '\n';
    return Ok;
}

int cmd_stability(const DataArgs& d, const std::string& alg, std::size_t k, double fraction)
{
    const TinyFormer model = read_snapshot(d.snapshot);
    StabilityConfig sc;
    sc.k_pairs = k;
    sc.subset_fraction = fraction;
    sc.algorithm = algorithm_arg(alg);
    sc.seed = d.seed;
    const StabilityResult r = circuit_stability(model, generate(default_spec(d.task), d.n, d.seed), sc);
    nlohmann::ordered_json j{{"cs", r.all}, {"cs_attn", r.attn}, {"cs_mlp", r.mlp}, {"degenerate_pairs", r.degenerate}};
    std::cout << j.dump(2) << '\n';
    return Ok;
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Circuit evolution laboratory"};
    app.require_subcommand(1);

    std::string config, out, run_dir, alg = "eap", regime = "ns", scores_out, target, dimacs;
    std::optional<std::uint64_t> seed;
    std::size_t jobs = 0, k_pairs = 10;
    double sparsity = 0.95, fraction = 0.2;
    bool gates = false, report = false;
    std::vector<std::string> perv;
    DataArgs data;

    auto* pre = app.add_subcommand("pretrain", "Pretrain the base model of a config");
    pre->add_option("-c,--config", config, "Experiment config (TOML)")->required()->check(CLI::ExistingFile);
    pre->add_option("-o,--out", out, "Snapshot path");

    auto* run = app.add_subcommand("run", "Run an experiment (or sweep)");
    run->add_option("-c,--config", config, "Experiment config (TOML)")->required()->check(CLI::ExistingFile);
    run->add_option("-o,--out", out, "Run directory, overrides out_dir");
    run->add_option("--seed", seed, "Master seed, overrides seed");
    run->add_option("--jobs", jobs, "Concurrent sweep points");
    run->add_flag("--report", report, "Export the report afterwards");

    auto* disc = app.add_subcommand("discover", "Discover a circuit on a snapshot");
    add_data_args(disc, data);
    disc->add_option("--algorithm", alg, "eap, edge_pruning, acdc or exact");
    disc->add_option("--regime", regime, "ns, dn or nsdn");
    disc->add_option("--sparsity", sparsity, "Fraction of edges dropped")->check(CLI::Range(0.0, 0.999999));
    disc->add_option("-o,--out", out, "Circuit file")->required();
    disc->add_option("--scores", scores_out, "Also write the edge scores");
    disc->add_flag("--gates", gates, "Label AND / OR / ADDER gates from Ns and Dn circuits");

    auto* conf = app.add_subcommand("conflict", "Circuit conflict between gate-labelled circuits");
    conf->add_option("--snapshot", data.snapshot, "Model snapshot the circuits belong to")->required()->check(CLI::ExistingFile);
    conf->add_option("--target", target, "Target circuit")->required()->check(CLI::ExistingFile);
    conf->add_option("--perv", perv, "Pervasiveness circuits")->check(CLI::ExistingFile);
    conf->add_option("--dimacs", dimacs, "Write the CNF (plus a provenance sidecar)");

    auto* stab = app.add_subcommand("stability", "Circuit stability of a snapshot on a task");
    add_data_args(stab, data);
    stab->add_option("--algorithm", alg, "eap, edge_pruning, acdc or exact");
    stab->add_option("--k", k_pairs, "Subset pairs")->check(CLI::PositiveNumber);
    stab->add_option("--fraction", fraction, "Subset fraction")->check(CLI::Range(0.0, 0.5));

    auto* rep = app.add_subcommand("report", "Export CSV tables, SVG plots and the comparison table");
    rep->add_option("run_dir", run_dir, "Run directory")->required()->check(CLI::ExistingDirectory);

    auto* ver = app.add_subcommand("verify", "Check a run directory's integrity");
    ver->add_option("run_dir", run_dir, "Run directory")->required()->check(CLI::ExistingDirectory);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? Ok : Validation;
    }

    try {
        if (*pre) return cmd_pretrain(config, out);
        if (*run) return cmd_run(config, out, seed, jobs, report);
        if (*disc) return cmd_discover(data, alg, regime, sparsity, out, scores_out, gates);
        if (*conf) return cmd_conflict(data.snapshot, target, perv, dimacs);
        if (*stab) return cmd_stability(data, alg, k_pairs, fraction);
        if (*rep) {
            const Report r = export_report(run_dir);
            for (const auto& f : r.files) std::cout << f.string() << '\n';
            return Ok;
        }
        if (*ver) {
            const VerifyResult v = verify_run(run_dir);
            for (const auto& p : v.problems) std::cerr << "FAIL " << p << '\n';
            std::cout << v.checks << " checks, " << v.problems.size() << " problems\n";
            return v.ok() ? Ok : Integrity;
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return Validation;
    } catch (const std::invalid_argument& e) {
        std::cerr << "invalid input: " << e.what() << '\n';
        return Validation;
    } catch (const DivergenceError& e) {
        std::cerr << "diverged: " << e.what() << '\n';
        return Diverged;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return Runtime;
    }
    return Ok;
}
