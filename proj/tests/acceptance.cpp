// Acceptance harness: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
#include "circuitlab/labcli/files.hpp"
#include "circuitlab/labcli/report.hpp"
#include "circuitlab/labcli/runner.hpp"
#include "circuitlab/satcore/conflict.hpp"
#include "circuitlab/satcore/solver.hpp"
#include "circuitlab/tinyformer/snapshot.hpp"
#include "fixtures/fixtures.hpp"
#include "fixtures/gates.hpp"
#include "fixtures/oracles.hpp"
#include "fixtures/primitives.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <random>
#include <set>
#include <sstream>

using namespace clab;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string num(double v, int digits = 3)
{
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.*g", digits, v);
    return buf;
}

// 1
Outcome gradient_fidelity()
{
    const auto t0 = Clock::now();
    double worst = 0.0;
    std::string where;
    for (std::uint64_t seed = 0; seed < 100; ++seed)
        for (const auto& [name, err] : fixtures::primitive_grad_errors(seed))
            if (err > worst) {
                worst = err;
                where = name;
            }
    double model_worst = 0.0;
    for (std::uint64_t seed = 0; seed < 3; ++seed)
        model_worst = std::max(model_worst, fixtures::model_grad_check(TinyFormer(fixtures::tiny_config(11 + seed)), fixtures::tiny_pairs()));
    const double secs = seconds_since(t0);
    return {worst <= 1e-4 && model_worst <= 1e-4 && secs < 60.0,
            "primitives worst " + num(worst) + " (" + where + "), model loss " + num(model_worst) + ", " + num(secs) + " s"};
}

// 2
Outcome eap_exactness()
{
    const TinyFormer m = fixtures::affine_model();
    const Dataset d = fixtures::tiny_pairs();
    double worst = 0.0;
    for (const Regime r : {Regime::Ns, Regime::Dn}) {
        DiscoveryConfig cfg;
        cfg.regime = r;
        cfg.tau = 0.0;
        const EapResult res = eap(m, d, cfg);
        const EdgeScores exact = exact_patch_scores(m, d, r, MetricKind::LogitDiff);
        for (std::size_t e = 0; e < exact.size(); ++e) {
            worst = std::max(worst, std::abs(res.per_example.col(static_cast<Index>(e)).mean() - exact.values[e]));
            worst = std::max(worst, std::abs(res.scores.values[e] - std::abs(exact.values[e])));
        }
    }
    return {worst <= 1e-8, "max |eap - exact| " + num(worst) + " over " + std::to_string(m.graph().edge_count()) + " edges, Ns and Dn"};
}

// 3
Outcome acdc_faithfulness()
{
    ModelConfig c = fixtures::tiny_config(21);
    c.n_heads = 1;
    TinyFormer m(c);
    m.mutable_weights().back()[0] *= 4.0;
    const Dataset d = fixtures::tiny_pairs();
    const std::size_t E = m.graph().edge_count();
    int mismatches = 0, runs = 0;
    std::set<std::size_t> sizes;
    for (const Regime r : {Regime::Ns, Regime::Dn, Regime::NsDn})
        for (const double tau : {0.01, 0.1, 1.0}) {
            DiscoveryConfig cfg;
            cfg.regime = r;
            cfg.tau = tau;
            const Circuit got = acdc(m, d, cfg);
            std::vector<char> removed(E, 1);
            for (const int e : got.edges) removed[static_cast<std::size_t>(e)] = 0;
            const auto oracle = fixtures::replay_acdc(m.graph(), tau, [&](const std::vector<char>& rm) {
                double kl = 0.0;
                if (r != Regime::Dn) kl += fixtures::fresh_kl(m, d, Regime::Ns, rm);
                if (r != Regime::Ns) kl += fixtures::fresh_kl(m, d, Regime::Dn, rm);
                return kl;
            });
            mismatches += removed != oracle;
            sizes.insert(got.size());
            ++runs;
        }
    std::string kept;
    for (const auto s : sizes) kept += (kept.empty() ? "" : ",") + std::to_string(s);
    return {E <= 12 && mismatches == 0,
            std::to_string(runs - mismatches) + "/" + std::to_string(runs) + " runs match the replay on " + std::to_string(E) +
                " edges (circuit sizes " + kept + ")"};
}

// 4
Outcome gate_recovery()
{
    const fixtures::GateNetwork net;
    const ComputationalGraph& g = net.graph();
    DiscoveryConfig cfg;
    cfg.tau = 1e-9;
    const Circuit ns = threshold_circuit(g, exact_patch_scores(net, net.dataset(), Regime::Ns, MetricKind::KlToReference), cfg);
    const Circuit dn = threshold_circuit(g, exact_patch_scores(net, net.dataset(), Regime::Dn, MetricKind::KlToReference), cfg);
    const LogicalCircuit got = classify_gates(g, ns, dn);
    const LogicalCircuit want = make_logical_circuit(g, net.planted_labels());
    const bool same = got.labelled_edges() == want.labelled_edges() && got.receiver_gates == want.receiver_gates;
    return {same, std::to_string(got.c_and.size()) + " AND, " + std::to_string(got.c_or.size()) + " OR, " + std::to_string(got.c_adder.size()) +
                      " ADDER edges; planted " + std::to_string(want.c_and.size()) + "/" + std::to_string(want.c_or.size()) + "/" +
                      std::to_string(want.c_adder.size())};
}

// 5
Outcome spearman_correctness()
{
    std::mt19937_64 rng(5);
    std::uniform_int_distribution<int> len(1, 8), val(0, 4);
    int mismatches = 0, ties = 0;
    for (int t = 0; t < 1000; ++t) {
        const int n = len(rng);
        std::vector<double> x(static_cast<std::size_t>(n)), y(static_cast<std::size_t>(n));
        for (auto& v : x) v = val(rng);
        for (auto& v : y) v = val(rng);
        ties += std::set<double>(x.begin(), x.end()).size() < x.size();
        mismatches += spearman_rho(x, y) != fixtures::counting_rho(x, y);
    }
    int identity = 0;
    for (int t = 0; t < 1000; ++t) {
        std::vector<double> x(static_cast<std::size_t>(len(rng)) + 1);
        for (auto& v : x) v = std::normal_distribution<double>()(rng);
        identity += spearman_rho(x, x) != 1.0;
        std::sort(x.begin(), x.end());
        const std::vector<double> rev(x.rbegin(), x.rend());
        identity += spearman_rho(x, rev) != -1.0;
    }
    return {mismatches == 0 && identity == 0 && ties > 0, std::to_string(mismatches) + " oracle mismatches in 1000 trials (" + std::to_string(ties) +
                                                               " with ties), " + std::to_string(identity) + " identity/reversal failures"};
}

// 6
Outcome cd_axioms()
{
    ModelConfig mc;
    mc.n_layers = 2;
    mc.n_heads = 2;
    mc.d_model = 8;
    const ComputationalGraph g = build_graph(mc);
    std::mt19937_64 rng(3);
    std::normal_distribution<double> n01;
    const auto random_scores = [&] {
        std::vector<double> v(g.edge_count());
        for (auto& x : v) x = n01(rng);
        return make_scores(g, v, Regime::Ns, "random");
    };
    int identity = 0, symmetry = 0, triangle = 0;
    for (int t = 0; t < 1000; ++t) {
        const EdgeScores a = random_scores(), b = random_scores(), c = random_scores();
        const double R = 0.5 + std::uniform_real_distribution<double>(0.0, 3.0)(rng);
        for (const auto f : {ClassFilter::All, ClassFilter::Attn, ClassFilter::MLP}) {
            identity += circuit_distance(g, a, a, f, R) != 0.0;
            symmetry += circuit_distance(g, a, b, f, R) != circuit_distance(g, b, a, f, R);
            triangle += circuit_distance(g, a, c, f, R) > circuit_distance(g, a, b, f, R) + circuit_distance(g, b, c, f, R) + 1e-12;
        }
    }
    return {identity + symmetry + triangle == 0, "violations: identity " + std::to_string(identity) + ", symmetry " + std::to_string(symmetry) +
                                                     ", triangle " + std::to_string(triangle) + " over 1000 triples x 3 classes"};
}

// 7
Outcome sat_soundness()
{
    std::mt19937_64 rng(7);
    int status_mismatch = 0, unsat = 0, bad_cores = 0;
    for (int t = 0; t < 500; ++t) {
        const int n = 3 + t % 16;
        const int m = static_cast<int>(4.26 * n) + static_cast<int>(rng() % 5) - 2;
        const CnfFormula f = fixtures::random_cnf(rng, n, m, 3);
        const SatResult r = solve(f);
        const bool truth = fixtures::Table(f).sat();
        status_mismatch += r.sat() != truth || (r.sat() && !f.satisfied_by(r.assignment));
        if (truth) continue;
        ++unsat;
        const auto core = minimal_unsat_core(f);
        bool ok = !fixtures::Table(f, &core).sat();
        for (std::size_t k = 0; ok && k < core.size(); ++k) {
            auto less = core;
            less.erase(less.begin() + static_cast<std::ptrdiff_t>(k));
            ok = fixtures::Table(f, &less).sat();
        }
        bad_cores += !ok;
    }

    ModelConfig mc;
    mc.n_layers = 1;
    mc.n_heads = 2;
    mc.d_model = 8;
    const ComputationalGraph g = build_graph(mc);
    const int U = g.index_of(ComponentId::unembed());
    const int a = g.find_edge(g.index_of(ComponentId::attn(ComponentKind::Wo, 0, 0)), U);
    const int b = g.find_edge(g.index_of(ComponentId::mlp(ComponentKind::Wdown, 0)), U);
    const auto single = [&](int e) { return make_logical_circuit(g, {{e, Gate::And}}); };
    const int direct = circuit_conflict(g, single(a), {single(a)});
    const int disjoint = circuit_conflict(g, single(a), {single(b)});
    return {status_mismatch == 0 && bad_cores == 0 && direct == 2 && disjoint == 0,
            std::to_string(status_mismatch) + " status mismatches in 500 (" + std::to_string(unsat) + " unsat), " + std::to_string(bad_cores) +
                " non-minimal cores, CC direct " + std::to_string(direct) + ", disjoint " + std::to_string(disjoint)};
}

// Reference runs shared by criteria 8 to 11.
struct Reference {
    ExperimentConfig config;
    std::string text;
    fs::path work;
    std::optional<RunResult> first;
    double first_seconds = 0.0;
    std::string error;
};

ExperimentConfig with_seed(ExperimentConfig c, std::uint64_t seed, const fs::path& dir, bool free_only)
{
    c.seed = seed;
    c.out_dir = dir;
    if (free_only) c.strategies = {{StrategyKind::Free, 0}};
    return c;
}

void ensure_first(Reference& ref)
{
    if (ref.first || !ref.error.empty()) return;
    try {
        const auto t0 = Clock::now();
        const ExperimentConfig c = with_seed(ref.config, ref.config.seed, ref.work / "reference_a", false);
        ref.first = run_single(c, c.out_dir, ref.text);
        ref.first_seconds = seconds_since(t0);
        export_report(c.out_dir);
    } catch (const std::exception& e) {
        ref.error = e.what();
    }
}

// 8
Outcome frozen_immutability(Reference& ref)
{
    ensure_first(ref);
    if (!ref.first) return {false, "reference run failed: " + ref.error};
    const TinyFormer base = read_snapshot(ref.first->dir / "snapshots" / "step0.snap");
    std::size_t compared = 0, changed = 0, moved = 0;
    for (const StrategyKind k : {StrategyKind::Mech, StrategyKind::Random}) {
        const StrategyOutcome* o = ref.first->find(k);
        if (!o) return {false, "missing " + to_string(k) + " run"};
        const std::size_t epochs = o->trajectory.epoch_digests.size();
        if (epochs != ref.config.sft.epochs) return {false, to_string(k) + " finished " + std::to_string(epochs) + " epochs"};
        const TinyFormer last = read_snapshot(ref.first->dir / strategy_dir(k) / "snapshots" / ("epoch" + std::to_string(epochs) + ".snap"));
        for (std::size_t v = 0; v < o->mask.frozen.size(); ++v) {
            if (o->mask.is_frozen(v)) {
                ++compared;
                changed += last.weights()[v] != base.weights()[v];
            } else {
                moved += last.weights()[v] != base.weights()[v];
            }
        }
    }
    return {compared > 0 && changed == 0, std::to_string(changed) + " of " + std::to_string(compared) + " frozen components changed after " +
                                              std::to_string(ref.config.sft.epochs) + " epochs (" + std::to_string(moved) + " trainable ones moved)"};
}

// 9
Outcome determinism(Reference& ref)
{
    ensure_first(ref);
    if (!ref.first) return {false, "reference run failed: " + ref.error};
    const ExperimentConfig c = with_seed(ref.config, ref.config.seed, ref.work / "reference_b", false);
    run_single(c, c.out_dir, ref.text);
    int differ = 0, files = 0;
    for (const auto& o : ref.first->strategies) {
        const std::string rel = strategy_dir(o.strategy.kind) + "/metrics.jsonl";
        ++files;
        differ += read_file(ref.first->dir / rel) != read_file(c.out_dir / rel);
    }
    return {differ == 0 && ref.first_seconds <= 900.0, std::to_string(files - differ) + "/" + std::to_string(files) +
                                                            " metrics.jsonl byte-identical; reference run " + num(ref.first_seconds) + " s (limit 900)"};
}

// 10
Outcome trend(Reference& ref, int seeds)
{
    ensure_first(ref);
    if (!ref.first) return {false, "reference run failed: " + ref.error};
    int cd = 0, cs = 0, done = 0;
    std::ostringstream per;
    for (int s = 0; s < seeds; ++s) {
        Trajectory t;
        if (s == 0) {
            t = ref.first->find(StrategyKind::Free)->trajectory;
        } else {
            const ExperimentConfig c = with_seed(ref.config, ref.config.seed + static_cast<std::uint64_t>(s), ref.work / ("free_seed" + std::to_string(s)), true);
            t = run_single(c, c.out_dir, ref.text).find(StrategyKind::Free)->trajectory;
        }
        if (t.diverged || t.records.empty()) {
            per << " seed" << s << ":diverged";
            continue;
        }
        ++done;
        const MetricRecord& last = t.records.back();
        const auto [fa, fm] = epoch_mean_cs(t, 1);
        const auto [la, lm] = epoch_mean_cs(t, last.epoch);
        const double first_cs = 0.5 * (fa + fm), last_cs = 0.5 * (la + lm);
        cd += last.cd_attn > last.cd_mlp;
        cs += last_cs > first_cs;
        per << " seed" << s << ":cd " << num(last.cd_attn) << ">" << num(last.cd_mlp) << " cs " << num(first_cs) << "->" << num(last_cs);
    }
    const int need = seeds - seeds / 5;
    return {cd >= need && cs >= need, "CD_Attn > CD_MLP in " + std::to_string(cd) + "/" + std::to_string(seeds) + ", CS rises in " +
                                          std::to_string(cs) + "/" + std::to_string(seeds) + ";" + per.str()};
}

// 11
Outcome harness_parity(Reference& ref)
{
    ensure_first(ref);
    if (!ref.first) return {false, "reference run failed: " + ref.error};
    const auto* mech = ref.first->find(StrategyKind::Mech);
    const auto* rnd = ref.first->find(StrategyKind::Random);
    const auto* fut = ref.first->find(StrategyKind::FutureMech);
    const auto* free = ref.first->find(StrategyKind::Free);
    if (!mech || !rnd || !fut || !free) return {false, "reference run lacks a strategy"};
    const bool budgets = mech->strategy.budget == rnd->strategy.budget && mech->attn_trainable + mech->mlp_trainable == mech->strategy.budget &&
                         mech->attn_trainable == rnd->attn_trainable && mech->mlp_trainable == rnd->mlp_trainable;

    const std::string table = read_file(ref.first->dir / "report" / "comparison.md");
    int rows = 0;
    for (const char* s : {"| Free |", "| Mech |", "| Random |", "| FutureMech |"}) rows += table.find(s) != std::string::npos;
    const std::string svg = read_file(ref.first->dir / "report" / "trajectories.svg");
    int series = 0;
    for (const char* s : {"\"Free\"", "\"Mech\"", "\"Random\"", "\"FutureMech\""}) series += svg.find(std::string("data-strategy=") + s) != std::string::npos;

    const std::string free_digest = free->trajectory.records.back().scores_digest;
    const TinyFormer base = read_snapshot(ref.first->dir / "snapshots" / "step0.snap");
    const EdgeScores on_disk = scores_from_json(base.graph(), read_file(ref.first->dir / "free" / "final_scores.json"));
    const bool provenance = fut->mask.source_digest == free_digest && scores_digest(on_disk) == free_digest;
    const VerifyResult v = verify_run(ref.first->dir);

    std::ostringstream d;
    d << "budget " << mech->strategy.budget << " Mech " << mech->attn_trainable << "A+" << mech->mlp_trainable << "M, Random " << rnd->attn_trainable
      << "A+" << rnd->mlp_trainable << "M; table rows " << rows << "/4, plot series " << series << "/4; FutureMech digest "
      << (provenance ? "matches" : "DIFFERS") << "; verify " << v.checks << " checks, " << v.problems.size() << " problems";
    return {budgets && rows == 4 && series == 4 && provenance && v.ok(), d.str()};
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Acceptance criteria"};
    std::string config, work = "acceptance_runs";
    std::vector<int> only;
    int seeds = 5;
    app.add_option("--config", config, "Reference experiment config")->required()->check(CLI::ExistingFile);
    app.add_option("--work", work, "Scratch directory for runs");
    app.add_option("--only", only, "Criteria to run");
    app.add_option("--seeds", seeds, "Master seeds for the trend criterion")->check(CLI::PositiveNumber);
    CLI11_PARSE(app, argc, argv);

    Reference ref;
    try {
        ref.text = read_file(config);
        ref.config = parse_config(ref.text, config);
    } catch (const std::exception& e) {
        std::cerr << e.what() << '\n';
        return 2;
    }
    ref.work = work;
    fs::remove_all(ref.work);
    fs::create_directories(ref.work);

    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"gradient fidelity", gradient_fidelity},
        {"EAP exact on affine fixture", eap_exactness},
        {"ACDC matches exhaustive replay", acdc_faithfulness},
        {"gate recovery", gate_recovery},
        {"Spearman correctness", spearman_correctness},
        {"CD axioms", cd_axioms},
        {"SAT soundness and CC fixtures", sat_soundness},
        {"frozen immutability", [&] { return frozen_immutability(ref); }},
        {"determinism and runtime", [&] { return determinism(ref); }},
        {"trend reproduction", [&] { return trend(ref, seeds); }},
        {"strategy harness parity", [&] { return harness_parity(ref); }},
    };

    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int id = static_cast<int>(i + 1);
        if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
        Outcome o;
        const auto t0 = Clock::now();
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        failed += !o.pass;
        std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << " " << criteria[i].first << ": " << o.detail << " [" << num(seconds_since(t0))
                  << " s]" << std::endl;
    }
    return failed == 0 ? 0 : 1;
}
