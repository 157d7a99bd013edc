#include "circuitlab/circuitfind/discovery.hpp"
#include "fixtures/fixtures.hpp"
#include "fixtures/gates.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

using namespace clab;

namespace {

TinyFormer acdc_fixture()
{
    ModelConfig c = fixtures::tiny_config(21);
    c.n_heads = 1;
    TinyFormer m(c);
    m.mutable_weights().back()[0] *= 4.0;  // sharper output distribution
    return m;
}

std::vector<char> removed_of(const Circuit& c, std::size_t E)
{
    std::vector<char> removed(E, 1);
    for (const int e : c.edges) removed[static_cast<std::size_t>(e)] = 0;
    return removed;
}

DiscoveryConfig with_tau(Regime r, double tau)
{
    DiscoveryConfig c;
    c.regime = r;
    c.tau = tau;
    return c;
}

}  // namespace

TEST_CASE("acdc extremes")
{
    const TinyFormer m = acdc_fixture();
    const Dataset d = fixtures::tiny_pairs();
    CHECK(m.graph().edge_count() == 12);
    CHECK(acdc(m, d, with_tau(Regime::Ns, std::numeric_limits<double>::infinity())).edges.empty());

    // With tau = 0 an edge is dropped only when removing it lowers the KL.
    const fixtures::GateNetwork net;
    const Circuit all = acdc(net, net.dataset(), with_tau(Regime::Ns, 0.0));
    for (std::size_t i = 0; i < all.edges.size(); ++i) CHECK(all.scores[i] >= 0.0);
    CHECK_THROWS(acdc(m, d, with_tau(Regime::Ns, -1.0)));
    CHECK_THROWS(acdc(m, Dataset{}, with_tau(Regime::Ns, 0.1)));
}

TEST_CASE("acdc keeps everything when every delta is positive")
{
    // Single-path network: the only edge into the output carries all signal,
    // and patching any edge on that path strictly increases the KL.
    fixtures::GateNetwork net;
    const Circuit c = acdc(net, net.dataset(), with_tau(Regime::Ns, 0.0));
    // Edges into B_add and B_add's own output always move the logit.
    for (const auto& [s, r] : {std::pair{0, 5}, std::pair{0, 6}, std::pair{5, 9}, std::pair{6, 9}, std::pair{9, 10}})
        CHECK(c.contains(net.graph().find_edge(s, r)));
}

TEST_CASE("acdc matches an exhaustive replay")
{
    const TinyFormer m = acdc_fixture();
    const Dataset d = fixtures::tiny_pairs();
    for (const Regime r : {Regime::Ns, Regime::Dn, Regime::NsDn})
        for (const double tau : {0.0, 0.001, 0.01, 0.1, 1.0}) {
            const Circuit c = acdc(m, d, with_tau(r, tau));
            const auto oracle = fixtures::replay_acdc(m.graph(), tau, [&](const std::vector<char>& removed) {
                double kl = 0.0;
                if (r != Regime::Dn) kl += fixtures::fresh_kl(m, d, Regime::Ns, removed);
                if (r != Regime::Ns) kl += fixtures::fresh_kl(m, d, Regime::Dn, removed);
                return kl;
            });
            CHECK_MESSAGE(removed_of(c, m.graph().edge_count()) == oracle, to_string(r) << " tau " << tau);
        }

    const fixtures::GateNetwork net;
    for (const Regime r : {Regime::Ns, Regime::Dn})
        for (const double tau : {0.01, 0.1, 1.0}) {
            const Circuit c = acdc(net, net.dataset(), with_tau(r, tau));
            const auto oracle = fixtures::replay_acdc(net.graph(), tau, [&](const std::vector<char>& removed) {
                return fixtures::gate_network_kl(net, r, removed);
            });
            CHECK(removed_of(c, net.graph().edge_count()) == oracle);
        }
}

TEST_CASE("acdc is deterministic")
{
    const TinyFormer m = acdc_fixture();
    const Dataset d = fixtures::tiny_pairs();
    const Circuit a = acdc(m, d, with_tau(Regime::Ns, 0.01));
    const Circuit b = acdc(m, d, with_tau(Regime::Ns, 0.01));
    CHECK(a.edges == b.edges);
    CHECK(a.scores == b.scores);
}

TEST_CASE("gate network: closed form agrees with patched forward")
{
    const fixtures::GateNetwork net;
    const Dataset d = net.dataset(2);
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<char> removed(net.graph().edge_count());
        for (auto& x : removed) x = static_cast<char>(rng() & 1);
        for (const Regime side : {Regime::Ns, Regime::Dn})
            CHECK(fixtures::fresh_kl(net, d, side, removed) == doctest::Approx(fixtures::gate_network_kl(net, side, removed)).epsilon(1e-12));
    }
}

TEST_CASE("regime duality and gate recovery on the planted network")
{
    const fixtures::GateNetwork net;
    const ComputationalGraph& g = net.graph();
    DiscoveryConfig cfg;
    cfg.tau = 1e-9;
    const Circuit ns = threshold_circuit(g, exact_patch_scores(net, net.dataset(), Regime::Ns, MetricKind::KlToReference), cfg);
    const Circuit dn = threshold_circuit(g, exact_patch_scores(net, net.dataset(), Regime::Dn, MetricKind::KlToReference), cfg);
    const int and_edge = g.find_edge(1, 7), or_edge = g.find_edge(3, 8), add_edge = g.find_edge(5, 9);
    CHECK(ns.contains(and_edge));
    CHECK(ns.contains(add_edge));
    CHECK_FALSE(ns.contains(or_edge));
    CHECK(dn.contains(or_edge));
    CHECK(dn.contains(add_edge));
    CHECK_FALSE(dn.contains(and_edge));

    const LogicalCircuit got = classify_gates(g, ns, dn);
    const LogicalCircuit want = make_logical_circuit(g, net.planted_labels());
    CHECK(got.c_and == want.c_and);
    CHECK(got.c_or == want.c_or);
    CHECK(got.c_adder == want.c_adder);
    CHECK(got.receiver_gates.at(7) == Gate::And);
    CHECK(got.receiver_gates.at(8) == Gate::Or);
    CHECK(got.receiver_gates.at(9) == Gate::Adder);
}

TEST_CASE("classify_gates set relations")
{
    const fixtures::GateNetwork net;
    const ComputationalGraph& g = net.graph();
    Circuit a, b;
    a.graph_digest = b.graph_digest = g.digest();
    a.edges = {1, 2};
    b.edges = {2, 3};
    LogicalCircuit lc = classify_gates(g, a, b);
    CHECK(lc.c_and == std::vector<int>{1});
    CHECK(lc.c_or == std::vector<int>{3});
    CHECK(lc.c_adder == std::vector<int>{2});
    lc = classify_gates(g, a, a);
    CHECK(lc.c_adder == a.edges);
    CHECK(lc.c_and.empty());
    b.edges = {4, 5};
    CHECK(classify_gates(g, a, b).c_adder.empty());
    b.graph_digest = "other";
    CHECK_THROWS(classify_gates(g, a, b));
}

TEST_CASE("threshold_circuit")
{
    const fixtures::GateNetwork net;
    const ComputationalGraph& g = net.graph();
    std::vector<double> v(g.edge_count());
    for (std::size_t e = 0; e < v.size(); ++e) v[e] = 0.1 * static_cast<double>(e + 1);
    EdgeScores s = make_scores(g, v, Regime::Ns, "manual");
    DiscoveryConfig cfg;
    cfg.tau = 0.05;
    CHECK(threshold_circuit(g, s, cfg).size() == g.edge_count());
    cfg.tau.reset();
    cfg.sparsity_target = 0.5;
    const Circuit half = threshold_circuit(g, s, cfg);
    CHECK(half.size() <= g.edge_count() / 2);
    CHECK(half.size() == 7);

    // Ties: two equal top scores, budget one edge -> the smaller edge wins.
    std::vector<double> tie(g.edge_count(), 0.0);
    tie[4] = 1.0;
    tie[2] = -1.0;
    cfg.sparsity_target = 1.0 - 1.0 / static_cast<double>(g.edge_count()) ;
    const Circuit one = threshold_circuit(g, make_scores(g, tie, Regime::Ns, "manual"), cfg);
    CHECK(one.edges == std::vector<int>{2});
    cfg.sparsity_target = 0.99;
    CHECK_THROWS(threshold_circuit(g, s, cfg));
    cfg.tau = 0.1;
    CHECK_THROWS(threshold_circuit(g, s, cfg));
}

TEST_CASE("threshold_circuit with 12 scored edges")
{
    const TinyFormer m = acdc_fixture();
    std::vector<double> v(12);
    std::iota(v.begin(), v.end(), 1.0);
    DiscoveryConfig cfg;
    cfg.sparsity_target = 0.5;
    CHECK(threshold_circuit(m.graph(), make_scores(m.graph(), v, Regime::Ns, "manual"), cfg).size() <= 6);
}

TEST_CASE("localize_components")
{
    ModelConfig c = fixtures::tiny_config();
    c.n_layers = 2;
    const TinyFormer m(c);
    const ComputationalGraph& g = m.graph();
    const std::size_t n_el = eligible_count(g);
    std::vector<double> v(g.edge_count(), 0.0);
    CHECK(localize_components(g, make_scores(g, v, Regime::Ns, "x"), n_el).nodes.size() == n_el);
    CHECK_THROWS(localize_components(g, make_scores(g, v, Regime::Ns, "x"), n_el + 1));

    // One nonzero edge between two eligible components.
    const int e = g.find_edge(g.index_of(ComponentId::attn(ComponentKind::Wo, 0, 1)), g.index_of(ComponentId::mlp(ComponentKind::Wup, 1)));
    v[static_cast<std::size_t>(e)] = 2.5;
    const Localization loc = localize_components(g, make_scores(g, v, Regime::Ns, "x"), 2);
    std::vector<int> want{g.edges()[static_cast<std::size_t>(e)].sender, g.edges()[static_cast<std::size_t>(e)].receiver};
    std::vector<int> got = loc.nodes;
    std::sort(got.begin(), got.end());
    CHECK(got == want);

    // Brute-force ranking on random scores.
    std::mt19937_64 rng(9);
    std::normal_distribution<double> nd;
    for (auto& x : v) x = nd(rng);
    const EdgeScores s = make_scores(g, v, Regime::Ns, "x");
    std::vector<std::pair<double, int>> brute;
    for (std::size_t i = 0; i < g.node_count(); ++i) {
        if (!is_eligible(g.nodes()[i])) continue;
        double sum = 0.0;
        for (std::size_t k = 0; k < g.edge_count(); ++k)
            if (g.edges()[k].sender == static_cast<int>(i) || g.edges()[k].receiver == static_cast<int>(i)) sum += std::abs(v[k]);
        brute.emplace_back(-sum, static_cast<int>(i));
    }
    std::sort(brute.begin(), brute.end());
    const Localization top = localize_components(g, s, 16);
    for (std::size_t k = 0; k < 16; ++k) CHECK(top.nodes[k] == brute[k].second);
    CHECK(top.attn_count + top.mlp_count == 16);
}

TEST_CASE("eap: zero when clean equals corrupted")
{
    const TinyFormer m(fixtures::tiny_config());
    Dataset d = fixtures::tiny_pairs();
    DiscoveryConfig cfg;
    cfg.tau = 0.0;
    cfg.regime = Regime::NsDn;
    // Bypass validation by scoring equal-token pairs directly.
    Dataset same = d;
    for (auto& p : same) p.corrupted = p.clean;
    CHECK_THROWS(eap(m, same, cfg));
    // Senders whose activations agree across runs score exactly 0: position
    // embeddings only differ where tokens do, so check with a donor-equal copy
    // of a pair that differs in one token far from any effect.
    const EapResult r = eap(m, d, cfg);
    CHECK(r.per_example.rows() == static_cast<Index>(d.size()));
    for (const double x : r.scores.values) CHECK(std::isfinite(x));
}

TEST_CASE("eap is exact on the affine fixture")
{
    const TinyFormer m = fixtures::affine_model();
    const Dataset d = fixtures::tiny_pairs();
    for (const Regime r : {Regime::Ns, Regime::Dn}) {
        DiscoveryConfig cfg;
        cfg.regime = r;
        cfg.tau = 0.0;
        const EapResult res = eap(m, d, cfg);
        const EdgeScores exact = exact_patch_scores(m, d, r, MetricKind::LogitDiff);
        double worst = 0.0;
        for (std::size_t e = 0; e < exact.size(); ++e) {
            // eap reports |mean|; compare against the signed mean of the per-example scores as well.
            const double signed_mean = res.per_example.col(static_cast<Index>(e)).mean();
            worst = std::max(worst, std::abs(signed_mean - exact.values[e]));
            CHECK_MESSAGE(std::abs(res.scores.values[e] - std::abs(exact.values[e])) <= 1e-8, m.graph().edge_name(static_cast<int>(e)) << " " << signed_mean << " vs " << exact.values[e]);
        }
        MESSAGE(to_string(r) << " worst |eap - exact| = " << worst);
        CHECK(worst <= 1e-8);
    }
}

TEST_CASE("eap scores of an unchanged sender are exactly zero")
{
    const TinyFormer m = fixtures::single_path_model();
    DiscoveryConfig cfg;
    cfg.regime = Regime::NsDn;
    cfg.tau = 0.0;
    const EapResult r = eap(m, fixtures::tiny_pairs(), cfg);
    const ComputationalGraph& g = m.graph();
    // Wo and Wdown are zero matrices, so their outputs match across runs.
    for (std::size_t e = 0; e < g.edge_count(); ++e) {
        const auto k = g.node(g.edges()[e].sender).kind;
        if (k == ComponentKind::Wo || k == ComponentKind::Wdown) CHECK(r.scores.values[e] == 0.0);
    }
}

TEST_CASE("hard concrete sampling")
{
    EdgePruningConfig c;
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(1e-12, 1.0 - 1e-12);
    std::normal_distribution<double> la(0.0, 5.0);
    for (int i = 0; i < 10000; ++i) {
        const double z = hard_concrete_sample(la(rng), u(rng), c);
        CHECK(z >= 0.0);
        CHECK(z <= 1.0);
    }
    CHECK(hard_concrete_mean(10.0, c) > 0.99);
    CHECK(hard_concrete_mean(-10.0, c) < 0.01);
    EdgePruningConfig bad;
    bad.gamma = 0.1;
    CHECK_THROWS(bad.validate());
}

TEST_CASE("edge pruning without penalty keeps masks open")
{
    const TinyFormer m(fixtures::tiny_config());
    EdgePruningConfig c;
    c.penalty = 0.0;
    c.steps = 30;
    const EdgeScores s = edge_pruning(m, fixtures::tiny_pairs(), c, Regime::Ns);
    for (const double v : s.values) CHECK(v >= 0.5);
}

TEST_CASE("edge pruning ranks the single signal edge first")
{
    const TinyFormer m = fixtures::single_path_model();
    const Dataset d = fixtures::single_path_pairs();
    const ComputationalGraph& g = m.graph();
    const int signal = g.find_edge(g.index_of(ComponentId::embed()), g.index_of(ComponentId::unembed()));
    const EdgeScores exact = exact_patch_scores(m, d, Regime::Ns, MetricKind::KlToReference);
    for (std::size_t e = 0; e < exact.size(); ++e)
        if (static_cast<int>(e) != signal) CHECK(exact.values[e] == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(exact.values[static_cast<std::size_t>(signal)] > 1e-3);

    EdgePruningConfig c;
    c.steps = 150;
    c.penalty = 0.05;
    for (const Regime r : {Regime::Ns, Regime::NsDn}) {
        const EdgeScores s = edge_pruning(m, d, c, r);
        const auto best = std::max_element(s.values.begin(), s.values.end()) - s.values.begin();
        CHECK(best == signal);
        for (std::size_t e = 0; e < s.size(); ++e)
            if (static_cast<int>(e) != signal) CHECK(s.values[e] < s.values[static_cast<std::size_t>(signal)]);
    }
}

TEST_CASE("circuit file round trip")
{
    const fixtures::GateNetwork net;
    const ComputationalGraph& g = net.graph();
    DiscoveryConfig cfg;
    cfg.tau = 1e-9;
    Circuit ns = threshold_circuit(g, exact_patch_scores(net, net.dataset(), Regime::Ns, MetricKind::KlToReference), cfg);
    Circuit dn = threshold_circuit(g, exact_patch_scores(net, net.dataset(), Regime::Dn, MetricKind::KlToReference), cfg);
    ns.dataset_digest = "abc";
    const LogicalCircuit lc = classify_gates(g, ns, dn);
    const std::string text = circuit_to_json(g, ns, &lc);
    LogicalCircuit lc2;
    const Circuit back = circuit_from_json(g, text, &lc2);
    CHECK(circuit_to_json(g, back, &lc2) == text);
    CHECK(back.edges == ns.edges);
    CHECK(back.scores == ns.scores);
    CHECK(lc2.c_adder == lc.c_adder);

    std::string tampered = text;
    const auto at = tampered.find("\"abc\"");
    tampered.replace(at, 5, "\"abd\"");
    CHECK_THROWS_WITH_AS(circuit_from_json(g, tampered), doctest::Contains("digest"), std::runtime_error);
    std::string old = text;
    old.replace(old.find("\"version\": 1"), 12, "\"version\": 7");
    CHECK_THROWS_AS(circuit_from_json(g, old), std::runtime_error);

    const EdgeScores s = exact_patch_scores(net, net.dataset(), Regime::Ns, MetricKind::KlToReference);
    const std::string st = scores_to_json(g, s);
    CHECK(scores_to_json(g, scores_from_json(g, st)) == st);
}
