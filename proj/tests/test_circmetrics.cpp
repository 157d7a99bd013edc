#include "circuitlab/circmetrics/metrics.hpp"
#include "circuitlab/common/digest.hpp"
#include "circuitlab/taskgen/tasks.hpp"
#include "fixtures/oracles.hpp"

#include <doctest.h>

#include <json.hpp>

#include <cmath>
#include <random>

using namespace clab;

namespace {

ComputationalGraph two_layer()
{
    ModelConfig c;
    c.n_layers = 2;
    c.n_heads = 2;
    c.d_model = 8;
    return build_graph(c);
}

EdgeScores random_scores(const ComputationalGraph& g, std::mt19937_64& rng)
{
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<double> v(g.edge_count());
    for (auto& x : v) x = n(rng);
    return make_scores(g, v, Regime::Ns, "test");
}

using fixtures::counting_rho;

ModelConfig induction_config(std::uint64_t seed)
{
    const TaskSpec spec = default_spec("induction");
    ModelConfig c;
    c.n_layers = 1;
    c.n_heads = 2;
    c.d_model = 16;
    c.d_ff = 16;
    c.vocab_size = required_vocab(spec);
    c.max_seq_len = required_seq_len(spec);
    c.init_seed = seed;
    return c;
}

}  // namespace

TEST_CASE("circuit distance arithmetic")
{
    const ComputationalGraph g({ComponentId::embed(), ComponentId::mlp(ComponentKind::Wup, 0)}, {{0, 1, false}});
    const EdgeScores a = make_scores(g, {0.3}, Regime::Ns, "t");
    const EdgeScores b = make_scores(g, {0.5}, Regime::Ns, "t");
    CHECK(score_range(a, b) == doctest::Approx(0.2));
    CHECK(circuit_distance(g, a, b, ClassFilter::All) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(circuit_distance(g, a, b, ClassFilter::MLP) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(circuit_distance(g, a, b, ClassFilter::Attn) == 0.0);
    CHECK(circuit_distance(g, a, a, ClassFilter::All) == 0.0);
    // Equal scores everywhere: the range falls back to 1.
    CHECK(score_range(a, a) == 1.0);
    CHECK_THROWS(circuit_distance(g, a, b, ClassFilter::All, 0.0));
    CHECK_THROWS(circuit_distance(two_layer(), a, b, ClassFilter::All));
}

TEST_CASE("circuit distance axioms over random triples")
{
    const ComputationalGraph g = two_layer();
    std::mt19937_64 rng(3);
    int violations = 0;
    for (int t = 0; t < 1000; ++t) {
        const EdgeScores a = random_scores(g, rng), b = random_scores(g, rng), c = random_scores(g, rng);
        const double R = 0.5 + std::uniform_real_distribution<double>(0.0, 3.0)(rng);
        for (const auto f : {ClassFilter::All, ClassFilter::Attn, ClassFilter::MLP}) {
            const double ab = circuit_distance(g, a, b, f, R), ba = circuit_distance(g, b, a, f, R);
            const double ac = circuit_distance(g, a, c, f, R), bc = circuit_distance(g, b, c, f, R);
            violations += circuit_distance(g, a, a, f, R) != 0.0;
            violations += ab != ba;
            violations += ac > ab + bc + 1e-12;
            violations += ab < 0.0;
        }
        violations += circuit_distance(g, a, b, ClassFilter::All) != circuit_distance(g, b, a, ClassFilter::All);
        const double parts = circuit_distance(g, a, b, ClassFilter::Attn, R) + circuit_distance(g, a, b, ClassFilter::MLP, R);
        violations += parts > circuit_distance(g, a, b, ClassFilter::All, R) + 1e-12;
    }
    CHECK(violations == 0);
}

TEST_CASE("circuit scores impute zero outside the circuit")
{
    const ComputationalGraph g = two_layer();
    Circuit c;
    c.edges = {1, 4};
    c.scores = {0.5, -2.0};
    c.graph_digest = g.digest();
    const EdgeScores s = circuit_scores(g, c);
    CHECK(s.values.size() == g.edge_count());
    CHECK(s.values[4] == -2.0);
    CHECK(s.values[0] == 0.0);
}

TEST_CASE("spearman against a counting oracle")
{
    std::mt19937_64 rng(5);
    std::uniform_int_distribution<int> len(1, 8), val(0, 4);
    int mismatches = 0, degenerate = 0;
    for (int t = 0; t < 1000; ++t) {
        const int n = len(rng);
        std::vector<double> x(static_cast<std::size_t>(n)), y(static_cast<std::size_t>(n));
        for (auto& v : x) v = val(rng);
        for (auto& v : y) v = val(rng);
        const Spearman s = spearman(x, y);
        degenerate += s.degenerate;
        mismatches += s.rho != counting_rho(x, y);
        CHECK(s.rho >= -1.0);
        CHECK(s.rho <= 1.0);
        // Any strictly increasing map leaves the ranks alone.
        std::vector<double> fx(x);
        for (auto& v : fx) v = std::exp(3.0 * v) - 7.0;
        mismatches += spearman(fx, y).rho != s.rho;
    }
    CHECK(mismatches == 0);
    CHECK(degenerate > 0);

    const std::vector<double> up{1, 2, 3}, down{3, 2, 1};
    CHECK(spearman_rho(up, down) == -1.0);
    for (int t = 0; t < 100; ++t) {
        std::vector<double> x(static_cast<std::size_t>(len(rng)) + 1);
        for (auto& v : x) v = std::normal_distribution<double>()(rng);
        CHECK(spearman_rho(x, x) == 1.0);
        std::vector<double> sorted(x);
        std::sort(sorted.begin(), sorted.end());
        const std::vector<double> rev(sorted.rbegin(), sorted.rend());
        CHECK(spearman_rho(sorted, rev) == -1.0);
    }
    CHECK(average_ranks(std::vector<double>{5, 1, 5, 3}) == std::vector<double>{3.5, 1, 3.5, 2});
    const std::vector<double> flat{2, 2, 2};
    CHECK(spearman(flat, up).degenerate);
    CHECK(spearman(flat, up).rho == 0.0);
    CHECK_THROWS(spearman(up, std::vector<double>{1, 2}));
    CHECK_THROWS(spearman(std::vector<double>{}, std::vector<double>{}));
}

TEST_CASE("evolution states")
{
    CHECK(classify_evolution_state(2.0, 0.6, 1.0, 0.3) == EvolutionState::MigrateConsolidated);
    CHECK(classify_evolution_state(2.0, -0.6, 1.0, 0.3) == EvolutionState::MigrateConsolidated);
    CHECK(classify_evolution_state(0.0, 1.0, 1.0, 0.3) == EvolutionState::Stable);
    CHECK(classify_evolution_state(0.5, 0.1, 1.0, 0.3) == EvolutionState::RefineInPlace);
    CHECK(classify_evolution_state(1.5, 0.1, 1.0, 0.3) == EvolutionState::Reorganize);
    CHECK(classify_evolution_state(1.0, 0.1, 1.0, 0.3) == EvolutionState::Reorganize);
    CHECK(classify_evolution_state(0.0, 0.3, 1.0, 0.3) == EvolutionState::Stable);
    CHECK_THROWS(classify_evolution_state(0.0, 0.0, 0.0, 0.3));
}

TEST_CASE("circuit stability")
{
    const Dataset data = generate(default_spec("induction"), 60, 4);
    const TinyFormer model(induction_config(2));
    StabilityConfig cfg;
    cfg.k_pairs = 3;
    cfg.discovery.tau = 0.0;
    cfg.seed = 9;

    SUBCASE("same subsets give 1")
    {
        cfg.same_subsets = true;
        const auto r = circuit_stability(model, data, cfg);
        CHECK(r.attn == 1.0);
        CHECK(r.mlp == 1.0);
        CHECK(r.all == 1.0);
        CHECK(r.degenerate == 0);
    }
    SUBCASE("matrix shortcut agrees with discovery on each subset")
    {
        const auto r = circuit_stability(model, data, cfg);
        CHECK(r.pair_attn.size() == 3);
        for (std::size_t i = 0; i < 3; ++i) {
            const double f[2] = {0.2, 0.2};
            const auto parts = split_indices(data.size(), f, mix_seed(cfg.seed, i));
            std::vector<EdgeScores> s;
            for (const auto& idx : parts) {
                Dataset sub;
                for (const auto k : idx) sub.push_back(data[k]);
                s.push_back(eap(model, sub, cfg.discovery).scores);
            }
            std::vector<double> a, b;
            for (std::size_t e = 0; e < model.graph().edge_count(); ++e)
                if (model.graph().edge_class(static_cast<int>(e)) == ComponentClass::Attn) {
                    a.push_back(s[0].values[e]);
                    b.push_back(s[1].values[e]);
                }
            CHECK(r.pair_attn[i] == doctest::Approx(spearman_rho(a, b)).epsilon(1e-9));
        }
        for (const double v : {r.attn, r.mlp, r.all}) {
            CHECK(v >= -1.0);
            CHECK(v <= 1.0);
        }
    }
    SUBCASE("constant-output model is flagged and reported as 0")
    {
        TinyFormer flat(induction_config(2));
        flat.mutable_weights().back()[0].setZero();
        const auto r = circuit_stability(flat, data, cfg);
        CHECK(r.degenerate == 3);
        CHECK(r.attn == 0.0);
        CHECK(r.mlp == 0.0);
    }
    SUBCASE("too little data")
    {
        const Dataset few(data.begin(), data.begin() + 4);
        CHECK_THROWS_AS(circuit_stability(model, few, cfg), std::invalid_argument);
        cfg.k_pairs = 0;
        CHECK_THROWS_AS(circuit_stability(model, data, cfg), std::invalid_argument);
    }
    SUBCASE("exact-patch stability runs through discovery")
    {
        cfg.algorithm = Algorithm::Exact;
        cfg.k_pairs = 1;
        const auto r = circuit_stability(model, data, cfg);
        CHECK(r.pair_attn.size() == 1);
        CHECK(std::abs(r.attn) <= 1.0);
    }
}

TEST_CASE("metric records")
{
    MetricRecord r;
    r.step = 3;
    r.epoch = 1;
    r.optimizer_step = 12;
    r.cd_attn = 0.1 + 0.2;
    r.cd_mlp = 1e-17;
    r.cs_attn = -0.25;
    r.cc = 4;
    r.t_acc = 0.5;
    r.p_acc = 1.0;
    r.loss = 2.302585092994046;
    r.scores_digest = "abc";
    const std::string line = record_to_json(r);
    CHECK(record_from_json(line) == r);
    CHECK(line.rfind("{\"step\":3,\"epoch\":1,", 0) == 0);
    const auto keys = nlohmann::ordered_json::parse(line);
    CHECK(keys.begin().key() == "step");
    CHECK(std::prev(keys.end()).key() == "scores_digest");

    const std::vector<MetricRecord> rs{r, r};
    CHECK(records_from_jsonl(records_to_jsonl(rs)) == rs);

    MetricRecord bad = r;
    bad.cs_mlp = 1.5;
    CHECK_THROWS(bad.validate());
    bad = r;
    bad.cc = -1;
    CHECK_THROWS(bad.validate());
    CHECK_THROWS_WITH(records_from_jsonl(line + "\n{\"step\":1}\n"), doctest::Contains("line 2"));
}
