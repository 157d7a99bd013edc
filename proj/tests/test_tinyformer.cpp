#include "circuitlab/tinyformer/graph.hpp"
#include "circuitlab/tinyformer/model.hpp"
#include "circuitlab/tinyformer/snapshot.hpp"
#include "fixtures/fixtures.hpp"

#include <doctest.h>

#include <random>
#include <set>

using namespace clab;

namespace {

// Independent statement of the wiring rule over (kind, layer) pairs.
int expected_edges(int L, int H)
{
    // Every writer paired with every later reader, counted by hand.
    int attn_readers_per_layer = 3 * H;
    int readers_after = 0;
    int count = 0;
    // Embed feeds every residual reader.
    count += L * (attn_readers_per_layer + 1) + 1;
    for (int l = 0; l < L; ++l) {
        readers_after = (L - l - 1) * (attn_readers_per_layer + 1) + 1;
        count += H * (readers_after + 1);  // Wo: own-layer Wup + later readers
        count += readers_after;            // Wdown
    }
    count += L * (3 * H + 1);  // structural
    return count;
}

}  // namespace

TEST_CASE("graph enumeration for one layer and one head")
{
    ModelConfig c = fixtures::tiny_config();
    c.n_heads = 1;
    const ComputationalGraph g = build_graph(c);
    CHECK(g.node_count() == 8);
    CHECK(g.edge_count() == 12);
    std::set<std::string> names;
    for (std::size_t e = 0; e < g.edge_count(); ++e) names.insert(g.edge_name(static_cast<int>(e)));
    const std::set<std::string> expect{
        "Embed->L0.H0.Wq",    "Embed->L0.H0.Wk",    "Embed->L0.H0.Wv",   "Embed->L0.Wup",   "Embed->Unembed",
        "L0.H0.Wo->L0.Wup",   "L0.H0.Wo->Unembed",  "L0.Wdown->Unembed", "L0.H0.Wq->L0.H0.Wo",
        "L0.H0.Wk->L0.H0.Wo", "L0.H0.Wv->L0.H0.Wo", "L0.Wup->L0.Wdown"};
    CHECK(names == expect);
}

TEST_CASE("graph sizes for larger configs")
{
    for (const auto [L, H] : {std::pair{4, 4}, std::pair{2, 3}, std::pair{3, 1}}) {
        ModelConfig c;
        c.n_layers = L;
        c.n_heads = H;
        c.d_model = 12 * H;
        const ComputationalGraph g = build_graph(c);
        CHECK(g.node_count() == static_cast<std::size_t>(1 + 4 * H * L + 2 * L + 1));
        CHECK(g.edge_count() == static_cast<std::size_t>(expected_edges(L, H)));
        for (const Edge& e : g.edges()) CHECK(e.sender < e.receiver);
    }
    ModelConfig c;
    c.n_layers = 4;
    c.n_heads = 4;
    c.d_model = 64;
    CHECK(build_graph(c).node_count() == 74);
}

TEST_CASE("component names round-trip")
{
    ModelConfig c;
    const ComputationalGraph g = build_graph(c);
    for (const auto& n : g.nodes()) CHECK(parse_component(to_string(n)) == n);
    CHECK_THROWS(parse_component("L0.Wq"));
    CHECK_THROWS(parse_component("L0.H1.Wup"));
    CHECK_THROWS(parse_component("Bogus"));
}

TEST_CASE("config validation")
{
    ModelConfig c;
    c.d_model = 30;
    c.n_heads = 4;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = ModelConfig{};
    c.n_layers = 0;
    CHECK_THROWS_AS(build_graph(c), std::invalid_argument);
}

TEST_CASE("forward rejects bad inputs")
{
    const TinyFormer m(fixtures::tiny_config());
    TokenBatch b;
    b.sequences = {{1, 2, 99}};
    CHECK_THROWS(m.forward(b));
    b.sequences = {std::vector<int>(20, 1)};
    CHECK_THROWS(m.forward(b));
}

TEST_CASE("patching identities")
{
    const TinyFormer m(fixtures::tiny_config());
    const Dataset pairs = fixtures::tiny_pairs();
    const TokenBatch clean = clean_batch(pairs);
    const TokenBatch corrupt = corrupted_batch(pairs);
    const ForwardResult base = m.forward(clean);
    const ForwardResult corr = m.forward(corrupt);
    const std::size_t E = m.graph().edge_count();

    PatchPlan empty(E, &corr.cache);
    CHECK(m.forward(clean, &empty).logits == base.logits);

    PatchPlan self(E, &base.cache);
    for (std::size_t e = 0; e < E; ++e) self.patch(static_cast<int>(e));
    CHECK(m.forward(clean, &self).logits == base.logits);

    PatchPlan all(E, &corr.cache);
    for (std::size_t e = 0; e < E; ++e) all.patch(static_cast<int>(e));
    CHECK((m.forward(clean, &all).logits - corr.logits).cwiseAbs().maxCoeff() <= 1e-9);

    // Patch a subset S with the corrupted cache, then additionally self-patch
    // edges from other senders with that run's own activations: nothing moves.
    PatchPlan some(E, &corr.cache);
    std::set<int> s_senders;
    for (std::size_t e = 0; e < E; e += 3) {
        some.patch(static_cast<int>(e));
        s_senders.insert(m.graph().edges()[e].sender);
    }
    const ForwardResult patched = m.forward(clean, &some);
    CHECK((patched.logits - base.logits).cwiseAbs().maxCoeff() > 0.0);
    ActivationCache mixed = patched.cache;
    for (const int s : s_senders) mixed.outputs[static_cast<std::size_t>(s)] = corr.cache.outputs[static_cast<std::size_t>(s)];
    PatchPlan again = some;
    again.donor = &mixed;
    int extra = 0;
    for (std::size_t e = 0; e < E; ++e)
        if (!s_senders.contains(m.graph().edges()[e].sender)) {
            again.patch(static_cast<int>(e));
            ++extra;
        }
    CHECK(extra > 0);
    CHECK(m.forward(clean, &again).logits == patched.logits);

    // Donor shape mismatch.
    Dataset shorter(pairs.begin(), pairs.begin() + 1);
    const ForwardResult small = m.forward(clean_batch(shorter));
    PatchPlan bad(E, &small.cache);
    bad.patch(0);
    CHECK_THROWS_AS(m.forward(clean, &bad), ShapeError);
}

TEST_CASE("residual additivity")
{
    ModelConfig c = fixtures::tiny_config();
    c.n_layers = 3;
    const TinyFormer m(c);
    const Dataset pairs = fixtures::tiny_pairs();
    const ForwardResult r = m.forward(clean_batch(pairs));
    const ComputationalGraph& g = m.graph();
    for (std::size_t n = 0; n < g.node_count(); ++n) {
        const auto kind = g.nodes()[n].kind;
        if (kind == ComponentKind::Embed || kind == ComponentKind::Wo || kind == ComponentKind::Wdown) continue;
        Matrix sum = Matrix::Zero(r.cache.outputs[0].rows(), c.d_model);
        bool residual = false;
        for (const int e : g.in_edges(static_cast<int>(n))) {
            const Edge& edge = g.edges()[static_cast<std::size_t>(e)];
            if (edge.structural) continue;
            residual = true;
            sum += r.cache.outputs[static_cast<std::size_t>(edge.sender)];
        }
        if (!residual) continue;
        CHECK((sum - r.cache.inputs[n]).cwiseAbs().maxCoeff() <= 1e-10);
    }
}

TEST_CASE("determinism and snapshot round-trip")
{
    const TinyFormer a(fixtures::tiny_config(5));
    const TinyFormer b(fixtures::tiny_config(5));
    const TinyFormer other(fixtures::tiny_config(6));
    CHECK(a.weights_digest() == b.weights_digest());
    CHECK(a.weights_digest() != other.weights_digest());
    const Dataset pairs = fixtures::tiny_pairs();
    CHECK(a.forward(clean_batch(pairs)).logits == b.forward(clean_batch(pairs)).logits);

    const std::string bytes = snapshot_bytes(a);
    const TinyFormer c = snapshot_from_bytes(bytes);
    CHECK(c.config() == a.config());
    CHECK(c.weights_digest() == a.weights_digest());
    CHECK(snapshot_bytes(c) == bytes);
    CHECK(bytes.substr(0, 8) == "CLABSNAP");

    std::string bad = bytes;
    bad[8] = 9;
    CHECK_THROWS_AS(snapshot_from_bytes(bad), SnapshotError);
    CHECK_THROWS_AS(snapshot_from_bytes(bytes.substr(0, bytes.size() - 3)), SnapshotError);
    CHECK_THROWS_AS(snapshot_from_bytes("NOTASNAP"), SnapshotError);
}

TEST_CASE("output metrics")
{
    Matrix logits = Matrix::Zero(2, 4);
    logits(1, 2) = 2.0;
    logits(1, 0) = 0.5;
    AnswerSlots s;
    s.rows = {1};
    s.correct = {2};
    s.incorrect = {0};
    CHECK(output_metric(logits, s, MetricKind::LogitDiff) == 1.5);
    CHECK(output_metric(logits, s, MetricKind::AnswerLogit) == 2.0);
    CHECK(output_metric(logits, s, MetricKind::KlToReference, &logits) == 0.0);
    CHECK_THROWS(output_metric(logits, s, MetricKind::KlToReference));
    CHECK_THROWS(output_metric(logits, s, MetricKind::LogitDiff, &logits));
    s.incorrect = {-1};
    CHECK_THROWS(output_metric(logits, s, MetricKind::LogitDiff));

    std::mt19937_64 rng(2);
    std::normal_distribution<double> d(0.0, 3.0);
    AnswerSlots one;
    one.rows = {0};
    one.correct = {0};
    one.incorrect = {1};
    for (int i = 0; i < 1000; ++i) {
        Matrix a(1, 6), b(1, 6);
        for (Index k = 0; k < 6; ++k) {
            a(0, k) = d(rng);
            b(0, k) = d(rng);
        }
        CHECK(output_metric(a, one, MetricKind::KlToReference, &b) >= 0.0);
    }
}

TEST_CASE("taped metric matches direct evaluation")
{
    const TinyFormer m(fixtures::tiny_config());
    const Dataset pairs = fixtures::tiny_pairs();
    Tape t;
    const Trace tr = m.trace(t, clean_batch(pairs));
    const AnswerSlots s = answer_slots(pairs);
    const double taped = output_metric_sum(tr.logits, s, MetricKind::LogitDiff).value()(0, 0);
    const double direct = output_metric(tr.logits.value(), s, MetricKind::LogitDiff) * static_cast<double>(pairs.size());
    CHECK(taped == doctest::Approx(direct).epsilon(1e-12));
}

TEST_CASE("full model loss gradient matches finite differences")
{
    const TinyFormer m(fixtures::tiny_config());
    const double err = fixtures::model_grad_check(m, fixtures::tiny_pairs());
    MESSAGE("model grad check max relative error " << err);
    CHECK(err <= 1e-4);
}
