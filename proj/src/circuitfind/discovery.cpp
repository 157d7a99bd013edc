#include "circuitlab/circuitfind/discovery.hpp"

#include "circuitlab/common/digest.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

namespace clab {

namespace {

std::vector<std::span<const PatchedPair>> chunks(std::span<const PatchedPair> data, std::size_t batch_size)
{
    std::vector<std::span<const PatchedPair>> out;
    for (std::size_t at = 0; at < data.size(); at += batch_size) out.push_back(data.subspan(at, std::min(batch_size, data.size() - at)));
    return out;
}

void check_data(std::span<const PatchedPair> data)
{
    if (data.empty()) throw std::invalid_argument("discovery: empty dataset");
    for (const auto& p : data) p.validate();
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

// ---------------------------------------------------------------------------
// Exact patching

PatchEvaluator::PatchEvaluator(const PatchableModel& model, std::span<const PatchedPair> data, Regime side, std::size_t batch_size)
    : model_(model)
{
    if (side == Regime::NsDn) throw std::invalid_argument("PatchEvaluator: side must be Ns or Dn");
    check_data(data);
    for (const auto chunk : chunks(data, std::max<std::size_t>(batch_size, 1))) {
        Batch b;
        const TokenBatch clean = clean_batch(chunk);
        const TokenBatch corrupt = corrupted_batch(chunk);
        b.base = side == Regime::Ns ? clean : corrupt;
        b.reference = model.forward(b.base).logits;
        b.donor = model.forward(side == Regime::Ns ? corrupt : clean).cache;
        b.slots = answer_slots(chunk);
        examples_ += chunk.size();
        batches_.push_back(std::move(b));
    }
}

double PatchEvaluator::kl(const std::vector<char>& removed) const
{
    double total = 0.0;
    for (const Batch& b : batches_) {
        PatchPlan plan;
        plan.patched = removed;
        plan.donor = &b.donor;
        const Matrix logits = model_.forward(b.base, &plan).logits;
        for (const Index row : b.slots.rows) total += kl_row(b.reference.row(row), logits.row(row));
    }
    return total / static_cast<double>(examples_);
}

double PatchEvaluator::metric(const std::vector<char>& removed, MetricKind kind) const
{
    if (kind == MetricKind::KlToReference) return kl(removed);
    double total = 0.0;
    for (const Batch& b : batches_) {
        PatchPlan plan;
        plan.patched = removed;
        plan.donor = &b.donor;
        const Matrix logits = model_.forward(b.base, &plan).logits;
        for (const double v : output_metric_per_example(logits, b.slots, kind)) total += v;
    }
    return total / static_cast<double>(examples_);
}

double PatchEvaluator::base_metric(MetricKind kind) const
{
    if (kind == MetricKind::KlToReference) return 0.0;
    double total = 0.0;
    for (const Batch& b : batches_)
        for (const double v : output_metric_per_example(b.reference, b.slots, kind)) total += v;
    return total / static_cast<double>(examples_);
}

Circuit acdc(const PatchableModel& model, std::span<const PatchedPair> data, const DiscoveryConfig& config)
{
    if (!config.tau) throw std::invalid_argument("acdc: tau required");
    if (std::isnan(*config.tau) || *config.tau < 0.0) throw std::invalid_argument("acdc: tau must be >= 0");
    const ComputationalGraph& g = model.graph();
    std::vector<PatchEvaluator> sides;
    if (config.regime != Regime::Dn) sides.emplace_back(model, data, Regime::Ns, config.batch_size);
    if (config.regime != Regime::Ns) sides.emplace_back(model, data, Regime::Dn, config.batch_size);

    const auto divergence = [&](const std::vector<char>& removed) {
        double d = 0.0;
        for (const auto& s : sides) d += s.kl(removed);
        return d;
    };

    std::vector<char> removed(g.edge_count(), 0);
    std::vector<double> delta(g.edge_count(), 0.0);
    double current = divergence(removed);
    for (int r = static_cast<int>(g.node_count()) - 1; r >= 0; --r) {
        for (const int e : g.in_edges(r)) {
            removed[static_cast<std::size_t>(e)] = 1;
            const double candidate = divergence(removed);
            delta[static_cast<std::size_t>(e)] = candidate - current;
            if (candidate - current < *config.tau) current = candidate;
            else removed[static_cast<std::size_t>(e)] = 0;
        }
    }
    Circuit c;
    for (std::size_t e = 0; e < g.edge_count(); ++e)
        if (!removed[e]) {
            c.edges.push_back(static_cast<int>(e));
            c.scores.push_back(delta[e]);
        }
    c.regime = config.regime;
    c.algorithm = "acdc";
    c.graph_digest = g.digest();
    std::ostringstream cfg;
    cfg.precision(17);
    cfg << "tau=" << *config.tau;
    c.config = cfg.str();
    Digest dd;
    for (const auto& p : data) dd.text(p.task).bytes(p.clean.data(), p.clean.size() * sizeof(int)).bytes(p.corrupted.data(), p.corrupted.size() * sizeof(int));
    c.dataset_digest = dd.hex();
    return c;
}

EdgeScores exact_patch_scores(const PatchableModel& model, std::span<const PatchedPair> data, Regime regime, MetricKind metric,
                              std::size_t batch_size)
{
    const ComputationalGraph& g = model.graph();
    std::vector<double> values(g.edge_count(), 0.0);
    for (const Regime side : {Regime::Ns, Regime::Dn}) {
        if (regime != Regime::NsDn && regime != side) continue;
        const PatchEvaluator ev(model, data, side, batch_size);
        const double base = ev.base_metric(metric);
        std::vector<char> removed(g.edge_count(), 0);
        for (std::size_t e = 0; e < g.edge_count(); ++e) {
            removed[e] = 1;
            const double m = ev.metric(removed, metric);
            removed[e] = 0;
            double s = m - base;
            if (side == Regime::Dn && metric != MetricKind::KlToReference) s = -s;
            values[e] += s;
        }
    }
    return make_scores(g, std::move(values), regime, "exact_patch");
}

// ---------------------------------------------------------------------------
// EAP

namespace {

struct GradRun {
    std::vector<Matrix> outputs;
    std::vector<Matrix> input_grad;
    std::vector<Matrix> output_grad;
};

GradRun gradient_run(const TinyFormer& model, const TokenBatch& batch, const AnswerSlots& slots, MetricKind metric)
{
    Tape tape;
    TraceOptions opt;
    opt.reader_nodes = true;
    const Trace tr = model.trace(tape, batch, opt);
    const Tensor loss = output_metric_sum(tr.logits, slots, metric);
    const Gradients grads = backward(tape, loss);
    GradRun out;
    const std::size_t n = tr.outputs.size();
    out.outputs.resize(n);
    out.input_grad.resize(n);
    out.output_grad.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (tr.outputs[i].valid()) {
            out.outputs[i] = tr.outputs[i].value();
            out.output_grad[i] = grads.grad(tr.outputs[i]);
        }
        if (tr.inputs[i].valid()) out.input_grad[i] = grads.grad(tr.inputs[i]);
    }
    return out;
}

}  // namespace

namespace {

/// Per-example Ns and Dn attribution matrices; a side left unrequested stays empty.
void eap_matrices(const TinyFormer& model, std::span<const PatchedPair> data, const DiscoveryConfig& config, bool want_ns,
                  bool want_dn, Matrix& out_ns, Matrix& out_dn)
{
    if (config.metric == MetricKind::KlToReference)
        throw std::invalid_argument("eap: kl_to_reference has zero gradient at the reference; use answer_logit or logit_diff");
    check_data(data);
    const ComputationalGraph& g = model.graph();
    const std::size_t E = g.edge_count();
    const auto N = static_cast<Index>(data.size());
    if (want_ns) out_ns = Matrix::Zero(N, static_cast<Index>(E));
    if (want_dn) out_dn = Matrix::Zero(N, static_cast<Index>(E));

    Index first = 0;
    for (const auto chunk : chunks(data, config.batch_size)) {
        const AnswerSlots slots = answer_slots(chunk);
        const TokenBatch clean = clean_batch(chunk);
        const TokenBatch corrupt = corrupted_batch(chunk);
        GradRun ns, dn;
        std::vector<Matrix> x, xt;
        if (want_ns) {
            ns = gradient_run(model, clean, slots, config.metric);
            x = ns.outputs;
        } else {
            x = model.forward(clean).cache.outputs;
        }
        if (want_dn) {
            dn = gradient_run(model, corrupt, slots, config.metric);
            xt = dn.outputs;
        } else {
            xt = model.forward(corrupt).cache.outputs;
        }
        Matrix delta;
        std::size_t delta_of = g.node_count();
        for (std::size_t e = 0; e < E; ++e) {
            const Edge& edge = g.edges()[e];
            const auto s = static_cast<std::size_t>(edge.sender);
            const auto r = static_cast<std::size_t>(edge.receiver);
            if (s != delta_of) {  // edges are grouped by sender
                delta = xt[s] - x[s];
                delta_of = s;
            }
            const auto spread = [&](Matrix& out, const Matrix& grad) {
                const Vector row_scores = delta.cwiseProduct(grad).rowwise().sum();
                for (Index row = 0; row < row_scores.size(); ++row)
                    out(first + slots.row_example[static_cast<std::size_t>(row)], static_cast<Index>(e)) += row_scores(row);
            };
            if (want_ns) spread(out_ns, edge.structural ? ns.output_grad[s] : ns.input_grad[r]);
            if (want_dn) spread(out_dn, edge.structural ? dn.output_grad[s] : dn.input_grad[r]);
        }
        first += static_cast<Index>(chunk.size());
    }
}

EapResult finish_eap(const ComputationalGraph& g, Matrix per_example, Regime regime, bool mean_of_absolutes)
{
    EapResult res;
    res.per_example = std::move(per_example);
    std::vector<Index> all(static_cast<std::size_t>(res.per_example.rows()));
    std::iota(all.begin(), all.end(), Index{0});
    EdgeScores like;
    like.regime = regime;
    like.algorithm = "eap";
    like.graph_digest = g.digest();
    res.scores = aggregate_eap(res.per_example, all, like, mean_of_absolutes);
    return res;
}

}  // namespace

EapResult eap(const TinyFormer& model, std::span<const PatchedPair> data, const DiscoveryConfig& config)
{
    Matrix ns, dn;
    const bool want_ns = config.regime != Regime::Dn;
    const bool want_dn = config.regime != Regime::Ns;
    eap_matrices(model, data, config, want_ns, want_dn, ns, dn);
    Matrix per = want_ns && want_dn ? Matrix(ns + dn) : (want_ns ? std::move(ns) : std::move(dn));
    return finish_eap(model.graph(), std::move(per), config.regime, config.mean_of_absolutes);
}

EapSides eap_sides(const TinyFormer& model, std::span<const PatchedPair> data, const DiscoveryConfig& config)
{
    Matrix ns, dn;
    eap_matrices(model, data, config, true, true, ns, dn);
    EapSides out;
    out.nsdn = finish_eap(model.graph(), ns + dn, Regime::NsDn, config.mean_of_absolutes);
    out.ns = finish_eap(model.graph(), std::move(ns), Regime::Ns, config.mean_of_absolutes);
    out.dn = finish_eap(model.graph(), std::move(dn), Regime::Dn, config.mean_of_absolutes);
    return out;
}

EdgeScores aggregate_eap(const Matrix& per_example, std::span<const Index> rows, const EdgeScores& like, bool mean_of_absolutes)
{
    if (rows.empty()) throw std::invalid_argument("aggregate_eap: no rows");
    EdgeScores s = like;
    s.values.assign(static_cast<std::size_t>(per_example.cols()), 0.0);
    for (Index e = 0; e < per_example.cols(); ++e) {
        double acc = 0.0;
        for (const Index r : rows) acc += mean_of_absolutes ? std::abs(per_example(r, e)) : per_example(r, e);
        s.values[static_cast<std::size_t>(e)] = std::abs(acc / static_cast<double>(rows.size()));
    }
    s.refresh_range();
    return s;
}

// ---------------------------------------------------------------------------
// Edge pruning

void EdgePruningConfig::validate() const
{
    if (steps < 1) throw std::invalid_argument("edge pruning: steps must be >= 1");
    if (!(beta > 0.0)) throw std::invalid_argument("edge pruning: beta must be > 0");
    if (!(gamma < 0.0 && zeta > 1.0)) throw std::invalid_argument("edge pruning: need gamma < 0 < 1 < zeta");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("edge pruning: learning_rate must be > 0");
    if (penalty < 0.0) throw std::invalid_argument("edge pruning: penalty must be >= 0");
    if (sparsity_target && (*sparsity_target < 0.0 || *sparsity_target >= 1.0))
        throw std::invalid_argument("edge pruning: sparsity_target must lie in [0, 1)");
    if (batch_size == 0) throw std::invalid_argument("edge pruning: batch_size must be >= 1");
}

double hard_concrete_sample(double log_alpha, double u, const EdgePruningConfig& c)
{
    const double s = sigmoid((std::log(u) - std::log1p(-u) + log_alpha) / c.beta);
    return std::clamp(s * (c.zeta - c.gamma) + c.gamma, 0.0, 1.0);
}

double hard_concrete_mean(double log_alpha, const EdgePruningConfig& c)
{
    constexpr int kPoints = 2000;
    double acc = 0.0;
    for (int i = 0; i < kPoints; ++i) acc += hard_concrete_sample(log_alpha, (i + 0.5) / kPoints, c);
    return acc / kPoints;
}

namespace {

std::vector<double> train_masks(const TinyFormer& model, std::span<const PatchedPair> data, const EdgePruningConfig& cfg, Regime side)
{
    const ComputationalGraph& g = model.graph();
    const std::size_t E = g.edge_count();
    struct Batch {
        TokenBatch base;
        ActivationCache donor;
        Matrix reference;
        AnswerSlots slots;
    };
    std::vector<Batch> batches;
    for (const auto chunk : chunks(data, cfg.batch_size)) {
        Batch b;
        const TokenBatch clean = clean_batch(chunk);
        const TokenBatch corrupt = corrupted_batch(chunk);
        b.base = side == Regime::Ns ? clean : corrupt;
        b.reference = model.forward(b.base).logits;
        b.donor = model.forward(side == Regime::Ns ? corrupt : clean).cache;
        b.slots = answer_slots(chunk);
        batches.push_back(std::move(b));
    }

    std::mt19937_64 rng(mix_seed(cfg.seed, side == Regime::Ns ? 1 : 2));
    std::uniform_real_distribution<double> unif(1e-6, 1.0 - 1e-6);
    std::vector<double> la(E, cfg.init_log_alpha), m(E, 0.0), v(E, 0.0), u(E, 0.5);
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double shift = cfg.beta * std::log(-cfg.gamma / cfg.zeta);
    double penalty = cfg.penalty;

    for (std::size_t step = 0; step < cfg.steps; ++step) {
        const Batch& b = batches[step % batches.size()];
        Tape tape;
        EdgeMix mix;
        mix.donor = &b.donor;
        mix.masks.reserve(E);
        for (std::size_t e = 0; e < E; ++e) {
            u[e] = unif(rng);
            mix.masks.push_back(tape.variable(Matrix::Constant(1, 1, hard_concrete_sample(la[e], u[e], cfg))));
        }
        TraceOptions opt;
        opt.mix = &mix;
        const Trace tr = model.trace(tape, b.base, opt);
        const Tensor loss = kl_divergence_from_logits(tape.constant(b.reference), tr.logits, b.slots.rows);
        if (!std::isfinite(loss.value()(0, 0))) throw NumericError("edge pruning: non-finite divergence");
        const Gradients grads = backward(tape, loss);
        const double t = static_cast<double>(step + 1);
        double density = 0.0;
        for (std::size_t e = 0; e < E; ++e) {
            const double s = sigmoid((std::log(u[e]) - std::log1p(-u[e]) + la[e]) / cfg.beta);
            const double stretched = s * (cfg.zeta - cfg.gamma) + cfg.gamma;
            const double dz = (stretched > 0.0 && stretched < 1.0) ? (cfg.zeta - cfg.gamma) * s * (1.0 - s) / cfg.beta : 0.0;
            const double p_open = sigmoid(la[e] - shift);
            density += p_open;
            const double grad = grads.grad(mix.masks[e])(0, 0) * dz + penalty * p_open * (1.0 - p_open);
            m[e] = b1 * m[e] + (1.0 - b1) * grad;
            v[e] = b2 * v[e] + (1.0 - b2) * grad * grad;
            const double mhat = m[e] / (1.0 - std::pow(b1, t));
            const double vhat = v[e] / (1.0 - std::pow(b2, t));
            la[e] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + eps);
        }
        if (cfg.sparsity_target) {
            density /= static_cast<double>(E);
            penalty *= std::exp(0.1 * (density - (1.0 - *cfg.sparsity_target)) / std::max(1e-3, 1.0 - *cfg.sparsity_target));
        }
    }
    std::vector<double> out(E);
    for (std::size_t e = 0; e < E; ++e) out[e] = hard_concrete_mean(la[e], cfg);
    return out;
}

}  // namespace

EdgeScores edge_pruning(const TinyFormer& model, std::span<const PatchedPair> data, const EdgePruningConfig& config, Regime regime)
{
    config.validate();
    check_data(data);
    std::vector<double> values;
    if (regime == Regime::NsDn) {
        const auto a = train_masks(model, data, config, Regime::Ns);
        const auto b = train_masks(model, data, config, Regime::Dn);
        values.resize(a.size());
        for (std::size_t e = 0; e < a.size(); ++e) values[e] = 0.5 * (a[e] + b[e]);
    } else {
        values = train_masks(model, data, config, regime);
    }
    return make_scores(model.graph(), std::move(values), regime, "edge_pruning");
}

// ---------------------------------------------------------------------------

std::string to_string(Algorithm a)
{
    switch (a) {
    case Algorithm::Eap: return "eap";
    case Algorithm::EdgePruning: return "edge_pruning";
    case Algorithm::Acdc: return "acdc";
    default: return "exact";
    }
}

Algorithm parse_algorithm(const std::string& s)
{
    if (s == "eap") return Algorithm::Eap;
    if (s == "edge_pruning") return Algorithm::EdgePruning;
    if (s == "acdc") return Algorithm::Acdc;
    if (s == "exact") return Algorithm::Exact;
    throw std::invalid_argument("unknown discovery algorithm '" + s + "'");
}

EdgeScores discover_scores(const TinyFormer& model, std::span<const PatchedPair> data, Algorithm algorithm,
                           const DiscoveryConfig& config, const EdgePruningConfig& pruning)
{
    const ComputationalGraph& g = model.graph();
    switch (algorithm) {
    case Algorithm::Eap: return eap(model, data, config).scores;
    case Algorithm::EdgePruning: return edge_pruning(model, data, pruning, config.regime);
    case Algorithm::Exact: {
        EdgeScores s = exact_patch_scores(model, data, config.regime, config.metric, config.batch_size);
        for (auto& v : s.values) v = std::abs(v);
        s.refresh_range();
        return s;
    }
    default: {
        const Circuit c = acdc(model, data, config);
        std::vector<double> values(g.edge_count(), 0.0);
        for (std::size_t i = 0; i < c.edges.size(); ++i) values[static_cast<std::size_t>(c.edges[i])] = c.scores[i];
        return make_scores(g, std::move(values), config.regime, "acdc");
    }
    }
}

}  // namespace clab
