#include "circuitlab/circmetrics/metrics.hpp"

#include "circuitlab/common/digest.hpp"
#include "circuitlab/taskgen/tasks.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace clab {

namespace {

bool passes(const ComputationalGraph& g, int edge, ClassFilter f)
{
    if (f == ClassFilter::All) return true;
    return g.edge_class(edge) == (f == ClassFilter::Attn ? ComponentClass::Attn : ComponentClass::MLP);
}

void check_pair(const ComputationalGraph& g, const EdgeScores& a, const EdgeScores& b)
{
    const std::string d = g.digest();
    if ((!a.graph_digest.empty() && a.graph_digest != d) || (!b.graph_digest.empty() && b.graph_digest != d))
        throw std::invalid_argument("circuit_distance: scores from a different graph");
    if (a.values.size() != g.edge_count() || b.values.size() != g.edge_count())
        throw std::invalid_argument("circuit_distance: score vector does not cover the graph");
}

Spearman class_rho(const ComputationalGraph& g, const EdgeScores& a, const EdgeScores& b, ClassFilter f)
{
    std::vector<double> x, y;
    for (std::size_t e = 0; e < g.edge_count(); ++e) {
        if (!passes(g, static_cast<int>(e), f)) continue;
        x.push_back(a.values[e]);
        y.push_back(b.values[e]);
    }
    if (x.empty()) return {0.0, true};
    return spearman(x, y);
}

void accumulate(StabilityResult& out, const ComputationalGraph& g, const EdgeScores& a, const EdgeScores& b)
{
    const Spearman all = class_rho(g, a, b, ClassFilter::All);
    const Spearman at = class_rho(g, a, b, ClassFilter::Attn);
    const Spearman ml = class_rho(g, a, b, ClassFilter::MLP);
    out.all += all.rho;
    out.pair_attn.push_back(at.rho);
    out.pair_mlp.push_back(ml.rho);
    if (all.degenerate || at.degenerate || ml.degenerate) ++out.degenerate;
}

void finish(StabilityResult& out)
{
    const auto k = static_cast<double>(out.pair_attn.size());
    out.all /= k;
    out.attn = std::accumulate(out.pair_attn.begin(), out.pair_attn.end(), 0.0) / k;
    out.mlp = std::accumulate(out.pair_mlp.begin(), out.pair_mlp.end(), 0.0) / k;
}

std::vector<std::vector<std::size_t>> subset_pair(std::size_t n, const StabilityConfig& c, std::size_t i)
{
    const double f = c.subset_fraction;
    try {
        if (c.same_subsets) {
            auto one = split_indices(n, std::span<const double>(&f, 1), mix_seed(c.seed, i));
            return {one[0], one[0]};
        }
        const double both[2] = {f, f};
        return split_indices(n, both, mix_seed(c.seed, i));
    } catch (const std::invalid_argument& e) {
        throw std::invalid_argument(std::string("circuit_stability: subsets too small for discovery (") + e.what() + ")");
    }
}

void check_stability(const StabilityConfig& c)
{
    if (c.k_pairs == 0) throw std::invalid_argument("circuit_stability: k_pairs must be >= 1");
    if (!(c.subset_fraction > 0.0 && c.subset_fraction <= 0.5))
        throw std::invalid_argument("circuit_stability: subset_fraction must lie in (0, 0.5]");
}

}  // namespace

double score_range(const EdgeScores& a, const EdgeScores& b)
{
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    for (const auto* s : {&a, &b})
        for (const double v : s->values) {
            lo = std::min(lo, std::abs(v));
            hi = std::max(hi, std::abs(v));
        }
    const double r = hi - lo;
    return (std::isfinite(r) && r > 0.0) ? r : 1.0;
}

double circuit_distance(const ComputationalGraph& graph, const EdgeScores& a, const EdgeScores& b, ClassFilter filter, double range)
{
    check_pair(graph, a, b);
    if (!(range > 0.0) || !std::isfinite(range)) throw std::invalid_argument("circuit_distance: range must be positive");
    double sum = 0.0;
    for (std::size_t e = 0; e < graph.edge_count(); ++e)
        if (passes(graph, static_cast<int>(e), filter)) sum += std::abs(a.values[e] - b.values[e]);
    return sum / range;
}

double circuit_distance(const ComputationalGraph& graph, const EdgeScores& a, const EdgeScores& b, ClassFilter filter)
{
    check_pair(graph, a, b);
    return circuit_distance(graph, a, b, filter, score_range(a, b));
}

EdgeScores circuit_scores(const ComputationalGraph& graph, const Circuit& c)
{
    if (c.graph_digest != graph.digest()) throw std::invalid_argument("circuit_scores: circuit from a different graph");
    std::vector<double> values(graph.edge_count(), 0.0);
    for (std::size_t i = 0; i < c.edges.size(); ++i) values[static_cast<std::size_t>(c.edges[i])] = c.scores[i];
    return make_scores(graph, std::move(values), c.regime, c.algorithm);
}

std::vector<double> average_ranks(std::span<const double> x)
{
    std::vector<std::size_t> order(x.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
    std::vector<double> ranks(x.size());
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i + 1;
        while (j < order.size() && x[order[j]] == x[order[i]]) ++j;
        const double r = static_cast<double>(i + 1 + j) / 2.0;
        for (std::size_t k = i; k < j; ++k) ranks[order[k]] = r;
        i = j;
    }
    return ranks;
}

Spearman spearman(std::span<const double> x, std::span<const double> y)
{
    if (x.size() != y.size()) throw std::invalid_argument("spearman: length mismatch");
    if (x.empty()) throw std::invalid_argument("spearman: empty input");
    for (std::size_t i = 0; i < x.size(); ++i)
        if (std::isnan(x[i]) || std::isnan(y[i])) throw std::invalid_argument("spearman: NaN input");
    const auto rx = average_ranks(x);
    const auto ry = average_ranks(y);
    // Doubled, centred ranks are integers, so every sum below is exact and
    // identical inputs give exactly 1.
    const double centre = static_cast<double>(x.size() + 1);
    double cov = 0.0, vx = 0.0, vy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double a = 2.0 * rx[i] - centre;
        const double b = 2.0 * ry[i] - centre;
        cov += a * b;
        vx += a * a;
        vy += b * b;
    }
    if (vx == 0.0 || vy == 0.0) return {0.0, true};
    return {std::clamp(cov / std::sqrt(vx * vy), -1.0, 1.0), false};
}

double spearman_rho(std::span<const double> x, std::span<const double> y) { return spearman(x, y).rho; }

StabilityResult circuit_stability(const ComputationalGraph& graph, const Matrix& per_example, const StabilityConfig& config)
{
    check_stability(config);
    if (static_cast<std::size_t>(per_example.cols()) != graph.edge_count())
        throw std::invalid_argument("circuit_stability: score matrix does not match graph");
    EdgeScores like;
    like.regime = config.discovery.regime;
    like.algorithm = "eap";
    like.graph_digest = graph.digest();
    StabilityResult out;
    for (std::size_t i = 0; i < config.k_pairs; ++i) {
        const auto parts = subset_pair(static_cast<std::size_t>(per_example.rows()), config, i);
        std::vector<Index> ra(parts[0].begin(), parts[0].end()), rb(parts[1].begin(), parts[1].end());
        accumulate(out, graph, aggregate_eap(per_example, ra, like, config.discovery.mean_of_absolutes),
                   aggregate_eap(per_example, rb, like, config.discovery.mean_of_absolutes));
    }
    finish(out);
    return out;
}

StabilityResult circuit_stability(const TinyFormer& model, std::span<const PatchedPair> data, const StabilityConfig& config)
{
    check_stability(config);
    if (config.algorithm == Algorithm::Eap) {
        subset_pair(data.size(), config, 0);  // size check before the expensive pass
        return circuit_stability(model.graph(), eap(model, data, config.discovery).per_example, config);
    }
    StabilityResult out;
    for (std::size_t i = 0; i < config.k_pairs; ++i) {
        const auto parts = subset_pair(data.size(), config, i);
        std::vector<EdgeScores> scores;
        for (const auto& idx : parts) {
            Dataset sub;
            for (const auto k : idx) sub.push_back(data[k]);
            scores.push_back(discover_scores(model, sub, config.algorithm, config.discovery, config.pruning));
        }
        accumulate(out, model.graph(), scores[0], scores[1]);
    }
    finish(out);
    return out;
}

std::string to_string(EvolutionState s)
{
    switch (s) {
    case EvolutionState::MigrateConsolidated: return "Migrate-Consolidated";
    case EvolutionState::RefineInPlace: return "Refine-InPlace";
    case EvolutionState::Reorganize: return "Reorganize";
    default: return "Stable";
    }
}

EvolutionState classify_evolution_state(double cd, double cs, double cd_split, double cs_split)
{
    if (!(cd_split > 0.0) || !(cs_split > 0.0)) throw std::invalid_argument("classify_evolution_state: splits must be positive");
    const bool big_cd = cd >= cd_split;
    const bool big_cs = std::abs(cs) >= cs_split;
    if (big_cd) return big_cs ? EvolutionState::MigrateConsolidated : EvolutionState::Reorganize;
    return big_cs ? EvolutionState::Stable : EvolutionState::RefineInPlace;
}

void MetricRecord::validate() const
{
    const auto need = [](bool ok, const char* what) {
        if (!ok) throw std::invalid_argument(std::string("metric record: ") + what);
    };
    for (const double cd : {cd_attn, cd_mlp, cd_attn_global, cd_mlp_global, cd_attn_step, cd_mlp_step})
        need(cd >= 0.0 && std::isfinite(cd), "cd must be finite and >= 0");
    for (const double cs : {cs_attn, cs_mlp}) need(cs >= -1.0 && cs <= 1.0, "cs outside [-1, 1]");
    need(cc >= 0, "cc must be >= 0");
    for (const double a : {t_acc, p_acc}) need(a >= 0.0 && a <= 1.0, "accuracy outside [0, 1]");
    need(step >= 0 && epoch >= 0 && optimizer_step >= 0, "negative step index");
}

std::string record_to_json(const MetricRecord& r)
{
    nlohmann::ordered_json j;
    j["step"] = r.step;
    j["epoch"] = r.epoch;
    j["optimizer_step"] = r.optimizer_step;
    j["cd_attn"] = r.cd_attn;
    j["cd_mlp"] = r.cd_mlp;
    j["cd_attn_global"] = r.cd_attn_global;
    j["cd_mlp_global"] = r.cd_mlp_global;
    j["cd_attn_step"] = r.cd_attn_step;
    j["cd_mlp_step"] = r.cd_mlp_step;
    j["cs_attn"] = r.cs_attn;
    j["cs_mlp"] = r.cs_mlp;
    j["cc"] = r.cc;
    j["t_acc"] = r.t_acc;
    j["p_acc"] = r.p_acc;
    j["loss"] = r.loss;
    j["scores_digest"] = r.scores_digest;
    return j.dump();
}

MetricRecord record_from_json(const std::string& line)
{
    const auto j = nlohmann::json::parse(line);
    MetricRecord r;
    r.step = j.at("step").get<int>();
    r.epoch = j.at("epoch").get<int>();
    r.optimizer_step = j.at("optimizer_step").get<int>();
    r.cd_attn = j.at("cd_attn").get<double>();
    r.cd_mlp = j.at("cd_mlp").get<double>();
    r.cd_attn_global = j.at("cd_attn_global").get<double>();
    r.cd_mlp_global = j.at("cd_mlp_global").get<double>();
    r.cd_attn_step = j.at("cd_attn_step").get<double>();
    r.cd_mlp_step = j.at("cd_mlp_step").get<double>();
    r.cs_attn = j.at("cs_attn").get<double>();
    r.cs_mlp = j.at("cs_mlp").get<double>();
    r.cc = j.at("cc").get<int>();
    r.t_acc = j.at("t_acc").get<double>();
    r.p_acc = j.at("p_acc").get<double>();
    r.loss = j.at("loss").get<double>();
    r.scores_digest = j.at("scores_digest").get<std::string>();
    r.validate();
    return r;
}

std::string records_to_jsonl(std::span<const MetricRecord> records)
{
    std::string out;
    for (const auto& r : records) out += record_to_json(r) + "\n";
    return out;
}

std::vector<MetricRecord> records_from_jsonl(const std::string& text)
{
    std::istringstream in(text);
    std::string line;
    std::vector<MetricRecord> out;
    int n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (line.empty()) continue;
        try {
            out.push_back(record_from_json(line));
        } catch (const std::exception& e) {
            throw std::runtime_error("metrics line " + std::to_string(n) + ": " + e.what());
        }
    }
    return out;
}

std::string scores_digest(const EdgeScores& s)
{
    Digest d;
    d.text(s.algorithm).text(to_string(s.regime)).text(s.graph_digest).f64s(s.values);
    return d.hex();
}

}  // namespace clab
