#include "circuitlab/circuitfind/circuit.hpp"

#include "circuitlab/common/digest.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace clab {

using ojson = nlohmann::ordered_json;

std::string to_string(Regime r)
{
    switch (r) {
    case Regime::Ns: return "Ns";
    case Regime::Dn: return "Dn";
    default: return "NsDn";
    }
}

Regime parse_regime(const std::string& s)
{
    if (s == "Ns") return Regime::Ns;
    if (s == "Dn") return Regime::Dn;
    if (s == "NsDn") return Regime::NsDn;
    throw std::invalid_argument("unknown regime '" + s + "'");
}

std::string to_string(Gate g)
{
    switch (g) {
    case Gate::And: return "AND";
    case Gate::Or: return "OR";
    default: return "ADDER";
    }
}

Gate parse_gate(const std::string& s)
{
    if (s == "AND") return Gate::And;
    if (s == "OR") return Gate::Or;
    if (s == "ADDER") return Gate::Adder;
    throw std::invalid_argument("unknown gate '" + s + "'");
}

void DiscoveryConfig::validate() const
{
    if (tau.has_value() == sparsity_target.has_value())
        throw std::invalid_argument("discovery config: set exactly one of tau / sparsity_target");
    if (tau && (std::isnan(*tau) || *tau < 0.0)) throw std::invalid_argument("discovery config: tau must be >= 0");
    if (sparsity_target && (*sparsity_target < 0.0 || *sparsity_target >= 1.0))
        throw std::invalid_argument("discovery config: sparsity_target must lie in [0, 1)");
    if (batch_size == 0) throw std::invalid_argument("discovery config: batch_size must be >= 1");
}

void EdgeScores::refresh_range()
{
    if (values.empty()) {
        range_min = range_max = 0.0;
        return;
    }
    range_min = std::abs(values[0]);
    range_max = range_min;
    for (const double v : values) {
        range_min = std::min(range_min, std::abs(v));
        range_max = std::max(range_max, std::abs(v));
    }
}

EdgeScores make_scores(const ComputationalGraph& graph, std::vector<double> values, Regime regime, std::string algorithm)
{
    if (values.size() != graph.edge_count()) throw std::invalid_argument("edge scores: size does not match graph");
    EdgeScores s;
    s.values = std::move(values);
    s.regime = regime;
    s.algorithm = std::move(algorithm);
    s.graph_digest = graph.digest();
    s.refresh_range();
    return s;
}

bool Circuit::contains(int edge) const { return std::binary_search(edges.begin(), edges.end(), edge); }

std::optional<Gate> LogicalCircuit::gate_of(int edge) const
{
    if (std::binary_search(c_and.begin(), c_and.end(), edge)) return Gate::And;
    if (std::binary_search(c_or.begin(), c_or.end(), edge)) return Gate::Or;
    if (std::binary_search(c_adder.begin(), c_adder.end(), edge)) return Gate::Adder;
    return std::nullopt;
}

std::vector<std::pair<int, Gate>> LogicalCircuit::labelled_edges() const
{
    std::vector<std::pair<int, Gate>> out;
    for (const int e : c_and) out.emplace_back(e, Gate::And);
    for (const int e : c_or) out.emplace_back(e, Gate::Or);
    for (const int e : c_adder) out.emplace_back(e, Gate::Adder);
    std::sort(out.begin(), out.end());
    return out;
}

LogicalCircuit make_logical_circuit(const ComputationalGraph& graph, const std::vector<std::pair<int, Gate>>& labels)
{
    LogicalCircuit lc;
    lc.graph_digest = graph.digest();
    std::map<int, std::array<int, 3>> votes;
    for (const auto& [e, g] : labels) {
        if (e < 0 || static_cast<std::size_t>(e) >= graph.edge_count()) throw std::out_of_range("gate label on unknown edge");
        (g == Gate::And ? lc.c_and : g == Gate::Or ? lc.c_or : lc.c_adder).push_back(e);
        ++votes[graph.edges()[static_cast<std::size_t>(e)].receiver][static_cast<std::size_t>(g)];
    }
    for (auto* v : {&lc.c_and, &lc.c_or, &lc.c_adder}) {
        std::sort(v->begin(), v->end());
        if (std::adjacent_find(v->begin(), v->end()) != v->end()) throw std::invalid_argument("duplicate gate label");
    }
    for (const auto& [r, v] : votes) {
        // Ties resolve toward ADDER, then AND.
        Gate best = Gate::Adder;
        int count = v[2];
        if (v[0] > count) {
            best = Gate::And;
            count = v[0];
        }
        if (v[1] > count) best = Gate::Or;
        lc.receiver_gates[r] = best;
    }
    const auto labelled = lc.labelled_edges();
    for (std::size_t i = 1; i < labelled.size(); ++i)
        if (labelled[i].first == labelled[i - 1].first) throw std::invalid_argument("edge carries two gate labels");
    return lc;
}

LogicalCircuit classify_gates(const ComputationalGraph& graph, const Circuit& c_ns, const Circuit& c_dn)
{
    const std::string d = graph.digest();
    if (c_ns.graph_digest != d || c_dn.graph_digest != d) throw std::invalid_argument("classify_gates: circuits from different graphs");
    std::vector<std::pair<int, Gate>> labels;
    for (const int e : c_ns.edges) labels.emplace_back(e, c_dn.contains(e) ? Gate::Adder : Gate::And);
    for (const int e : c_dn.edges)
        if (!c_ns.contains(e)) labels.emplace_back(e, Gate::Or);
    return make_logical_circuit(graph, labels);
}

Circuit threshold_circuit(const ComputationalGraph& graph, const EdgeScores& scores, const DiscoveryConfig& config)
{
    config.validate();
    if (scores.values.empty()) throw std::invalid_argument("threshold_circuit: no scores");
    if (scores.values.size() != graph.edge_count()) throw std::invalid_argument("threshold_circuit: scores do not match graph");
    std::vector<int> order(scores.values.size());
    std::iota(order.begin(), order.end(), 0);
    // Edges are stored sorted by (sender, receiver), so index order is the tie order.
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return std::abs(scores.values[static_cast<std::size_t>(a)]) > std::abs(scores.values[static_cast<std::size_t>(b)]);
    });
    std::size_t keep = 0;
    if (config.tau) {
        while (keep < order.size() && std::abs(scores.values[static_cast<std::size_t>(order[keep])]) > *config.tau) ++keep;
    } else {
        const double e = static_cast<double>(order.size());
        keep = static_cast<std::size_t>(std::floor((1.0 - *config.sparsity_target) * e + 1e-9));
        if (keep == 0) throw std::invalid_argument("threshold_circuit: sparsity target retains zero edges");
    }
    Circuit c;
    c.edges.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep));
    std::sort(c.edges.begin(), c.edges.end());
    for (const int e : c.edges) c.scores.push_back(scores.values[static_cast<std::size_t>(e)]);
    c.regime = scores.regime;
    c.algorithm = scores.algorithm;
    c.graph_digest = graph.digest();
    std::ostringstream cfg;
    cfg.precision(17);
    if (config.tau) cfg << "tau=" << *config.tau;
    else cfg << "sparsity=" << *config.sparsity_target;
    c.config = cfg.str();
    return c;
}

std::size_t eligible_count(const ComputationalGraph& graph)
{
    return static_cast<std::size_t>(std::count_if(graph.nodes().begin(), graph.nodes().end(), [](const ComponentId& id) { return is_eligible(id); }));
}

Localization localize_components(const ComputationalGraph& graph, const EdgeScores& scores, std::size_t n)
{
    if (scores.values.size() != graph.edge_count()) throw std::invalid_argument("localize_components: scores do not match graph");
    if (n > eligible_count(graph)) throw std::invalid_argument("localize_components: budget exceeds eligible components");
    Localization out;
    out.importance.assign(graph.node_count(), 0.0);
    for (std::size_t e = 0; e < graph.edge_count(); ++e) {
        const Edge& edge = graph.edges()[e];
        const double v = std::abs(scores.values[e]);
        if (is_eligible(graph.node(edge.sender))) out.importance[static_cast<std::size_t>(edge.sender)] += v;
        if (is_eligible(graph.node(edge.receiver))) out.importance[static_cast<std::size_t>(edge.receiver)] += v;
    }
    std::vector<int> cand;
    for (std::size_t i = 0; i < graph.node_count(); ++i)
        if (is_eligible(graph.nodes()[i])) cand.push_back(static_cast<int>(i));
    std::stable_sort(cand.begin(), cand.end(), [&](int a, int b) {
        return out.importance[static_cast<std::size_t>(a)] > out.importance[static_cast<std::size_t>(b)];
    });
    out.nodes.assign(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(n));
    for (const int v : out.nodes) {
        if (component_class(graph.node(v)) == ComponentClass::Attn) ++out.attn_count;
        else ++out.mlp_count;
    }
    return out;
}

// ---------------------------------------------------------------------------
// JSON

namespace {

std::string content_digest(const ojson& j)
{
    Digest d;
    d.text(j.dump());
    return d.hex();
}

int edge_by_names(const ComputationalGraph& g, const std::string& s, const std::string& r)
{
    const int e = g.find_edge(g.index_of(parse_component(s)), g.index_of(parse_component(r)));
    if (e < 0) throw std::runtime_error("circuit file names an edge not in the graph: " + s + "->" + r);
    return e;
}

}  // namespace

std::string circuit_to_json(const ComputationalGraph& graph, const Circuit& c, const LogicalCircuit* gates)
{
    ojson j;
    j["format"] = "circuitlab.circuit";
    j["version"] = kCircuitFormatVersion;
    j["graph_digest"] = c.graph_digest;
    j["regime"] = to_string(c.regime);
    j["algorithm"] = c.algorithm;
    j["config"] = c.config;
    j["dataset_digest"] = c.dataset_digest;
    j["weights_digest"] = c.weights_digest;
    ojson edges = ojson::array();
    for (std::size_t i = 0; i < c.edges.size(); ++i) {
        const Edge& e = graph.edges()[static_cast<std::size_t>(c.edges[i])];
        ojson item;
        item["sender"] = to_string(graph.node(e.sender));
        item["receiver"] = to_string(graph.node(e.receiver));
        item["score"] = c.scores[i];
        edges.push_back(item);
    }
    j["edges"] = edges;
    if (gates != nullptr) {
        ojson gl = ojson::array();
        for (const auto& [idx, g] : gates->labelled_edges()) {
            const Edge& e = graph.edges()[static_cast<std::size_t>(idx)];
            ojson item;
            item["sender"] = to_string(graph.node(e.sender));
            item["receiver"] = to_string(graph.node(e.receiver));
            item["gate"] = to_string(g);
            gl.push_back(item);
        }
        j["gates"] = gl;
    }
    j["digest"] = content_digest(j);
    return j.dump(2) + "\n";
}

Circuit circuit_from_json(const ComputationalGraph& graph, const std::string& text, LogicalCircuit* gates)
{
    ojson j = ojson::parse(text);
    if (j.value("format", "") != "circuitlab.circuit") throw std::runtime_error("not a circuit file");
    if (j.at("version").get<int>() != kCircuitFormatVersion)
        throw std::runtime_error("unsupported circuit file version " + std::to_string(j.at("version").get<int>()));
    const std::string stored = j.at("digest").get<std::string>();
    j.erase("digest");
    if (content_digest(j) != stored) throw std::runtime_error("circuit file integrity error: digest mismatch");
    Circuit c;
    c.graph_digest = j.at("graph_digest").get<std::string>();
    if (c.graph_digest != graph.digest()) throw std::runtime_error("circuit file was written for a different graph");
    c.regime = parse_regime(j.at("regime").get<std::string>());
    c.algorithm = j.at("algorithm").get<std::string>();
    c.config = j.at("config").get<std::string>();
    c.dataset_digest = j.at("dataset_digest").get<std::string>();
    c.weights_digest = j.at("weights_digest").get<std::string>();
    std::vector<std::pair<int, double>> items;
    for (const auto& item : j.at("edges"))
        items.emplace_back(edge_by_names(graph, item.at("sender").get<std::string>(), item.at("receiver").get<std::string>()),
                           item.at("score").get<double>());
    std::sort(items.begin(), items.end());
    for (const auto& [e, s] : items) {
        c.edges.push_back(e);
        c.scores.push_back(s);
    }
    if (gates != nullptr && j.contains("gates")) {
        std::vector<std::pair<int, Gate>> labels;
        for (const auto& item : j.at("gates"))
            labels.emplace_back(edge_by_names(graph, item.at("sender").get<std::string>(), item.at("receiver").get<std::string>()),
                                parse_gate(item.at("gate").get<std::string>()));
        *gates = make_logical_circuit(graph, labels);
    }
    return c;
}

void write_circuit(const std::filesystem::path& path, const ComputationalGraph& graph, const Circuit& c, const LogicalCircuit* gates)
{
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << circuit_to_json(graph, c, gates);
}

Circuit read_circuit(const std::filesystem::path& path, const ComputationalGraph& graph, LogicalCircuit* gates)
{
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot read " + path.string());
    std::stringstream ss;
    ss << f.rdbuf();
    return circuit_from_json(graph, ss.str(), gates);
}

std::string scores_to_json(const ComputationalGraph& graph, const EdgeScores& s)
{
    ojson j;
    j["format"] = "circuitlab.scores";
    j["version"] = kCircuitFormatVersion;
    j["graph_digest"] = s.graph_digest;
    j["regime"] = to_string(s.regime);
    j["algorithm"] = s.algorithm;
    j["range_min"] = s.range_min;
    j["range_max"] = s.range_max;
    ojson edges = ojson::array();
    for (std::size_t e = 0; e < s.values.size(); ++e) {
        const Edge& edge = graph.edges()[e];
        ojson item;
        item["sender"] = to_string(graph.node(edge.sender));
        item["receiver"] = to_string(graph.node(edge.receiver));
        item["score"] = s.values[e];
        edges.push_back(item);
    }
    j["edges"] = edges;
    j["digest"] = content_digest(j);
    return j.dump(2) + "\n";
}

EdgeScores scores_from_json(const ComputationalGraph& graph, const std::string& text)
{
    ojson j = ojson::parse(text);
    if (j.value("format", "") != "circuitlab.scores") throw std::runtime_error("not a scores file");
    if (j.at("version").get<int>() != kCircuitFormatVersion) throw std::runtime_error("unsupported scores file version");
    const std::string stored = j.at("digest").get<std::string>();
    j.erase("digest");
    if (content_digest(j) != stored) throw std::runtime_error("scores file integrity error: digest mismatch");
    if (j.at("graph_digest").get<std::string>() != graph.digest()) throw std::runtime_error("scores file was written for a different graph");
    std::vector<double> values(graph.edge_count(), 0.0);
    for (const auto& item : j.at("edges"))
        values[static_cast<std::size_t>(edge_by_names(graph, item.at("sender").get<std::string>(), item.at("receiver").get<std::string>()))] =
            item.at("score").get<double>();
    return make_scores(graph, std::move(values), parse_regime(j.at("regime").get<std::string>()), j.at("algorithm").get<std::string>());
}

}  // namespace clab
