#include "circuitlab/satcore/conflict.hpp"

#include "circuitlab/satcore/solver.hpp"

#include <algorithm>
#include <set>
#include <stdexcept>

namespace clab {

namespace {

bool allocatable(const ComputationalGraph& graph, int node) { return component_class(graph.node(node)) != ComponentClass::Other; }

void encode_one(const ComputationalGraph& graph, const LogicalCircuit& lc, ClauseSource source, int circuit, ConflictEncoding& enc)
{
    const auto labelled = lc.labelled_edges();
    std::set<int> nodes;
    std::map<int, std::vector<int>> senders;
    for (const auto& [e, g] : labelled) {
        const Edge& edge = graph.edges()[static_cast<std::size_t>(e)];
        nodes.insert(edge.sender);
        nodes.insert(edge.receiver);
        senders[edge.receiver].push_back(edge.sender);
    }
    if (nodes.empty()) return;

    const bool target = source == ClauseSource::Target;
    const std::string who = target ? "target" : "perv" + std::to_string(circuit);
    CnfFormula& cnf = enc.cnf;
    std::map<int, int> f;
    for (const int v : nodes) f[v] = cnf.new_variable();
    const auto tag = [&](ClauseRole role, int node) {
        return ClauseTag{source, role, target ? -1 : circuit, node, who + ":" + to_string(graph.node(node)) + ":" + to_string(role)};
    };

    const int unembed = graph.index_of(ComponentId::unembed());
    const int out = nodes.contains(unembed) ? unembed : *nodes.rbegin();
    cnf.add({f[out]}, tag(ClauseRole::Output, out));

    for (const auto& [r, ss] : senders) {
        Gate g = lc.receiver_gates.at(r);
        if (g == Gate::Adder) g = target ? Gate::Or : Gate::And;
        if (g == Gate::And) {
            for (const int s : ss) cnf.add({-f[r], f[s]}, tag(ClauseRole::Gate, r));
        } else {
            Clause c{-f[r]};
            for (const int s : ss) c.push_back(f[s]);
            cnf.add(std::move(c), tag(ClauseRole::Gate, r));
        }
    }
    for (const int v : nodes) {
        const int x = enc.component_var[static_cast<std::size_t>(v)];
        if (x == 0) continue;
        cnf.add({-f[v], target ? x : -x}, tag(ClauseRole::Allocation, v));
    }
}

}  // namespace

ConflictEncoding encode_conflict(const ComputationalGraph& graph, const LogicalCircuit& target,
                                 const std::vector<LogicalCircuit>& pervasiveness)
{
    const std::string d = graph.digest();
    if (target.graph_digest != d) throw std::invalid_argument("encode_conflict: target circuit is over a different component universe");
    for (const auto& p : pervasiveness)
        if (p.graph_digest != d) throw std::invalid_argument("encode_conflict: pervasiveness circuit is over a different component universe");
    if (target.labelled_edges().empty()) throw std::invalid_argument("encode_conflict: empty target circuit");

    ConflictEncoding enc;
    enc.component_var.assign(graph.node_count(), 0);
    for (std::size_t v = 0; v < graph.node_count(); ++v)
        if (allocatable(graph, static_cast<int>(v))) enc.component_var[v] = enc.cnf.new_variable();
    encode_one(graph, target, ClauseSource::Target, -1, enc);
    for (std::size_t i = 0; i < pervasiveness.size(); ++i)
        encode_one(graph, pervasiveness[i], ClauseSource::Pervasiveness, static_cast<int>(i), enc);
    return enc;
}

ConflictResult circuit_conflict_detail(const ComputationalGraph& graph, const LogicalCircuit& target,
                                       const std::vector<LogicalCircuit>& pervasiveness)
{
    ConflictResult res;
    res.encoding = encode_conflict(graph, target, pervasiveness);
    if (solve(res.encoding.cnf).sat()) return res;
    res.sat = false;
    res.core = minimal_unsat_core(res.encoding.cnf);
    res.cc = static_cast<int>(std::count_if(res.core.begin(), res.core.end(), [&](std::size_t i) {
        return res.encoding.cnf.tag(i).role == ClauseRole::Allocation;
    }));
    return res;
}

int circuit_conflict(const ComputationalGraph& graph, const LogicalCircuit& target, const std::vector<LogicalCircuit>& pervasiveness)
{
    return circuit_conflict_detail(graph, target, pervasiveness).cc;
}

}  // namespace clab
