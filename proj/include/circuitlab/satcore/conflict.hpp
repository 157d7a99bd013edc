#pragma once

#include "circuitlab/circuitfind/circuit.hpp"
#include "circuitlab/satcore/cnf.hpp"

#include <optional>
#include <vector>

namespace clab {

struct ConflictEncoding {
    CnfFormula cnf;
    /// Allocation variable per graph node; 0 for Embed / Unembed, which every
    /// task shares and so cannot be allocated.
    std::vector<int> component_var;
};

/// x_c = "component c belongs to the target update". The target must stay
/// functional using only allocated components, every pervasiveness circuit
/// only unallocated ones. ADDER reads as OR in the target and AND elsewhere.
ConflictEncoding encode_conflict(const ComputationalGraph& graph, const LogicalCircuit& target,
                                 const std::vector<LogicalCircuit>& pervasiveness);

struct ConflictResult {
    int cc = 0;
    bool sat = true;
    /// Minimal core, clause indices into encoding.cnf.
    std::vector<std::size_t> core;
    ConflictEncoding encoding;
};

ConflictResult circuit_conflict_detail(const ComputationalGraph& graph, const LogicalCircuit& target,
                                       const std::vector<LogicalCircuit>& pervasiveness);
/// Number of allocation clauses in a minimal UNSAT core, 0 when satisfiable.
int circuit_conflict(const ComputationalGraph& graph, const LogicalCircuit& target, const std::vector<LogicalCircuit>& pervasiveness);

}  // namespace clab
