#pragma once

#include "circuitlab/satcore/cnf.hpp"

#include <cstdint>
#include <vector>

namespace clab {

enum class SatStatus : std::uint8_t { Sat, Unsat };

struct SatResult {
    SatStatus status = SatStatus::Unsat;
    /// Indexed by variable, slot 0 unused. Empty unless SAT.
    std::vector<bool> assignment;
    /// Clause indices of a core, when one was asked for.
    std::vector<std::size_t> core;
    /// Assumptions that took part in the final conflict.
    std::vector<int> failed_assumptions;

    [[nodiscard]] bool sat() const { return status == SatStatus::Sat; }
};

/// CDCL with two watched literals and first-UIP learning. Branches on the
/// lowest unassigned variable, true first. Learnt clauses persist across
/// solve() calls, so assumptions make it usable incrementally.
class Solver {
public:
    explicit Solver(int variables = 0);

    int new_variable();
    void add_clause(const Clause& clause);
    [[nodiscard]] int variables() const { return static_cast<int>(value_.size()); }

    SatResult solve(const std::vector<int>& assumptions = {});

    [[nodiscard]] std::uint64_t conflicts() const { return conflicts_; }
    [[nodiscard]] std::uint64_t decisions() const { return decisions_; }

private:
    using Lit = std::uint32_t;
    static Lit lit(int dimacs);
    static int dimacs(Lit l);

    [[nodiscard]] std::int8_t value(Lit l) const;
    void assign(Lit l, int reason);
    int propagate();
    void analyze(int conflict, std::vector<Lit>& learnt, int& backjump);
    std::vector<int> analyze_final(Lit failed);
    void backtrack(int level);
    [[nodiscard]] int level() const { return static_cast<int>(trail_lim_.size()); }
    int attach(std::vector<Lit> lits);

    std::vector<std::vector<Lit>> clauses_;
    std::vector<std::vector<int>> watches_;
    std::vector<std::int8_t> value_;  // per variable: -1 unassigned, 0 false, 1 true
    std::vector<int> level_;
    std::vector<int> reason_;
    std::vector<char> seen_;
    std::vector<Lit> trail_;
    std::vector<std::size_t> trail_lim_;
    std::size_t qhead_ = 0;
    bool inconsistent_ = false;
    std::uint64_t conflicts_ = 0;
    std::uint64_t decisions_ = 0;
};

SatResult solve(const CnfFormula& cnf, const std::vector<int>& assumptions = {});

/// Deletion-based minimal core over per-clause selector assumptions, clauses
/// tried in index order. Every returned clause is necessary: dropping any one
/// makes the rest satisfiable. Throws std::invalid_argument if `cnf` is SAT.
std::vector<std::size_t> minimal_unsat_core(const CnfFormula& cnf);

}  // namespace clab
