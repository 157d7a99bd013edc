#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace clab {

/// Where a clause came from when a formula encodes circuit conflict.
enum class ClauseSource : std::uint8_t { None, Target, Pervasiveness };
/// Allocation clauses are the only ones that mention component variables.
enum class ClauseRole : std::uint8_t { Input, Output, Gate, Allocation };

std::string to_string(ClauseSource s);
std::string to_string(ClauseRole r);
ClauseSource parse_clause_source(const std::string& s);
ClauseRole parse_clause_role(const std::string& s);

struct ClauseTag {
    ClauseSource source = ClauseSource::None;
    ClauseRole role = ClauseRole::Input;
    /// Pervasiveness circuit index, -1 for the target.
    int circuit = -1;
    /// Graph node the clause is about, -1 if none.
    int node = -1;
    std::string label;

    friend bool operator==(const ClauseTag&, const ClauseTag&) = default;
};

/// DIMACS-style literals: +v / -v for variable v in [1, variables].
using Clause = std::vector<int>;

class CnfFormula {
public:
    CnfFormula() = default;
    explicit CnfFormula(int variables) : variables_(variables) {}

    int new_variable() { return ++variables_; }
    /// Throws std::invalid_argument on an empty clause or an out-of-range literal.
    std::size_t add(Clause clause, ClauseTag tag = {});

    [[nodiscard]] int variables() const { return variables_; }
    [[nodiscard]] std::size_t size() const { return clauses_.size(); }
    [[nodiscard]] const std::vector<Clause>& clauses() const { return clauses_; }
    [[nodiscard]] const Clause& clause(std::size_t i) const { return clauses_[i]; }
    [[nodiscard]] const std::vector<ClauseTag>& tags() const { return tags_; }
    [[nodiscard]] const ClauseTag& tag(std::size_t i) const { return tags_[i]; }

    /// Only the listed clauses, in the given order.
    [[nodiscard]] CnfFormula subset(const std::vector<std::size_t>& indices) const;
    /// Truth of every clause under `assignment` (index 0 unused).
    [[nodiscard]] bool satisfied_by(const std::vector<bool>& assignment) const;

private:
    int variables_ = 0;
    std::vector<Clause> clauses_;
    std::vector<ClauseTag> tags_;
};

std::string to_dimacs(const CnfFormula& cnf);
/// Accepts comment lines and clauses spanning lines. Tags come back empty.
CnfFormula parse_dimacs(const std::string& text);

/// Sidecar mapping clause index to its tag, one JSON object per clause.
std::string provenance_to_json(const CnfFormula& cnf);
/// Attaches tags from a sidecar to a formula read from DIMACS.
void apply_provenance(CnfFormula& cnf, const std::string& json_text);

}  // namespace clab
