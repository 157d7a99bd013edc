#include "circuitlab/satcore/cnf.hpp"

#include <json.hpp>

#include <cstdlib>
#include <sstream>
#include <stdexcept>

namespace clab {

std::string to_string(ClauseSource s)
{
    switch (s) {
    case ClauseSource::Target: return "target";
    case ClauseSource::Pervasiveness: return "pervasiveness";
    default: return "none";
    }
}

std::string to_string(ClauseRole r)
{
    switch (r) {
    case ClauseRole::Output: return "output";
    case ClauseRole::Gate: return "gate";
    case ClauseRole::Allocation: return "allocation";
    default: return "input";
    }
}

ClauseSource parse_clause_source(const std::string& s)
{
    if (s == "target") return ClauseSource::Target;
    if (s == "pervasiveness") return ClauseSource::Pervasiveness;
    if (s == "none") return ClauseSource::None;
    throw std::invalid_argument("unknown clause source '" + s + "'");
}

ClauseRole parse_clause_role(const std::string& s)
{
    if (s == "output") return ClauseRole::Output;
    if (s == "gate") return ClauseRole::Gate;
    if (s == "allocation") return ClauseRole::Allocation;
    if (s == "input") return ClauseRole::Input;
    throw std::invalid_argument("unknown clause role '" + s + "'");
}

std::size_t CnfFormula::add(Clause clause, ClauseTag tag)
{
    if (clause.empty()) throw std::invalid_argument("cnf: empty clause");
    for (const int l : clause)
        if (l == 0 || std::abs(l) > variables_) throw std::invalid_argument("cnf: literal " + std::to_string(l) + " out of range");
    clauses_.push_back(std::move(clause));
    tags_.push_back(std::move(tag));
    return clauses_.size() - 1;
}

CnfFormula CnfFormula::subset(const std::vector<std::size_t>& indices) const
{
    CnfFormula out(variables_);
    for (const auto i : indices) out.add(clauses_.at(i), tags_.at(i));
    return out;
}

bool CnfFormula::satisfied_by(const std::vector<bool>& assignment) const
{
    if (assignment.size() < static_cast<std::size_t>(variables_) + 1) return false;
    for (const auto& c : clauses_) {
        bool any = false;
        for (const int l : c) any = any || assignment[static_cast<std::size_t>(std::abs(l))] == (l > 0);
        if (!any) return false;
    }
    return true;
}

std::string to_dimacs(const CnfFormula& cnf)
{
    std::ostringstream out;
    out << "p cnf " << cnf.variables() << ' ' << cnf.size() << '\n';
    for (const auto& c : cnf.clauses()) {
        for (const int l : c) out << l << ' ';
        out << "0\n";
    }
    return out.str();
}

CnfFormula parse_dimacs(const std::string& text)
{
    std::istringstream in(text);
    std::string line;
    int vars = -1;
    long declared = -1;
    CnfFormula cnf;
    Clause pending;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::istringstream ls(line);
        std::string first;
        if (!(ls >> first) || first[0] == 'c' || first[0] == '%') continue;
        if (first == "p") {
            std::string fmt;
            if (vars >= 0 || !(ls >> fmt >> vars >> declared) || fmt != "cnf" || vars < 0 || declared < 0)
                throw std::runtime_error("dimacs line " + std::to_string(lineno) + ": bad header");
            cnf = CnfFormula(vars);
            continue;
        }
        if (vars < 0) throw std::runtime_error("dimacs line " + std::to_string(lineno) + ": clause before header");
        std::istringstream cs(line);
        long l = 0;
        while (cs >> l) {
            if (l == 0) {
                if (pending.empty()) throw std::runtime_error("dimacs line " + std::to_string(lineno) + ": empty clause");
                try {
                    cnf.add(std::move(pending));
                } catch (const std::invalid_argument& e) {
                    throw std::runtime_error("dimacs line " + std::to_string(lineno) + ": " + e.what());
                }
                pending.clear();
            } else {
                pending.push_back(static_cast<int>(l));
            }
        }
        if (!cs.eof()) throw std::runtime_error("dimacs line " + std::to_string(lineno) + ": not an integer");
    }
    if (vars < 0) throw std::runtime_error("dimacs: missing header");
    if (!pending.empty()) throw std::runtime_error("dimacs: unterminated clause");
    if (static_cast<long>(cnf.size()) != declared)
        throw std::runtime_error("dimacs: header declares " + std::to_string(declared) + " clauses, found " + std::to_string(cnf.size()));
    return cnf;
}

std::string provenance_to_json(const CnfFormula& cnf)
{
    nlohmann::ordered_json j;
    j["version"] = 1;
    j["clauses"] = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < cnf.size(); ++i) {
        const auto& t = cnf.tag(i);
        j["clauses"].push_back({{"index", i},
                                {"source", to_string(t.source)},
                                {"role", to_string(t.role)},
                                {"circuit", t.circuit},
                                {"node", t.node},
                                {"label", t.label}});
    }
    return j.dump(1);
}

void apply_provenance(CnfFormula& cnf, const std::string& json_text)
{
    const auto j = nlohmann::json::parse(json_text);
    if (j.at("version").get<int>() != 1) throw std::runtime_error("provenance: unsupported version");
    const auto& arr = j.at("clauses");
    if (arr.size() != cnf.size()) throw std::runtime_error("provenance: clause count mismatch");
    CnfFormula out(cnf.variables());
    for (std::size_t i = 0; i < arr.size(); ++i) {
        const auto& c = arr[i];
        if (c.at("index").get<std::size_t>() != i) throw std::runtime_error("provenance: clause indices out of order");
        ClauseTag t;
        t.source = parse_clause_source(c.at("source").get<std::string>());
        t.role = parse_clause_role(c.at("role").get<std::string>());
        t.circuit = c.at("circuit").get<int>();
        t.node = c.at("node").get<int>();
        t.label = c.at("label").get<std::string>();
        out.add(cnf.clause(i), std::move(t));
    }
    cnf = std::move(out);
}

}  // namespace clab
