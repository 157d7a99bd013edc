#include "circuitlab/satcore/solver.hpp"

#include <algorithm>
#include <cstdlib>
#include <stdexcept>

namespace clab {

namespace {
constexpr std::int8_t kUnset = -1;
}

Solver::Lit Solver::lit(int d) { return static_cast<Lit>(2 * (std::abs(d) - 1) + (d < 0 ? 1 : 0)); }
int Solver::dimacs(Lit l) { return (l & 1U) ? -static_cast<int>(l / 2 + 1) : static_cast<int>(l / 2 + 1); }

Solver::Solver(int variables)
{
    for (int i = 0; i < variables; ++i) new_variable();
}

int Solver::new_variable()
{
    value_.push_back(kUnset);
    level_.push_back(0);
    reason_.push_back(-1);
    seen_.push_back(0);
    watches_.emplace_back();
    watches_.emplace_back();
    return variables();
}

std::int8_t Solver::value(Lit l) const
{
    const std::int8_t v = value_[l >> 1];
    return v == kUnset ? kUnset : static_cast<std::int8_t>(v ^ static_cast<std::int8_t>(l & 1U));
}

void Solver::assign(Lit l, int reason)
{
    const auto v = l >> 1;
    value_[v] = static_cast<std::int8_t>((l & 1U) ? 0 : 1);
    level_[v] = level();
    reason_[v] = reason;
    trail_.push_back(l);
}

void Solver::backtrack(int lvl)
{
    if (level() <= lvl) return;
    const std::size_t keep = trail_lim_[static_cast<std::size_t>(lvl)];
    for (std::size_t i = trail_.size(); i-- > keep;) {
        const auto v = trail_[i] >> 1;
        value_[v] = kUnset;
        reason_[v] = -1;
    }
    trail_.resize(keep);
    trail_lim_.resize(static_cast<std::size_t>(lvl));
    qhead_ = std::min(qhead_, keep);
}

int Solver::attach(std::vector<Lit> lits)
{
    const int cr = static_cast<int>(clauses_.size());
    watches_[lits[0]].push_back(cr);
    watches_[lits[1]].push_back(cr);
    clauses_.push_back(std::move(lits));
    return cr;
}

void Solver::add_clause(const Clause& clause)
{
    if (clause.empty()) throw std::invalid_argument("solver: empty clause");
    backtrack(0);
    if (inconsistent_) return;
    std::vector<Lit> lits;
    for (const int d : clause) {
        if (d == 0) throw std::invalid_argument("solver: literal 0");
        while (std::abs(d) > variables()) new_variable();
        lits.push_back(lit(d));
    }
    std::sort(lits.begin(), lits.end());
    lits.erase(std::unique(lits.begin(), lits.end()), lits.end());
    std::vector<Lit> kept;
    for (std::size_t i = 0; i < lits.size(); ++i) {
        if (i + 1 < lits.size() && (lits[i] ^ 1U) == lits[i + 1]) return;  // tautology
        const auto v = value(lits[i]);
        if (v == 1) return;
        if (v == kUnset) kept.push_back(lits[i]);
    }
    if (kept.empty()) {
        inconsistent_ = true;
    } else if (kept.size() == 1) {
        assign(kept[0], -1);
        if (propagate() >= 0) inconsistent_ = true;
    } else {
        attach(std::move(kept));
    }
}

int Solver::propagate()
{
    while (qhead_ < trail_.size()) {
        const Lit false_lit = trail_[qhead_++] ^ 1U;
        auto& ws = watches_[false_lit];
        std::size_t i = 0;
        std::size_t j = 0;
        while (i < ws.size()) {
            const int cr = ws[i++];
            auto& c = clauses_[static_cast<std::size_t>(cr)];
            if (c[0] == false_lit) std::swap(c[0], c[1]);
            if (value(c[0]) == 1) {
                ws[j++] = cr;
                continue;
            }
            bool moved = false;
            for (std::size_t k = 2; k < c.size(); ++k) {
                if (value(c[k]) != 0) {
                    std::swap(c[1], c[k]);
                    watches_[c[1]].push_back(cr);
                    moved = true;
                    break;
                }
            }
            if (moved) continue;
            ws[j++] = cr;
            if (value(c[0]) == 0) {
                while (i < ws.size()) ws[j++] = ws[i++];
                ws.resize(j);
                qhead_ = trail_.size();
                return cr;
            }
            assign(c[0], cr);
        }
        ws.resize(j);
    }
    return -1;
}

void Solver::analyze(int conflict, std::vector<Lit>& learnt, int& backjump)
{
    learnt.assign(1, 0);
    int pending = 0;
    bool have_p = false;
    Lit p = 0;
    std::size_t idx = trail_.size();
    int cr = conflict;
    do {
        const auto& c = clauses_[static_cast<std::size_t>(cr)];
        for (std::size_t k = have_p ? 1 : 0; k < c.size(); ++k) {
            const auto v = c[k] >> 1;
            if (seen_[v] || level_[v] == 0) continue;
            seen_[v] = 1;
            if (level_[v] >= level())
                ++pending;
            else
                learnt.push_back(c[k]);
        }
        while (!seen_[trail_[--idx] >> 1]) {
        }
        p = trail_[idx];
        have_p = true;
        cr = reason_[p >> 1];
        seen_[p >> 1] = 0;
        --pending;
    } while (pending > 0);
    learnt[0] = p ^ 1U;

    backjump = 0;
    if (learnt.size() > 1) {
        std::size_t best = 1;
        for (std::size_t k = 2; k < learnt.size(); ++k)
            if (level_[learnt[k] >> 1] > level_[learnt[best] >> 1]) best = k;
        std::swap(learnt[1], learnt[best]);
        backjump = level_[learnt[1] >> 1];
    }
    for (const Lit l : learnt) seen_[l >> 1] = 0;
}

std::vector<int> Solver::analyze_final(Lit failed)
{
    // `failed` is an assumption that is currently false; collect the earlier
    // assumptions its falsification depends on.
    std::vector<int> out{dimacs(failed)};
    if (level() == 0) return out;
    seen_[failed >> 1] = 1;
    for (std::size_t i = trail_.size(); i-- > trail_lim_[0];) {
        const auto v = trail_[i] >> 1;
        if (!seen_[v]) continue;
        if (reason_[v] < 0) {
            out.push_back(dimacs(trail_[i]));
        } else {
            const auto& c = clauses_[static_cast<std::size_t>(reason_[v])];
            for (std::size_t k = 1; k < c.size(); ++k)
                if (level_[c[k] >> 1] > 0) seen_[c[k] >> 1] = 1;
        }
        seen_[v] = 0;
    }
    seen_[failed >> 1] = 0;
    return out;
}

SatResult Solver::solve(const std::vector<int>& assumptions)
{
    SatResult res;
    for (const int a : assumptions) {
        if (a == 0) throw std::invalid_argument("solver: assumption literal 0");
        while (std::abs(a) > variables()) new_variable();
    }
    backtrack(0);
    if (inconsistent_) return res;
    std::vector<Lit> learnt;
    for (;;) {
        const int confl = propagate();
        if (confl >= 0) {
            ++conflicts_;
            if (level() == 0) {
                inconsistent_ = true;
                return res;
            }
            int bj = 0;
            analyze(confl, learnt, bj);
            backtrack(bj);
            if (learnt.size() == 1) {
                assign(learnt[0], -1);
            } else {
                const Lit first = learnt[0];
                assign(first, attach(learnt));
            }
            continue;
        }
        if (static_cast<std::size_t>(level()) < assumptions.size()) {
            const Lit p = lit(assumptions[static_cast<std::size_t>(level())]);
            const auto v = value(p);
            if (v == 0) {
                res.failed_assumptions = analyze_final(p);
                std::sort(res.failed_assumptions.begin(), res.failed_assumptions.end());
                backtrack(0);
                return res;
            }
            trail_lim_.push_back(trail_.size());
            if (v == kUnset) assign(p, -1);
            continue;
        }
        std::size_t next = 0;
        while (next < value_.size() && value_[next] != kUnset) ++next;
        if (next == value_.size()) {
            res.status = SatStatus::Sat;
            res.assignment.assign(value_.size() + 1, false);
            for (std::size_t v = 0; v < value_.size(); ++v) res.assignment[v + 1] = value_[v] == 1;
            backtrack(0);
            return res;
        }
        ++decisions_;
        trail_lim_.push_back(trail_.size());
        assign(static_cast<Lit>(2 * next), -1);
    }
}

SatResult solve(const CnfFormula& cnf, const std::vector<int>& assumptions)
{
    Solver s(cnf.variables());
    for (const auto& c : cnf.clauses()) s.add_clause(c);
    SatResult r = s.solve(assumptions);
    if (r.sat()) r.assignment.resize(static_cast<std::size_t>(std::max(cnf.variables(), s.variables())) + 1);
    return r;
}

std::vector<std::size_t> minimal_unsat_core(const CnfFormula& cnf)
{
    const int base = cnf.variables();
    Solver s(base + static_cast<int>(cnf.size()));
    std::vector<int> selector(cnf.size());
    for (std::size_t i = 0; i < cnf.size(); ++i) {
        selector[i] = base + 1 + static_cast<int>(i);
        Clause c = cnf.clause(i);
        c.push_back(-selector[i]);
        s.add_clause(c);
    }
    const auto to_clauses = [&](const std::vector<int>& failed) {
        std::vector<std::size_t> out;
        for (const int a : failed) out.push_back(static_cast<std::size_t>(a - base - 1));
        std::sort(out.begin(), out.end());
        return out;
    };

    std::vector<int> all(selector);
    SatResult r = s.solve(all);
    if (r.sat()) throw std::invalid_argument("minimal_unsat_core: formula is satisfiable");
    std::vector<std::size_t> work = to_clauses(r.failed_assumptions);

    // Clause order is the deletion order. A clause survives only if dropping
    // it made the remainder satisfiable, and later drops only shrink the set,
    // so every survivor stays necessary.
    std::size_t pos = 0;
    while (pos < work.size()) {
        std::vector<int> trial;
        for (std::size_t k = 0; k < work.size(); ++k)
            if (k != pos) trial.push_back(selector[work[k]]);
        r = s.solve(trial);
        if (r.sat()) {
            ++pos;
            continue;
        }
        const std::size_t dropped = work[pos];
        std::vector<std::size_t> next = to_clauses(r.failed_assumptions);
        // Keep the already-confirmed prefix position stable.
        work = std::move(next);
        pos = static_cast<std::size_t>(std::lower_bound(work.begin(), work.end(), dropped) - work.begin());
    }
    return work;
}

}  // namespace clab
