#include "circuitlab/taskgen/tasks.hpp"

#include "circuitlab/common/digest.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>

namespace clab {

namespace {

using Rng = std::mt19937_64;

int pick(Rng& rng, int n)
{
    return std::uniform_int_distribution<int>(0, n - 1)(rng);
}

int pick_token(Rng& rng, const VocabRegion& r) { return r.begin + pick(rng, r.size()); }

int pick_token_except(Rng& rng, const VocabRegion& r, std::initializer_list<int> avoid)
{
    for (;;) {
        const int t = pick_token(rng, r);
        if (std::find(avoid.begin(), avoid.end(), t) == avoid.end()) return t;
    }
}

void require(bool ok, const std::string& msg)
{
    if (!ok) throw std::invalid_argument(msg);
}

constexpr int kCenturies = 4;

// ---------------------------------------------------------------------------
// Per-task clean generation and corruption rules

void corrupt_induction(const TaskSpec& s, PatchedPair& p, Rng& rng)
{
    const int a = p.clean.back();
    const auto first = std::find(p.clean.begin(), p.clean.end(), a) - p.clean.begin();
    const auto bpos = static_cast<std::size_t>(first + 1);
    p.corrupted = p.clean;
    p.corrupted[bpos] = pick_token_except(rng, s.region, {a, p.clean[bpos]});
    p.incorrect_token = p.corrupted[bpos];
}

PatchedPair make_induction(const TaskSpec& s, Rng& rng)
{
    const int len = s.length;
    PatchedPair p;
    p.task = "induction";
    const int a = pick_token(rng, s.region);
    const int b = pick_token_except(rng, s.region, {a});
    const int i = pick(rng, len - 2);
    p.clean.resize(static_cast<std::size_t>(len));
    for (int k = 0; k < len; ++k) p.clean[static_cast<std::size_t>(k)] = pick_token_except(rng, s.region, {a});
    p.clean[static_cast<std::size_t>(i)] = a;
    p.clean[static_cast<std::size_t>(i + 1)] = b;
    p.clean.back() = a;
    p.answer_pos = len - 1;
    p.correct_token = b;
    corrupt_induction(s, p, rng);
    return p;
}

std::vector<int> reverse_sequence(const std::vector<int>& list, int revealed)
{
    std::vector<int> seq = list;
    seq.push_back(tok::SEP);
    for (int k = 0; k < revealed; ++k) seq.push_back(list[list.size() - 1 - static_cast<std::size_t>(k)]);
    return seq;
}

void corrupt_reverse(const TaskSpec&, PatchedPair& p, Rng& rng)
{
    const auto n = static_cast<std::size_t>(std::find(p.clean.begin(), p.clean.end(), tok::SEP) - p.clean.begin());
    const int revealed = static_cast<int>(p.clean.size() - n - 1);
    std::vector<int> list(p.clean.begin(), p.clean.begin() + static_cast<std::ptrdiff_t>(n));
    const std::size_t slot = n - 1 - static_cast<std::size_t>(revealed);
    std::vector<int> perm = list;
    do {
        std::shuffle(perm.begin(), perm.end(), rng);
    } while (perm[slot] == list[slot]);
    p.corrupted = reverse_sequence(perm, revealed);
    p.incorrect_token = perm[slot];
}

PatchedPair make_reverse(const TaskSpec& s, Rng& rng)
{
    const int n = s.length;
    std::vector<int> pool(static_cast<std::size_t>(s.region.size()));
    std::iota(pool.begin(), pool.end(), s.region.begin);
    std::shuffle(pool.begin(), pool.end(), rng);
    std::vector<int> list(pool.begin(), pool.begin() + n);
    const int revealed = pick(rng, n);
    PatchedPair p;
    p.task = "reverse";
    p.clean = reverse_sequence(list, revealed);
    p.answer_pos = static_cast<int>(p.clean.size()) - 1;
    p.correct_token = list[static_cast<std::size_t>(n - 1 - revealed)];
    corrupt_reverse(s, p, rng);
    return p;
}

int gt_value_base(const TaskSpec& s) { return s.region.begin + kCenturies; }
int gt_values(const TaskSpec& s) { return s.region.size() - kCenturies; }

void corrupt_greater_than(const TaskSpec& s, PatchedPair& p, Rng& rng)
{
    const int y = p.clean[1] - gt_value_base(s);
    int y2 = y;
    while (y2 == y) y2 = pick(rng, gt_values(s) - 1);
    p.corrupted = p.clean;
    p.corrupted[1] = gt_value_base(s) + y2;
    p.incorrect_token = gt_value_base(s) + y2 + 1;
}

PatchedPair make_greater_than(const TaskSpec& s, Rng& rng)
{
    const int c = s.region.begin + pick(rng, kCenturies);
    const int y = pick(rng, gt_values(s) - 1);
    PatchedPair p;
    p.task = "greater_than";
    p.clean = {c, gt_value_base(s) + y, tok::SEP, c};
    p.answer_pos = 3;
    p.correct_token = gt_value_base(s) + y + 1;
    corrupt_greater_than(s, p, rng);
    return p;
}

int truth_token(bool v) { return v ? tok::T : tok::F; }

void corrupt_bool(const TaskSpec&, PatchedPair& p, Rng& rng)
{
    const std::span<const int> body(p.clean.data(), p.clean.size() - 1);
    const bool value = evaluate_bool_tokens(body);
    for (;;) {
        std::vector<int> c = p.clean;
        for (int& t : c)
            if (t == tok::T || t == tok::F) t = truth_token(pick(rng, 2) == 1);
        if (evaluate_bool_tokens(std::span<const int>(c.data(), c.size() - 1)) != value) {
            p.corrupted = std::move(c);
            p.incorrect_token = truth_token(!value);
            return;
        }
    }
}

PatchedPair make_bool(const TaskSpec& s, Rng& rng)
{
    const auto leaf = [&] { return truth_token(pick(rng, 2) == 1); };
    const auto op = [&] { return pick(rng, 2) == 1 ? tok::AND : tok::OR; };
    PatchedPair p;
    p.task = "bool_expr";
    p.clean = {tok::LP, leaf(), op(), leaf(), tok::RP, op()};
    if (pick(rng, 2) == 1) p.clean.push_back(tok::NOT);
    p.clean.push_back(leaf());
    p.clean.push_back(tok::SEP);
    p.answer_pos = static_cast<int>(p.clean.size()) - 1;
    p.correct_token = truth_token(evaluate_bool_tokens(std::span<const int>(p.clean.data(), p.clean.size() - 1)));
    corrupt_bool(s, p, rng);
    return p;
}

int arith(const TaskSpec& s, int a, int op, int b)
{
    const int m = s.region.size();
    return s.region.begin + (op == tok::PLUS ? (a + b) % m : ((a - b) % m + m) % m);
}

void corrupt_arith(const TaskSpec& s, PatchedPair& p, Rng& rng)
{
    const int base = s.region.begin;
    const int m = s.region.size();
    const int a = p.clean[0] - base;
    const int b = p.clean[2] - base;
    const int op = p.clean[1];
    for (;;) {
        const int a2 = pick(rng, m);
        const int b2 = pick(rng, m);
        if (arith(s, a2, op, b2) == p.correct_token || (a2 == a && b2 == b)) continue;
        p.corrupted = {base + a2, op, base + b2, tok::SEP};
        p.incorrect_token = arith(s, a2, op, b2);
        return;
    }
}

PatchedPair make_arith(const TaskSpec& s, Rng& rng)
{
    const int m = s.region.size();
    const int a = pick(rng, m);
    const int b = pick(rng, m);
    const int op = pick(rng, 2) == 1 ? tok::PLUS : tok::MINUS;
    PatchedPair p;
    p.task = "arithmetic_mod";
    p.clean = {s.region.begin + a, op, s.region.begin + b, tok::SEP};
    p.answer_pos = 3;
    p.correct_token = arith(s, a, op, b);
    corrupt_arith(s, p, rng);
    return p;
}

void corrupt_ioi(const TaskSpec&, PatchedPair& p, Rng&)
{
    const int x = p.clean[0];
    const int y = p.clean[2];
    p.corrupted = p.clean;
    p.corrupted[4] = p.clean[4] == x ? y : x;
    p.incorrect_token = p.clean[4];
}

PatchedPair make_ioi(const TaskSpec& s, Rng& rng)
{
    const int x = pick_token(rng, s.region);
    const int y = pick_token_except(rng, s.region, {x});
    const int repeated = pick(rng, 2) == 1 ? x : y;
    PatchedPair p;
    p.task = "ioi_like";
    p.clean = {x, tok::AND, y, tok::SEP, repeated, tok::GAVE, tok::TO};
    p.answer_pos = 6;
    p.correct_token = repeated == x ? y : x;
    corrupt_ioi(s, p, rng);
    return p;
}

const TaskSpec& component_for(const TaskSpec& spec, const std::string& task)
{
    if (spec.name != "mixture") {
        require(spec.name == task, "pair task '" + task + "' does not match spec '" + spec.name + "'");
        return spec;
    }
    for (const auto& c : spec.components)
        if (c.name == task) return c;
    throw std::invalid_argument("mixture has no component '" + task + "'");
}

PatchedPair make_one(const TaskSpec& s, Rng& rng)
{
    if (s.name == "induction") return make_induction(s, rng);
    if (s.name == "reverse") return make_reverse(s, rng);
    if (s.name == "greater_than") return make_greater_than(s, rng);
    if (s.name == "bool_expr") return make_bool(s, rng);
    if (s.name == "arithmetic_mod") return make_arith(s, rng);
    if (s.name == "ioi_like") return make_ioi(s, rng);
    throw std::invalid_argument("unknown task '" + s.name + "'");
}

// Recursive descent over: expr := unary ((AND|OR) unary)*, unary := NOT unary | T | F | LP expr RP.
struct BoolParser {
    std::span<const int> t;
    std::size_t at = 0;

    int peek() const { return at < t.size() ? t[at] : -1; }
    bool unary()
    {
        const int c = peek();
        ++at;
        if (c == tok::NOT) return !unary();
        if (c == tok::T) return true;
        if (c == tok::F) return false;
        if (c == tok::LP) {
            const bool v = expr();
            require(peek() == tok::RP, "bool expression: missing ')'");
            ++at;
            return v;
        }
        throw std::invalid_argument("bool expression: unexpected token");
    }
    bool expr()
    {
        bool v = unary();
        while (peek() == tok::AND || peek() == tok::OR) {
            const int op = t[at++];
            const bool rhs = unary();
            v = op == tok::AND ? (v && rhs) : (v || rhs);
        }
        return v;
    }
};

}  // namespace

void TaskSpec::validate() const
{
    if (name == "mixture") {
        require(!components.empty(), "mixture: no components");
        require(weights.size() == components.size(), "mixture: weights/components size mismatch");
        double sum = 0.0;
        for (const double w : weights) {
            require(w >= 0.0, "mixture: negative weight");
            sum += w;
        }
        require(std::abs(sum - 1.0) <= 1e-9, "mixture: weights must sum to 1");
        for (const auto& c : components) {
            require(c.name != "mixture", "mixture: nested mixtures are not supported");
            c.validate();
        }
        check_disjoint(components);
        return;
    }
    require(region.begin >= tok::kStructural || region.size() == 0, name + ": region overlaps structural tokens");
    if (name == "induction") {
        require(length >= 4, "induction: length must be >= 4");
        require(region.size() >= 3, "induction: vocab region too small (need >= 3 tokens)");
    } else if (name == "reverse") {
        require(length >= 2, "reverse: length must be >= 2");
        require(region.size() >= length, "reverse: vocab region too small for list length");
    } else if (name == "greater_than") {
        require(region.size() >= kCenturies + 3, "greater_than: vocab region too small");
    } else if (name == "bool_expr") {
    } else if (name == "arithmetic_mod") {
        require(region.size() >= 3, "arithmetic_mod: vocab region too small (modulus >= 3)");
    } else if (name == "ioi_like") {
        require(region.size() >= 2, "ioi_like: vocab region too small");
    } else {
        throw std::invalid_argument("unknown task '" + name + "'");
    }
}

TaskSpec default_spec(const std::string& name)
{
    TaskSpec s;
    s.name = name;
    if (name == "induction") {
        s.region = {16, 36};
        s.length = 8;
    } else if (name == "reverse") {
        s.region = {36, 44};
        s.length = 4;
    } else if (name == "greater_than") {
        s.region = {44, 60};
    } else if (name == "bool_expr") {
        s.region = {0, 0};
    } else if (name == "arithmetic_mod") {
        s.region = {60, 73};
    } else if (name == "ioi_like") {
        s.region = {73, 89};
    } else {
        throw std::invalid_argument("no default spec for task '" + name + "'");
    }
    return s;
}

TaskSpec make_mixture(std::vector<TaskSpec> components, std::vector<double> weights)
{
    TaskSpec s;
    s.name = "mixture";
    if (weights.empty()) weights.assign(components.size(), components.empty() ? 0.0 : 1.0 / static_cast<double>(components.size()));
    s.components = std::move(components);
    s.weights = std::move(weights);
    s.validate();
    return s;
}

int required_vocab(const TaskSpec& spec)
{
    if (spec.name == "mixture") {
        int v = tok::kStructural;
        for (const auto& c : spec.components) v = std::max(v, required_vocab(c));
        return v;
    }
    return std::max(tok::kStructural, spec.region.end);
}

int required_seq_len(const TaskSpec& spec)
{
    if (spec.name == "mixture") {
        int v = 0;
        for (const auto& c : spec.components) v = std::max(v, required_seq_len(c));
        return v;
    }
    if (spec.name == "induction") return spec.length;
    if (spec.name == "reverse") return 2 * spec.length;
    if (spec.name == "bool_expr") return 9;
    if (spec.name == "ioi_like") return 7;
    return 4;
}

void check_disjoint(std::span<const TaskSpec> specs)
{
    for (std::size_t i = 0; i < specs.size(); ++i)
        for (std::size_t j = i + 1; j < specs.size(); ++j) {
            const VocabRegion& a = specs[i].region;
            const VocabRegion& b = specs[j].region;
            if (a.size() == 0 || b.size() == 0 || specs[i].name == specs[j].name) continue;
            require(a.end <= b.begin || b.end <= a.begin,
                    "vocab regions of '" + specs[i].name + "' and '" + specs[j].name + "' overlap");
        }
}

Dataset generate(const TaskSpec& spec, std::size_t n, std::uint64_t seed)
{
    require(n >= 1, "generate: n must be >= 1");
    spec.validate();
    const std::uint64_t base = mix_seed(spec.seed, seed);
    Dataset out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        Rng rng(mix_seed(base, i));
        if (spec.name == "mixture") {
            std::discrete_distribution<std::size_t> choose(spec.weights.begin(), spec.weights.end());
            out.push_back(make_one(spec.components[choose(rng)], rng));
        } else {
            out.push_back(make_one(spec, rng));
        }
    }
    return out;
}

PatchedPair resample_corruption(const TaskSpec& spec, const PatchedPair& pair, std::uint64_t seed)
{
    pair.validate();
    const TaskSpec& s = component_for(spec, pair.task);
    Rng rng(mix_seed(seed, 0x636f7272u));
    PatchedPair p = pair;
    if (s.name == "induction") corrupt_induction(s, p, rng);
    else if (s.name == "reverse") corrupt_reverse(s, p, rng);
    else if (s.name == "greater_than") corrupt_greater_than(s, p, rng);
    else if (s.name == "bool_expr") corrupt_bool(s, p, rng);
    else if (s.name == "arithmetic_mod") corrupt_arith(s, p, rng);
    else corrupt_ioi(s, p, rng);
    return p;
}

PatchedPair resample_corruption(const PatchedPair& pair, std::uint64_t seed)
{
    return resample_corruption(default_spec(pair.task), pair, seed);
}

std::vector<std::vector<std::size_t>> split_indices(std::size_t n, std::span<const double> fractions, std::uint64_t seed)
{
    double total = 0.0;
    for (const double f : fractions) {
        require(f > 0.0, "split: fractions must be positive");
        total += f;
    }
    require(total <= 1.0 + 1e-12, "split: fractions sum above 1");
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::vector<std::size_t>> out;
    std::size_t at = 0;
    for (const double f : fractions) {
        const auto count = static_cast<std::size_t>(std::floor(f * static_cast<double>(n) + 1e-9));
        require(count > 0, "split: fraction yields an empty subset");
        out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(at), order.begin() + static_cast<std::ptrdiff_t>(at + count));
        at += count;
    }
    return out;
}

std::vector<Dataset> split(std::span<const PatchedPair> dataset, std::span<const double> fractions, std::uint64_t seed)
{
    std::vector<Dataset> out;
    for (const auto& idx : split_indices(dataset.size(), fractions, seed)) {
        Dataset part;
        for (const auto i : idx) part.push_back(dataset[i]);
        out.push_back(std::move(part));
    }
    return out;
}

std::vector<int> reverse_list(std::span<const int> xs) { return {xs.rbegin(), xs.rend()}; }

bool evaluate_bool_tokens(std::span<const int> tokens)
{
    BoolParser p{tokens};
    const bool v = p.expr();
    require(p.at == tokens.size(), "bool expression: trailing tokens");
    return v;
}

int solve_by_rule(const TaskSpec& spec, const PatchedPair& pair)
{
    const TaskSpec& s = component_for(spec, pair.task);
    const auto pos = static_cast<std::size_t>(pair.answer_pos);
    const std::vector<int> prefix(pair.clean.begin(), pair.clean.begin() + static_cast<std::ptrdiff_t>(pos + 1));
    if (s.name == "induction") {
        const int a = prefix.back();
        for (std::size_t i = 0; i + 1 < prefix.size(); ++i)
            if (prefix[i] == a) return prefix[i + 1];
        throw std::invalid_argument("induction: no earlier occurrence");
    }
    if (s.name == "reverse") {
        const auto sep = static_cast<std::size_t>(std::find(prefix.begin(), prefix.end(), tok::SEP) - prefix.begin());
        const std::vector<int> rev = reverse_list(std::span<const int>(prefix.data(), sep));
        return rev[prefix.size() - sep - 1];
    }
    if (s.name == "greater_than") return prefix[1] + 1;
    if (s.name == "bool_expr") return truth_token(evaluate_bool_tokens(std::span<const int>(prefix.data(), prefix.size() - 1)));
    if (s.name == "arithmetic_mod") return arith(s, prefix[0] - s.region.begin, prefix[1], prefix[2] - s.region.begin);
    // ioi_like: the name that is not repeated
    return prefix[4] == prefix[0] ? prefix[2] : prefix[0];
}

std::string pair_to_json(const PatchedPair& pair)
{
    nlohmann::ordered_json j;
    j["task"] = pair.task;
    j["clean"] = pair.clean;
    j["corrupted"] = pair.corrupted;
    j["answer_pos"] = pair.answer_pos;
    j["correct_token"] = pair.correct_token;
    j["incorrect_token"] = pair.incorrect_token;
    return j.dump();
}

PatchedPair pair_from_json(const std::string& line)
{
    const auto j = nlohmann::json::parse(line);
    PatchedPair p;
    p.task = j.at("task").get<std::string>();
    p.clean = j.at("clean").get<std::vector<int>>();
    p.corrupted = j.at("corrupted").get<std::vector<int>>();
    p.answer_pos = j.at("answer_pos").get<int>();
    p.correct_token = j.at("correct_token").get<int>();
    p.incorrect_token = j.at("incorrect_token").get<int>();
    p.validate();
    return p;
}

void dump_jsonl(std::span<const PatchedPair> data, const std::filesystem::path& path)
{
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    for (const auto& p : data) f << pair_to_json(p) << '\n';
}

Dataset load_jsonl(const std::filesystem::path& path)
{
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot read " + path.string());
    Dataset out;
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            out.push_back(pair_from_json(line));
        } catch (const std::exception& e) {
            throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

std::string dataset_digest(std::span<const PatchedPair> data)
{
    Digest d;
    for (const auto& p : data) d.text(pair_to_json(p)).text("\n");
    return d.hex();
}

}  // namespace clab
