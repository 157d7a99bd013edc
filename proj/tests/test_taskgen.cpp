#include "circuitlab/taskgen/tasks.hpp"

#include <doctest.h>

#include <filesystem>
#include <map>
#include <set>

using namespace clab;

namespace {

std::vector<TaskSpec> all_specs()
{
    std::vector<TaskSpec> specs;
    for (const auto& n : task_names()) specs.push_back(default_spec(n));
    return specs;
}

}  // namespace

TEST_CASE("canonical task examples")
{
    PatchedPair ind{{7, 3, 9, 7}, {7, 4, 9, 7}, 3, 3, 4, "induction"};
    TaskSpec s = default_spec("induction");
    s.region = {0, 20};
    CHECK(solve_by_rule(s, ind) == 3);

    const std::vector<int> xs{0, 3, 2, 1};
    CHECK(reverse_list(xs) == std::vector<int>{1, 2, 3, 0});

    const std::vector<int> expr{tok::LP, tok::T, tok::AND, tok::T, tok::RP, tok::OR, tok::F};
    CHECK(evaluate_bool_tokens(expr));
    const std::vector<int> neg{tok::LP, tok::T, tok::AND, tok::F, tok::RP, tok::OR, tok::NOT, tok::T};
    CHECK_FALSE(evaluate_bool_tokens(neg));
    CHECK_THROWS(evaluate_bool_tokens(std::vector<int>{tok::LP, tok::T}));
}

TEST_CASE("every generated pair is valid and solvable by rule")
{
    std::vector<TaskSpec> specs = all_specs();
    specs.push_back(make_mixture(all_specs()));
    for (const auto& s : specs) {
        const Dataset d = generate(s, 1000, 17);
        int solved = 0;
        for (const auto& p : d) {
            CHECK_NOTHROW(p.validate());
            if (solve_by_rule(s, p) == p.correct_token) ++solved;
            for (const int t : p.clean) CHECK(t < required_vocab(s));
            CHECK(static_cast<int>(p.clean.size()) <= required_seq_len(s));
        }
        CHECK_MESSAGE(solved == 1000, s.name);
    }
}

TEST_CASE("corrupted runs induce the incorrect token")
{
    for (const auto& s : all_specs()) {
        for (const auto& p : generate(s, 300, 5)) {
            PatchedPair flipped = p;
            flipped.clean = p.corrupted;
            CHECK(solve_by_rule(s, flipped) == p.incorrect_token);
        }
    }
}

TEST_CASE("generation is deterministic per seed")
{
    const TaskSpec s = default_spec("reverse");
    CHECK(generate(s, 50, 3) == generate(s, 50, 3));
    CHECK(generate(s, 50, 3) != generate(s, 50, 4));
}

TEST_CASE("resample_corruption")
{
    const TaskSpec s = default_spec("induction");
    const PatchedPair p = generate(s, 1, 9)[0];
    std::map<int, int> freq;
    const auto slot = static_cast<std::size_t>(std::find(p.clean.begin(), p.clean.end(), p.clean.back()) - p.clean.begin() + 1);
    for (std::uint64_t k = 0; k < 1000; ++k) {
        const PatchedPair q = resample_corruption(s, p, k);
        CHECK(q.clean == p.clean);
        CHECK_NOTHROW(q.validate());
        ++freq[q.corrupted[slot]];
    }
    // Admissible replacements: the region minus a and b.
    const int admissible = s.region.size() - 2;
    CHECK(static_cast<int>(freq.size()) == admissible);
    const double uniform = 1000.0 / admissible;
    for (const auto& [tokn, count] : freq) {
        CHECK(count <= 5.0 * uniform);
        CHECK(count >= uniform / 5.0);
    }
    for (const auto& spec : all_specs())
        for (const auto& q : generate(spec, 20, 1)) CHECK_NOTHROW(resample_corruption(q, 77).validate());
}

TEST_CASE("split")
{
    const Dataset d = generate(default_spec("ioi_like"), 100, 1);
    const std::vector<double> two{0.2, 0.2};
    const auto parts = split(d, two, 4);
    REQUIRE(parts.size() == 2);
    CHECK(parts[0].size() == 20);
    CHECK(parts[1].size() == 20);
    // Disjoint by index: compare via JSON lines, allowing duplicate content.
    CHECK(split(d, two, 4) == parts);
    const std::vector<double> one{1.0};
    auto all = split(d, one, 2)[0];
    CHECK(all.size() == d.size());
    std::multiset<std::string> a, b;
    for (const auto& p : all) a.insert(pair_to_json(p));
    for (const auto& p : d) b.insert(pair_to_json(p));
    CHECK(a == b);
    const std::vector<double> tiny{0.001};
    CHECK_THROWS(split(d, tiny, 1));
    const std::vector<double> over{0.7, 0.7};
    CHECK_THROWS(split(d, over, 1));
}

TEST_CASE("split subsets are disjoint by position")
{
    Dataset d;
    for (int i = 0; i < 50; ++i) d.push_back(PatchedPair{{i, 1}, {i + 1, 1}, 1, 2, 3, "x"});
    const std::vector<double> f{0.2, 0.2, 0.5};
    const auto parts = split(d, f, 8);
    std::set<int> seen;
    for (const auto& part : parts)
        for (const auto& p : part) CHECK(seen.insert(p.clean[0]).second);
}

TEST_CASE("spec validation")
{
    TaskSpec s = default_spec("induction");
    s.region = {16, 18};
    CHECK_THROWS(generate(s, 5, 1));
    s = default_spec("reverse");
    s.region = {36, 38};
    CHECK_THROWS(s.validate());
    CHECK_THROWS(default_spec("sorting"));
    TaskSpec a = default_spec("induction");
    TaskSpec b = default_spec("reverse");
    b.region = {30, 40};
    CHECK_THROWS(make_mixture({a, b}));
    CHECK_THROWS(make_mixture({a, default_spec("reverse")}, {0.3, 0.3}));
    CHECK_THROWS(generate(default_spec("ioi_like"), 0, 1));
}

TEST_CASE("jsonl round trip")
{
    const Dataset d = generate(make_mixture(all_specs()), 40, 2);
    const auto path = std::filesystem::temp_directory_path() / "clab_taskgen_roundtrip.jsonl";
    dump_jsonl(d, path);
    const Dataset back = load_jsonl(path);
    CHECK(back == d);
    CHECK(dataset_digest(back) == dataset_digest(d));
    std::filesystem::remove(path);
    CHECK_THROWS(pair_from_json(R"({"task":"x","clean":[1],"corrupted":[1],"answer_pos":0,"correct_token":1,"incorrect_token":2})"));
}
