#pragma once

#include "circuitlab/taskgen/pair.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace clab {

/// Structural tokens shared by every task. Content tokens live above them.
namespace tok {
inline constexpr int BOS = 0;
inline constexpr int SEP = 1;
inline constexpr int T = 2;
inline constexpr int F = 3;
inline constexpr int AND = 4;
inline constexpr int OR = 5;
inline constexpr int NOT = 6;
inline constexpr int LP = 7;
inline constexpr int RP = 8;
inline constexpr int PLUS = 9;
inline constexpr int MINUS = 10;
inline constexpr int GAVE = 11;
inline constexpr int TO = 12;
inline constexpr int kStructural = 16;
}  // namespace tok

/// Half-open token-id range [begin, end).
struct VocabRegion {
    int begin = 0;
    int end = 0;
    [[nodiscard]] int size() const { return end - begin; }
    [[nodiscard]] bool contains(int t) const { return t >= begin && t < end; }
    friend bool operator==(const VocabRegion&, const VocabRegion&) = default;
};

struct TaskSpec {
    std::string name = "induction";
    VocabRegion region;
    /// induction: total sequence length; reverse: list length. Ignored elsewhere.
    int length = 0;
    /// mixture only
    std::vector<TaskSpec> components;
    std::vector<double> weights;
    std::uint64_t seed = 0;

    /// Throws std::invalid_argument naming the offending field.
    void validate() const;
};

inline const std::vector<std::string>& task_names()
{
    static const std::vector<std::string> names{"induction", "reverse", "greater_than", "bool_expr", "arithmetic_mod", "ioi_like"};
    return names;
}

/// Default layout inside a 96-token vocabulary; regions of distinct tasks are disjoint.
TaskSpec default_spec(const std::string& name);
TaskSpec make_mixture(std::vector<TaskSpec> components, std::vector<double> weights = {});
/// Largest token id any spec can emit, plus one.
int required_vocab(const TaskSpec& spec);
/// Longest sequence any spec can emit.
int required_seq_len(const TaskSpec& spec);
/// Throws when content regions of distinct tasks overlap.
void check_disjoint(std::span<const TaskSpec> specs);

Dataset generate(const TaskSpec& spec, std::size_t n, std::uint64_t seed);
PatchedPair resample_corruption(const TaskSpec& spec, const PatchedPair& pair, std::uint64_t seed);
/// Uses default_spec(pair.task).
PatchedPair resample_corruption(const PatchedPair& pair, std::uint64_t seed);

/// Disjoint uniformly sampled subsets of floor(f * |dataset|) pairs each.
std::vector<std::vector<std::size_t>> split_indices(std::size_t n, std::span<const double> fractions, std::uint64_t seed);
std::vector<Dataset> split(std::span<const PatchedPair> dataset, std::span<const double> fractions, std::uint64_t seed);

/// Answer derived from the clean tokens alone by the task rule.
int solve_by_rule(const TaskSpec& spec, const PatchedPair& pair);
/// Truth value of a token-form boolean expression (T, F, AND, OR, NOT, LP, RP).
bool evaluate_bool_tokens(std::span<const int> tokens);
std::vector<int> reverse_list(std::span<const int> xs);

std::string pair_to_json(const PatchedPair& pair);
PatchedPair pair_from_json(const std::string& line);
void dump_jsonl(std::span<const PatchedPair> data, const std::filesystem::path& path);
Dataset load_jsonl(const std::filesystem::path& path);
std::string dataset_digest(std::span<const PatchedPair> data);

}  // namespace clab
