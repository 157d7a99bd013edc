#pragma once

#include "circuitlab/circuitfind/discovery.hpp"

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace clab {

enum class ClassFilter : std::uint8_t { All, Attn, MLP };

/// max|I| - min|I| over both score sets, or 1 when that is zero.
double score_range(const EdgeScores& a, const EdgeScores& b);

/// Normalized Manhattan distance between two edge-score maps, summed over the
/// edges whose class passes the filter. The two-argument form normalizes by
/// score_range(a, b).
double circuit_distance(const ComputationalGraph& graph, const EdgeScores& a, const EdgeScores& b, ClassFilter filter);
double circuit_distance(const ComputationalGraph& graph, const EdgeScores& a, const EdgeScores& b, ClassFilter filter,
                        double range);

/// Scores of a circuit's edges, 0 for every edge outside it.
EdgeScores circuit_scores(const ComputationalGraph& graph, const Circuit& c);

/// 1-based ranks, tied values share their average rank.
std::vector<double> average_ranks(std::span<const double> x);

struct Spearman {
    double rho = 0.0;
    /// One side had all-equal ranks; rho is reported as 0.
    bool degenerate = false;
};

/// Pearson correlation of average ranks. Throws on empty or unequal input.
Spearman spearman(std::span<const double> x, std::span<const double> y);
double spearman_rho(std::span<const double> x, std::span<const double> y);

struct StabilityConfig {
    std::size_t k_pairs = 10;
    double subset_fraction = 0.2;
    Algorithm algorithm = Algorithm::Eap;
    DiscoveryConfig discovery;
    EdgePruningConfig pruning;
    std::uint64_t seed = 0;
    /// Test hook: score the same subset twice.
    bool same_subsets = false;
};

struct StabilityResult {
    double all = 0.0;
    double attn = 0.0;
    double mlp = 0.0;
    /// Pairs where some class had zero rank variance.
    std::size_t degenerate = 0;
    std::vector<double> pair_attn;
    std::vector<double> pair_mlp;
};

/// Mean Spearman correlation of scores discovered on k disjoint subset pairs.
StabilityResult circuit_stability(const TinyFormer& model, std::span<const PatchedPair> data, const StabilityConfig& config);
/// The EAP shortcut: per-example scores do not depend on batch composition,
/// so each subset's scores are an aggregate over rows of one matrix.
StabilityResult circuit_stability(const ComputationalGraph& graph, const Matrix& per_example, const StabilityConfig& config);

enum class EvolutionState : std::uint8_t { MigrateConsolidated, RefineInPlace, Reorganize, Stable };
std::string to_string(EvolutionState s);

/// "Large" means >= the split; CS is compared by magnitude.
EvolutionState classify_evolution_state(double cd, double cs, double cd_split, double cs_split);

struct MetricRecord {
    int step = 0;
    int epoch = 0;
    int optimizer_step = 0;
    /// Distance to step 0 under the pairwise range.
    double cd_attn = 0.0;
    double cd_mlp = 0.0;
    /// Same, normalized by one range shared across the whole run.
    double cd_attn_global = 0.0;
    double cd_mlp_global = 0.0;
    /// Distance to the previous observation.
    double cd_attn_step = 0.0;
    double cd_mlp_step = 0.0;
    double cs_attn = 0.0;
    double cs_mlp = 0.0;
    int cc = 0;
    double t_acc = 0.0;
    double p_acc = 0.0;
    double loss = 0.0;
    std::string scores_digest;

    /// Throws std::invalid_argument on out-of-range values.
    void validate() const;
    friend bool operator==(const MetricRecord&, const MetricRecord&) = default;
};

/// One line, keys in declaration order.
std::string record_to_json(const MetricRecord& r);
MetricRecord record_from_json(const std::string& line);
std::string records_to_jsonl(std::span<const MetricRecord> records);
std::vector<MetricRecord> records_from_jsonl(const std::string& text);

/// Content digest of an edge-score vector, used to tie masks to their source.
std::string scores_digest(const EdgeScores& s);

}  // namespace clab
