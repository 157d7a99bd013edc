#pragma once

#include "circuitlab/circuitfind/circuit.hpp"

#include <span>

namespace clab {

/// Mean KL at the answer rows between the regime's full run and a run in
/// which a chosen set of edges takes the other run's activations.
class PatchEvaluator {
public:
    /// side must be Ns or Dn.
    PatchEvaluator(const PatchableModel& model, std::span<const PatchedPair> data, Regime side, std::size_t batch_size);

    /// `removed[e]` marks edges carrying the donor activation.
    [[nodiscard]] double kl(const std::vector<char>& removed) const;
    /// Mean output metric of the patched run (answer_logit / logit_diff).
    [[nodiscard]] double metric(const std::vector<char>& removed, MetricKind kind) const;
    [[nodiscard]] double base_metric(MetricKind kind) const;

private:
    struct Batch {
        TokenBatch base;
        ActivationCache donor;
        Matrix reference;
        AnswerSlots slots;
    };
    const PatchableModel& model_;
    std::vector<Batch> batches_;
    std::size_t examples_ = 0;
};

/// Greedy edge removal in reverse topological order of receivers; in-edges
/// of a receiver are visited by ascending sender. Scores are the KL deltas
/// measured when each edge was tried.
Circuit acdc(const PatchableModel& model, std::span<const PatchedPair> data, const DiscoveryConfig& config);

/// Score of every edge patched on its own. With kl_to_reference the score
/// is the KL from the regime's base run; otherwise Ns = M(x | do x̃_e) - M(x)
/// and Dn = M(x̃) - M(x̃ | do x_e), the sign convention EAP uses.
EdgeScores exact_patch_scores(const PatchableModel& model, std::span<const PatchedPair> data, Regime regime,
                              MetricKind metric, std::size_t batch_size = 64);

struct EapResult {
    EdgeScores scores;
    /// N x E signed per-example scores.
    Matrix per_example;
};

/// First-order attribution from one clean and one corrupted forward/backward
/// per batch. Ns uses the clean-run gradient, Dn the corrupted-run gradient,
/// both contracted with (x̃ - x).
EapResult eap(const TinyFormer& model, std::span<const PatchedPair> data, const DiscoveryConfig& config);

struct EapSides {
    EapResult ns;
    EapResult dn;
    EapResult nsdn;
};

/// Both regimes from one clean and one corrupted gradient pass.
EapSides eap_sides(const TinyFormer& model, std::span<const PatchedPair> data, const DiscoveryConfig& config);

/// Aggregates rows of an EAP per-example matrix into edge scores.
EdgeScores aggregate_eap(const Matrix& per_example, std::span<const Index> rows, const EdgeScores& like,
                         bool mean_of_absolutes);

struct EdgePruningConfig {
    std::size_t steps = 200;
    double learning_rate = 0.1;
    double beta = 0.66;
    double gamma = -0.1;
    double zeta = 1.1;
    double penalty = 1e-2;
    double init_log_alpha = 3.0;
    /// When set, the penalty is adapted so the expected density approaches 1 - s.
    std::optional<double> sparsity_target;
    std::size_t batch_size = 32;
    std::uint64_t seed = 0;

    void validate() const;
};

/// Hard-concrete sample for uniform noise u in (0, 1), stretched and clamped to [0, 1].
double hard_concrete_sample(double log_alpha, double u, const EdgePruningConfig& c);
/// E[z] by midpoint quadrature over u.
double hard_concrete_mean(double log_alpha, const EdgePruningConfig& c);

/// Learned expected mask value per edge; NsDn averages independently trained
/// Ns and Dn masks.
EdgeScores edge_pruning(const TinyFormer& model, std::span<const PatchedPair> data, const EdgePruningConfig& config,
                        Regime regime);

enum class Algorithm : std::uint8_t { Eap, EdgePruning, Acdc, Exact };
std::string to_string(Algorithm a);
Algorithm parse_algorithm(const std::string& s);

/// One score per edge from any discovery method. ACDC edges that were pruned
/// score 0; retained ones keep the KL delta measured when they were tried.
EdgeScores discover_scores(const TinyFormer& model, std::span<const PatchedPair> data, Algorithm algorithm,
                           const DiscoveryConfig& config, const EdgePruningConfig& pruning = {});

}  // namespace clab
