#pragma once

#include "circuitlab/tinyformer/graph.hpp"
#include "circuitlab/tinyformer/model.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace clab {

/// Intervention direction. Ns patches corrupted activations into the clean
/// run; Dn patches clean activations into the corrupted run.
enum class Regime : std::uint8_t { Ns, Dn, NsDn };

std::string to_string(Regime r);
Regime parse_regime(const std::string& s);

struct DiscoveryConfig {
    Regime regime = Regime::Ns;
    std::optional<double> tau;
    std::optional<double> sparsity_target;
    MetricKind metric = MetricKind::LogitDiff;
    std::size_t batch_size = 64;
    std::uint64_t seed = 0;
    /// EAP aggregation: mean of per-example |score| instead of |mean score|.
    bool mean_of_absolutes = false;

    /// Exactly one of tau / sparsity_target must be set.
    void validate() const;
};

/// Signed causal-effect score per graph edge, indexed like graph.edges().
struct EdgeScores {
    std::vector<double> values;
    Regime regime = Regime::Ns;
    std::string algorithm;
    std::string graph_digest;
    /// min / max of |value| over all edges
    double range_min = 0.0;
    double range_max = 0.0;

    void refresh_range();
    [[nodiscard]] std::size_t size() const { return values.size(); }
};

EdgeScores make_scores(const ComputationalGraph& graph, std::vector<double> values, Regime regime, std::string algorithm);

struct Circuit {
    /// Sorted edge indices.
    std::vector<int> edges;
    /// Score of each retained edge, aligned with `edges`.
    std::vector<double> scores;
    Regime regime = Regime::Ns;
    std::string algorithm;
    std::string config;
    std::string graph_digest;
    std::string dataset_digest;
    std::string weights_digest;

    [[nodiscard]] bool contains(int edge) const;
    [[nodiscard]] std::size_t size() const { return edges.size(); }
};

enum class Gate : std::uint8_t { And, Or, Adder };
std::string to_string(Gate g);
Gate parse_gate(const std::string& s);

struct LogicalCircuit {
    std::vector<int> c_and;
    std::vector<int> c_or;
    std::vector<int> c_adder;
    /// Per receiver node index: majority label of its labelled in-edges.
    std::map<int, Gate> receiver_gates;
    std::string graph_digest;

    [[nodiscard]] std::optional<Gate> gate_of(int edge) const;
    /// Every labelled edge with its label, sorted by edge index.
    [[nodiscard]] std::vector<std::pair<int, Gate>> labelled_edges() const;
};

/// AND = Ns \ Dn, OR = Dn \ Ns, ADDER = Ns ∩ Dn.
LogicalCircuit classify_gates(const ComputationalGraph& graph, const Circuit& c_ns, const Circuit& c_dn);
/// Builds a logical circuit from explicit labels.
LogicalCircuit make_logical_circuit(const ComputationalGraph& graph, const std::vector<std::pair<int, Gate>>& labels);

/// |score| > tau, or top-k by |score| with 1 - k/|E| >= s. Ties go to the
/// smaller (sender, receiver).
Circuit threshold_circuit(const ComputationalGraph& graph, const EdgeScores& scores, const DiscoveryConfig& config);

struct Localization {
    /// Node indices ordered by importance (descending), ties by index.
    std::vector<int> nodes;
    std::size_t attn_count = 0;
    std::size_t mlp_count = 0;
    /// Importance of every graph node; zero for ineligible ones.
    std::vector<double> importance;
};

/// Top-n eligible components by the sum of |score| over incident edges.
Localization localize_components(const ComputationalGraph& graph, const EdgeScores& scores, std::size_t n);
std::size_t eligible_count(const ComputationalGraph& graph);

// Circuit files: JSON with fixed field order and a content digest.
inline constexpr int kCircuitFormatVersion = 1;
std::string circuit_to_json(const ComputationalGraph& graph, const Circuit& c, const LogicalCircuit* gates = nullptr);
/// Throws std::runtime_error on version or digest mismatch.
Circuit circuit_from_json(const ComputationalGraph& graph, const std::string& text, LogicalCircuit* gates = nullptr);
void write_circuit(const std::filesystem::path& path, const ComputationalGraph& graph, const Circuit& c,
                   const LogicalCircuit* gates = nullptr);
Circuit read_circuit(const std::filesystem::path& path, const ComputationalGraph& graph, LogicalCircuit* gates = nullptr);

std::string scores_to_json(const ComputationalGraph& graph, const EdgeScores& s);
EdgeScores scores_from_json(const ComputationalGraph& graph, const std::string& text);

}  // namespace clab
