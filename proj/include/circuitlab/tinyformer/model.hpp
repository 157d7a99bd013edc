#pragma once

#include "circuitlab/numcore/tape.hpp"
#include "circuitlab/taskgen/pair.hpp"
#include "circuitlab/tinyformer/config.hpp"
#include "circuitlab/tinyformer/graph.hpp"

#include <span>
#include <string>
#include <vector>

namespace clab {

/// Sequences stacked row-wise: row r of every activation belongs to exactly
/// one sequence position.
struct TokenBatch {
    std::vector<std::vector<int>> sequences;

    [[nodiscard]] Index rows() const;
    [[nodiscard]] std::vector<Index> segments() const;
    [[nodiscard]] std::vector<Index> offsets() const;
    [[nodiscard]] std::vector<Index> flat_tokens() const;
    [[nodiscard]] std::vector<Index> flat_positions() const;
};

TokenBatch clean_batch(std::span<const PatchedPair> pairs);
TokenBatch corrupted_batch(std::span<const PatchedPair> pairs);

/// Row and token bookkeeping for the answer position of each example.
struct AnswerSlots {
    std::vector<Index> rows;
    std::vector<Index> correct;
    std::vector<Index> incorrect;
    /// Owning example of each stacked row.
    std::vector<Index> row_example;
};

AnswerSlots answer_slots(std::span<const PatchedPair> pairs);

/// Per-node values of one forward pass. `outputs[s]` is what node s sends
/// along its out-edges (residual contribution for writers, q/k/v or the MLP
/// pre-activation for structural senders). `inputs[r]` is the
/// pre-normalization residual input of a residual reader.
struct ActivationCache {
    std::vector<Matrix> outputs;
    std::vector<Matrix> inputs;
    std::vector<Index> segments;
};

/// Edges whose sender value is taken from a donor run.
struct PatchPlan {
    std::vector<char> patched;
    const ActivationCache* donor = nullptr;

    PatchPlan() = default;
    PatchPlan(std::size_t edge_count, const ActivationCache* donor_cache) : patched(edge_count, 0), donor(donor_cache) {}

    void patch(int edge) { patched[static_cast<std::size_t>(edge)] = 1; }
    void unpatch(int edge) { patched[static_cast<std::size_t>(edge)] = 0; }
    [[nodiscard]] bool is_patched(int edge) const { return patched[static_cast<std::size_t>(edge)] != 0; }
    [[nodiscard]] bool empty() const;
};

/// Differentiable interpolation between the live sender value (mask 1) and
/// the donor value (mask 0). Edges with an invalid mask handle stay live.
struct EdgeMix {
    std::vector<Tensor> masks;
    const ActivationCache* donor = nullptr;
};

struct ForwardResult {
    Matrix logits;
    ActivationCache cache;
};

/// Anything circuit discovery can intervene on edge by edge.
class PatchableModel {
public:
    virtual ~PatchableModel() = default;
    [[nodiscard]] virtual const ComputationalGraph& graph() const = 0;
    [[nodiscard]] virtual ForwardResult forward(const TokenBatch& batch, const PatchPlan* plan = nullptr) const = 0;
};

struct TraceOptions {
    const PatchPlan* plan = nullptr;
    const EdgeMix* mix = nullptr;
    bool params_require_grad = false;
    /// Give every residual reader its own input node so gradients can be read
    /// per reader rather than per shared residual sum.
    bool reader_nodes = false;
};

/// Taped forward pass. Node-indexed vectors follow graph().nodes().
struct Trace {
    Tensor logits;
    std::vector<Tensor> outputs;
    std::vector<Tensor> inputs;
    std::vector<std::vector<Tensor>> params;
};

/// Parameter matrices per component, aligned with graph().nodes():
/// Embed {token table V x D, position table S x D}; Wq/Wk/Wv {D x dh};
/// Wo {dh x D}; Wup {D x d_ff}; Wdown {d_ff x D}; Unembed {D x V}.
using Weights = std::vector<std::vector<Matrix>>;

class TinyFormer final : public PatchableModel {
public:
    explicit TinyFormer(const ModelConfig& config);
    TinyFormer(const ModelConfig& config, Weights weights);

    [[nodiscard]] const ModelConfig& config() const { return config_; }
    [[nodiscard]] const ComputationalGraph& graph() const override { return graph_; }
    [[nodiscard]] const Weights& weights() const { return weights_; }
    [[nodiscard]] Weights& mutable_weights() { return weights_; }
    [[nodiscard]] std::string weights_digest() const;

    [[nodiscard]] ForwardResult forward(const TokenBatch& batch, const PatchPlan* plan = nullptr) const override;
    Trace trace(Tape& tape, const TokenBatch& batch, const TraceOptions& options = {}) const;

    /// Argmax token at each example's answer position.
    [[nodiscard]] std::vector<int> predict(std::span<const PatchedPair> pairs) const;

private:
    void check_batch(const TokenBatch& batch) const;

    ModelConfig config_;
    ComputationalGraph graph_;
    Weights weights_;
};

/// Scaled Gaussian initialization; each matrix draws from its own stream
/// seeded by (init_seed, component index, matrix index).
Weights initial_weights(const ModelConfig& config, const ComputationalGraph& graph);

enum class MetricKind { AnswerLogit, LogitDiff, KlToReference };

std::string to_string(MetricKind k);
MetricKind parse_metric_kind(const std::string& s);

/// Mean of the per-example metric over `slots`.
double output_metric(const Matrix& logits, const AnswerSlots& slots, MetricKind kind, const Matrix* reference = nullptr);
std::vector<double> output_metric_per_example(const Matrix& logits, const AnswerSlots& slots, MetricKind kind,
                                              const Matrix* reference = nullptr);
/// Taped sum over examples of answer_logit or logit_diff.
Tensor output_metric_sum(const Tensor& logits, const AnswerSlots& slots, MetricKind kind);

}  // namespace clab
