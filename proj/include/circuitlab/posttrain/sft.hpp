#pragma once

#include "circuitlab/circmetrics/metrics.hpp"
#include "circuitlab/posttrain/optimizer.hpp"

#include <functional>
#include <optional>
#include <span>

namespace clab {

enum class TrainMode : std::uint8_t { Sft, Unlearn };
std::string to_string(TrainMode m);
TrainMode parse_train_mode(const std::string& s);

struct SftConfig {
    double learning_rate = 1e-5;
    double lambda = 1.0;
    std::size_t epochs = 10;
    std::size_t observations_per_epoch = 20;
    std::size_t batch_size = 16;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double weight_decay = 0.01;
    /// Unlearn ascends the target cross-entropy.
    TrainMode mode = TrainMode::Sft;
    std::uint64_t seed = 0;

    void validate() const;
    [[nodiscard]] AdamWConfig adamw() const;
};

enum class StrategyKind : std::uint8_t { Free, Mech, Random, FutureMech };
std::string to_string(StrategyKind k);
StrategyKind parse_strategy_kind(const std::string& s);

struct LocalizationStrategy {
    StrategyKind kind = StrategyKind::Free;
    /// Components left trainable.
    std::size_t budget = 0;
    /// Random only: class counts copied from the Mech mask it mirrors.
    std::size_t attn_count = 0;
    std::size_t mlp_count = 0;
    /// FutureMech only: digest the scores must match.
    std::string source_digest;

    [[nodiscard]] std::string name() const { return to_string(kind); }
};

/// Free freezes nothing; Mech and FutureMech freeze every eligible component
/// outside localize_components(scores, budget); Random freezes the
/// complement of a uniform draw with the given Attn / MLP counts.
FreezeMask make_freeze_mask(const ComputationalGraph& graph, const LocalizationStrategy& strategy, const EdgeScores* scores,
                            std::uint64_t seed);

/// Trainable Attn / MLP components of a mask.
std::pair<std::size_t, std::size_t> trainable_counts(const ComputationalGraph& graph, const FreezeMask& mask);

/// Fraction of pairs whose argmax at answer_pos is the correct token.
double evaluate(const TinyFormer& model, std::span<const PatchedPair> data);
double evaluate(std::span<const int> predictions, std::span<const PatchedPair> data);

struct EvalResult {
    double accuracy = 0.0;
    /// Mean answer cross-entropy.
    double loss = 0.0;
};

/// Accuracy and loss from a single forward pass.
EvalResult evaluate_full(const TinyFormer& model, std::span<const PatchedPair> data);

struct BatchGradient {
    double loss = 0.0;
    Weights grads;
};

/// Mean answer cross-entropy and its parameter gradient.
BatchGradient cross_entropy_gradient(const TinyFormer& model, std::span<const PatchedPair> batch);
double cross_entropy(const TinyFormer& model, std::span<const PatchedPair> data);

/// ±CE(target) + lambda * CE(perv); the pervasiveness term is skipped when
/// lambda is 0 or the batch is empty.
BatchGradient sft_gradient(const TinyFormer& model, std::span<const PatchedPair> target, std::span<const PatchedPair> perv,
                           const SftConfig& config);

struct PretrainConfig {
    std::size_t steps = 1000;
    std::size_t batch_size = 32;
    AdamWConfig adamw{3e-3, 0.9, 0.999, 1e-8, 0.01};
    std::uint64_t seed = 0;
};

struct PretrainResult {
    double initial_loss = 0.0;
    double final_loss = 0.0;
    std::vector<std::pair<std::string, double>> task_accuracy;
    std::size_t skipped_steps = 0;
};

/// Single-objective training on a task mixture. Throws std::runtime_error on divergence.
PretrainResult pretrain(TinyFormer& model, std::span<const PatchedPair> data, const PretrainConfig& config);

struct SftData {
    Dataset target_train;
    Dataset perv_train;
    Dataset target_eval;
    Dataset perv_eval;
};

struct ObservationConfig {
    /// Regime and metric of the tracked scores; thresholds are unused.
    DiscoveryConfig discovery;
    std::size_t k_pairs = 10;
    double subset_fraction = 0.2;
    bool conflict = true;
    /// Fraction of edges dropped when cutting circuits for conflict.
    double conflict_sparsity = 0.95;
};

struct Trajectory {
    std::vector<MetricRecord> records;
    /// Tracked edge scores at every observation, step 0 first.
    std::vector<EdgeScores> scores;
    /// Weights digest at the end of every epoch.
    std::vector<std::string> epoch_digests;
    std::size_t skipped_steps = 0;
    bool diverged = false;
    std::string error;
};

struct SftHooks {
    std::function<void(std::size_t epoch, const TinyFormer& model)> on_epoch_end;
};

/// Optimizer steps per epoch: one pass over the target training set.
std::size_t steps_per_epoch(const SftData& data, const SftConfig& config);

/// loss = ±CE_target + lambda * CE_perv per step, masked AdamW, observations
/// at evenly spaced steps inside each epoch. Step 0 is always recorded.
Trajectory sft_run(TinyFormer& model, const SftData& data, const SftConfig& config, const FreezeMask& mask,
                   const ObservationConfig& observe, const SftHooks& hooks = {});

}  // namespace clab
