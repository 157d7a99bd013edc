#pragma once

#include "circuitlab/tinyformer/model.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace clab {

/// Components whose parameters stay fixed, indexed by graph node.
struct FreezeMask {
    std::vector<char> frozen;
    /// Digest of the scores a localized mask was built from, empty otherwise.
    std::string source_digest;

    [[nodiscard]] bool is_frozen(std::size_t node) const { return node < frozen.size() && frozen[node] != 0; }
    [[nodiscard]] std::size_t count() const;
    /// Component names, sorted by node index.
    [[nodiscard]] std::vector<std::string> names(const ComputationalGraph& graph) const;
};

struct AdamWConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double weight_decay = 0.01;

    void validate() const;
};

struct AdamWState {
    Weights m;
    Weights v;
    /// Step count per component; frozen components never advance.
    std::vector<std::uint64_t> t;

    static AdamWState zeros_like(const Weights& w);
};

/// Decoupled weight decay:
///   m <- b1 m + (1-b1) g,  v <- b2 v + (1-b2) g^2
///   p <- p - lr (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps) - lr wd p
/// Frozen components keep parameters and state. Returns false, touching
/// nothing, when an unfrozen gradient is non-finite.
bool adamw_step(Weights& params, const Weights& grads, AdamWState& state, const AdamWConfig& config,
                const FreezeMask* mask = nullptr);

}  // namespace clab
