#pragma once

#include "circuitlab/tinyformer/model.hpp"

#include <span>

namespace fixtures {

using namespace clab;

/// Small hand-written induction-style pairs over a 12-token vocabulary.
Dataset tiny_pairs();

/// A 1-layer, 2-head model small enough for exhaustive finite differences.
ModelConfig tiny_config(std::uint64_t seed = 11);

/// Cross-entropy of the correct token at each answer position.
double model_loss(const TinyFormer& model, std::span<const PatchedPair> pairs);

/// Max relative error between taped parameter gradients of model_loss and
/// central differences over every parameter coordinate.
double model_grad_check(const TinyFormer& model, std::span<const PatchedPair> pairs, double step = 1e-5,
                        double floor = 1e-5);

}  // namespace fixtures
