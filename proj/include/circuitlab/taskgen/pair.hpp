#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace clab {

/// A clean prompt with its interchange partner. The model is scored on the
/// token it predicts at `answer_pos`.
struct PatchedPair {
    std::vector<int> clean;
    std::vector<int> corrupted;
    int answer_pos = 0;
    int correct_token = 0;
    int incorrect_token = 0;
    std::string task;

    /// Throws std::invalid_argument when the pair breaks its invariants.
    void validate() const
    {
        if (clean.empty() || clean.size() != corrupted.size()) throw std::invalid_argument("pair: clean/corrupted length mismatch");
        if (answer_pos < 0 || static_cast<std::size_t>(answer_pos) >= clean.size())
            throw std::invalid_argument("pair: answer_pos out of range");
        if (correct_token == incorrect_token) throw std::invalid_argument("pair: correct equals incorrect token");
        bool differs = false;
        for (int i = 0; i < answer_pos; ++i) differs = differs || clean[static_cast<std::size_t>(i)] != corrupted[static_cast<std::size_t>(i)];
        if (!differs) throw std::invalid_argument("pair: corruption does not touch the prompt");
    }

    friend bool operator==(const PatchedPair&, const PatchedPair&) = default;
};

using Dataset = std::vector<PatchedPair>;

}  // namespace clab
