#pragma once

#include <cstdint>
#include <string>

namespace clab {

enum class Activation : std::uint8_t { Gelu, Identity };

struct ModelConfig {
    int n_layers = 2;
    int n_heads = 2;
    int d_model = 32;
    int d_ff = 64;
    int vocab_size = 64;
    int max_seq_len = 16;
    std::uint64_t init_seed = 0;
    /// Reader-side layer normalization. Disabled only for affine test fixtures.
    bool normalize = true;
    Activation activation = Activation::Gelu;

    [[nodiscard]] int head_dim() const { return d_model / n_heads; }
    /// Throws std::invalid_argument naming the offending field.
    void validate() const;

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

std::string to_string(Activation a);
Activation parse_activation(const std::string& s);

}  // namespace clab
