#pragma once

#include "circuitlab/numcore/kernels.hpp"

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace clab {

class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

enum class Primitive : std::uint8_t {
    Leaf,
    MatMul,
    Add,
    Multiply,
    Scale,
    Transpose,
    ConcatRows,
    SliceRows,
    SoftmaxRows,
    LayerNorm,
    Gelu,
    EmbedLookup,
    CausalMask,
    CrossEntropyFromLogits,
    KlDivergenceFromLogits,
    CausalAttention,
};

std::string_view primitive_name(Primitive kind);
/// Throws std::invalid_argument for names outside the primitive set.
Primitive parse_primitive(std::string_view name);

struct Shape {
    Index rows = 0;
    Index cols = 0;
    friend bool operator==(const Shape&, const Shape&) = default;
};

class Tape;

/// Handle to an immutable value recorded on a Tape.
class Tensor {
public:
    Tensor() = default;

    [[nodiscard]] const Matrix& value() const;
    [[nodiscard]] Shape shape() const;
    [[nodiscard]] bool requires_grad() const;
    [[nodiscard]] int id() const { return id_; }
    [[nodiscard]] Tape* tape() const { return tape_; }
    [[nodiscard]] bool valid() const { return tape_ != nullptr; }

private:
    friend class Tape;
    Tensor(Tape* tape, int id) : tape_(tape), id_(id) {}

    Tape* tape_ = nullptr;
    int id_ = -1;
};

/// Values a primitive keeps for its backward rule.
struct Saved {
    Matrix a;
    Matrix b;
    Vector v;
    std::vector<Index> ints;
    std::vector<Index> ints2;
    double scalar = 0.0;
};

class Gradients;

class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Tensor constant(Matrix value);
    Tensor variable(Matrix value);
    Tensor scalar(double value) { return constant(Matrix::Constant(1, 1, value)); }

    /// Appends a primitive application; requires_grad is inherited from the operands.
    Tensor record(Primitive kind, std::vector<int> operands, Matrix value, Saved saved = {});

    [[nodiscard]] std::size_t size() const { return nodes_.size(); }
    [[nodiscard]] bool consumed() const { return consumed_; }

private:
    friend class Tensor;
    friend Gradients backward(Tape& tape, const Tensor& root);

    struct Node {
        Primitive kind = Primitive::Leaf;
        std::vector<int> operands;
        Matrix value;
        Saved saved;
        bool requires_grad = false;
    };

    std::vector<Node> nodes_;
    bool consumed_ = false;
};

/// Result of a reverse sweep. Tensors off every path to the root read as zero.
class Gradients {
public:
    [[nodiscard]] Matrix grad(const Tensor& t) const;
    [[nodiscard]] bool has(const Tensor& t) const;

private:
    friend Gradients backward(Tape& tape, const Tensor& root);
    const Tape* tape_ = nullptr;
    std::vector<Matrix> grads_;
    std::vector<Shape> shapes_;
};

/// Reverse-mode sweep from a 1x1 root. A tape supports a single sweep.
Gradients backward(Tape& tape, const Tensor& root);

// Primitive applications. Each validates shapes, rejects non-finite output and
// records itself on the operands' tape.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
/// Elementwise product; either operand may be 1x1 and broadcasts.
Tensor multiply(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor transpose(const Tensor& a);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor slice_rows(const Tensor& a, Index begin, Index count);
Tensor softmax_rows(const Tensor& a);
Tensor layer_norm(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor embed_lookup(const Tensor& table, std::span<const Index> ids);
Tensor causal_mask(const Tensor& scores, std::span<const Index> segments);
/// softmax(scale q k^T) v computed block by block: each row attends to
/// itself and earlier rows of its own segment. Cost is linear in the number
/// of segments rather than quadratic in the stacked row count.
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::span<const Index> segments, double scale);
/// Mean over `rows` of -log softmax(logits[row])[target].
Tensor cross_entropy_from_logits(const Tensor& logits, std::span<const Index> rows, std::span<const Index> targets);
/// Mean over `rows` of KL(softmax(reference[row]) || softmax(candidate[row])).
Tensor kl_divergence_from_logits(const Tensor& reference, const Tensor& candidate, std::span<const Index> rows);

/// Sum of all entries, composed from matmuls with constant ones.
Tensor sum_all(const Tensor& a);

/// Extra arguments for the generic dispatcher.
struct PrimitiveArgs {
    double factor = 1.0;
    Index begin = 0;
    Index count = 0;
    std::vector<Index> ids;
    std::vector<Index> targets;
};

/// Generic entry point keyed by primitive kind.
Tensor forward_primitive(Primitive kind, std::span<const Tensor> operands, const PrimitiveArgs& args = {});
Tensor forward_primitive(std::string_view kind, std::span<const Tensor> operands, const PrimitiveArgs& args = {});

}  // namespace clab
