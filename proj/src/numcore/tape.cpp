#include "circuitlab/numcore/tape.hpp"

#include <algorithm>
#include <array>
#include <sstream>
#include <utility>

namespace clab {

namespace {

constexpr std::array<std::pair<Primitive, std::string_view>, 16> kNames{{
    {Primitive::Leaf, "leaf"},
    {Primitive::MatMul, "matmul"},
    {Primitive::Add, "add"},
    {Primitive::Multiply, "multiply"},
    {Primitive::Scale, "scale"},
    {Primitive::Transpose, "transpose"},
    {Primitive::ConcatRows, "concat_rows"},
    {Primitive::SliceRows, "slice_rows"},
    {Primitive::SoftmaxRows, "softmax_rows"},
    {Primitive::LayerNorm, "layer_norm"},
    {Primitive::Gelu, "gelu"},
    {Primitive::EmbedLookup, "embed_lookup"},
    {Primitive::CausalMask, "causal_mask"},
    {Primitive::CrossEntropyFromLogits, "cross_entropy_from_logits"},
    {Primitive::KlDivergenceFromLogits, "kl_divergence_from_logits"},
    {Primitive::CausalAttention, "causal_attention"},
}};

std::string shape_str(const Matrix& m)
{
    std::ostringstream os;
    os << m.rows() << "x" << m.cols();
    return os.str();
}

Tape& tape_of(const Tensor& t)
{
    if (!t.valid()) throw std::invalid_argument("tensor is not recorded on a tape");
    return *t.tape();
}

Tape& common_tape(const Tensor& a, const Tensor& b)
{
    tape_of(a);
    if (a.tape() != b.tape()) throw std::invalid_argument("operands live on different tapes");
    return *a.tape();
}

void check_finite(const Matrix& m, Primitive kind)
{
    if (!m.allFinite()) throw NumericError("non-finite output from " + std::string(primitive_name(kind)));
}

}  // namespace

std::string_view primitive_name(Primitive kind)
{
    for (const auto& [k, name] : kNames)
        if (k == kind) return name;
    return "unknown";
}

Primitive parse_primitive(std::string_view name)
{
    for (const auto& [k, n] : kNames)
        if (n == name && k != Primitive::Leaf) return k;
    throw std::invalid_argument("unknown primitive kind '" + std::string(name) + "'");
}

const Matrix& Tensor::value() const
{
    if (!valid()) throw std::invalid_argument("empty tensor handle");
    return tape_->nodes_[static_cast<std::size_t>(id_)].value;
}

Shape Tensor::shape() const
{
    const Matrix& v = value();
    return {v.rows(), v.cols()};
}

bool Tensor::requires_grad() const
{
    return valid() && tape_->nodes_[static_cast<std::size_t>(id_)].requires_grad;
}

Tensor Tape::constant(Matrix value)
{
    check_finite(value, Primitive::Leaf);
    nodes_.push_back(Node{Primitive::Leaf, {}, std::move(value), {}, false});
    return Tensor(this, static_cast<int>(nodes_.size() - 1));
}

Tensor Tape::variable(Matrix value)
{
    check_finite(value, Primitive::Leaf);
    nodes_.push_back(Node{Primitive::Leaf, {}, std::move(value), {}, true});
    return Tensor(this, static_cast<int>(nodes_.size() - 1));
}

Tensor Tape::record(Primitive kind, std::vector<int> operands, Matrix value, Saved saved)
{
    if (consumed_) throw std::logic_error("tape already consumed by backward");
    check_finite(value, kind);
    bool rg = false;
    for (const int op : operands) rg = rg || nodes_[static_cast<std::size_t>(op)].requires_grad;
    nodes_.push_back(Node{kind, std::move(operands), std::move(value), std::move(saved), rg});
    return Tensor(this, static_cast<int>(nodes_.size() - 1));
}

Matrix Gradients::grad(const Tensor& t) const
{
    if (t.tape() != tape_) throw std::invalid_argument("tensor is not on the differentiated tape");
    const auto i = static_cast<std::size_t>(t.id());
    if (grads_[i].size() == 0) return Matrix::Zero(shapes_[i].rows, shapes_[i].cols);
    return grads_[i];
}

bool Gradients::has(const Tensor& t) const
{
    return t.tape() == tape_ && grads_[static_cast<std::size_t>(t.id())].size() != 0;
}

namespace {

void accumulate(Matrix& slot, const Matrix& delta)
{
    if (slot.size() == 0)
        slot = delta;
    else
        slot += delta;
}

}  // namespace

Gradients backward(Tape& tape, const Tensor& root)
{
    if (root.tape() != &tape) throw std::invalid_argument("backward root is not on this tape");
    if (tape.consumed_) throw std::logic_error("tape already consumed by backward");
    if (root.shape() != Shape{1, 1}) throw ShapeError("backward root must be 1x1");
    tape.consumed_ = true;

    Gradients out;
    out.tape_ = &tape;
    out.grads_.resize(tape.nodes_.size());
    out.shapes_.reserve(tape.nodes_.size());
    for (const auto& n : tape.nodes_) out.shapes_.push_back({n.value.rows(), n.value.cols()});
    if (!root.requires_grad()) return out;

    auto& g = out.grads_;
    g[static_cast<std::size_t>(root.id())] = Matrix::Ones(1, 1);

    for (int id = root.id(); id >= 0; --id) {
        const auto& node = tape.nodes_[static_cast<std::size_t>(id)];
        Matrix& dy = g[static_cast<std::size_t>(id)];
        if (dy.size() == 0 || !node.requires_grad || node.kind == Primitive::Leaf) continue;

        const auto want = [&](std::size_t k) { return tape.nodes_[static_cast<std::size_t>(node.operands[k])].requires_grad; };
        const auto val = [&](std::size_t k) -> const Matrix& { return tape.nodes_[static_cast<std::size_t>(node.operands[k])].value; };
        const auto slot = [&](std::size_t k) -> Matrix& { return g[static_cast<std::size_t>(node.operands[k])]; };

        switch (node.kind) {
        case Primitive::MatMul:
            if (want(0)) accumulate(slot(0), dy * val(1).transpose());
            if (want(1)) accumulate(slot(1), val(0).transpose() * dy);
            break;
        case Primitive::Add:
            if (want(0)) accumulate(slot(0), dy);
            if (want(1)) accumulate(slot(1), dy);
            break;
        case Primitive::Multiply: {
            const Matrix& a = val(0);
            const Matrix& b = val(1);
            if (want(0)) {
                if (a.size() == 1 && dy.size() != 1)
                    accumulate(slot(0), Matrix::Constant(1, 1, (dy.array() * b.array()).sum()));
                else if (b.size() == 1)
                    accumulate(slot(0), dy * b(0, 0));
                else
                    accumulate(slot(0), (dy.array() * b.array()).matrix());
            }
            if (want(1)) {
                if (b.size() == 1 && dy.size() != 1)
                    accumulate(slot(1), Matrix::Constant(1, 1, (dy.array() * a.array()).sum()));
                else if (a.size() == 1)
                    accumulate(slot(1), dy * a(0, 0));
                else
                    accumulate(slot(1), (dy.array() * a.array()).matrix());
            }
            break;
        }
        case Primitive::Scale:
            if (want(0)) accumulate(slot(0), dy * node.saved.scalar);
            break;
        case Primitive::Transpose:
            if (want(0)) accumulate(slot(0), dy.transpose());
            break;
        case Primitive::ConcatRows: {
            Index start = 0;
            for (std::size_t k = 0; k < node.operands.size(); ++k) {
                const Index rows = val(k).rows();
                if (want(k)) accumulate(slot(k), dy.middleRows(start, rows));
                start += rows;
            }
            break;
        }
        case Primitive::SliceRows:
            if (want(0)) {
                Matrix full = Matrix::Zero(val(0).rows(), val(0).cols());
                full.middleRows(node.saved.ints[0], dy.rows()) = dy;
                accumulate(slot(0), full);
            }
            break;
        case Primitive::SoftmaxRows:
            if (want(0)) {
                const Matrix& y = node.value;
                const Vector dots = (dy.array() * y.array()).rowwise().sum();
                Matrix dx = y.array() * (dy.colwise() - dots).array();
                accumulate(slot(0), dx);
            }
            break;
        case Primitive::LayerNorm:
            if (want(0)) {
                const Matrix& y = node.value;
                const Vector& inv = node.saved.v;
                const double n = static_cast<double>(y.cols());
                const Vector mean_dy = dy.rowwise().sum() / n;
                const Vector mean_dyy = (dy.array() * y.array()).rowwise().sum() / n;
                Matrix dx(y.rows(), y.cols());
                for (Index r = 0; r < y.rows(); ++r)
                    dx.row(r) = inv(r) * (dy.row(r).array() - mean_dy(r) - y.row(r).array() * mean_dyy(r));
                accumulate(slot(0), dx);
            }
            break;
        case Primitive::Gelu:
            if (want(0)) {
                const Matrix& x = val(0);
                Matrix dx = x.unaryExpr([](double v) { return gelu_derivative(v); }).cwiseProduct(dy);
                accumulate(slot(0), dx);
            }
            break;
        case Primitive::EmbedLookup:
            if (want(0)) {
                Matrix dt = Matrix::Zero(val(0).rows(), val(0).cols());
                const auto& ids = node.saved.ints;
                for (std::size_t r = 0; r < ids.size(); ++r) dt.row(ids[r]) += dy.row(static_cast<Index>(r));
                accumulate(slot(0), dt);
            }
            break;
        case Primitive::CausalMask:
            if (want(0)) {
                Matrix dx = Matrix::Zero(dy.rows(), dy.cols());
                Index start = 0;
                for (const Index len : node.saved.ints) {
                    for (Index i = 0; i < len; ++i)
                        dx.block(start + i, start, 1, i + 1) = dy.block(start + i, start, 1, i + 1);
                    start += len;
                }
                accumulate(slot(0), dx);
            }
            break;
        case Primitive::CausalAttention: {
            // Per segment: dV = P^T dO, dP = dO V^T, dS = P * (dP - rowsum(P * dP)),
            // dQ = c dS K, dK = c dS^T Q.
            const Matrix& q = val(0);
            const Matrix& k = val(1);
            const Matrix& v = val(2);
            const double c = node.saved.scalar;
            Matrix dq = Matrix::Zero(q.rows(), q.cols());
            Matrix dk = Matrix::Zero(k.rows(), k.cols());
            Matrix dv = Matrix::Zero(v.rows(), v.cols());
            Index start = 0;
            for (const Index len : node.saved.ints) {
                const Matrix p = node.saved.a.block(start, 0, len, len);
                const auto dout = dy.middleRows(start, len);
                dv.middleRows(start, len) = p.transpose() * dout;
                const Matrix dp = dout * v.middleRows(start, len).transpose();
                const Vector dots = (p.array() * dp.array()).rowwise().sum();
                const Matrix ds = p.array() * (dp.colwise() - dots).array();
                dq.middleRows(start, len) = c * ds * k.middleRows(start, len);
                dk.middleRows(start, len) = c * ds.transpose() * q.middleRows(start, len);
                start += len;
            }
            if (want(0)) accumulate(slot(0), dq);
            if (want(1)) accumulate(slot(1), dk);
            if (want(2)) accumulate(slot(2), dv);
            break;
        }
        case Primitive::CrossEntropyFromLogits:
            if (want(0)) {
                const Matrix& probs = node.saved.a;
                const auto& rows = node.saved.ints;
                const auto& targets = node.saved.ints2;
                const double w = dy(0, 0) / static_cast<double>(rows.size());
                Matrix dx = Matrix::Zero(val(0).rows(), val(0).cols());
                for (std::size_t k = 0; k < rows.size(); ++k) {
                    dx.row(rows[k]) += w * probs.row(static_cast<Index>(k));
                    dx(rows[k], targets[k]) -= w;
                }
                accumulate(slot(0), dx);
            }
            break;
        case Primitive::KlDivergenceFromLogits: {
            const Matrix& lp = node.saved.a;  // log softmax of reference rows
            const Matrix& lq = node.saved.b;  // log softmax of candidate rows
            const auto& rows = node.saved.ints;
            const double w = dy(0, 0) / static_cast<double>(rows.size());
            if (want(0)) {
                Matrix dx = Matrix::Zero(val(0).rows(), val(0).cols());
                for (std::size_t k = 0; k < rows.size(); ++k) {
                    const auto r = static_cast<Index>(k);
                    const auto p = lp.row(r).array().exp();
                    const auto diff = (lp.row(r) - lq.row(r)).array();
                    const double kl = (p * diff).sum();
                    dx.row(rows[k]) += (w * p * (diff - kl)).matrix();
                }
                accumulate(slot(0), dx);
            }
            if (want(1)) {
                Matrix dx = Matrix::Zero(val(1).rows(), val(1).cols());
                for (std::size_t k = 0; k < rows.size(); ++k) {
                    const auto r = static_cast<Index>(k);
                    dx.row(rows[k]) += w * (lq.row(r).array().exp() - lp.row(r).array().exp()).matrix();
                }
                accumulate(slot(1), dx);
            }
            break;
        }
        case Primitive::Leaf:
            break;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Forward rules

Tensor matmul(const Tensor& a, const Tensor& b)
{
    Tape& t = common_tape(a, b);
    if (a.shape().cols != b.shape().rows)
        throw ShapeError("matmul: " + shape_str(a.value()) + " times " + shape_str(b.value()));
    Matrix out = a.value() * b.value();
    return t.record(Primitive::MatMul, {a.id(), b.id()}, std::move(out));
}

Tensor add(const Tensor& a, const Tensor& b)
{
    Tape& t = common_tape(a, b);
    if (a.shape() != b.shape()) throw ShapeError("add: " + shape_str(a.value()) + " vs " + shape_str(b.value()));
    Matrix out = a.value() + b.value();
    return t.record(Primitive::Add, {a.id(), b.id()}, std::move(out));
}

Tensor multiply(const Tensor& a, const Tensor& b)
{
    Tape& t = common_tape(a, b);
    Matrix out;
    if (a.shape() == b.shape())
        out = a.value().cwiseProduct(b.value());
    else if (a.value().size() == 1)
        out = a.value()(0, 0) * b.value();
    else if (b.value().size() == 1)
        out = a.value() * b.value()(0, 0);
    else
        throw ShapeError("multiply: " + shape_str(a.value()) + " vs " + shape_str(b.value()));
    return t.record(Primitive::Multiply, {a.id(), b.id()}, std::move(out));
}

Tensor scale(const Tensor& a, double factor)
{
    Saved s;
    s.scalar = factor;
    return tape_of(a).record(Primitive::Scale, {a.id()}, a.value() * factor, std::move(s));
}

Tensor transpose(const Tensor& a)
{
    return tape_of(a).record(Primitive::Transpose, {a.id()}, a.value().transpose());
}

Tensor concat_rows(std::span<const Tensor> parts)
{
    if (parts.empty()) throw ShapeError("concat_rows: no operands");
    Tape& t = tape_of(parts[0]);
    Index rows = 0;
    const Index cols = parts[0].shape().cols;
    std::vector<int> ids;
    for (const auto& p : parts) {
        if (p.tape() != &t) throw std::invalid_argument("operands live on different tapes");
        if (p.shape().cols != cols) throw ShapeError("concat_rows: column mismatch");
        rows += p.shape().rows;
        ids.push_back(p.id());
    }
    Matrix out(rows, cols);
    Index start = 0;
    for (const auto& p : parts) {
        out.middleRows(start, p.shape().rows) = p.value();
        start += p.shape().rows;
    }
    return t.record(Primitive::ConcatRows, std::move(ids), std::move(out));
}

Tensor slice_rows(const Tensor& a, Index begin, Index count)
{
    if (begin < 0 || count <= 0 || begin + count > a.shape().rows) throw ShapeError("slice_rows: range out of bounds");
    Saved s;
    s.ints = {begin};
    return tape_of(a).record(Primitive::SliceRows, {a.id()}, a.value().middleRows(begin, count), std::move(s));
}

Tensor softmax_rows(const Tensor& a)
{
    return tape_of(a).record(Primitive::SoftmaxRows, {a.id()}, softmax_rows(a.value()));
}

Tensor layer_norm(const Tensor& a)
{
    Saved s;
    Matrix out = layer_norm_rows(a.value(), &s.v);
    return tape_of(a).record(Primitive::LayerNorm, {a.id()}, std::move(out), std::move(s));
}

Tensor gelu(const Tensor& a)
{
    Matrix out = a.value().unaryExpr([](double v) { return gelu(v); });
    return tape_of(a).record(Primitive::Gelu, {a.id()}, std::move(out));
}

Tensor embed_lookup(const Tensor& table, std::span<const Index> ids)
{
    const Matrix& tv = table.value();
    Matrix out(static_cast<Index>(ids.size()), tv.cols());
    for (std::size_t r = 0; r < ids.size(); ++r) {
        if (ids[r] < 0 || ids[r] >= tv.rows()) throw ShapeError("embed_lookup: id out of range");
        out.row(static_cast<Index>(r)) = tv.row(ids[r]);
    }
    Saved s;
    s.ints.assign(ids.begin(), ids.end());
    return tape_of(table).record(Primitive::EmbedLookup, {table.id()}, std::move(out), std::move(s));
}

Tensor causal_mask(const Tensor& scores, std::span<const Index> segments)
{
    const Shape sh = scores.shape();
    Index total = 0;
    for (const Index len : segments) {
        if (len <= 0) throw ShapeError("causal_mask: empty segment");
        total += len;
    }
    if (sh.rows != sh.cols || sh.rows != total) throw ShapeError("causal_mask: scores must be square over all segments");
    Saved s;
    s.ints.assign(segments.begin(), segments.end());
    return tape_of(scores).record(Primitive::CausalMask, {scores.id()}, apply_causal_mask(scores.value(), segments), std::move(s));
}

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::span<const Index> segments, double scale)
{
    Tape& tape = common_tape(q, k);
    common_tape(q, v);
    const Shape qs = q.shape(), ks = k.shape(), vs = v.shape();
    if (qs != ks || vs.rows != qs.rows) throw ShapeError("causal_attention: q " + shape_str(q.value()) + ", k " + shape_str(k.value()) + ", v " + shape_str(v.value()));
    Index total = 0, widest = 0;
    for (const Index len : segments) {
        if (len <= 0) throw ShapeError("causal_attention: empty segment");
        total += len;
        widest = std::max(widest, len);
    }
    if (total != qs.rows) throw ShapeError("causal_attention: segments do not cover the rows");
    Saved s;
    s.ints.assign(segments.begin(), segments.end());
    s.scalar = scale;
    s.a = Matrix::Zero(total, widest);
    Matrix out(vs.rows, vs.cols);
    Index start = 0;
    for (const Index len : segments) {
        Matrix scores = scale * q.value().middleRows(start, len) * k.value().middleRows(start, len).transpose();
        for (Index i = 0; i < len; ++i) {
            auto row = scores.row(i).head(i + 1);
            const double m = row.maxCoeff();
            row = (row.array() - m).exp().matrix();
            row /= row.sum();
            scores.row(i).tail(len - i - 1).setZero();
        }
        s.a.block(start, 0, len, len) = scores;
        out.middleRows(start, len) = scores * v.value().middleRows(start, len);
        start += len;
    }
    check_finite(out, Primitive::CausalAttention);
    return tape.record(Primitive::CausalAttention, {q.id(), k.id(), v.id()}, std::move(out), std::move(s));
}

Tensor cross_entropy_from_logits(const Tensor& logits, std::span<const Index> rows, std::span<const Index> targets)
{
    if (rows.empty() || rows.size() != targets.size()) throw ShapeError("cross_entropy: rows/targets mismatch");
    const Matrix& z = logits.value();
    Saved s;
    s.a.resize(static_cast<Index>(rows.size()), z.cols());
    double total = 0.0;
    for (std::size_t k = 0; k < rows.size(); ++k) {
        if (rows[k] < 0 || rows[k] >= z.rows() || targets[k] < 0 || targets[k] >= z.cols())
            throw ShapeError("cross_entropy: index out of range");
        const Matrix lrow = log_softmax_rows(z.row(rows[k]));
        total -= lrow(0, targets[k]);
        s.a.row(static_cast<Index>(k)) = lrow.array().exp().matrix();
    }
    s.ints.assign(rows.begin(), rows.end());
    s.ints2.assign(targets.begin(), targets.end());
    Matrix out = Matrix::Constant(1, 1, total / static_cast<double>(rows.size()));
    return tape_of(logits).record(Primitive::CrossEntropyFromLogits, {logits.id()}, std::move(out), std::move(s));
}

Tensor kl_divergence_from_logits(const Tensor& reference, const Tensor& candidate, std::span<const Index> rows)
{
    Tape& t = common_tape(reference, candidate);
    if (reference.shape() != candidate.shape()) throw ShapeError("kl_divergence: shape mismatch");
    if (rows.empty()) throw ShapeError("kl_divergence: no rows");
    const Matrix& p = reference.value();
    const Matrix& q = candidate.value();
    Saved s;
    s.a.resize(static_cast<Index>(rows.size()), p.cols());
    s.b.resize(static_cast<Index>(rows.size()), p.cols());
    double total = 0.0;
    for (std::size_t k = 0; k < rows.size(); ++k) {
        if (rows[k] < 0 || rows[k] >= p.rows()) throw ShapeError("kl_divergence: row out of range");
        const auto r = static_cast<Index>(k);
        s.a.row(r) = log_softmax_rows(p.row(rows[k]));
        s.b.row(r) = log_softmax_rows(q.row(rows[k]));
        total += (s.a.row(r).array().exp() * (s.a.row(r) - s.b.row(r)).array()).sum();
    }
    s.ints.assign(rows.begin(), rows.end());
    Matrix out = Matrix::Constant(1, 1, total / static_cast<double>(rows.size()));
    return t.record(Primitive::KlDivergenceFromLogits, {reference.id(), candidate.id()}, std::move(out), std::move(s));
}

Tensor sum_all(const Tensor& a)
{
    Tape& t = tape_of(a);
    const Shape sh = a.shape();
    const Tensor left = t.constant(Matrix::Ones(1, sh.rows));
    const Tensor right = t.constant(Matrix::Ones(sh.cols, 1));
    return matmul(matmul(left, a), right);
}

Tensor forward_primitive(Primitive kind, std::span<const Tensor> operands, const PrimitiveArgs& args)
{
    const auto need = [&](std::size_t n) {
        if (operands.size() != n)
            throw ShapeError(std::string(primitive_name(kind)) + ": expected " + std::to_string(n) + " operands");
    };
    switch (kind) {
    case Primitive::MatMul: need(2); return matmul(operands[0], operands[1]);
    case Primitive::Add: need(2); return add(operands[0], operands[1]);
    case Primitive::Multiply: need(2); return multiply(operands[0], operands[1]);
    case Primitive::Scale: need(1); return scale(operands[0], args.factor);
    case Primitive::Transpose: need(1); return transpose(operands[0]);
    case Primitive::ConcatRows: return concat_rows(operands);
    case Primitive::SliceRows: need(1); return slice_rows(operands[0], args.begin, args.count);
    case Primitive::SoftmaxRows: need(1); return softmax_rows(operands[0]);
    case Primitive::LayerNorm: need(1); return layer_norm(operands[0]);
    case Primitive::Gelu: need(1); return gelu(operands[0]);
    case Primitive::EmbedLookup: need(1); return embed_lookup(operands[0], args.ids);
    case Primitive::CausalMask: need(1); return causal_mask(operands[0], args.ids);
    case Primitive::CrossEntropyFromLogits: need(1); return cross_entropy_from_logits(operands[0], args.ids, args.targets);
    case Primitive::KlDivergenceFromLogits: need(2); return kl_divergence_from_logits(operands[0], operands[1], args.ids);
    case Primitive::CausalAttention: need(3); return causal_attention(operands[0], operands[1], operands[2], args.ids, args.factor);
    case Primitive::Leaf: break;
    }
    throw std::invalid_argument("unknown primitive kind");
}

Tensor forward_primitive(std::string_view kind, std::span<const Tensor> operands, const PrimitiveArgs& args)
{
    return forward_primitive(parse_primitive(kind), operands, args);
}

}  // namespace clab
