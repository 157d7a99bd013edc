#include "circuitlab/tinyformer/model.hpp"

#include "circuitlab/common/digest.hpp"

#include <cmath>
#include <random>
#include <unordered_map>

namespace clab {

// ---------------------------------------------------------------------------
// Config

void ModelConfig::validate() const
{
    const auto positive = [](int v, const char* name) {
        if (v < 1) throw std::invalid_argument(std::string("model config: ") + name + " must be >= 1");
    };
    positive(n_layers, "n_layers");
    positive(n_heads, "n_heads");
    positive(d_model, "d_model");
    positive(d_ff, "d_ff");
    positive(vocab_size, "vocab_size");
    positive(max_seq_len, "max_seq_len");
    if (d_model % n_heads != 0) throw std::invalid_argument("model config: d_model must be divisible by n_heads");
}

std::string to_string(Activation a) { return a == Activation::Gelu ? "gelu" : "identity"; }

Activation parse_activation(const std::string& s)
{
    if (s == "gelu") return Activation::Gelu;
    if (s == "identity") return Activation::Identity;
    throw std::invalid_argument("unknown activation '" + s + "'");
}

// ---------------------------------------------------------------------------
// Batches

Index TokenBatch::rows() const
{
    Index n = 0;
    for (const auto& s : sequences) n += static_cast<Index>(s.size());
    return n;
}

std::vector<Index> TokenBatch::segments() const
{
    std::vector<Index> out;
    out.reserve(sequences.size());
    for (const auto& s : sequences) out.push_back(static_cast<Index>(s.size()));
    return out;
}

std::vector<Index> TokenBatch::offsets() const
{
    std::vector<Index> out;
    Index at = 0;
    for (const auto& s : sequences) {
        out.push_back(at);
        at += static_cast<Index>(s.size());
    }
    return out;
}

std::vector<Index> TokenBatch::flat_tokens() const
{
    std::vector<Index> out;
    for (const auto& s : sequences)
        for (const int t : s) out.push_back(t);
    return out;
}

std::vector<Index> TokenBatch::flat_positions() const
{
    std::vector<Index> out;
    for (const auto& s : sequences)
        for (std::size_t i = 0; i < s.size(); ++i) out.push_back(static_cast<Index>(i));
    return out;
}

TokenBatch clean_batch(std::span<const PatchedPair> pairs)
{
    TokenBatch b;
    for (const auto& p : pairs) b.sequences.push_back(p.clean);
    return b;
}

TokenBatch corrupted_batch(std::span<const PatchedPair> pairs)
{
    TokenBatch b;
    for (const auto& p : pairs) b.sequences.push_back(p.corrupted);
    return b;
}

AnswerSlots answer_slots(std::span<const PatchedPair> pairs)
{
    AnswerSlots s;
    Index at = 0;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const auto& p = pairs[i];
        s.rows.push_back(at + p.answer_pos);
        s.correct.push_back(p.correct_token);
        s.incorrect.push_back(p.incorrect_token);
        for (std::size_t k = 0; k < p.clean.size(); ++k) s.row_example.push_back(static_cast<Index>(i));
        at += static_cast<Index>(p.clean.size());
    }
    return s;
}

bool PatchPlan::empty() const
{
    for (const char c : patched)
        if (c) return false;
    return true;
}

// ---------------------------------------------------------------------------
// Weights

Weights initial_weights(const ModelConfig& config, const ComputationalGraph& graph)
{
    const Index d = config.d_model;
    const Index dh = config.head_dim();
    const auto gaussian = [&](Index rows, Index cols, double stddev, std::size_t node, std::size_t slot) {
        std::mt19937_64 rng(mix_seed(mix_seed(config.init_seed, node), slot));
        std::normal_distribution<double> dist(0.0, stddev);
        Matrix m(rows, cols);
        for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
        return m;
    };
    Weights w(graph.node_count());
    for (std::size_t i = 0; i < graph.node_count(); ++i) {
        const auto& id = graph.nodes()[i];
        switch (id.kind) {
        case ComponentKind::Embed:
            w[i].push_back(gaussian(config.vocab_size, d, 1.0, i, 0));
            w[i].push_back(gaussian(config.max_seq_len, d, 1.0, i, 1));
            break;
        case ComponentKind::Wq:
        case ComponentKind::Wk:
        case ComponentKind::Wv: w[i].push_back(gaussian(d, dh, 1.0 / std::sqrt(double(d)), i, 0)); break;
        case ComponentKind::Wo: w[i].push_back(gaussian(dh, d, 1.0 / std::sqrt(double(dh)), i, 0)); break;
        case ComponentKind::Wup: w[i].push_back(gaussian(d, config.d_ff, 1.0 / std::sqrt(double(d)), i, 0)); break;
        case ComponentKind::Wdown: w[i].push_back(gaussian(config.d_ff, d, 1.0 / std::sqrt(double(config.d_ff)), i, 0)); break;
        case ComponentKind::Unembed: w[i].push_back(gaussian(d, config.vocab_size, 1.0 / std::sqrt(double(d)), i, 0)); break;
        }
    }
    return w;
}

TinyFormer::TinyFormer(const ModelConfig& config) : config_(config), graph_(build_graph(config))
{
    weights_ = initial_weights(config_, graph_);
}

TinyFormer::TinyFormer(const ModelConfig& config, Weights weights)
    : config_(config), graph_(build_graph(config)), weights_(std::move(weights))
{
    const Weights reference = initial_weights(config_, graph_);
    if (weights_.size() != reference.size()) throw ShapeError("weights: component count mismatch");
    for (std::size_t i = 0; i < reference.size(); ++i) {
        if (weights_[i].size() != reference[i].size()) throw ShapeError("weights: matrix count mismatch");
        for (std::size_t m = 0; m < reference[i].size(); ++m)
            if (weights_[i][m].rows() != reference[i][m].rows() || weights_[i][m].cols() != reference[i][m].cols())
                throw ShapeError("weights: shape mismatch for " + to_string(graph_.nodes()[i]));
    }
}

std::string TinyFormer::weights_digest() const
{
    Digest d;
    for (const auto& comp : weights_)
        for (const auto& m : comp) {
            d.u64(static_cast<std::uint64_t>(m.rows())).u64(static_cast<std::uint64_t>(m.cols()));
            d.f64s({m.data(), static_cast<std::size_t>(m.size())});
        }
    return d.hex();
}

void TinyFormer::check_batch(const TokenBatch& batch) const
{
    if (batch.sequences.empty()) throw std::invalid_argument("forward: empty batch");
    for (const auto& s : batch.sequences) {
        if (s.empty() || static_cast<int>(s.size()) > config_.max_seq_len)
            throw std::invalid_argument("forward: sequence length outside [1, max_seq_len]");
        for (const int t : s)
            if (t < 0 || t >= config_.vocab_size) throw std::invalid_argument("forward: token id out of range");
    }
}

// ---------------------------------------------------------------------------
// Forward

Trace TinyFormer::trace(Tape& tape, const TokenBatch& batch, const TraceOptions& opt) const
{
    check_batch(batch);
    const auto& g = graph_;
    const std::size_t n = g.node_count();
    const PatchPlan* plan = opt.plan;
    const EdgeMix* mix = opt.mix;
    if (plan != nullptr && plan->patched.size() != g.edge_count()) throw std::invalid_argument("patch plan edge count mismatch");

    Trace tr;
    tr.outputs.resize(n);
    tr.inputs.resize(n);
    tr.params.resize(n);
    // Reader nodes exist to be differentiated against, so every activation
    // must be on a gradient path: the embedding tables become variables.
    for (std::size_t i = 0; i < n; ++i) {
        const bool grad = opt.params_require_grad || (opt.reader_nodes && g.nodes()[i].kind == ComponentKind::Embed);
        for (const auto& w : weights_[i]) tr.params[i].push_back(grad ? tape.variable(w) : tape.constant(w));
    }

    const std::vector<Index> segs = batch.segments();
    const Index rows = batch.rows();
    const ActivationCache* donor = plan != nullptr ? plan->donor : (mix != nullptr ? mix->donor : nullptr);
    const bool needs_donor = (plan != nullptr && !plan->empty()) || mix != nullptr;
    if (needs_donor) {
        if (donor == nullptr) throw std::invalid_argument("patching requires a donor cache");
        if (donor->segments != segs || donor->outputs.size() != n) throw ShapeError("donor shape mismatch");
    }

    const auto touched = [&](int e) {
        if (plan != nullptr && plan->is_patched(e)) return true;
        return mix != nullptr && static_cast<std::size_t>(e) < mix->masks.size() && mix->masks[static_cast<std::size_t>(e)].valid();
    };
    const auto donor_value = [&](int sender, const Tensor& live) -> const Matrix& {
        const Matrix& d = donor->outputs[static_cast<std::size_t>(sender)];
        if (d.rows() != live.shape().rows || d.cols() != live.shape().cols) throw ShapeError("donor shape mismatch");
        return d;
    };
    const auto edge_value = [&](int e, const Tensor& live) -> Tensor {
        const int sender = g.edges()[static_cast<std::size_t>(e)].sender;
        if (plan != nullptr && plan->is_patched(e)) return tape.constant(donor_value(sender, live));
        if (touched(e)) {
            const Matrix& d = donor_value(sender, live);
            const Tensor diff = add(live, tape.constant(-d));
            return add(tape.constant(d), multiply(mix->masks[static_cast<std::size_t>(e)], diff));
        }
        return live;
    };
    const auto reader_input = [&](int r, const Tensor& shared) -> Tensor {
        bool any = false;
        for (const int e : g.in_edges(r)) any = any || touched(e);
        if (!any) return opt.reader_nodes ? scale(shared, 1.0) : shared;
        Tensor acc;
        for (const int e : g.in_edges(r)) {
            const int s = g.edges()[static_cast<std::size_t>(e)].sender;
            const Tensor v = edge_value(e, tr.outputs[static_cast<std::size_t>(s)]);
            acc = acc.valid() ? add(acc, v) : v;
        }
        return acc;
    };
    std::unordered_map<int, Tensor> normed_cache;
    const auto normed = [&](const Tensor& x) -> Tensor {
        if (!config_.normalize) return x;
        if (const auto it = normed_cache.find(x.id()); it != normed_cache.end()) return it->second;
        Tensor y = layer_norm(x);
        normed_cache.emplace(x.id(), y);
        return y;
    };
    const auto structural_edge = [&](int s, int r) {
        const int e = g.find_edge(s, r);
        if (e < 0) throw std::logic_error("missing structural edge");
        return e;
    };

    const int embed = g.index_of(ComponentId::embed());
    {
        const auto tokens = batch.flat_tokens();
        const auto positions = batch.flat_positions();
        const Tensor tok = embed_lookup(tr.params[static_cast<std::size_t>(embed)][0], tokens);
        const Tensor pos = embed_lookup(tr.params[static_cast<std::size_t>(embed)][1], positions);
        tr.outputs[static_cast<std::size_t>(embed)] = add(tok, pos);
    }

    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(config_.head_dim()));
    Tensor resid = tr.outputs[static_cast<std::size_t>(embed)];
    const auto at = [](auto& v, int i) -> auto& { return v[static_cast<std::size_t>(i)]; };

    for (int l = 0; l < config_.n_layers; ++l) {
        Tensor resid_mlp = resid;
        for (int h = 0; h < config_.n_heads; ++h) {
            const int iq = g.index_of(ComponentId::attn(ComponentKind::Wq, l, h));
            const int ik = g.index_of(ComponentId::attn(ComponentKind::Wk, l, h));
            const int iv = g.index_of(ComponentId::attn(ComponentKind::Wv, l, h));
            const int io = g.index_of(ComponentId::attn(ComponentKind::Wo, l, h));
            for (const int reader : {iq, ik, iv}) {
                at(tr.inputs, reader) = reader_input(reader, resid);
                at(tr.outputs, reader) = matmul(normed(at(tr.inputs, reader)), at(tr.params, reader)[0]);
            }
            const Tensor q = edge_value(structural_edge(iq, io), at(tr.outputs, iq));
            const Tensor k = edge_value(structural_edge(ik, io), at(tr.outputs, ik));
            const Tensor v = edge_value(structural_edge(iv, io), at(tr.outputs, iv));
            at(tr.outputs, io) = matmul(causal_attention(q, k, v, segs, inv_sqrt_dh), at(tr.params, io)[0]);
            resid_mlp = add(resid_mlp, at(tr.outputs, io));
        }
        const int iu = g.index_of(ComponentId::mlp(ComponentKind::Wup, l));
        const int id = g.index_of(ComponentId::mlp(ComponentKind::Wdown, l));
        at(tr.inputs, iu) = reader_input(iu, resid_mlp);
        at(tr.outputs, iu) = matmul(normed(at(tr.inputs, iu)), at(tr.params, iu)[0]);
        const Tensor u = edge_value(structural_edge(iu, id), at(tr.outputs, iu));
        const Tensor act = config_.activation == Activation::Gelu ? gelu(u) : u;
        at(tr.outputs, id) = matmul(act, at(tr.params, id)[0]);
        resid = add(resid_mlp, at(tr.outputs, id));
    }

    const int iU = g.index_of(ComponentId::unembed());
    at(tr.inputs, iU) = reader_input(iU, resid);
    tr.logits = matmul(normed(at(tr.inputs, iU)), at(tr.params, iU)[0]);
    (void)rows;
    return tr;
}

ForwardResult TinyFormer::forward(const TokenBatch& batch, const PatchPlan* plan) const
{
    Tape tape;
    TraceOptions opt;
    opt.plan = plan;
    const Trace tr = trace(tape, batch, opt);
    ForwardResult out;
    out.logits = tr.logits.value();
    out.cache.segments = batch.segments();
    out.cache.outputs.resize(tr.outputs.size());
    out.cache.inputs.resize(tr.inputs.size());
    for (std::size_t i = 0; i < tr.outputs.size(); ++i) {
        if (tr.outputs[i].valid()) out.cache.outputs[i] = tr.outputs[i].value();
        if (tr.inputs[i].valid()) out.cache.inputs[i] = tr.inputs[i].value();
    }
    return out;
}

std::vector<int> TinyFormer::predict(std::span<const PatchedPair> pairs) const
{
    const ForwardResult r = forward(clean_batch(pairs));
    const AnswerSlots slots = answer_slots(pairs);
    std::vector<int> out;
    for (const Index row : slots.rows) {
        Index arg = 0;
        r.logits.row(row).maxCoeff(&arg);
        out.push_back(static_cast<int>(arg));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Output metrics

std::string to_string(MetricKind k)
{
    switch (k) {
    case MetricKind::AnswerLogit: return "answer_logit";
    case MetricKind::LogitDiff: return "logit_diff";
    default: return "kl_to_reference";
    }
}

MetricKind parse_metric_kind(const std::string& s)
{
    if (s == "answer_logit") return MetricKind::AnswerLogit;
    if (s == "logit_diff") return MetricKind::LogitDiff;
    if (s == "kl_to_reference") return MetricKind::KlToReference;
    throw std::invalid_argument("unknown metric kind '" + s + "'");
}

std::vector<double> output_metric_per_example(const Matrix& logits, const AnswerSlots& slots, MetricKind kind,
                                              const Matrix* reference)
{
    if ((kind == MetricKind::KlToReference) != (reference != nullptr))
        throw std::invalid_argument("output_metric: reference logits required exactly for kl_to_reference");
    if (reference != nullptr && (reference->rows() != logits.rows() || reference->cols() != logits.cols()))
        throw ShapeError("output_metric: reference shape mismatch");
    std::vector<double> out;
    out.reserve(slots.rows.size());
    for (std::size_t i = 0; i < slots.rows.size(); ++i) {
        const Index row = slots.rows[i];
        if (row < 0 || row >= logits.rows()) throw std::out_of_range("output_metric: answer row out of range");
        switch (kind) {
        case MetricKind::AnswerLogit: out.push_back(logits(row, slots.correct[i])); break;
        case MetricKind::LogitDiff:
            if (slots.incorrect[i] < 0 || slots.incorrect[i] >= logits.cols())
                throw std::invalid_argument("output_metric: logit_diff needs an incorrect token");
            out.push_back(logits(row, slots.correct[i]) - logits(row, slots.incorrect[i]));
            break;
        case MetricKind::KlToReference: out.push_back(kl_row(reference->row(row), logits.row(row))); break;
        }
    }
    return out;
}

double output_metric(const Matrix& logits, const AnswerSlots& slots, MetricKind kind, const Matrix* reference)
{
    const auto v = output_metric_per_example(logits, slots, kind, reference);
    if (v.empty()) throw std::invalid_argument("output_metric: no examples");
    double s = 0.0;
    for (const double x : v) s += x;
    return s / static_cast<double>(v.size());
}

Tensor output_metric_sum(const Tensor& logits, const AnswerSlots& slots, MetricKind kind)
{
    if (kind == MetricKind::KlToReference) throw std::invalid_argument("output_metric_sum: use kl_divergence_from_logits");
    const Shape sh = logits.shape();
    Matrix selector = Matrix::Zero(sh.rows, sh.cols);
    for (std::size_t i = 0; i < slots.rows.size(); ++i) {
        selector(slots.rows[i], slots.correct[i]) += 1.0;
        if (kind == MetricKind::LogitDiff) {
            if (slots.incorrect[i] < 0) throw std::invalid_argument("output_metric: logit_diff needs an incorrect token");
            selector(slots.rows[i], slots.incorrect[i]) -= 1.0;
        }
    }
    return sum_all(multiply(logits, logits.tape()->constant(std::move(selector))));
}

}  // namespace clab
