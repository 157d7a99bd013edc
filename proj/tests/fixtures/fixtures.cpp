#include "fixtures.hpp"

#include <algorithm>
#include <cmath>

namespace fixtures {

Dataset tiny_pairs()
{
    Dataset d;
    const auto add = [&](std::vector<int> clean, std::vector<int> corrupted, int pos, int correct, int incorrect) {
        PatchedPair p{std::move(clean), std::move(corrupted), pos, correct, incorrect, "induction"};
        p.validate();
        d.push_back(std::move(p));
    };
    add({1, 7, 3, 9, 7, 3}, {1, 7, 5, 9, 7, 5}, 4, 3, 5);
    add({1, 4, 8, 6, 4, 8}, {1, 4, 2, 6, 4, 2}, 4, 8, 2);
    add({1, 10, 5, 11, 10}, {1, 10, 6, 11, 10}, 4, 5, 6);
    return d;
}

ModelConfig tiny_config(std::uint64_t seed)
{
    ModelConfig c;
    c.n_layers = 1;
    c.n_heads = 2;
    c.d_model = 8;
    c.d_ff = 12;
    c.vocab_size = 12;
    c.max_seq_len = 8;
    c.init_seed = seed;
    return c;
}

double model_loss(const TinyFormer& model, std::span<const PatchedPair> pairs)
{
    const Matrix logits = model.forward(clean_batch(pairs)).logits;
    const AnswerSlots slots = answer_slots(pairs);
    double loss = 0.0;
    for (std::size_t i = 0; i < slots.rows.size(); ++i) {
        const auto row = logits.row(slots.rows[i]);
        const double m = row.maxCoeff();
        const double lse = m + std::log((row.array() - m).exp().sum());
        loss += lse - row(slots.correct[i]);
    }
    return loss / static_cast<double>(slots.rows.size());
}

double model_grad_check(const TinyFormer& model, std::span<const PatchedPair> pairs, double step, double floor)
{
    Weights analytic;
    {
        Tape tape;
        TraceOptions opt;
        opt.params_require_grad = true;
        const Trace tr = model.trace(tape, clean_batch(pairs), opt);
        const AnswerSlots slots = answer_slots(pairs);
        const Tensor loss = cross_entropy_from_logits(tr.logits, slots.rows, slots.correct);
        const Gradients g = backward(tape, loss);
        for (const auto& comp : tr.params) {
            analytic.emplace_back();
            for (const Tensor& p : comp) analytic.back().push_back(g.grad(p));
        }
    }
    TinyFormer probe = model;
    double worst = 0.0;
    for (std::size_t c = 0; c < analytic.size(); ++c)
        for (std::size_t m = 0; m < analytic[c].size(); ++m)
            for (Index k = 0; k < analytic[c][m].size(); ++k) {
                double& w = probe.mutable_weights()[c][m].data()[k];
                const double orig = w;
                w = orig + step;
                const double up = model_loss(probe, pairs);
                w = orig - step;
                const double down = model_loss(probe, pairs);
                w = orig;
                const double numeric = (up - down) / (2.0 * step);
                const double a = analytic[c][m].data()[k];
                worst = std::max(worst, std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor}));
            }
    return worst;
}

}  // namespace fixtures
