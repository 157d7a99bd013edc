#include "circuitlab/posttrain/sft.hpp"

#include "circuitlab/common/digest.hpp"
#include "circuitlab/satcore/conflict.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <stdexcept>

namespace clab {

std::string to_string(TrainMode m) { return m == TrainMode::Unlearn ? "unlearn" : "sft"; }

TrainMode parse_train_mode(const std::string& s)
{
    if (s == "sft") return TrainMode::Sft;
    if (s == "unlearn") return TrainMode::Unlearn;
    throw std::invalid_argument("unknown train mode '" + s + "'");
}

std::string to_string(StrategyKind k)
{
    switch (k) {
    case StrategyKind::Free: return "Free";
    case StrategyKind::Mech: return "Mech";
    case StrategyKind::Random: return "Random";
    default: return "FutureMech";
    }
}

StrategyKind parse_strategy_kind(const std::string& s)
{
    if (s == "Free") return StrategyKind::Free;
    if (s == "Mech") return StrategyKind::Mech;
    if (s == "Random") return StrategyKind::Random;
    if (s == "FutureMech") return StrategyKind::FutureMech;
    if (s == "free") return StrategyKind::Free;
    if (s == "mech") return StrategyKind::Mech;
    if (s == "random") return StrategyKind::Random;
    if (s == "future_mech") return StrategyKind::FutureMech;
    throw std::invalid_argument("unknown strategy '" + s + "'");
}

void SftConfig::validate() const
{
    adamw().validate();
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw std::invalid_argument("sft config: lambda must be >= 0");
    if (observations_per_epoch == 0) throw std::invalid_argument("sft config: observations_per_epoch must be >= 1");
    if (batch_size == 0) throw std::invalid_argument("sft config: batch_size must be >= 1");
}

AdamWConfig SftConfig::adamw() const { return {learning_rate, beta1, beta2, epsilon, weight_decay}; }

FreezeMask make_freeze_mask(const ComputationalGraph& graph, const LocalizationStrategy& s, const EdgeScores* scores,
                            std::uint64_t seed)
{
    FreezeMask mask;
    mask.frozen.assign(graph.node_count(), 0);
    if (s.kind == StrategyKind::Free) return mask;

    const std::size_t eligible = eligible_count(graph);
    if (s.budget == 0 || s.budget > eligible)
        throw std::invalid_argument("freeze mask: budget " + std::to_string(s.budget) + " infeasible with " + std::to_string(eligible) +
                                    " eligible components");
    std::vector<char> keep(graph.node_count(), 0);
    if (s.kind == StrategyKind::Random) {
        if (s.attn_count + s.mlp_count != s.budget) throw std::invalid_argument("freeze mask: Random class counts must sum to the budget");
        std::vector<int> attn, mlp;
        for (std::size_t v = 0; v < graph.node_count(); ++v) {
            const auto c = component_class(graph.node(static_cast<int>(v)));
            if (c == ComponentClass::Attn) attn.push_back(static_cast<int>(v));
            if (c == ComponentClass::MLP) mlp.push_back(static_cast<int>(v));
        }
        if (s.attn_count > attn.size() || s.mlp_count > mlp.size()) throw std::invalid_argument("freeze mask: class counts infeasible");
        std::mt19937_64 rng(seed);
        std::shuffle(attn.begin(), attn.end(), rng);
        std::shuffle(mlp.begin(), mlp.end(), rng);
        for (std::size_t i = 0; i < s.attn_count; ++i) keep[static_cast<std::size_t>(attn[i])] = 1;
        for (std::size_t i = 0; i < s.mlp_count; ++i) keep[static_cast<std::size_t>(mlp[i])] = 1;
    } else {
        if (!scores) throw std::invalid_argument("freeze mask: " + s.name() + " needs edge scores");
        mask.source_digest = scores_digest(*scores);
        if (s.kind == StrategyKind::FutureMech && !s.source_digest.empty() && s.source_digest != mask.source_digest)
            throw std::invalid_argument("freeze mask: FutureMech scores do not match the recorded free-run digest");
        for (const int v : localize_components(graph, *scores, s.budget).nodes) keep[static_cast<std::size_t>(v)] = 1;
    }
    for (std::size_t v = 0; v < graph.node_count(); ++v)
        if (component_class(graph.node(static_cast<int>(v))) != ComponentClass::Other && !keep[v]) mask.frozen[v] = 1;
    return mask;
}

std::pair<std::size_t, std::size_t> trainable_counts(const ComputationalGraph& graph, const FreezeMask& mask)
{
    std::size_t a = 0, m = 0;
    for (std::size_t v = 0; v < graph.node_count(); ++v) {
        if (mask.is_frozen(v)) continue;
        const auto c = component_class(graph.node(static_cast<int>(v)));
        a += c == ComponentClass::Attn;
        m += c == ComponentClass::MLP;
    }
    return {a, m};
}

double evaluate(std::span<const int> predictions, std::span<const PatchedPair> data)
{
    if (data.empty()) throw std::invalid_argument("evaluate: empty dataset");
    if (predictions.size() != data.size()) throw std::invalid_argument("evaluate: prediction count mismatch");
    std::size_t hit = 0;
    for (std::size_t i = 0; i < data.size(); ++i) hit += predictions[i] == data[i].correct_token;
    return static_cast<double>(hit) / static_cast<double>(data.size());
}

EvalResult evaluate_full(const TinyFormer& model, std::span<const PatchedPair> data)
{
    if (data.empty()) throw std::invalid_argument("evaluate: empty dataset");
    const Matrix logits = model.forward(clean_batch(data)).logits;
    const AnswerSlots slots = answer_slots(data);
    EvalResult out;
    std::size_t hit = 0;
    for (std::size_t i = 0; i < slots.rows.size(); ++i) {
        const auto row = logits.row(slots.rows[i]);
        Index arg = 0;
        const double m = row.maxCoeff(&arg);
        hit += arg == slots.correct[i];
        out.loss += m + std::log((row.array() - m).exp().sum()) - row(slots.correct[i]);
    }
    out.accuracy = static_cast<double>(hit) / static_cast<double>(data.size());
    out.loss /= static_cast<double>(data.size());
    return out;
}

double evaluate(const TinyFormer& model, std::span<const PatchedPair> data)
{
    if (data.empty()) throw std::invalid_argument("evaluate: empty dataset");
    return evaluate(model.predict(data), data);
}

BatchGradient cross_entropy_gradient(const TinyFormer& model, std::span<const PatchedPair> batch)
{
    Tape tape;
    TraceOptions opt;
    opt.params_require_grad = true;
    const Trace tr = model.trace(tape, clean_batch(batch), opt);
    const AnswerSlots slots = answer_slots(batch);
    const Tensor loss = cross_entropy_from_logits(tr.logits, slots.rows, slots.correct);
    const Gradients g = backward(tape, loss);
    BatchGradient out;
    out.loss = loss.value()(0, 0);
    for (const auto& comp : tr.params) {
        out.grads.emplace_back();
        for (const Tensor& p : comp) out.grads.back().push_back(g.grad(p));
    }
    return out;
}

double cross_entropy(const TinyFormer& model, std::span<const PatchedPair> data)
{
    if (data.empty()) return 0.0;
    const Matrix logits = model.forward(clean_batch(data)).logits;
    const AnswerSlots slots = answer_slots(data);
    double loss = 0.0;
    for (std::size_t i = 0; i < slots.rows.size(); ++i) {
        const auto row = logits.row(slots.rows[i]);
        const double m = row.maxCoeff();
        loss += m + std::log((row.array() - m).exp().sum()) - row(slots.correct[i]);
    }
    return loss / static_cast<double>(slots.rows.size());
}

namespace {

void axpy(Weights& acc, double a, const Weights& x)
{
    for (std::size_t i = 0; i < acc.size(); ++i)
        for (std::size_t k = 0; k < acc[i].size(); ++k) acc[i][k] += a * x[i][k];
}

void scale_weights(Weights& w, double a)
{
    for (auto& comp : w)
        for (auto& m : comp) m *= a;
}

/// Endless reshuffled pass over a dataset.
class Sampler {
public:
    Sampler(std::span<const PatchedPair> data, std::uint64_t seed) : data_(data), rng_(seed), order_(data.size())
    {
        std::iota(order_.begin(), order_.end(), 0);
        at_ = order_.size();
    }

    Dataset take(std::size_t n)
    {
        Dataset out;
        while (out.size() < n) {
            if (at_ == order_.size()) {
                std::shuffle(order_.begin(), order_.end(), rng_);
                at_ = 0;
            }
            out.push_back(data_[order_[at_++]]);
        }
        return out;
    }

private:
    std::span<const PatchedPair> data_;
    std::mt19937_64 rng_;
    std::vector<std::size_t> order_;
    std::size_t at_;
};

std::vector<std::pair<std::string, Dataset>> by_task(std::span<const PatchedPair> data)
{
    std::map<std::string, Dataset> groups;
    for (const auto& p : data) groups[p.task].push_back(p);
    return {groups.begin(), groups.end()};
}

LogicalCircuit task_circuit(const ComputationalGraph& g, const EapSides& sides, const ObservationConfig& o)
{
    DiscoveryConfig cut = o.discovery;
    cut.tau.reset();
    cut.sparsity_target = o.conflict_sparsity;
    return classify_gates(g, threshold_circuit(g, sides.ns.scores, cut), threshold_circuit(g, sides.dn.scores, cut));
}

class Observer {
public:
    Observer(const SftData& data, const SftConfig& cfg, const ObservationConfig& o) : data_(data), cfg_(cfg), o_(o) {}

    MetricRecord observe(const TinyFormer& model, Trajectory& traj)
    {
        const ComputationalGraph& g = model.graph();
        MetricRecord r;
        const EvalResult te = evaluate_full(model, data_.target_eval);
        const EvalResult pe = data_.perv_eval.empty() ? EvalResult{} : evaluate_full(model, data_.perv_eval);
        r.t_acc = te.accuracy;
        r.p_acc = pe.accuracy;
        const double sign = cfg_.mode == TrainMode::Unlearn ? -1.0 : 1.0;
        r.loss = sign * te.loss + cfg_.lambda * pe.loss;

        const DiscoveryConfig& dc = o_.discovery;
        std::optional<EapSides> sides;
        EapResult single;
        if (o_.conflict || dc.regime == Regime::NsDn) sides = eap_sides(model, data_.target_eval, dc);
        else single = eap(model, data_.target_eval, dc);
        const EapResult& tracked = !sides ? single : dc.regime == Regime::Ns ? sides->ns : dc.regime == Regime::Dn ? sides->dn : sides->nsdn;
        const EdgeScores& s = tracked.scores;
        const EdgeScores& first = traj.scores.empty() ? s : traj.scores.front();
        const EdgeScores& prev = traj.scores.empty() ? s : traj.scores.back();
        r.cd_attn = circuit_distance(g, s, first, ClassFilter::Attn);
        r.cd_mlp = circuit_distance(g, s, first, ClassFilter::MLP);
        r.cd_attn_step = circuit_distance(g, s, prev, ClassFilter::Attn);
        r.cd_mlp_step = circuit_distance(g, s, prev, ClassFilter::MLP);

        StabilityConfig sc;
        sc.k_pairs = o_.k_pairs;
        sc.subset_fraction = o_.subset_fraction;
        sc.discovery = dc;
        sc.seed = mix_seed(cfg_.seed, 0x5c);
        const StabilityResult st = circuit_stability(g, tracked.per_example, sc);
        r.cs_attn = st.attn;
        r.cs_mlp = st.mlp;

        if (o_.conflict) {
            const LogicalCircuit target = task_circuit(g, *sides, o_);
            std::vector<LogicalCircuit> perv;
            for (const auto& [task, subset] : by_task(data_.perv_eval)) perv.push_back(task_circuit(g, eap_sides(model, subset, dc), o_));
            r.cc = circuit_conflict(g, target, perv);
        }
        r.scores_digest = scores_digest(s);
        traj.scores.push_back(s);
        return r;
    }

private:
    const SftData& data_;
    const SftConfig& cfg_;
    const ObservationConfig& o_;
};

void fill_global_distance(const ComputationalGraph& g, Trajectory& traj)
{
    if (traj.scores.empty()) return;
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const auto& s : traj.scores)
        for (const double v : s.values) {
            lo = std::min(lo, std::abs(v));
            hi = std::max(hi, std::abs(v));
        }
    const double range = hi - lo > 0.0 ? hi - lo : 1.0;
    for (std::size_t i = 0; i < traj.records.size(); ++i) {
        traj.records[i].cd_attn_global = circuit_distance(g, traj.scores[i], traj.scores[0], ClassFilter::Attn, range);
        traj.records[i].cd_mlp_global = circuit_distance(g, traj.scores[i], traj.scores[0], ClassFilter::MLP, range);
    }
}

}  // namespace

PretrainResult pretrain(TinyFormer& model, std::span<const PatchedPair> data, const PretrainConfig& config)
{
    if (data.empty()) throw std::invalid_argument("pretrain: empty dataset");
    if (config.batch_size == 0) throw std::invalid_argument("pretrain: batch_size must be >= 1");
    config.adamw.validate();
    PretrainResult res;
    res.initial_loss = cross_entropy(model, data);
    AdamWState state = AdamWState::zeros_like(model.weights());
    Sampler sampler(data, mix_seed(config.seed, 0x9e));
    for (std::size_t step = 0; step < config.steps; ++step) {
        const Dataset batch = sampler.take(config.batch_size);
        const BatchGradient bg = cross_entropy_gradient(model, batch);
        if (!std::isfinite(bg.loss)) throw std::runtime_error("pretrain: loss diverged at step " + std::to_string(step));
        if (!adamw_step(model.mutable_weights(), bg.grads, state, config.adamw)) ++res.skipped_steps;
    }
    res.final_loss = cross_entropy(model, data);
    if (!std::isfinite(res.final_loss)) throw std::runtime_error("pretrain: final loss is not finite");
    for (const auto& [task, subset] : by_task(data)) res.task_accuracy.emplace_back(task, evaluate(model, subset));
    return res;
}

BatchGradient sft_gradient(const TinyFormer& model, std::span<const PatchedPair> target, std::span<const PatchedPair> perv,
                           const SftConfig& config)
{
    BatchGradient total = cross_entropy_gradient(model, target);
    const double sign = config.mode == TrainMode::Unlearn ? -1.0 : 1.0;
    total.loss *= sign;
    scale_weights(total.grads, sign);
    if (config.lambda > 0.0 && !perv.empty()) {
        const BatchGradient p = cross_entropy_gradient(model, perv);
        total.loss += config.lambda * p.loss;
        axpy(total.grads, config.lambda, p.grads);
    }
    return total;
}

std::size_t steps_per_epoch(const SftData& data, const SftConfig& config)
{
    return (data.target_train.size() + config.batch_size - 1) / config.batch_size;
}

Trajectory sft_run(TinyFormer& model, const SftData& data, const SftConfig& cfg, const FreezeMask& mask,
                   const ObservationConfig& observe, const SftHooks& hooks)
{
    cfg.validate();
    if (data.target_train.empty() || data.target_eval.empty()) throw std::invalid_argument("sft_run: empty target data");
    if (cfg.lambda > 0.0 && data.perv_train.empty()) throw std::invalid_argument("sft_run: lambda > 0 needs pervasiveness data");
    const ComputationalGraph& g = model.graph();
    if (!mask.frozen.empty() && mask.frozen.size() != g.node_count()) throw std::invalid_argument("sft_run: mask does not match graph");
    for (std::size_t v = 0; v < mask.frozen.size(); ++v)
        if (mask.frozen[v] && component_class(g.node(static_cast<int>(v))) == ComponentClass::Other)
            throw std::invalid_argument("sft_run: Embed / Unembed cannot be frozen");

    Trajectory traj;
    Observer obs(data, cfg, observe);
    traj.records.push_back(obs.observe(model, traj));

    const std::size_t S = steps_per_epoch(data, cfg);
    const std::size_t O = cfg.observations_per_epoch;
    const AdamWConfig opt = cfg.adamw();
    AdamWState state = AdamWState::zeros_like(model.weights());
    std::mt19937_64 rng(mix_seed(cfg.seed, 0x7a));
    Sampler perv(data.perv_train, mix_seed(cfg.seed, 0x7b));
    std::vector<std::size_t> order(data.target_train.size());
    int optimizer_step = 0;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);
        std::size_t next_obs = 0;
        for (std::size_t s = 0; s < S; ++s) {
            Dataset batch;
            for (std::size_t k = s * cfg.batch_size; k < std::min(order.size(), (s + 1) * cfg.batch_size); ++k)
                batch.push_back(data.target_train[order[k]]);
            const BatchGradient total =
                cfg.lambda > 0.0 ? sft_gradient(model, batch, perv.take(cfg.batch_size), cfg) : sft_gradient(model, batch, {}, cfg);
            if (!std::isfinite(total.loss)) {
                traj.diverged = true;
                traj.error = "loss diverged at optimizer step " + std::to_string(optimizer_step);
                fill_global_distance(g, traj);
                return traj;
            }
            if (!adamw_step(model.mutable_weights(), total.grads, state, opt, &mask)) ++traj.skipped_steps;
            ++optimizer_step;
            // Observation j of this epoch sits after step max(1, floor((j+1) S / O)).
            while (next_obs < O && std::max<std::size_t>(1, (next_obs + 1) * S / O) == s + 1) {
                MetricRecord r = obs.observe(model, traj);
                r.epoch = static_cast<int>(epoch + 1);
                r.step = static_cast<int>(epoch * O + next_obs + 1);
                r.optimizer_step = optimizer_step;
                traj.records.push_back(std::move(r));
                ++next_obs;
            }
        }
        traj.epoch_digests.push_back(model.weights_digest());
        if (hooks.on_epoch_end) hooks.on_epoch_end(epoch + 1, model);
    }
    fill_global_distance(g, traj);
    return traj;
}

}  // namespace clab
