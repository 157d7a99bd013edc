#include "circuitlab/labcli/runner.hpp"

#include "circuitlab/labcli/files.hpp"
#include "circuitlab/taskgen/tasks.hpp"
#include "circuitlab/tinyformer/snapshot.hpp"

#include <json.hpp>

#include <chrono>
#include <ctime>
#include <future>
#include <iomanip>
#include <sstream>

namespace clab {

using ojson = nlohmann::ordered_json;
namespace fs = std::filesystem;

RunSeeds derive_seeds(std::uint64_t master)
{
    RunSeeds s;
    s.master = master;
    s.model = mix_seed(master, 1);
    s.pretrain_data = mix_seed(master, 2);
    s.target_train = mix_seed(master, 3);
    s.target_eval = mix_seed(master, 4);
    s.perv_train = mix_seed(master, 5);
    s.perv_eval = mix_seed(master, 6);
    s.pretrain = mix_seed(master, 7);
    s.sft = mix_seed(master, 8);
    s.random_mask = mix_seed(master, 9);
    s.localization = mix_seed(master, 10);
    return s;
}

RunTasks resolve_tasks(const ExperimentConfig& c)
{
    RunTasks t;
    t.target = default_spec(c.target);

    std::vector<TaskSpec> perv;
    std::vector<double> weights;
    for (const auto& name : c.pervasiveness) perv.push_back(default_spec(name));
    const double each = perv.empty() ? 0.0 : (1.0 - c.conflict_proportion) / static_cast<double>(perv.size());
    weights.assign(perv.size(), each);
    if (c.conflict_proportion > 0.0) {
        perv.push_back(default_spec(c.conflict_task));
        weights.push_back(perv.size() == 1 ? 1.0 : c.conflict_proportion);
    }
    if (!perv.empty()) t.perv = make_mixture(perv, weights);

    // The base model sees every pervasiveness task, plus the target when it
    // is meant to be mastered before fine-tuning.
    std::vector<TaskSpec> pre = perv;
    if (c.mastery != Mastery::None) pre.push_back(t.target);
    if (!pre.empty() && c.pretrain_enabled) t.pretrain = make_mixture(pre);

    std::vector<TaskSpec> all = perv;
    all.push_back(t.target);
    check_disjoint(all);
    const TaskSpec everything = make_mixture(all);
    t.vocab = required_vocab(everything);
    t.seq_len = required_seq_len(everything);
    return t;
}

ModelConfig resolve_model(const ExperimentConfig& c, const RunTasks& tasks, const RunSeeds& seeds)
{
    ModelConfig m = c.model;
    if (m.vocab_size == 0) m.vocab_size = tasks.vocab;
    if (m.max_seq_len == 0) m.max_seq_len = tasks.seq_len;
    if (m.vocab_size < tasks.vocab) throw ConfigError("model.vocab_size: tasks need " + std::to_string(tasks.vocab));
    if (m.max_seq_len < tasks.seq_len) throw ConfigError("model.max_seq_len: tasks need " + std::to_string(tasks.seq_len));
    m.init_seed = seeds.model;
    m.validate();
    return m;
}

std::string strategy_dir(StrategyKind k)
{
    switch (k) {
    case StrategyKind::Free: return "free";
    case StrategyKind::Mech: return "mech";
    case StrategyKind::Random: return "random";
    case StrategyKind::FutureMech: return "future_mech";
    }
    return "?";
}

bool RunResult::diverged() const
{
    for (const auto& s : strategies)
        if (s.trajectory.diverged) return true;
    return false;
}

const StrategyOutcome* RunResult::find(StrategyKind k) const
{
    for (const auto& s : strategies)
        if (s.strategy.kind == k) return &s;
    return nullptr;
}

std::pair<double, double> epoch_mean_cs(const Trajectory& t, int epoch)
{
    double a = 0.0, m = 0.0;
    int n = 0;
    for (const auto& r : t.records)
        if (r.epoch == epoch) {
            a += r.cs_attn;
            m += r.cs_mlp;
            ++n;
        }
    if (n == 0) return {0.0, 0.0};
    return {a / n, m / n};
}

namespace {

std::string now_utc()
{
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::ostringstream os;
    os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return os.str();
}

ojson mask_json(const ComputationalGraph& g, const StrategyOutcome& o)
{
    ojson frozen = ojson::array();
    for (const auto& n : o.mask.names(g)) frozen.push_back(n);
    return ojson{{"strategy", o.strategy.name()},
                 {"budget", o.strategy.budget},
                 {"attn_trainable", o.attn_trainable},
                 {"mlp_trainable", o.mlp_trainable},
                 {"frozen_count", o.mask.count()},
                 {"source_digest", o.mask.source_digest},
                 {"frozen", frozen}};
}

// Files written by the run, relative path -> content digest.
class RunWriter {
public:
    explicit RunWriter(fs::path dir) : dir_(std::move(dir)) {}

    void text(const std::string& rel, const std::string& content)
    {
        write_file(dir_ / rel, content);
        files_[rel] = text_digest(content);
    }

    void snapshot(const std::string& rel, const TinyFormer& model) { text(rel, snapshot_bytes(model)); }

    [[nodiscard]] ojson files() const
    {
        ojson j = ojson::object();
        for (const auto& [k, v] : files_) j[k] = v;
        return j;
    }

private:
    fs::path dir_;
    std::map<std::string, std::string> files_;
};

Dataset mastered(const TinyFormer& model, const Dataset& data)
{
    const std::vector<int> pred = model.predict(data);
    Dataset out;
    for (std::size_t i = 0; i < data.size(); ++i)
        if (pred[i] == data[i].correct_token) out.push_back(data[i]);
    return out;
}

}  // namespace

RunResult run_single(const ExperimentConfig& c, const fs::path& dir, const std::string& config_text)
{
    c.validate();
    const RunSeeds seeds = derive_seeds(c.seed);
    const RunTasks tasks = resolve_tasks(c);
    const ModelConfig mc = resolve_model(c, tasks, seeds);

    fs::create_directories(dir);
    RunWriter out(dir);
    out.text("config.toml", config_text);

    RunResult result;
    result.dir = dir;
    TinyFormer base(mc);

    if (tasks.pretrain) {
        const Dataset pre = generate(*tasks.pretrain, c.n_pretrain, seeds.pretrain_data);
        PretrainConfig pc = c.pretrain;
        pc.seed = seeds.pretrain;
        try {
            result.pretrain = pretrain(base, pre, pc);
        } catch (const std::runtime_error& e) {
            throw DivergenceError(std::string("pretraining: ") + e.what());
        }
    }
    out.snapshot("snapshots/step0.snap", base);

    SftData data;
    data.target_train = generate(tasks.target, c.n_target_train, seeds.target_train);
    data.target_eval = generate(tasks.target, c.n_target_eval, seeds.target_eval);
    if (tasks.perv) {
        data.perv_train = generate(*tasks.perv, c.n_perv_train, seeds.perv_train);
        data.perv_eval = generate(*tasks.perv, c.n_perv_eval, seeds.perv_eval);
    }
    if (c.mastery == Mastery::Filtered) {
        data.target_train = mastered(base, data.target_train);
        if (data.target_train.empty()) throw std::runtime_error("mastery filter: the base model answers no target example");
    }

    SftConfig sft = c.sft;
    sft.seed = seeds.sft;
    if (data.perv_train.empty()) sft.lambda = 0.0;

    const ComputationalGraph& g = base.graph();
    bool need_scores = false, need_free = false;
    for (const auto& s : c.strategies) {
        need_scores = need_scores || s.kind == StrategyKind::Mech || s.kind == StrategyKind::Random;
        need_free = need_free || s.kind == StrategyKind::Free || s.kind == StrategyKind::FutureMech;
    }
    EdgeScores loc;
    if (need_scores) {
        DiscoveryConfig dc = c.localization;
        dc.seed = seeds.localization;
        EdgePruningConfig pc = c.localization_pruning;
        pc.seed = seeds.localization;
        loc = discover_scores(base, data.target_eval, c.localization_algorithm, dc, pc);
        out.text("localization/scores.json", scores_to_json(g, loc));
    }

    // Free first, since FutureMech needs its final scores.
    std::vector<StrategySpec> order;
    if (need_free) order.push_back({StrategyKind::Free, 0});
    for (const auto& s : c.strategies)
        if (s.kind != StrategyKind::Free) order.push_back(s);

    EdgeScores free_final;
    for (const auto& spec : order) {
        StrategyOutcome o;
        o.requested = std::any_of(c.strategies.begin(), c.strategies.end(), [&](const StrategySpec& s) { return s.kind == spec.kind; });
        o.strategy.kind = spec.kind;
        o.strategy.budget = spec.kind == StrategyKind::Free ? 0 : c.budget_of(spec);
        const std::string name = strategy_dir(spec.kind);

        const EdgeScores* scores = nullptr;
        EdgeScores future;
        switch (spec.kind) {
        case StrategyKind::Free: break;
        case StrategyKind::Mech: scores = &loc; break;
        case StrategyKind::Random: {
            const FreezeMask mech = make_freeze_mask(g, {StrategyKind::Mech, o.strategy.budget, 0, 0, ""}, &loc, 0);
            std::tie(o.strategy.attn_count, o.strategy.mlp_count) = trainable_counts(g, mech);
            o.strategy.source_digest = mech.source_digest;
            break;
        }
        case StrategyKind::FutureMech: {
            const StrategyOutcome* free = result.find(StrategyKind::Free);
            if (!free || free->trajectory.diverged) {
                o.trajectory.diverged = true;
                o.trajectory.error = "prerequisite Free run did not complete";
                result.strategies.push_back(std::move(o));
                continue;
            }
            // Read back what the Free run wrote, and insist it is the same
            // score vector its last record points at.
            future = scores_from_json(g, read_file(dir / "free" / "final_scores.json"));
            o.strategy.source_digest = free->trajectory.records.back().scores_digest;
            scores = &future;
            break;
        }
        }
        o.mask = make_freeze_mask(g, o.strategy, scores, seeds.random_mask);
        if (spec.kind == StrategyKind::Random) o.mask.source_digest = o.strategy.source_digest;
        std::tie(o.attn_trainable, o.mlp_trainable) = trainable_counts(g, o.mask);

        TinyFormer model = base;
        SftHooks hooks;
        if (c.epoch_snapshots)
            hooks.on_epoch_end = [&](std::size_t epoch, const TinyFormer& m) {
                out.snapshot(name + "/snapshots/epoch" + std::to_string(epoch) + ".snap", m);
            };
        o.trajectory = sft_run(model, data, sft, o.mask, c.observe, hooks);

        out.text(name + "/metrics.jsonl", records_to_jsonl(o.trajectory.records));
        out.text(name + "/mask.json", mask_json(g, o).dump(2) + "\n");
        if (spec.kind == StrategyKind::Free && !o.trajectory.diverged) {
            free_final = o.trajectory.scores.back();
            out.text("free/final_scores.json", scores_to_json(g, free_final));
        }
        result.strategies.push_back(std::move(o));
    }

    // Deterministic summary.
    ojson summary;
    summary["name"] = c.name;
    summary["seed"] = c.seed;
    ojson strategies = ojson::array();
    for (const auto& o : result.strategies) {
        ojson s{{"strategy", o.strategy.name()},
                {"requested", o.requested},
                {"budget", o.strategy.budget},
                {"attn_trainable", o.attn_trainable},
                {"mlp_trainable", o.mlp_trainable},
                {"diverged", o.trajectory.diverged},
                {"error", o.trajectory.error},
                {"skipped_steps", o.trajectory.skipped_steps},
                {"records", o.trajectory.records.size()}};
        if (!o.trajectory.records.empty()) {
            const auto [fa, fm] = epoch_mean_cs(o.trajectory, 1);
            const auto [la, lm] = epoch_mean_cs(o.trajectory, o.trajectory.records.back().epoch);
            s["final"] = nlohmann::ordered_json::parse(record_to_json(o.trajectory.records.back()));
            s["cs_first_epoch"] = {{"attn", fa}, {"mlp", fm}};
            s["cs_last_epoch"] = {{"attn", la}, {"mlp", lm}};
        }
        strategies.push_back(std::move(s));
    }
    summary["strategies"] = std::move(strategies);
    out.text("summary.json", summary.dump(2) + "\n");

    ojson pre{{"enabled", tasks.pretrain.has_value()},
              {"initial_loss", result.pretrain.initial_loss},
              {"final_loss", result.pretrain.final_loss},
              {"skipped_steps", result.pretrain.skipped_steps}};
    for (const auto& [task, acc] : result.pretrain.task_accuracy) pre["task_accuracy"][task] = acc;

    ojson manifest;
    manifest["format"] = "circuitlab-run";
    manifest["version"] = 1;
    manifest["created"] = now_utc();
    manifest["name"] = c.name;
    manifest["seeds"] = {{"master", seeds.master},         {"model", seeds.model},         {"pretrain_data", seeds.pretrain_data},
                         {"target_train", seeds.target_train}, {"target_eval", seeds.target_eval}, {"perv_train", seeds.perv_train},
                         {"perv_eval", seeds.perv_eval},   {"pretrain", seeds.pretrain},   {"sft", seeds.sft},
                         {"random_mask", seeds.random_mask}, {"localization", seeds.localization}};
    manifest["resolved_config"] = config_to_toml(c);
    manifest["model"] = {{"layers", mc.n_layers}, {"heads", mc.n_heads}, {"d_model", mc.d_model}, {"d_ff", mc.d_ff},
                         {"vocab_size", mc.vocab_size}, {"max_seq_len", mc.max_seq_len}, {"graph_digest", g.digest()},
                         {"nodes", g.node_count()}, {"edges", g.edge_count()}};
    manifest["effective_lambda"] = sft.lambda;
    manifest["data"] = {{"target_train", {{"size", data.target_train.size()}, {"digest", dataset_digest(data.target_train)}}},
                        {"target_eval", {{"size", data.target_eval.size()}, {"digest", dataset_digest(data.target_eval)}}},
                        {"perv_train", {{"size", data.perv_train.size()}, {"digest", dataset_digest(data.perv_train)}}},
                        {"perv_eval", {{"size", data.perv_eval.size()}, {"digest", dataset_digest(data.perv_eval)}}}};
    manifest["pretrain"] = pre;
    manifest["base_weights_digest"] = base.weights_digest();
    if (need_scores) manifest["localization"] = {{"algorithm", to_string(c.localization_algorithm)}, {"scores_digest", scores_digest(loc)}};
    ojson ms = ojson::array();
    for (const auto& o : result.strategies) {
        ojson s{{"strategy", o.strategy.name()},
                {"dir", strategy_dir(o.strategy.kind)},
                {"mask_source_digest", o.mask.source_digest},
                {"final_weights_digest", o.trajectory.epoch_digests.empty() ? base.weights_digest() : o.trajectory.epoch_digests.back()},
                {"epoch_digests", o.trajectory.epoch_digests}};
        if (o.strategy.kind == StrategyKind::Free && !o.trajectory.diverged) s["final_scores_digest"] = scores_digest(free_final);
        ms.push_back(std::move(s));
    }
    manifest["strategies"] = std::move(ms);
    manifest["files"] = out.files();
    write_file(dir / "manifest.json", manifest.dump(2) + "\n");
    return result;
}

std::vector<SweepPoint> expand_sweep(const ExperimentConfig& c)
{
    std::vector<SweepPoint> points{{"", c}};
    points[0].config.sweep = {};
    const auto axis = [&](const auto& values, const std::string& key, auto apply) {
        if (values.empty()) return;
        std::vector<SweepPoint> next;
        for (const auto& p : points)
            for (const auto& v : values) {
                SweepPoint q = p;
                std::ostringstream label;
                label << (q.label.empty() ? "" : q.label + ",") << key << '=' << apply(q.config, v);
                q.label = label.str();
                next.push_back(std::move(q));
            }
        points = std::move(next);
    };
    axis(c.sweep.perv_count, "perv_count", [&](ExperimentConfig& x, std::size_t v) {
        x.pervasiveness.resize(v);
        return std::to_string(v);
    });
    axis(c.sweep.dataset_size, "dataset_size", [](ExperimentConfig& x, std::size_t v) {
        x.n_target_train = v;
        return std::to_string(v);
    });
    axis(c.sweep.conflict_proportion, "conflict_proportion", [](ExperimentConfig& x, double v) {
        x.conflict_proportion = v;
        std::ostringstream os;
        os << v;
        return os.str();
    });
    axis(c.sweep.mastery, "mastery", [](ExperimentConfig& x, Mastery v) {
        x.mastery = v;
        return to_string(v);
    });
    axis(c.sweep.circuit_scale, "circuit_scale", [](ExperimentConfig& x, std::size_t v) {
        x.budget = v;
        for (auto& s : x.strategies) s.budget = 0;
        return std::to_string(v);
    });
    if (!c.sweep.empty())
        for (auto& p : points) {
            p.config.seed = Digest().u64(c.seed).text(p.label).value();
            p.config.out_dir = c.out_dir / "sweep" / p.label;
        }
    return points;
}

std::vector<RunResult> run_experiment(const ExperimentConfig& c, const std::string& config_text)
{
    c.validate();
    if (c.sweep.empty()) return {run_single(c, c.out_dir, config_text)};

    const std::vector<SweepPoint> points = expand_sweep(c);
    std::vector<RunResult> results(points.size());
    const auto run = [&](std::size_t i) { results[i] = run_single(points[i].config, points[i].config.out_dir, config_to_toml(points[i].config)); };
    if (c.jobs <= 1) {
        for (std::size_t i = 0; i < points.size(); ++i) run(i);
    } else {
        for (std::size_t start = 0; start < points.size(); start += c.jobs) {
            std::vector<std::future<void>> batch;
            for (std::size_t i = start; i < std::min(points.size(), start + c.jobs); ++i) batch.push_back(std::async(std::launch::async, run, i));
            for (auto& f : batch) f.get();
        }
    }

    ojson sweep = ojson::array();
    for (std::size_t i = 0; i < points.size(); ++i)
        sweep.push_back({{"label", points[i].label}, {"seed", points[i].config.seed}, {"dir", (fs::path("sweep") / points[i].label).generic_string()}});
    write_file(c.out_dir / "config.toml", config_text);
    write_file(c.out_dir / "sweep.json", ojson{{"points", sweep}}.dump(2) + "\n");
    return results;
}

std::vector<RunResult> run_experiment(const fs::path& config_path)
{
    const std::string text = read_file(config_path);
    return run_experiment(parse_config(text, config_path.string()), text);
}

}  // namespace clab
