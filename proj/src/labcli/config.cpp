#include "circuitlab/labcli/config.hpp"

#include "circuitlab/taskgen/tasks.hpp"

#include <toml.hpp>

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

namespace clab {

std::string to_string(Mastery m)
{
    switch (m) {
    case Mastery::None: return "none";
    case Mastery::Pretrained: return "pretrained";
    case Mastery::Filtered: return "filtered";
    }
    return "?";
}

Mastery parse_mastery(const std::string& s)
{
    if (s == "none") return Mastery::None;
    if (s == "pretrained") return Mastery::Pretrained;
    if (s == "filtered") return Mastery::Filtered;
    throw std::invalid_argument("unknown mastery mode '" + s + "' (none, pretrained, filtered)");
}

namespace {

bool known_task(const std::string& t)
{
    const auto& names = task_names();
    return std::find(names.begin(), names.end(), t) != names.end();
}

// Typed access to one TOML table. Every key read is remembered so that
// finish() can reject the ones nobody asked for.
class Reader {
public:
    Reader(const toml::table& t, std::string prefix, const std::string& source) : t_(t), prefix_(std::move(prefix)), source_(source) {}

    [[noreturn]] void fail(const toml::node* n, const std::string& key, const std::string& msg) const
    {
        std::ostringstream os;
        os << source_ << ':';
        if (n && n->source().begin) os << n->source().begin.line << ':';
        else if (t_.source().begin) os << t_.source().begin.line << ':';
        os << ' ' << prefix_ << key << ": " << msg;
        throw ConfigError(os.str());
    }

    const toml::node* find(const std::string& key)
    {
        seen_.insert(key);
        return t_.get(key);
    }

    void get(const std::string& key, bool& out)
    {
        if (const auto* n = find(key)) {
            if (!n->is_boolean()) fail(n, key, "expected true or false");
            out = n->as_boolean()->get();
        }
    }

    void get(const std::string& key, std::string& out)
    {
        if (const auto* n = find(key)) {
            if (!n->is_string()) fail(n, key, "expected a string");
            out = n->as_string()->get();
        }
    }

    void get(const std::string& key, double& out)
    {
        if (const auto* n = find(key)) out = real(n, key);
    }

    template <class Int>
        requires std::is_integral_v<Int>
    void get(const std::string& key, Int& out, std::int64_t lo = 0)
    {
        if (const auto* n = find(key)) out = static_cast<Int>(integer(n, key, lo));
    }

    template <class E, class Parse>
    void get_enum(const std::string& key, E& out, Parse parse)
    {
        std::string s;
        const auto* n = t_.get(key);
        get(key, s);
        if (!n) return;
        try {
            out = parse(s);
        } catch (const std::invalid_argument& e) {
            fail(n, key, e.what());
        }
    }

    template <class T, class Conv>
    void get_list(const std::string& key, std::vector<T>& out, Conv conv)
    {
        const auto* n = find(key);
        if (!n) return;
        const auto* arr = n->as_array();
        if (!arr) fail(n, key, "expected an array");
        out.clear();
        for (const auto& item : *arr) out.push_back(conv(item, key));
    }

    std::int64_t integer(const toml::node* n, const std::string& key, std::int64_t lo) const
    {
        if (!n->is_integer()) fail(n, key, "expected an integer");
        const std::int64_t v = n->as_integer()->get();
        if (v < lo) fail(n, key, "must be >= " + std::to_string(lo));
        return v;
    }

    double real(const toml::node* n, const std::string& key) const
    {
        if (n->is_integer()) return static_cast<double>(n->as_integer()->get());
        if (!n->is_floating_point()) fail(n, key, "expected a number");
        return n->as_floating_point()->get();
    }

    std::string text(const toml::node* n, const std::string& key) const
    {
        if (!n->is_string()) fail(n, key, "expected a string");
        return n->as_string()->get();
    }

    const toml::table* table(const std::string& key)
    {
        const auto* n = find(key);
        if (!n) return nullptr;
        if (!n->is_table()) fail(n, key, "expected a table");
        return n->as_table();
    }

    void finish() const
    {
        for (const auto& [k, v] : t_)
            if (!seen_.count(std::string(k.str()))) fail(&v, std::string(k.str()), "unknown key");
    }

private:
    const toml::table& t_;
    std::string prefix_;
    const std::string& source_;
    std::set<std::string> seen_;
};

template <class F>
void section(Reader& parent, const std::string& key, const std::string& source, F&& body)
{
    if (const toml::table* t = parent.table(key)) {
        Reader r(*t, key + ".", source);
        body(r);
        r.finish();
    }
}

void read_discovery(Reader& r, DiscoveryConfig& d)
{
    r.get_enum("regime", d.regime, parse_regime);
    r.get_enum("metric", d.metric, parse_metric_kind);
    r.get("batch", d.batch_size, 1);
}

}  // namespace

ExperimentConfig parse_config(const std::string& text, const std::string& source)
{
    toml::table root;
    try {
        root = toml::parse(text, source);
    } catch (const toml::parse_error& e) {
        std::ostringstream os;
        os << source << ':' << e.source().begin.line << ':' << e.source().begin.column << ": " << e.description();
        throw ConfigError(os.str());
    }

    ExperimentConfig c;
    c.localization.sparsity_target = 0.95;
    Reader top(root, "", source);
    top.get("name", c.name);
    top.get("seed", c.seed);
    std::string out = c.out_dir.string();
    top.get("out_dir", out);
    c.out_dir = out;
    top.get("jobs", c.jobs, 1);

    section(top, "model", source, [&](Reader& r) {
        r.get("layers", c.model.n_layers, 1);
        r.get("heads", c.model.n_heads, 1);
        r.get("d_model", c.model.d_model, 1);
        r.get("d_ff", c.model.d_ff, 1);
        r.get("vocab_size", c.model.vocab_size);
        r.get("max_seq_len", c.model.max_seq_len);
        r.get("normalize", c.model.normalize);
        r.get_enum("activation", c.model.activation, parse_activation);
    });

    section(top, "tasks", source, [&](Reader& r) {
        const auto task = [&](const toml::node& n, const std::string& key) {
            std::string s = r.text(&n, key);
            if (!known_task(s)) r.fail(&n, key, "unknown task '" + s + "'");
            return s;
        };
        if (const auto* n = r.find("target")) c.target = task(*n, "target");
        r.get_list("pervasiveness", c.pervasiveness, task);
        if (const auto* n = r.find("conflict_task")) c.conflict_task = task(*n, "conflict_task");
        if (const auto* n = r.find("conflict_proportion")) {
            c.conflict_proportion = r.real(n, "conflict_proportion");
            if (c.conflict_proportion < 0.0 || c.conflict_proportion >= 1.0) r.fail(n, "conflict_proportion", "must lie in [0, 1)");
        }
        r.get_enum("mastery", c.mastery, parse_mastery);
    });

    section(top, "data", source, [&](Reader& r) {
        r.get("target_train", c.n_target_train, 1);
        r.get("target_eval", c.n_target_eval, 1);
        r.get("perv_train", c.n_perv_train);
        r.get("perv_eval", c.n_perv_eval);
        r.get("pretrain", c.n_pretrain);
    });

    section(top, "pretrain", source, [&](Reader& r) {
        r.get("enabled", c.pretrain_enabled);
        r.get("steps", c.pretrain.steps);
        r.get("batch", c.pretrain.batch_size, 1);
        r.get("lr", c.pretrain.adamw.learning_rate);
        r.get("beta1", c.pretrain.adamw.beta1);
        r.get("beta2", c.pretrain.adamw.beta2);
        r.get("epsilon", c.pretrain.adamw.epsilon);
        r.get("weight_decay", c.pretrain.adamw.weight_decay);
    });

    section(top, "sft", source, [&](Reader& r) {
        r.get("lr", c.sft.learning_rate);
        r.get("lambda", c.sft.lambda);
        r.get("epochs", c.sft.epochs);
        r.get("observations", c.sft.observations_per_epoch, 1);
        r.get("batch", c.sft.batch_size, 1);
        r.get("beta1", c.sft.beta1);
        r.get("beta2", c.sft.beta2);
        r.get("epsilon", c.sft.epsilon);
        r.get("weight_decay", c.sft.weight_decay);
        r.get_enum("mode", c.sft.mode, parse_train_mode);
    });

    section(top, "localization", source, [&](Reader& r) {
        r.get_enum("algorithm", c.localization_algorithm, parse_algorithm);
        read_discovery(r, c.localization);
        r.get("budget", c.budget, 1);
        section(r, "pruning", source, [&](Reader& p) {
            p.get("steps", c.localization_pruning.steps, 1);
            p.get("lr", c.localization_pruning.learning_rate);
            p.get("penalty", c.localization_pruning.penalty);
            double s = -1.0;
            p.get("sparsity", s);
            if (s >= 0.0) c.localization_pruning.sparsity_target = s;
        });
    });

    section(top, "observe", source, [&](Reader& r) {
        read_discovery(r, c.observe.discovery);
        r.get("k_pairs", c.observe.k_pairs, 1);
        r.get("subset_fraction", c.observe.subset_fraction);
        r.get("conflict", c.observe.conflict);
        r.get("conflict_sparsity", c.observe.conflict_sparsity);
    });

    if (const auto* n = top.find("strategies")) {
        const auto* arr = n->as_array();
        if (!arr) top.fail(n, "strategies", "expected an array");
        c.strategies.clear();
        for (const auto& item : *arr) {
            StrategySpec s;
            std::string kind;
            if (item.is_string()) {
                kind = item.as_string()->get();
            } else if (const auto* t = item.as_table()) {
                Reader r(*t, "strategies.", source);
                r.get("kind", kind);
                r.get("budget", s.budget, 1);
                r.finish();
            } else {
                top.fail(&item, "strategies", "entries are names or {kind, budget} tables");
            }
            try {
                s.kind = parse_strategy_kind(kind);
            } catch (const std::invalid_argument& e) {
                top.fail(&item, "strategies", e.what());
            }
            c.strategies.push_back(s);
        }
    }

    section(top, "snapshots", source, [&](Reader& r) { r.get("epochs", c.epoch_snapshots); });

    section(top, "sweep", source, [&](Reader& r) {
        const auto count = [&](std::int64_t lo) {
            return [&r, lo](const toml::node& n, const std::string& key) { return static_cast<std::size_t>(r.integer(&n, key, lo)); };
        };
        r.get_list("perv_count", c.sweep.perv_count, count(0));
        r.get_list("dataset_size", c.sweep.dataset_size, count(1));
        r.get_list("circuit_scale", c.sweep.circuit_scale, count(1));
        r.get_list("conflict_proportion", c.sweep.conflict_proportion, [&](const toml::node& n, const std::string& key) {
            const double v = r.real(&n, key);
            if (v < 0.0 || v >= 1.0) r.fail(&n, key, "values must lie in [0, 1)");
            return v;
        });
        r.get_list("mastery", c.sweep.mastery, [&](const toml::node& n, const std::string& key) {
            try {
                return parse_mastery(r.text(&n, key));
            } catch (const std::invalid_argument& e) {
                r.fail(&n, key, e.what());
            }
        });
    });
    top.finish();

    try {
        c.validate();
    } catch (const ConfigError& e) {
        throw ConfigError(source + ": " + e.what());
    }
    return c;
}

ExperimentConfig load_config(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError(path.string() + ": cannot open");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str(), path.string());
}

void ExperimentConfig::validate() const
{
    const auto check = [](bool ok, const std::string& msg) {
        if (!ok) throw ConfigError(msg);
    };
    check(!strategies.empty(), "strategies: at least one strategy is required");
    check(!name.empty(), "name: must not be empty");
    check(!out_dir.empty(), "out_dir: must not be empty");
    check(std::find(pervasiveness.begin(), pervasiveness.end(), target) == pervasiveness.end(),
          "tasks.pervasiveness: must not contain the target task");
    check(conflict_task != target, "tasks.conflict_task: must differ from the target");
    check(n_perv_train > 0 || (pervasiveness.empty() && conflict_proportion == 0.0) || sft.lambda == 0.0,
          "data.perv_train: must be > 0 when lambda > 0");
    check(n_pretrain > 0 || !pretrain_enabled, "data.pretrain: must be > 0 when pretraining");
    check(pretrain.adamw.learning_rate > 0.0, "pretrain.lr: must be > 0");
    for (const auto& s : strategies)
        check(s.kind == StrategyKind::Free || budget_of(s) > 0, "strategies: " + to_string(s.kind) + " needs a budget");
    for (const auto v : sweep.perv_count) check(v <= pervasiveness.size(), "sweep.perv_count: exceeds the pervasiveness list");
    check(observe.subset_fraction > 0.0 && observe.subset_fraction <= 0.5, "observe.subset_fraction: must lie in (0, 0.5]");
    check(observe.conflict_sparsity >= 0.0 && observe.conflict_sparsity < 1.0, "observe.conflict_sparsity: must lie in [0, 1)");
    try {
        sft.validate();
        pretrain.adamw.validate();
        localization_pruning.validate();
        ModelConfig m = model;
        if (m.vocab_size == 0) m.vocab_size = 96;
        if (m.max_seq_len == 0) m.max_seq_len = 16;
        m.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
}

std::string config_to_toml(const ExperimentConfig& c)
{
    const auto discovery = [](const DiscoveryConfig& d) {
        return toml::table{{"regime", to_string(d.regime)}, {"metric", to_string(d.metric)}, {"batch", static_cast<std::int64_t>(d.batch_size)}};
    };
    const auto ints = [](const std::vector<std::size_t>& v) {
        toml::array a;
        for (const auto x : v) a.push_back(static_cast<std::int64_t>(x));
        return a;
    };
    const auto i64 = [](std::size_t v) { return static_cast<std::int64_t>(v); };

    toml::array perv, strategies, proportions, mastery;
    for (const auto& p : c.pervasiveness) perv.push_back(p);
    for (const auto& s : c.strategies) strategies.push_back(toml::table{{"kind", to_string(s.kind)}, {"budget", i64(c.budget_of(s))}});
    for (const auto p : c.sweep.conflict_proportion) proportions.push_back(p);
    for (const auto m : c.sweep.mastery) mastery.push_back(to_string(m));

    toml::table localization = discovery(c.localization);
    localization.insert("algorithm", to_string(c.localization_algorithm));
    localization.insert("budget", i64(c.budget));
    toml::table pruning{{"steps", i64(c.localization_pruning.steps)},
                        {"lr", c.localization_pruning.learning_rate},
                        {"penalty", c.localization_pruning.penalty}};
    if (c.localization_pruning.sparsity_target) pruning.insert("sparsity", *c.localization_pruning.sparsity_target);
    localization.insert("pruning", std::move(pruning));

    toml::table observe = discovery(c.observe.discovery);
    observe.insert("k_pairs", i64(c.observe.k_pairs));
    observe.insert("subset_fraction", c.observe.subset_fraction);
    observe.insert("conflict", c.observe.conflict);
    observe.insert("conflict_sparsity", c.observe.conflict_sparsity);

    toml::table root{
        {"name", c.name},
        {"seed", static_cast<std::int64_t>(c.seed)},
        {"out_dir", c.out_dir.generic_string()},
        {"jobs", i64(c.jobs)},
        {"strategies", std::move(strategies)},
        {"model",
         toml::table{{"layers", c.model.n_layers},
                     {"heads", c.model.n_heads},
                     {"d_model", c.model.d_model},
                     {"d_ff", c.model.d_ff},
                     {"vocab_size", c.model.vocab_size},
                     {"max_seq_len", c.model.max_seq_len},
                     {"normalize", c.model.normalize},
                     {"activation", to_string(c.model.activation)}}},
        {"tasks",
         toml::table{{"target", c.target},
                     {"pervasiveness", std::move(perv)},
                     {"conflict_task", c.conflict_task},
                     {"conflict_proportion", c.conflict_proportion},
                     {"mastery", to_string(c.mastery)}}},
        {"data",
         toml::table{{"target_train", i64(c.n_target_train)},
                     {"target_eval", i64(c.n_target_eval)},
                     {"perv_train", i64(c.n_perv_train)},
                     {"perv_eval", i64(c.n_perv_eval)},
                     {"pretrain", i64(c.n_pretrain)}}},
        {"pretrain",
         toml::table{{"enabled", c.pretrain_enabled},
                     {"steps", i64(c.pretrain.steps)},
                     {"batch", i64(c.pretrain.batch_size)},
                     {"lr", c.pretrain.adamw.learning_rate},
                     {"beta1", c.pretrain.adamw.beta1},
                     {"beta2", c.pretrain.adamw.beta2},
                     {"epsilon", c.pretrain.adamw.epsilon},
                     {"weight_decay", c.pretrain.adamw.weight_decay}}},
        {"sft",
         toml::table{{"lr", c.sft.learning_rate},
                     {"lambda", c.sft.lambda},
                     {"epochs", i64(c.sft.epochs)},
                     {"observations", i64(c.sft.observations_per_epoch)},
                     {"batch", i64(c.sft.batch_size)},
                     {"beta1", c.sft.beta1},
                     {"beta2", c.sft.beta2},
                     {"epsilon", c.sft.epsilon},
                     {"weight_decay", c.sft.weight_decay},
                     {"mode", to_string(c.sft.mode)}}},
        {"localization", std::move(localization)},
        {"observe", std::move(observe)},
        {"snapshots", toml::table{{"epochs", c.epoch_snapshots}}},
        {"sweep",
         toml::table{{"perv_count", ints(c.sweep.perv_count)},
                     {"dataset_size", ints(c.sweep.dataset_size)},
                     {"conflict_proportion", std::move(proportions)},
                     {"mastery", std::move(mastery)},
                     {"circuit_scale", ints(c.sweep.circuit_scale)}}},
    };
    std::ostringstream os;
    os << toml::toml_formatter(root, toml::format_flags::none) << '\n';
    return os.str();
}

}  // namespace clab
