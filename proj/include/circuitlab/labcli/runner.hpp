#pragma once

#include "circuitlab/labcli/config.hpp"
#include "circuitlab/taskgen/tasks.hpp"

#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace clab {

/// Pretraining blew up; strategy-level divergence is recorded instead.
class DivergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Seeds of one run, all derived from the master seed.
struct RunSeeds {
    std::uint64_t master = 0;
    std::uint64_t model = 0;
    std::uint64_t pretrain_data = 0;
    std::uint64_t target_train = 0;
    std::uint64_t target_eval = 0;
    std::uint64_t perv_train = 0;
    std::uint64_t perv_eval = 0;
    std::uint64_t pretrain = 0;
    std::uint64_t sft = 0;
    std::uint64_t random_mask = 0;
    std::uint64_t localization = 0;
};
RunSeeds derive_seeds(std::uint64_t master);

/// Task specs of a run; the pervasiveness spec is absent when no
/// pervasiveness data is used.
struct RunTasks {
    TaskSpec target;
    std::optional<TaskSpec> perv;
    std::optional<TaskSpec> pretrain;
    int vocab = 0;
    int seq_len = 0;
};
RunTasks resolve_tasks(const ExperimentConfig& c);
/// Model config with vocab / sequence length filled in from the tasks.
ModelConfig resolve_model(const ExperimentConfig& c, const RunTasks& tasks, const RunSeeds& seeds);

/// Lower-case directory name of a strategy.
std::string strategy_dir(StrategyKind k);

struct StrategyOutcome {
    LocalizationStrategy strategy;
    FreezeMask mask;
    std::size_t attn_trainable = 0;
    std::size_t mlp_trainable = 0;
    Trajectory trajectory;
    /// Listed in the config, as opposed to scheduled for FutureMech.
    bool requested = true;
};

struct RunResult {
    std::filesystem::path dir;
    PretrainResult pretrain;
    std::vector<StrategyOutcome> strategies;

    [[nodiscard]] bool diverged() const;
    [[nodiscard]] const StrategyOutcome* find(StrategyKind k) const;
};

/// One run into `dir`: pretraining, localization, then every strategy.
/// `config_text` is copied verbatim into the run directory.
RunResult run_single(const ExperimentConfig& c, const std::filesystem::path& dir, const std::string& config_text);

/// One point of a sweep: the config it runs with and its label.
struct SweepPoint {
    std::string label;
    ExperimentConfig config;
};
/// Cartesian product of the sweep axes; each point's seed is derived from
/// the master seed and its axis values. A config without axes yields itself.
std::vector<SweepPoint> expand_sweep(const ExperimentConfig& c);

/// run_single for a plain config; sweeps write one run per point under
/// out_dir/sweep/<label> plus sweep.json.
std::vector<RunResult> run_experiment(const ExperimentConfig& c, const std::string& config_text);
std::vector<RunResult> run_experiment(const std::filesystem::path& config_path);

/// Mean of cs_attn / cs_mlp over an epoch's records.
std::pair<double, double> epoch_mean_cs(const Trajectory& t, int epoch);

}  // namespace clab
