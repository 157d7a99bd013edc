#pragma once

#include "circuitlab/circuitfind/discovery.hpp"
#include "circuitlab/posttrain/sft.hpp"

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace clab {

/// Config problems. The message starts with "file:line:" when the
/// offending key has a known source position.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// none: target absent from pretraining; pretrained: target mixed into
/// pretraining; filtered: pretrained, and SFT keeps only target examples the
/// base model already answers correctly.
enum class Mastery : std::uint8_t { None, Pretrained, Filtered };
std::string to_string(Mastery m);
Mastery parse_mastery(const std::string& s);

struct StrategySpec {
    StrategyKind kind = StrategyKind::Free;
    /// 0 means "use localization.budget".
    std::size_t budget = 0;
};

struct SweepAxes {
    std::vector<std::size_t> perv_count;
    std::vector<std::size_t> dataset_size;
    std::vector<double> conflict_proportion;
    std::vector<Mastery> mastery;
    std::vector<std::size_t> circuit_scale;

    [[nodiscard]] bool empty() const
    {
        return perv_count.empty() && dataset_size.empty() && conflict_proportion.empty() && mastery.empty() && circuit_scale.empty();
    }
};

struct ExperimentConfig {
    std::string name = "experiment";
    std::uint64_t seed = 0;
    std::filesystem::path out_dir = "runs/experiment";

    /// vocab_size / max_seq_len of 0 are derived from the tasks.
    ModelConfig model{4, 4, 64, 128, 0, 0};

    std::string target = "induction";
    std::vector<std::string> pervasiveness{"greater_than", "arithmetic_mod", "ioi_like"};
    /// Task mixed into the pervasiveness data with weight conflict_proportion.
    std::string conflict_task = "reverse";
    double conflict_proportion = 0.0;
    Mastery mastery = Mastery::None;

    std::size_t n_target_train = 640;
    std::size_t n_target_eval = 100;
    std::size_t n_perv_train = 640;
    std::size_t n_perv_eval = 96;
    std::size_t n_pretrain = 2000;

    bool pretrain_enabled = true;
    PretrainConfig pretrain{300, 32, {3e-3, 0.9, 0.999, 1e-8, 0.01}, 0};

    SftConfig sft{1e-3};

    Algorithm localization_algorithm = Algorithm::Eap;
    DiscoveryConfig localization;
    EdgePruningConfig localization_pruning;
    std::size_t budget = 16;

    std::vector<StrategySpec> strategies{{StrategyKind::Free, 0}};
    ObservationConfig observe;
    bool epoch_snapshots = true;

    SweepAxes sweep;
    /// Sweep points run concurrently; 1 keeps them sequential.
    std::size_t jobs = 1;

    /// Throws ConfigError.
    void validate() const;
    [[nodiscard]] std::size_t budget_of(const StrategySpec& s) const { return s.budget ? s.budget : budget; }
};

ExperimentConfig parse_config(const std::string& text, const std::string& source = "config");
ExperimentConfig load_config(const std::filesystem::path& path);
/// Every field, defaults included, as TOML that parse_config accepts.
std::string config_to_toml(const ExperimentConfig& c);

}  // namespace clab
