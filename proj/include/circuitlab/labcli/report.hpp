#pragma once

#include "circuitlab/circmetrics/metrics.hpp"
#include "circuitlab/posttrain/sft.hpp"

#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace clab {

/// One row per record, columns in MetricRecord field order. Reals use
/// round-trip precision.
std::string records_to_csv(std::span<const MetricRecord> records);
/// Throws std::runtime_error with the offending line.
std::vector<MetricRecord> records_from_csv(const std::string& text);

struct Series {
    std::string strategy;
    std::vector<MetricRecord> records;
};

/// t_acc, p_acc, cd_attn, cd_mlp, cs_attn, cs_mlp, cc
const std::vector<std::string>& plot_metrics();
double metric_value(const MetricRecord& r, const std::string& metric);

/// One panel per metric, one polyline per strategy in each. Every polyline
/// carries its exact values in data-values.
std::string render_svg(std::span<const Series> series);

/// A comparison row. Under unlearning `acc` is forget efficacy (1 - target
/// accuracy) and `perv` is retain utility.
struct TableRow {
    std::string strategy;
    double acc = 0.0;
    double perv = 0.0;
    double cd_attn = 0.0;
    double cd_mlp = 0.0;
    double cs_attn = 0.0;
    double cs_mlp = 0.0;
    int cc = 0;
};

TableRow table_row(const std::string& strategy, const MetricRecord& last, TrainMode mode);
std::string render_table(std::span<const TableRow> rows, TrainMode mode);
std::string table_csv(std::span<const TableRow> rows, TrainMode mode);

struct Report {
    TrainMode mode = TrainMode::Sft;
    std::vector<Series> series;
    std::vector<TableRow> table;
    std::vector<std::filesystem::path> files;
};

/// Reads the run's trajectories and writes run_dir/report/. Throws
/// std::runtime_error when a trajectory is missing.
Report export_report(const std::filesystem::path& run_dir);

struct VerifyResult {
    std::size_t checks = 0;
    std::vector<std::string> problems;
    [[nodiscard]] bool ok() const { return problems.empty(); }
};

/// Integrity of a run directory: manifest file digests, trajectory shape,
/// FutureMech provenance, and that every report value comes from a record.
VerifyResult verify_run(const std::filesystem::path& run_dir);

}  // namespace clab
