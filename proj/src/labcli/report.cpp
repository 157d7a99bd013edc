#include "circuitlab/labcli/report.hpp"

#include "circuitlab/labcli/config.hpp"
#include "circuitlab/labcli/files.hpp"
#include "circuitlab/labcli/runner.hpp"
#include "circuitlab/tinyformer/snapshot.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <regex>

namespace clab {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

const char* const kCsvHeader =
    "step,epoch,optimizer_step,cd_attn,cd_mlp,cd_attn_global,cd_mlp_global,cd_attn_step,cd_mlp_step,cs_attn,cs_mlp,cc,t_acc,p_acc,loss,"
    "scores_digest";

std::string real(double v)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string fixed(double v, int digits)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

std::vector<std::string> split_line(const std::string& line, char sep)
{
    std::vector<std::string> out(1);
    for (const char ch : line) {
        if (ch == sep) out.emplace_back();
        else out.back() += ch;
    }
    return out;
}

std::vector<std::string> lines_of(const std::string& text)
{
    std::vector<std::string> out;
    std::string cur;
    for (const char ch : text) {
        if (ch == '\n') {
            out.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur += ch;
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

}  // namespace

std::string records_to_csv(std::span<const MetricRecord> records)
{
    std::string out = std::string(kCsvHeader) + "\n";
    for (const auto& r : records) {
        out += std::to_string(r.step) + ',' + std::to_string(r.epoch) + ',' + std::to_string(r.optimizer_step);
        for (const double v : {r.cd_attn, r.cd_mlp, r.cd_attn_global, r.cd_mlp_global, r.cd_attn_step, r.cd_mlp_step, r.cs_attn, r.cs_mlp})
            out += ',' + real(v);
        out += ',' + std::to_string(r.cc);
        for (const double v : {r.t_acc, r.p_acc, r.loss}) out += ',' + real(v);
        out += ',' + r.scores_digest + '\n';
    }
    return out;
}

std::vector<MetricRecord> records_from_csv(const std::string& text)
{
    const auto lines = lines_of(text);
    if (lines.empty() || lines[0] != kCsvHeader) throw std::runtime_error("csv line 1: unexpected header");
    std::vector<MetricRecord> out;
    for (std::size_t i = 1; i < lines.size(); ++i) {
        const auto f = split_line(lines[i], ',');
        const std::string where = "csv line " + std::to_string(i + 1);
        if (f.size() != 16) throw std::runtime_error(where + ": expected 16 fields");
        try {
            MetricRecord r;
            r.step = std::stoi(f[0]);
            r.epoch = std::stoi(f[1]);
            r.optimizer_step = std::stoi(f[2]);
            double* reals[] = {&r.cd_attn, &r.cd_mlp, &r.cd_attn_global, &r.cd_mlp_global, &r.cd_attn_step, &r.cd_mlp_step, &r.cs_attn, &r.cs_mlp};
            for (std::size_t k = 0; k < 8; ++k) *reals[k] = std::stod(f[3 + k]);
            r.cc = std::stoi(f[11]);
            r.t_acc = std::stod(f[12]);
            r.p_acc = std::stod(f[13]);
            r.loss = std::stod(f[14]);
            r.scores_digest = f[15];
            out.push_back(std::move(r));
        } catch (const std::logic_error&) {
            throw std::runtime_error(where + ": bad number");
        }
    }
    return out;
}

const std::vector<std::string>& plot_metrics()
{
    static const std::vector<std::string> m{"t_acc", "p_acc", "cd_attn", "cd_mlp", "cs_attn", "cs_mlp", "cc"};
    return m;
}

double metric_value(const MetricRecord& r, const std::string& metric)
{
    if (metric == "t_acc") return r.t_acc;
    if (metric == "p_acc") return r.p_acc;
    if (metric == "cd_attn") return r.cd_attn;
    if (metric == "cd_mlp") return r.cd_mlp;
    if (metric == "cs_attn") return r.cs_attn;
    if (metric == "cs_mlp") return r.cs_mlp;
    if (metric == "cc") return r.cc;
    throw std::invalid_argument("unknown metric '" + metric + "'");
}

std::string render_svg(std::span<const Series> series)
{
    static const char* const colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
    const auto& metrics = plot_metrics();
    const double pw = 320, ph = 200, pad = 40;
    const int cols = 2;
    const int rows = static_cast<int>((metrics.size() + cols - 1) / cols);
    const double width = cols * (pw + pad) + pad, height = rows * (ph + pad) + pad + 20.0 * static_cast<double>(series.size());

    std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fixed(width, 0) + "\" height=\"" + fixed(height, 0) + "\">\n";
    std::size_t max_len = 1;
    for (const auto& sr : series) max_len = std::max(max_len, sr.records.size());

    for (std::size_t m = 0; m < metrics.size(); ++m) {
        const double x0 = pad + static_cast<double>(m % cols) * (pw + pad);
        const double y0 = pad + static_cast<double>(m / cols) * (ph + pad);
        double lo = 0.0, hi = 0.0;
        for (const auto& sr : series)
            for (const auto& r : sr.records) {
                lo = std::min(lo, metric_value(r, metrics[m]));
                hi = std::max(hi, metric_value(r, metrics[m]));
            }
        if (hi - lo <= 0.0) hi = lo + 1.0;
        s += "<g data-metric=\"" + metrics[m] + "\">\n";
        s += "<rect x=\"" + fixed(x0, 1) + "\" y=\"" + fixed(y0, 1) + "\" width=\"" + fixed(pw, 1) + "\" height=\"" + fixed(ph, 1) +
             "\" fill=\"none\" stroke=\"#999\"/>\n";
        s += "<text x=\"" + fixed(x0, 1) + "\" y=\"" + fixed(y0 - 6, 1) + "\" font-size=\"12\">" + metrics[m] + " [" + fixed(lo, 3) + ", " +
             fixed(hi, 3) + "]</text>\n";
        for (std::size_t k = 0; k < series.size(); ++k) {
            std::string pts, vals;
            for (std::size_t i = 0; i < series[k].records.size(); ++i) {
                const double v = metric_value(series[k].records[i], metrics[m]);
                const double x = x0 + pw * static_cast<double>(i) / static_cast<double>(std::max<std::size_t>(1, max_len - 1));
                const double y = y0 + ph - ph * (v - lo) / (hi - lo);
                pts += (i ? " " : "") + fixed(x, 2) + ',' + fixed(y, 2);
                vals += (i ? " " : "") + real(v);
            }
            s += "<polyline data-strategy=\"" + series[k].strategy + "\" data-values=\"" + vals + "\" fill=\"none\" stroke=\"" +
                 colors[k % 6] + "\" points=\"" + pts + "\"/>\n";
        }
        s += "</g>\n";
    }
    for (std::size_t k = 0; k < series.size(); ++k)
        s += "<text x=\"" + fixed(pad, 1) + "\" y=\"" + fixed(rows * (ph + pad) + pad + 20.0 * static_cast<double>(k), 1) + "\" fill=\"" +
             colors[k % 6] + "\" font-size=\"12\">" + series[k].strategy + "</text>\n";
    s += "</svg>\n";
    return s;
}

TableRow table_row(const std::string& strategy, const MetricRecord& last, TrainMode mode)
{
    return {strategy, mode == TrainMode::Unlearn ? 1.0 - last.t_acc : last.t_acc, last.p_acc, last.cd_attn, last.cd_mlp, last.cs_attn,
            last.cs_mlp, last.cc};
}

namespace {

std::vector<std::vector<std::string>> table_cells(std::span<const TableRow> rows, TrainMode mode)
{
    std::vector<std::vector<std::string>> cells;
    if (mode == TrainMode::Unlearn) cells.push_back({"Localization", "FE", "RU", "CD_Attn", "CD_MLP", "CS_Attn", "CS_MLP", "CC"});
    else cells.push_back({"Localization", "T-Acc", "P-Acc", "CD_Attn", "CD_MLP", "CS_Attn", "CS_MLP", "CC"});
    for (const auto& r : rows)
        cells.push_back({r.strategy, fixed(r.acc, 3), fixed(r.perv, 3), fixed(r.cd_attn, 4), fixed(r.cd_mlp, 4), fixed(r.cs_attn, 4),
                         fixed(r.cs_mlp, 4), std::to_string(r.cc)});
    return cells;
}

}  // namespace

std::string render_table(std::span<const TableRow> rows, TrainMode mode)
{
    const auto cells = table_cells(rows, mode);
    std::string s;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        s += '|';
        for (const auto& c : cells[i]) s += ' ' + c + " |";
        s += '\n';
        if (i == 0) {
            s += '|';
            for (std::size_t k = 0; k < cells[0].size(); ++k) s += "---|";
            s += '\n';
        }
    }
    return s;
}

std::string table_csv(std::span<const TableRow> rows, TrainMode mode)
{
    std::string s;
    for (const auto& line : table_cells(rows, mode)) {
        for (std::size_t k = 0; k < line.size(); ++k) s += (k ? "," : "") + line[k];
        s += '\n';
    }
    return s;
}

namespace {

bool diverged_in(const ojson& summary, const std::string& name)
{
    if (!summary.contains("strategies")) return false;
    for (const auto& s : summary["strategies"])
        if (s.value("strategy", "") == name) return s.value("diverged", false);
    return false;
}

struct RunView {
    ojson manifest;
    TrainMode mode = TrainMode::Sft;
    /// (strategy name, directory) in run order
    std::vector<std::pair<std::string, std::string>> strategies;
};

RunView open_run(const fs::path& dir)
{
    RunView v;
    v.manifest = ojson::parse(read_file(dir / "manifest.json"));
    v.mode = parse_config(v.manifest.at("resolved_config").get<std::string>(), "resolved_config").sft.mode;
    for (const auto& s : v.manifest.at("strategies")) v.strategies.emplace_back(s.at("strategy").get<std::string>(), s.at("dir").get<std::string>());
    return v;
}

}  // namespace

Report export_report(const fs::path& run_dir)
{
    const RunView view = open_run(run_dir);
    Report rep;
    rep.mode = view.mode;
    const fs::path out = run_dir / "report";
    for (const auto& [name, sub] : view.strategies) {
        const fs::path metrics = run_dir / sub / "metrics.jsonl";
        if (!fs::exists(metrics)) throw std::runtime_error("missing trajectory " + metrics.string());
        Series s{name, records_from_jsonl(read_file(metrics))};
        if (s.records.empty()) throw std::runtime_error("empty trajectory " + metrics.string());
        write_file(out / (sub + ".csv"), records_to_csv(s.records));
        rep.files.push_back(out / (sub + ".csv"));
        rep.table.push_back(table_row(name, s.records.back(), view.mode));
        rep.series.push_back(std::move(s));
    }
    write_file(out / "trajectories.svg", render_svg(rep.series));
    write_file(out / "comparison.md", render_table(rep.table, view.mode));
    write_file(out / "comparison.csv", table_csv(rep.table, view.mode));
    for (const char* f : {"trajectories.svg", "comparison.md", "comparison.csv"}) rep.files.push_back(out / f);
    return rep;
}

VerifyResult verify_run(const fs::path& run_dir)
{
    VerifyResult v;
    const auto check = [&](bool ok, const std::string& what) {
        ++v.checks;
        if (!ok) v.problems.push_back(what);
    };

    RunView view;
    try {
        view = open_run(run_dir);
    } catch (const std::exception& e) {
        check(false, std::string("manifest: ") + e.what());
        return v;
    }
    for (const auto& [rel, digest] : view.manifest.at("files").items()) {
        const fs::path p = run_dir / rel;
        if (!fs::exists(p)) check(false, rel + ": missing");
        else check(text_digest(read_file(p)) == digest.get<std::string>(), rel + ": digest mismatch");
    }

    const ExperimentConfig cfg = parse_config(view.manifest.at("resolved_config").get<std::string>(), "resolved_config");
    const std::size_t expected = cfg.sft.epochs * cfg.sft.observations_per_epoch + 1;
    std::map<std::string, std::vector<MetricRecord>> trajectories;
    ojson summary;
    try {
        summary = ojson::parse(read_file(run_dir / "summary.json"));
    } catch (const std::exception& e) {
        check(false, std::string("summary.json: ") + e.what());
    }
    for (const auto& [name, sub] : view.strategies) {
        try {
            auto records = records_from_jsonl(read_file(run_dir / sub / "metrics.jsonl"));
            for (const auto& r : records) r.validate();
            const bool diverged = diverged_in(summary, name);
            check(diverged ? records.size() <= expected : records.size() == expected,
                  sub + ": " + std::to_string(records.size()) + " records, expected " + std::to_string(expected));
            trajectories[name] = std::move(records);
        } catch (const std::exception& e) {
            check(false, sub + "/metrics.jsonl: " + e.what());
        }
    }
    for (const auto& s : view.manifest.at("strategies")) {
        const std::string name = s.at("strategy").get<std::string>();
        if (name != "FutureMech") continue;
        const ojson* free = nullptr;
        for (const auto& f : view.manifest.at("strategies"))
            if (f.at("strategy") == "Free") free = &f;
        check(free && free->contains("final_scores_digest"), "FutureMech: no completed Free run");
        if (!free || !free->contains("final_scores_digest")) continue;
        const std::string want = free->at("final_scores_digest").get<std::string>();
        check(s.at("mask_source_digest").get<std::string>() == want, "FutureMech: mask does not derive from the Free run's final scores");
        check(!trajectories["Free"].empty() && trajectories["Free"].back().scores_digest == want, "Free: last record does not match final scores");
        try {
            const TinyFormer base = read_snapshot(run_dir / "snapshots" / "step0.snap");
            const EdgeScores fs_scores = scores_from_json(base.graph(), read_file(run_dir / "free" / "final_scores.json"));
            check(scores_digest(fs_scores) == want, "free/final_scores.json: digest differs from the manifest");
        } catch (const std::exception& e) {
            check(false, std::string("free/final_scores.json: ") + e.what());
        }
    }

    const fs::path rep = run_dir / "report";
    if (fs::exists(rep)) {
        std::vector<TableRow> rows;
        for (const auto& [name, sub] : view.strategies) {
            const auto& records = trajectories[name];
            try {
                check(records_from_csv(read_file(rep / (sub + ".csv"))) == records, "report/" + sub + ".csv: differs from metrics.jsonl");
            } catch (const std::exception& e) {
                check(false, "report/" + sub + ".csv: " + e.what());
            }
            if (!records.empty()) rows.push_back(table_row(name, records.back(), view.mode));
        }
        try {
            check(read_file(rep / "comparison.md") == render_table(rows, view.mode), "report/comparison.md: differs from the final records");
            const std::string svg = read_file(rep / "trajectories.svg");
            const std::regex poly("<polyline data-strategy=\"([^\"]*)\" data-values=\"([^\"]*)\"[^>]*points=\"([^\"]*)\"");
            std::size_t n = 0;
            for (auto it = std::sregex_iterator(svg.begin(), svg.end(), poly); it != std::sregex_iterator(); ++it, ++n) {
                const std::string strategy = (*it)[1];
                const std::string metric = plot_metrics()[n / std::max<std::size_t>(1, view.strategies.size())];
                const auto values = split_line((*it)[2], ' ');
                const auto points = split_line((*it)[3], ' ');
                const auto& records = trajectories[strategy];
                check(values.size() == records.size() && points.size() == records.size(), "svg " + strategy + "/" + metric + ": point count");
                bool same = values.size() == records.size();
                for (std::size_t i = 0; same && i < values.size(); ++i) same = std::stod(values[i]) == metric_value(records[i], metric);
                check(same, "svg " + strategy + "/" + metric + ": values differ from metrics.jsonl");
            }
            check(n == view.strategies.size() * plot_metrics().size(), "svg: expected one polyline per strategy and metric");
        } catch (const std::exception& e) {
            check(false, std::string("report: ") + e.what());
        }
    }
    return v;
}

}  // namespace clab
