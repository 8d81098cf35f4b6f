#pragma once

#include "ttadapt/error.hpp"
#include "ttadapt/train.hpp"

#include <charconv>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

namespace ttadapt {

inline constexpr std::string_view kMetricsHeader =
    "epoch,step,split,task_id,loss,train_loss,metric,ranks,param_count,grad_norms,wallclock_s,swept";

/// One CSV line. `loss`/`metric` are the eval split values; `train_loss` is
/// the epoch's mean minibatch loss.
struct MetricsRow {
    std::size_t epoch = 0;
    std::size_t step = 0;
    std::string split = "eval";
    std::size_t task_id = 0;
    double loss = 0.0;
    double train_loss = 0.0;
    double metric = 0.0;
    std::vector<std::size_t> ranks;
    std::size_t param_count = 0;
    std::vector<CoreGradNorm> grad_norms;
    double wallclock_s = 0.0;
    bool swept = false;

    bool operator==(const MetricsRow&) const = default;
};

inline std::vector<MetricsRow> to_metrics_rows(const TrainReport& report) {
    std::vector<MetricsRow> out;
    for (const auto& r : report.rows) {
        out.push_back({r.epoch, r.step, "eval", r.task_id, r.eval_loss, r.train_loss, r.eval_metric, r.ranks,
                       r.param_count, r.grad_norms, r.wallclock_s, r.swept});
    }
    return out;
}

/// Shortest decimal string that parses back to exactly `v`.
inline std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

namespace detail {

inline std::vector<std::string_view> split_view(std::string_view s, char sep) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t pos = s.find(sep, start);
        out.push_back(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

template <typename T>
T parse_number(std::string_view s, std::string_view what) {
    T v{};
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
        throw IoError("metrics: cannot parse " + std::string(what) + " from '" + std::string(s) + "'");
    }
    return v;
}

} // namespace detail

inline std::string format_metrics_row(const MetricsRow& r) {
    std::string line = std::to_string(r.epoch) + "," + std::to_string(r.step) + "," + r.split + "," +
                       std::to_string(r.task_id) + "," + format_double(r.loss) + "," + format_double(r.train_loss) +
                       "," + format_double(r.metric) + ",";
    for (std::size_t i = 0; i < r.ranks.size(); ++i) line += (i ? ";" : "") + std::to_string(r.ranks[i]);
    line += "," + std::to_string(r.param_count) + ",";
    for (std::size_t i = 0; i < r.grad_norms.size(); ++i)
        line += (i ? ";" : "") + r.grad_norms[i].name + "=" + format_double(r.grad_norms[i].value);
    line += "," + format_double(r.wallclock_s) + "," + (r.swept ? "1" : "0");
    return line;
}

inline MetricsRow parse_metrics_row(std::string_view line) {
    const auto f = detail::split_view(line, ',');
    if (f.size() != 12) throw IoError("metrics: expected 12 fields, got " + std::to_string(f.size()));
    MetricsRow r;
    r.epoch = detail::parse_number<std::size_t>(f[0], "epoch");
    r.step = detail::parse_number<std::size_t>(f[1], "step");
    r.split = std::string(f[2]);
    r.task_id = detail::parse_number<std::size_t>(f[3], "task_id");
    r.loss = detail::parse_number<double>(f[4], "loss");
    r.train_loss = detail::parse_number<double>(f[5], "train_loss");
    r.metric = detail::parse_number<double>(f[6], "metric");
    if (!f[7].empty())
        for (auto part : detail::split_view(f[7], ';')) r.ranks.push_back(detail::parse_number<std::size_t>(part, "rank"));
    r.param_count = detail::parse_number<std::size_t>(f[8], "param_count");
    if (!f[9].empty()) {
        for (auto part : detail::split_view(f[9], ';')) {
            const std::size_t eq = part.rfind('=');
            if (eq == std::string_view::npos) throw IoError("metrics: grad norm entry without '=': " + std::string(part));
            r.grad_norms.push_back({std::string(part.substr(0, eq)), detail::parse_number<double>(part.substr(eq + 1), "grad norm")});
        }
    }
    r.wallclock_s = detail::parse_number<double>(f[10], "wallclock_s");
    if (f[11] != "0" && f[11] != "1") throw IoError("metrics: swept must be 0 or 1");
    r.swept = f[11] == "1";
    return r;
}

inline void write_metrics(const std::vector<MetricsRow>& rows, const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("metrics: cannot open '" + path.string() + "' for writing");
    f << kMetricsHeader << '\n';
    for (const auto& r : rows) f << format_metrics_row(r) << '\n';
    if (!f) throw IoError("metrics: write failed for '" + path.string() + "'");
}

inline void write_metrics(const TrainReport& report, const std::filesystem::path& path) {
    write_metrics(to_metrics_rows(report), path);
}

inline std::vector<MetricsRow> read_metrics(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("metrics: cannot open '" + path.string() + "'");
    std::string line;
    if (!std::getline(f, line) || line != kMetricsHeader) throw IoError("metrics: missing or unexpected header in '" + path.string() + "'");
    std::vector<MetricsRow> rows;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        rows.push_back(parse_metrics_row(line));
    }
    return rows;
}

} // namespace ttadapt
