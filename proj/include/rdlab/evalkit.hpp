#pragma once

// Output parsing, the intersection accuracy and zero-fill parameter MSE,
// and Table-1-shaped reporting.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <optional>
#include <regex>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "rdlab/imgedit.hpp"

namespace rdlab {

struct ParsedPrediction {
    std::vector<EditOp> ops;  // unique names, first occurrence wins
    bool malformed = false;
    std::string raw;

    std::optional<double> value_of(OpName name) const
    {
        for (const auto& op : ops) {
            if (op.name == name) {
                return op.value;
            }
        }
        return std::nullopt;
    }
};

inline ParsedPrediction parse_output(std::string_view text)
{
    static const std::regex pair_re(R"(\b(brightness|contrast|saturation|hue|gamma) with value (-?[0-9]\.[0-9]{2}))");
    static const std::regex name_re(R"(\b(brightness|contrast|saturation|hue|gamma)\b)");
    static const std::regex value_re(R"(-?[0-9]\.[0-9]{2})");

    ParsedPrediction out;
    out.raw = std::string(text);
    const std::string& s = out.raw;

    // Character spans covered by well-formed (name, value) pairs.
    std::vector<std::pair<std::size_t, std::size_t>> covered;
    for (auto it = std::sregex_iterator(s.begin(), s.end(), pair_re); it != std::sregex_iterator(); ++it) {
        const auto& m = *it;
        covered.emplace_back(static_cast<std::size_t>(m.position(0)), static_cast<std::size_t>(m.position(0) + m.length(0)));
        const OpName name = parse_op(m.str(1));
        if (!out.value_of(name)) {
            out.ops.push_back({name, std::stod(m.str(2))});
        }
    }
    auto inside = [&](std::size_t pos) {
        return std::any_of(covered.begin(), covered.end(), [pos](const auto& c) { return pos >= c.first && pos < c.second; });
    };
    for (auto it = std::sregex_iterator(s.begin(), s.end(), name_re); it != std::sregex_iterator(); ++it) {
        if (!inside(static_cast<std::size_t>(it->position(0)))) {
            out.malformed = true;
        }
    }
    for (auto it = std::sregex_iterator(s.begin(), s.end(), value_re); it != std::sregex_iterator(); ++it) {
        if (!inside(static_cast<std::size_t>(it->position(0)))) {
            out.malformed = true;
        }
    }
    return out;
}

/// |pred names ∩ gt names| / |gt|; values and extra predictions are ignored.
inline double accuracy(const ParsedPrediction& pred, const EditSpec& gt)
{
    if (gt.ops.empty()) {
        return 0.0;
    }
    std::size_t hit = 0;
    for (const auto& op : gt.ops) {
        if (pred.value_of(op.name)) {
            ++hit;
        }
    }
    return static_cast<double>(hit) / static_cast<double>(gt.ops.size());
}

/// Mean over gt ops of (pred - gt)^2 with missing predictions read as 0.
inline double param_mse(const ParsedPrediction& pred, const EditSpec& gt)
{
    if (gt.ops.empty()) {
        return 0.0;
    }
    double sum = 0.0;
    for (const auto& op : gt.ops) {
        const double d = pred.value_of(op.name).value_or(0.0) - op.value;
        sum += d * d;
    }
    return sum / static_cast<double>(gt.ops.size());
}

inline std::size_t spurious_ops(const ParsedPrediction& pred, const EditSpec& gt)
{
    return static_cast<std::size_t>(
        std::count_if(pred.ops.begin(), pred.ops.end(), [&](const EditOp& op) { return !gt.contains(op.name); }));
}

struct PartitionStats {
    std::string name;
    std::size_t count = 0;
    std::size_t malformed = 0;
    double accuracy_sum = 0.0;
    double mse_sum = 0.0;
    double spurious_sum = 0.0;

    double accuracy() const { return count ? accuracy_sum / static_cast<double>(count) : 0.0; }
    double mse() const { return count ? mse_sum / static_cast<double>(count) : 0.0; }
    double spurious() const { return count ? spurious_sum / static_cast<double>(count) : 0.0; }

    void add(double acc, double mse, bool is_malformed, std::size_t spurious)
    {
        ++count;
        accuracy_sum += acc;
        mse_sum += mse;
        spurious_sum += static_cast<double>(spurious);
        malformed += is_malformed ? 1 : 0;
    }
};

enum Partition : std::size_t {
    kAll,
    kWithCommand,
    kWithoutCommand,
    kCmdLen0,
    kCmdLen1to4,
    kCmdLen5to8,
    kCmdLen9Plus,
    kNumPartitions,
};

inline constexpr std::array<std::string_view, kNumPartitions> kPartitionNames = {
    "all", "with_command", "without_command", "cmd_len_0", "cmd_len_1_4", "cmd_len_5_8", "cmd_len_9_plus"};

/// Bucket by the word count of the command actually placed in the prompt
/// (0 for prompts without a command).
inline Partition length_bucket(std::size_t words)
{
    if (words == 0) return kCmdLen0;
    if (words <= 4) return kCmdLen1to4;
    if (words <= 8) return kCmdLen5to8;
    return kCmdLen9Plus;
}

inline std::size_t word_count(std::string_view s)
{
    std::size_t n = 0;
    bool in_word = false;
    for (unsigned char c : s) {
        const bool space = std::isspace(c) != 0;
        if (!space && !in_word) {
            ++n;
        }
        in_word = !space;
    }
    return n;
}

struct MetricsReport {
    std::array<PartitionStats, kNumPartitions> parts;

    MetricsReport()
    {
        for (std::size_t i = 0; i < kNumPartitions; ++i) {
            parts[i].name = std::string(kPartitionNames[i]);
        }
    }

    void add(bool with_command, std::size_t command_words, double acc, double mse, bool malformed, std::size_t spurious)
    {
        parts[kAll].add(acc, mse, malformed, spurious);
        parts[with_command ? kWithCommand : kWithoutCommand].add(acc, mse, malformed, spurious);
        parts[length_bucket(with_command ? command_words : 0)].add(acc, mse, malformed, spurious);
    }

    const PartitionStats& operator[](Partition p) const { return parts[p]; }

    double malformed_rate() const
    {
        return parts[kAll].count ? static_cast<double>(parts[kAll].malformed) / static_cast<double>(parts[kAll].count) : 0.0;
    }
};

inline constexpr std::array<std::string_view, 6> kTableColumns = {
    "Accuracy(Average)↑",         "MSE(Average)↓",
    "Accuracy(With Command)↑",    "MSE(With Command)↓",
    "Accuracy(Without Command)↑", "MSE(Without Command)↓",
};

/// One table row: accuracies are fractions in [0,1], rendered as percentages.
struct TableRow {
    std::string label;
    std::array<double, 6> values{};
};

inline TableRow table_row(std::string label, const MetricsReport& r)
{
    return {std::move(label),
            {r[kAll].accuracy(), r[kAll].mse(), r[kWithCommand].accuracy(), r[kWithCommand].mse(),
             r[kWithoutCommand].accuracy(), r[kWithoutCommand].mse()}};
}

inline std::string format_cell(std::size_t column, double v)
{
    char buf[32];
    if (column % 2 == 0) {
        std::snprintf(buf, sizeof buf, "%.2f", v * 100.0);
    } else {
        std::snprintf(buf, sizeof buf, "%.4f", v);
    }
    return buf;
}

namespace detail {

// Display width of a UTF-8 string (counts code points).
inline std::size_t display_width(std::string_view s)
{
    return static_cast<std::size_t>(std::count_if(s.begin(), s.end(), [](char c) { return (static_cast<unsigned char>(c) & 0xC0) != 0x80; }));
}

inline std::string pad(std::string_view s, std::size_t width)
{
    std::string out(s);
    for (std::size_t w = display_width(s); w < width; ++w) {
        out += ' ';
    }
    return out;
}

} // namespace detail

/// Index of the best row per column (max accuracy, min MSE; earliest row on ties).
inline std::array<std::size_t, 6> best_per_column(const std::vector<TableRow>& rows)
{
    std::array<std::size_t, 6> best{};
    for (std::size_t c = 0; c < 6; ++c) {
        for (std::size_t r = 1; r < rows.size(); ++r) {
            // Compare at printed precision so the marking agrees with what is shown.
            const double cur = std::stod(format_cell(c, rows[r].values[c]));
            const double top = std::stod(format_cell(c, rows[best[c]].values[c]));
            if (c % 2 == 0 ? cur > top : cur < top) {
                best[c] = r;
            }
        }
    }
    return best;
}

/// Plain-text aligned table; with `mark_best`, the best cell per column gets a '*'.
inline std::string render_table(const std::vector<TableRow>& rows, bool mark_best)
{
    const std::string first_header = "Experiments/Metrics";
    std::array<std::size_t, 7> width{};
    width[0] = first_header.size();
    for (const auto& r : rows) {
        width[0] = std::max(width[0], detail::display_width(r.label));
    }
    for (std::size_t c = 0; c < 6; ++c) {
        width[c + 1] = std::max<std::size_t>(detail::display_width(kTableColumns[c]), 10);
    }
    const auto best = rows.empty() ? std::array<std::size_t, 6>{} : best_per_column(rows);

    auto line = [&](const std::array<std::string, 7>& cells) {
        std::string out = "|";
        for (std::size_t i = 0; i < 7; ++i) {
            out += " " + detail::pad(cells[i], width[i]) + " |";
        }
        return out + "\n";
    };
    auto rule = [&] {
        std::string out = "+";
        for (auto w : width) {
            out += std::string(w + 2, '-') + "+";
        }
        return out + "\n";
    };

    std::string out = rule();
    std::array<std::string, 7> header;
    header[0] = first_header;
    for (std::size_t c = 0; c < 6; ++c) {
        header[c + 1] = std::string(kTableColumns[c]);
    }
    out += line(header) + rule();
    for (std::size_t r = 0; r < rows.size(); ++r) {
        std::array<std::string, 7> cells;
        cells[0] = rows[r].label;
        for (std::size_t c = 0; c < 6; ++c) {
            cells[c + 1] = format_cell(c, rows[r].values[c]);
            if (mark_best && best[c] == r) {
                cells[c + 1] += "*";
            }
        }
        out += line(cells);
    }
    out += rule();
    return out;
}

inline nlohmann::ordered_json report_json(const MetricsReport& r)
{
    nlohmann::ordered_json parts = nlohmann::ordered_json::object();
    for (const auto& p : r.parts) {
        parts[p.name] = {
            {"count", p.count},
            {"malformed", p.malformed},
            {"accuracy", p.accuracy()},
            {"mse", p.mse()},
            {"spurious_ops_mean", p.spurious()},
        };
    }
    return parts;
}

inline std::string render_report(const std::string& label, const MetricsReport& r)
{
    std::string out = render_table({table_row(label, r)}, false);
    out += "\nPartitions\n";
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-16s %8s %10s %10s %10s %10s\n", "partition", "count", "accuracy", "mse", "malformed",
                  "spurious");
    out += buf;
    for (const auto& p : r.parts) {
        std::snprintf(buf, sizeof buf, "%-16s %8zu %10s %10s %10zu %10.4f\n", p.name.c_str(), p.count,
                      format_cell(0, p.accuracy()).c_str(), format_cell(1, p.mse()).c_str(), p.malformed, p.spurious());
        out += buf;
    }
    return out;
}

} // namespace rdlab
