#pragma once

// Prompt templates and command phrase pools. The builtin copy mirrors
// assets/prompts.txt; either can be loaded through parse_prompt_assets.

#include <algorithm>
#include <array>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "rdlab/errors.hpp"
#include "rdlab/imgedit.hpp"

namespace rdlab {

enum class CommandSet { with_command, without_command };

/// Prompt layout family. The break style interleaves <break> markers
/// between entities and tags images with <img1>/<img2>.
enum class PromptStyle { plain, breaks };

inline constexpr std::string_view kImg1Marker = "[IMG1]";
inline constexpr std::string_view kImg2Marker = "[IMG2]";
inline constexpr std::string_view kCommandMarker = "[COMMAND]";

struct PromptTemplate {
    int id = 0;
    CommandSet set = CommandSet::with_command;
    PromptStyle style = PromptStyle::plain;
    bool images_at_start = false;
    std::string body;

    friend bool operator==(const PromptTemplate&, const PromptTemplate&) = default;
};

struct PromptAssets {
    std::vector<PromptTemplate> templates;
    // Indexed by [op][sign], sign 0 = positive, 1 = negative.
    std::array<std::array<std::vector<std::string>, 2>, kNumOps> pools;
    std::vector<std::string> prefixes;

    friend bool operator==(const PromptAssets&, const PromptAssets&) = default;

    std::vector<PromptTemplate> templates_for(CommandSet set, PromptStyle style) const
    {
        std::vector<PromptTemplate> out;
        for (const auto& t : templates) {
            if (t.set == set && t.style == style) {
                out.push_back(t);
            }
        }
        std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
        return out;
    }

    const std::vector<std::string>& pool(OpName op, bool negative) const
    {
        return pools[static_cast<std::size_t>(op)][negative ? 1 : 0];
    }
};

inline std::size_t count_occurrences(std::string_view text, std::string_view needle)
{
    std::size_t n = 0;
    for (auto pos = text.find(needle); pos != std::string_view::npos; pos = text.find(needle, pos + needle.size())) {
        ++n;
    }
    return n;
}

namespace detail {

inline std::vector<std::string> split_fields(const std::string& line, std::size_t max_fields)
{
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (fields.size() + 1 < max_fields) {
        const auto bar = line.find('|', start);
        if (bar == std::string::npos) {
            break;
        }
        fields.push_back(line.substr(start, bar - start));
        start = bar + 1;
    }
    fields.push_back(line.substr(start));
    return fields;
}

inline bool has_digit(std::string_view s)
{
    return std::any_of(s.begin(), s.end(), [](unsigned char c) { return std::isdigit(c) != 0; });
}

} // namespace detail

inline void validate_prompt_assets(const PromptAssets& assets)
{
    for (const auto& t : assets.templates) {
        const std::string where = "template " + std::to_string(t.id);
        if (count_occurrences(t.body, kImg1Marker) != 1 || count_occurrences(t.body, kImg2Marker) != 1) {
            throw TemplateError(where + ": [IMG1] and [IMG2] must each appear exactly once");
        }
        const auto commands = count_occurrences(t.body, kCommandMarker);
        if (commands != (t.set == CommandSet::with_command ? 1u : 0u)) {
            throw TemplateError(where + ": [COMMAND] must appear exactly once iff the set carries commands");
        }
    }
    for (auto set : {CommandSet::with_command, CommandSet::without_command}) {
        for (auto style : {PromptStyle::plain, PromptStyle::breaks}) {
            const auto list = assets.templates_for(set, style);
            if (list.empty() && style == PromptStyle::breaks) {
                continue;
            }
            if (list.size() != 8) {
                throw TemplateError("each template set needs exactly 8 templates");
            }
            for (std::size_t i = 0; i < list.size(); ++i) {
                if (list[i].id != static_cast<int>(i) + 1) {
                    throw TemplateError("template ids must be 1..8");
                }
            }
            const auto at_start = std::count_if(list.begin(), list.end(), [](const auto& t) { return t.images_at_start; });
            if (at_start != 4) {
                throw TemplateError("exactly 4 templates per set must place images at the start");
            }
        }
    }
    for (std::size_t op = 0; op < kNumOps; ++op) {
        for (int s = 0; s < 2; ++s) {
            if (assets.pools[op][s].size() < 3) {
                throw TemplateError("phrase pool for " + std::string(kOpNames[op]) + (s ? "-" : "+") +
                                    " needs at least 3 phrases");
            }
            for (const auto& p : assets.pools[op][s]) {
                if (detail::has_digit(p) || p.empty()) {
                    throw TemplateError("phrase '" + p + "' must be non-empty and digit-free");
                }
            }
        }
    }
    if (assets.prefixes.empty()) {
        throw TemplateError("at least one command prefix is required");
    }
    for (const auto& p : assets.prefixes) {
        if (detail::has_digit(p)) {
            throw TemplateError("prefix '" + p + "' contains digits");
        }
    }
}

inline PromptAssets parse_prompt_assets(std::string_view text)
{
    PromptAssets assets;
    std::istringstream in{std::string(text)};
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.empty() || line[0] == '#') {
            continue;
        }
        const std::string where = "prompt assets line " + std::to_string(line_no);
        if (line.rfind("prefix|", 0) == 0) {
            assets.prefixes.push_back(line.substr(7));
            continue;
        }
        const auto f = detail::split_fields(line, 4);
        if (f.size() != 4) {
            throw TemplateError(where + ": expected 4 '|'-separated fields");
        }
        if (f[0] == "pool") {
            const OpName op = parse_op(f[1]);
            if (f[2] != "+" && f[2] != "-") {
                throw TemplateError(where + ": pool sign must be + or -");
            }
            assets.pools[static_cast<std::size_t>(op)][f[2] == "-" ? 1 : 0].push_back(f[3]);
            continue;
        }
        PromptTemplate t;
        if (f[0] == "with_command" || f[0] == "with_command_break") {
            t.set = CommandSet::with_command;
        } else if (f[0] == "without_command" || f[0] == "without_command_break") {
            t.set = CommandSet::without_command;
        } else {
            throw TemplateError(where + ": unknown set '" + f[0] + "'");
        }
        t.style = f[0].ends_with("_break") ? PromptStyle::breaks : PromptStyle::plain;
        try {
            t.id = std::stoi(f[1]);
        } catch (const std::exception&) {
            throw TemplateError(where + ": bad template id");
        }
        if (f[2] != "true" && f[2] != "false") {
            throw TemplateError(where + ": images_at_start must be true or false");
        }
        t.images_at_start = f[2] == "true";
        t.body = f[3];
        assets.templates.push_back(std::move(t));
    }
    validate_prompt_assets(assets);
    return assets;
}

inline PromptAssets load_prompt_assets(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot open prompt assets " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_prompt_assets(ss.str());
}

inline constexpr std::string_view kBuiltinPromptAssets = R"ASSETS(# Prompt templates and command phrase pools.
# Template lines: set|id|images_at_start|body
# Pool lines:     pool|<op>|<+ or ->|phrase
# Prefix lines:   prefix|words (may be empty)
with_command|1|true|[IMG1] [IMG2] What edits transform the first image into the second? [COMMAND]
with_command|2|true|[IMG1] [IMG2] The request was: [COMMAND]. Which operations were applied?
with_command|3|true|[IMG1] [IMG2] Describe the adjustments that turn the source into the result given the idea: [COMMAND]
with_command|4|true|[IMG1] [IMG2] Given the edit idea [COMMAND], list the operations and their values.
with_command|5|false|Here is the source [IMG1] and here is the edited version [IMG2]. The editor was told: [COMMAND]. What was done?
with_command|6|false|An editor received the note [COMMAND] and turned [IMG1] into [IMG2]. Which edits were applied?
with_command|7|false|Source image: [IMG1] Instruction: [COMMAND] Edited image: [IMG2] List the edits.
with_command|8|false|Compare [IMG1] with [IMG2] knowing that the idea was: [COMMAND]. What operations were used?
without_command|1|true|[IMG1] [IMG2] What edits transform the first image into the second?
without_command|2|true|[IMG1] [IMG2] Which operations were applied to the first image?
without_command|3|true|[IMG1] [IMG2] Describe the adjustments that turn the source into the result.
without_command|4|true|[IMG1] [IMG2] List the operations and their values.
without_command|5|false|Given the source [IMG1] and the result [IMG2], list the operations applied.
without_command|6|false|Here is the source [IMG1] and here is the edited version [IMG2]. What was done?
without_command|7|false|Source image: [IMG1] Edited image: [IMG2] List the edits.
without_command|8|false|Compare [IMG1] with [IMG2]. What operations were used?
with_command_break|1|true|<img1> [IMG1] <break> <img2> [IMG2] <break> What edits transform the first image into the second? <break> [COMMAND]
with_command_break|2|true|<img1> [IMG1] <break> <img2> [IMG2] <break> The request was: [COMMAND] <break> Which operations were applied?
with_command_break|3|true|<img1> [IMG1] <break> <img2> [IMG2] <break> Describe the adjustments that turn the source into the result given the idea: <break> [COMMAND]
with_command_break|4|true|<img1> [IMG1] <break> <img2> [IMG2] <break> Given the edit idea <break> [COMMAND] <break> list the operations and their values.
with_command_break|5|false|Source <break> <img1> [IMG1] <break> edited version <break> <img2> [IMG2] <break> The editor was told: <break> [COMMAND] <break> What was done?
with_command_break|6|false|An editor received the note <break> [COMMAND] <break> and turned <break> <img1> [IMG1] <break> into <break> <img2> [IMG2] <break> Which edits were applied?
with_command_break|7|false|Source image: <break> <img1> [IMG1] <break> Instruction: <break> [COMMAND] <break> Edited image: <break> <img2> [IMG2] <break> List the edits.
with_command_break|8|false|Compare <break> <img1> [IMG1] <break> with <break> <img2> [IMG2] <break> knowing that the idea was: <break> [COMMAND] <break> What operations were used?
without_command_break|1|true|<img1> [IMG1] <break> <img2> [IMG2] <break> What edits transform the first image into the second?
without_command_break|2|true|<img1> [IMG1] <break> <img2> [IMG2] <break> Which operations were applied to the first image?
without_command_break|3|true|<img1> [IMG1] <break> <img2> [IMG2] <break> Describe the adjustments that turn the source into the result.
without_command_break|4|true|<img1> [IMG1] <break> <img2> [IMG2] <break> List the operations and their values.
without_command_break|5|false|Given the source <break> <img1> [IMG1] <break> and the result <break> <img2> [IMG2] <break> list the operations applied.
without_command_break|6|false|Here is the source <break> <img1> [IMG1] <break> and here is the edited version <break> <img2> [IMG2] <break> What was done?
without_command_break|7|false|Source image: <break> <img1> [IMG1] <break> Edited image: <break> <img2> [IMG2] <break> List the edits.
without_command_break|8|false|Compare <break> <img1> [IMG1] <break> with <break> <img2> [IMG2] <break> What operations were used?
pool|brightness|+|make it brighter
pool|brightness|+|lift the exposure
pool|brightness|+|lighten the scene
pool|brightness|-|make it darker
pool|brightness|-|dim the picture
pool|brightness|-|darken the scene
pool|contrast|+|add more punch
pool|contrast|+|make the tones pop
pool|contrast|+|increase the drama
pool|contrast|-|flatten the tones
pool|contrast|-|soften the look
pool|contrast|-|make it look hazy
pool|saturation|+|make the colors vivid
pool|saturation|+|boost the colors
pool|saturation|+|make it more colorful
pool|saturation|-|mute the colors
pool|saturation|-|wash it out
pool|saturation|-|fade the colors
pool|hue|+|shift the tint forward
pool|hue|+|turn the color cast around
pool|hue|+|give it an odd tint
pool|hue|-|shift the tint backward
pool|hue|-|turn the color cast back
pool|hue|-|give it a strange cast
pool|gamma|+|open up the midtones
pool|gamma|+|brighten the middle tones
pool|gamma|+|recover the shadow detail
pool|gamma|-|deepen the midtones
pool|gamma|-|make the middle tones heavier
pool|gamma|-|crush the midtones
prefix|
prefix|I want to
prefix|Please
prefix|Let's
)ASSETS";

inline const PromptAssets& builtin_prompt_assets()
{
    static const PromptAssets assets = parse_prompt_assets(kBuiltinPromptAssets);
    return assets;
}

} // namespace rdlab
