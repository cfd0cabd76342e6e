#pragma once

// Synthetic triplet corpus: (source image, edited image, vague command)
// with the ground-truth edit spec rendered as an answer sentence.

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "rdlab/assets.hpp"
#include "rdlab/errors.hpp"
#include "rdlab/imgedit.hpp"
#include "rdlab/png_io.hpp"
#include "rdlab/rng.hpp"

namespace rdlab {

inline constexpr std::string_view kGeneratorVersion = "rdlab-gen/1";

enum class Split { train, val, test };

inline std::string_view split_name(Split s)
{
    switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    }
    return "train";
}

inline Split parse_split(std::string_view s)
{
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    throw ConfigError("unknown split '" + std::string(s) + "'");
}

struct GenConfig {
    // Probability of 1, 2 and 3 ops per record.
    std::array<double, 3> op_count_weights = {0.5, 0.3, 0.2};
    double min_abs_value = 0.1;
    double max_abs_value = 1.0;

    static GenConfig single_op_only()
    {
        GenConfig c;
        c.op_count_weights = {1.0, 0.0, 0.0};
        return c;
    }
};

struct TripletRecord {
    std::string id;
    std::uint64_t seed = 0;
    EditSpec spec;
    std::string command;
    Split split = Split::train;
    std::string source_png;
    std::string edited_png;

    friend bool operator==(const TripletRecord&, const TripletRecord&) = default;
};

inline Image source_image(const TripletRecord& r) { return synth_image(r.seed); }
inline Image edited_image(const TripletRecord& r) { return apply_spec(source_image(r), r.spec); }

// `-?d.dd`
inline std::string format_value(double value)
{
    const long h = hundredths(value);
    const long a = h < 0 ? -h : h;
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s%ld.%02ld", h < 0 ? "-" : "", a / 100, a % 100);
    return buf;
}

inline std::string render_ground_truth(const EditSpec& spec)
{
    std::string out;
    if (spec.ops.size() == 1) {
        out = "The edit applied ";
        out += op_name(spec.ops[0].name);
        out += " with value " + format_value(spec.ops[0].value) + ".";
        return out;
    }
    out = "The edits applied were: ";
    for (std::size_t i = 0; i < spec.ops.size(); ++i) {
        if (i > 0) {
            out += ", ";
        }
        out += op_name(spec.ops[i].name);
        out += " with value " + format_value(spec.ops[i].value);
    }
    out += ".";
    return out;
}

/// Sign-keyed vague phrase per op, joined with "and" in random order,
/// with a random style prefix. Never mentions values.
inline std::string gen_command(const EditSpec& spec, std::uint64_t seed,
                               const PromptAssets& assets = builtin_prompt_assets())
{
    Rng rng(mix_seed(seed, 0xc0aa4dULL));
    std::vector<std::string> phrases;
    for (const auto& op : spec.ops) {
        const auto& pool = assets.pool(op.name, op.value < 0);
        phrases.push_back(pool[rng.below(pool.size())]);
    }
    rng.shuffle(phrases.begin(), phrases.end());
    const auto& prefix = assets.prefixes[rng.below(assets.prefixes.size())];
    std::string out = prefix;
    for (std::size_t i = 0; i < phrases.size(); ++i) {
        if (!out.empty()) {
            out += i == 0 ? " " : " and ";
        }
        out += phrases[i];
    }
    return out;
}

inline std::string record_id(std::uint64_t index)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "rec-%06llu", static_cast<unsigned long long>(index));
    return buf;
}

inline EditSpec gen_spec(Rng& rng, const GenConfig& config)
{
    const double u = rng.uniform();
    const double total = config.op_count_weights[0] + config.op_count_weights[1] + config.op_count_weights[2];
    int count = 3;
    double acc = 0.0;
    for (int i = 0; i < 3; ++i) {
        acc += config.op_count_weights[i] / total;
        if (u < acc) {
            count = i + 1;
            break;
        }
    }
    std::array<OpName, kNumOps> names = kAllOps;
    rng.shuffle(names.begin(), names.end());

    const long lo = std::lround(config.min_abs_value * 100.0);
    const long hi = std::lround(config.max_abs_value * 100.0);
    EditSpec spec;
    for (int i = 0; i < count; ++i) {
        const double magnitude = rng.uniform(config.min_abs_value, config.max_abs_value);
        const long h = std::clamp(std::lround(magnitude * 100.0), lo, hi);
        const double value = (rng.coin() ? -1.0 : 1.0) * static_cast<double>(h) / 100.0;
        spec.ops.push_back({names[static_cast<std::size_t>(i)], value});
    }
    return spec;
}

inline TripletRecord gen_record(std::uint64_t global_seed, std::uint64_t index, const GenConfig& config = {},
                                const PromptAssets& assets = builtin_prompt_assets())
{
    TripletRecord r;
    r.id = record_id(index);
    r.seed = mix_seed(global_seed, index);
    Rng rng(mix_seed(r.seed, 0x59ecULL));
    r.spec = gen_spec(rng, config);
    r.command = gen_command(r.spec, r.seed, assets);
    r.source_png = "images/" + r.id + "_src.png";
    r.edited_png = "images/" + r.id + "_edit.png";
    return r;
}

/// Seeded permutation; first floor(0.8n) train, next floor(0.1n) val, rest test.
inline std::vector<Split> split_assign(std::size_t n, std::uint64_t seed)
{
    if (n < 10) {
        throw ConfigError("split_assign needs at least 10 records, got " + std::to_string(n));
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(mix_seed(seed, 0x5b117ULL));
    rng.shuffle(order.begin(), order.end());
    const std::size_t n_train = n * 8 / 10;
    const std::size_t n_val = n / 10;
    std::vector<Split> out(n, Split::test);
    for (std::size_t i = 0; i < n; ++i) {
        out[order[i]] = i < n_train ? Split::train : (i < n_train + n_val ? Split::val : Split::test);
    }
    return out;
}

struct Manifest {
    std::vector<TripletRecord> records;
    std::string generator_version = std::string(kGeneratorVersion);
    std::uint64_t global_seed = 0;
    std::vector<std::string> op_vocabulary;

    friend bool operator==(const Manifest&, const Manifest&) = default;

    std::vector<const TripletRecord*> split(Split s) const
    {
        std::vector<const TripletRecord*> out;
        for (const auto& r : records) {
            if (r.split == s) {
                out.push_back(&r);
            }
        }
        return out;
    }
};

inline std::vector<std::string> op_vocabulary()
{
    return {kOpNames.begin(), kOpNames.end()};
}

inline Manifest generate_manifest(std::size_t n, std::uint64_t global_seed, const GenConfig& config = {},
                                  const PromptAssets& assets = builtin_prompt_assets())
{
    Manifest m;
    m.global_seed = global_seed;
    m.op_vocabulary = op_vocabulary();
    const auto splits = split_assign(n, global_seed);
    m.records.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        auto r = gen_record(global_seed, i, config, assets);
        r.split = splits[i];
        m.records.push_back(std::move(r));
    }
    return m;
}

inline std::string manifest_line(const TripletRecord& r)
{
    using nlohmann::json;
    std::string s = "{\"id\":" + json(r.id).dump() + ",\"seed\":" + std::to_string(r.seed) + ",\"ops\":[";
    for (std::size_t i = 0; i < r.spec.ops.size(); ++i) {
        if (i > 0) {
            s += ",";
        }
        s += "{\"name\":" + json(std::string(op_name(r.spec.ops[i].name))).dump() +
             ",\"value\":" + format_value(r.spec.ops[i].value) + "}";
    }
    s += "],\"command\":" + json(r.command).dump() + ",\"split\":" + json(std::string(split_name(r.split))).dump() +
         ",\"source_png\":" + json(r.source_png).dump() + ",\"edited_png\":" + json(r.edited_png).dump() +
         ",\"answer_text\":" + json(render_ground_truth(r.spec)).dump() + "}";
    return s;
}

inline std::string manifest_text(const Manifest& m)
{
    std::string out;
    for (const auto& r : m.records) {
        out += manifest_line(r);
        out += '\n';
    }
    return out;
}

inline std::string hex64(std::uint64_t v)
{
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

inline std::string manifest_hash(const Manifest& m) { return hex64(fnv1a64(manifest_text(m))); }

inline void write_manifest(const Manifest& m, const std::filesystem::path& dir)
{
    namespace fs = std::filesystem;
    fs::create_directories(dir / "images");
    for (const auto& r : m.records) {
        const Image src = source_image(r);
        write_png(dir / r.source_png, src);
        write_png(dir / r.edited_png, apply_spec(src, r.spec));
    }
    {
        std::ofstream out(dir / "manifest.jsonl", std::ios::binary);
        out << manifest_text(m);
        if (!out) {
            throw DataIntegrityError("cannot write " + (dir / "manifest.jsonl").string());
        }
    }
    nlohmann::ordered_json meta;
    meta["generator_version"] = m.generator_version;
    meta["global_seed"] = m.global_seed;
    meta["op_vocabulary"] = m.op_vocabulary;
    meta["records"] = m.records.size();
    std::ofstream out(dir / "meta.json", std::ios::binary);
    out << meta.dump(2) << '\n';
}

namespace detail {

inline TripletRecord parse_manifest_line(const std::string& line, int line_no)
{
    const std::string where = "manifest.jsonl line " + std::to_string(line_no);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error&) {
        throw DataIntegrityError(where + ": malformed record");
    }
    TripletRecord r;
    try {
        r.id = j.at("id").get<std::string>();
        r.seed = j.at("seed").get<std::uint64_t>();
        for (const auto& op : j.at("ops")) {
            r.spec.ops.push_back({parse_op(op.at("name").get<std::string>()),
                                  static_cast<double>(hundredths(op.at("value").get<double>())) / 100.0});
        }
        r.command = j.at("command").get<std::string>();
        r.split = parse_split(j.at("split").get<std::string>());
        r.source_png = j.at("source_png").get<std::string>();
        r.edited_png = j.at("edited_png").get<std::string>();
        const auto answer = j.at("answer_text").get<std::string>();
        r.spec.validate();
        if (answer != render_ground_truth(r.spec)) {
            throw DataIntegrityError("record " + r.id + ": answer_text disagrees with ops");
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataIntegrityError(where + ": " + e.what());
    } catch (const Error& e) {
        throw DataIntegrityError(where + (r.id.empty() ? "" : " (record " + r.id + ")") + ": " + e.what());
    }
    return r;
}

} // namespace detail

/// Loads a manifest directory. With `verify`, every stored PNG pair is
/// checked byte-for-byte against the images regenerated from the record.
inline Manifest read_manifest(const std::filesystem::path& dir, bool verify = false)
{
    namespace fs = std::filesystem;
    Manifest m;
    const auto meta_path = dir / "meta.json";
    if (!fs::exists(meta_path)) {
        throw DataIntegrityError("missing " + meta_path.string());
    }
    try {
        std::ifstream in(meta_path);
        const auto meta = nlohmann::json::parse(in);
        m.generator_version = meta.at("generator_version").get<std::string>();
        m.global_seed = meta.at("global_seed").get<std::uint64_t>();
        m.op_vocabulary = meta.at("op_vocabulary").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw DataIntegrityError("meta.json: " + std::string(e.what()));
    }

    std::ifstream in(dir / "manifest.jsonl", std::ios::binary);
    if (!in) {
        throw DataIntegrityError("missing " + (dir / "manifest.jsonl").string());
    }
    std::string line;
    int line_no = 0;
    std::set<std::string> ids;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        auto r = detail::parse_manifest_line(line, line_no);
        if (!ids.insert(r.id).second) {
            throw DataIntegrityError("manifest.jsonl line " + std::to_string(line_no) + ": duplicate record id " + r.id);
        }
        m.records.push_back(std::move(r));
    }

    for (const auto& r : m.records) {
        for (const auto* rel : {&r.source_png, &r.edited_png}) {
            if (!fs::exists(dir / *rel)) {
                throw DataIntegrityError("record " + r.id + ": missing image " + *rel);
            }
        }
        if (verify) {
            const Image src = source_image(r);
            if (read_png_bytes(dir / r.source_png) != quantize(src)) {
                throw DataIntegrityError("record " + r.id + ": source image does not match its seed");
            }
            if (read_png_bytes(dir / r.edited_png) != quantize(apply_spec(src, r.spec))) {
                throw DataIntegrityError("record " + r.id + ": edited image does not match apply_spec(source, spec)");
            }
        }
    }
    return m;
}

} // namespace rdlab
