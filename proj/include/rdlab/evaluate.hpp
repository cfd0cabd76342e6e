#pragma once

// Dual evaluation of a checkpoint over a manifest split: every record is
// decoded once with a with-command prompt and once without.

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "rdlab/dataset.hpp"
#include "rdlab/evalkit.hpp"
#include "rdlab/model.hpp"
#include "rdlab/png_io.hpp"
#include "rdlab/prompting.hpp"

namespace rdlab {

/// Source/edited image pair for a record. With a dataset directory the PNGs
/// are read from disk; otherwise they are regenerated and quantized exactly
/// as gen-data writes them.
class PairLoader {
public:
    PairLoader() = default;
    explicit PairLoader(std::filesystem::path dir) : dir_(std::move(dir)) {}

    std::pair<Image, Image> operator()(const TripletRecord& r) const
    {
        if (dir_) {
            return {read_png(*dir_ / r.source_png), read_png(*dir_ / r.edited_png)};
        }
        const Image src = source_image(r);
        return {dequantize(quantize(src)), dequantize(quantize(apply_spec(src, r.spec)))};
    }

private:
    std::optional<std::filesystem::path> dir_;
};

/// Template RNG for evaluation, keyed by record id and prompt kind.
inline Rng eval_template_rng(const TripletRecord& r, bool use_command)
{
    return Rng(mix_seed(fnv1a64(r.id), use_command ? 0xc0ULL : 0xd0ULL));
}

/// <bos> + prompt with image slots, no answer, no <eos>.
inline EncodedSample decode_prefix(const RenderedPrompt& prompt, const TokenVocab& vocab, int k)
{
    EncodedSample s = assemble(vocab.tokenize(prompt.text), {}, k, vocab, false);
    s.template_id = prompt.template_id;
    return s;
}

struct PredictionRecord {
    std::string id;
    bool use_command = false;
    int template_id = 0;
    std::size_t command_words = 0;
    std::string raw;
    ParsedPrediction parsed;
    double accuracy = 0.0;
    double mse = 0.0;
    bool truncated = false;
};

struct EvalOptions {
    PromptStyle style = PromptStyle::plain;
    int max_new = 64;
    std::size_t limit = 0;  // 0 = all records
};

struct EvalResult {
    MetricsReport report;
    std::vector<PredictionRecord> predictions;
};

inline EvalResult evaluate(const Model<float>& model, const TokenVocab& vocab, const std::vector<const TripletRecord*>& records,
                           const PairLoader& loader, const EvalOptions& opts = {},
                           const PromptAssets& assets = builtin_prompt_assets())
{
    if (records.empty()) {
        throw ConfigError("evaluation split is empty");
    }
    EvalResult out;
    const std::size_t n = opts.limit ? std::min(opts.limit, records.size()) : records.size();
    const int k = model.config().k_tokens;
    for (std::size_t i = 0; i < n; ++i) {
        const TripletRecord& r = *records[i];
        const auto [src, ed] = loader(r);
        const Mat<float> f1 = model.encode_image(src);
        const Mat<float> f2 = model.encode_image(ed);
        for (bool use_command : {true, false}) {
            Rng rng = eval_template_rng(r, use_command);
            const RenderedPrompt prompt = select_and_render(r, use_command, rng, assets, opts.style);
            const EncodedSample prefix = decode_prefix(prompt, vocab, k);
            const DecodeResult dec = greedy_decode(model, prefix, f1, f2, opts.max_new);

            PredictionRecord p;
            p.id = r.id;
            p.use_command = use_command;
            p.template_id = prompt.template_id;
            p.command_words = use_command ? word_count(r.command) : 0;
            p.raw = vocab.detokenize(dec.tokens);
            p.parsed = parse_output(p.raw);
            p.accuracy = accuracy(p.parsed, r.spec);
            p.mse = param_mse(p.parsed, r.spec);
            p.truncated = dec.truncated;
            out.report.add(use_command, p.command_words, p.accuracy, p.mse, p.parsed.malformed, spurious_ops(p.parsed, r.spec));
            out.predictions.push_back(std::move(p));
        }
    }
    return out;
}

inline std::string prediction_line(const PredictionRecord& p)
{
    nlohmann::ordered_json ops = nlohmann::ordered_json::array();
    for (const auto& op : p.parsed.ops) {
        ops.push_back({{"name", op_name(op.name)}, {"value", op.value}});
    }
    nlohmann::ordered_json j = {
        {"id", p.id},
        {"use_command", p.use_command},
        {"template_id", p.template_id},
        {"command_words", p.command_words},
        {"raw", p.raw},
        {"ops", ops},
        {"accuracy", p.accuracy},
        {"mse", p.mse},
        {"malformed", p.parsed.malformed},
        {"truncated", p.truncated},
    };
    return j.dump();
}

inline nlohmann::ordered_json eval_json(const EvalResult& r, const std::string& label, const std::string& split)
{
    return {
        {"label", label},
        {"split", split},
        {"evaluation", "paired: each record decoded once with and once without command"},
        {"records", r.report[kWithCommand].count},
        {"malformed_rate", r.report.malformed_rate()},
        {"partitions", report_json(r.report)},
    };
}

inline void write_eval_outputs(const EvalResult& r, const std::string& label, const std::string& split,
                               const std::filesystem::path& dir)
{
    std::filesystem::create_directories(dir);
    std::ofstream(dir / "report.txt") << render_report(label, r.report);
    std::ofstream(dir / "report.json") << eval_json(r, label, split).dump(2) << "\n";
    std::ofstream out(dir / "predictions.jsonl");
    for (const auto& p : r.predictions) {
        out << prediction_line(p) << "\n";
    }
}

} // namespace rdlab
