// Acceptance run: one PASS/FAIL line per criterion. Criteria 6, 7, 8 and 9
// drive the command-line tool end to end; the rest call the library.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <sys/wait.h>

#include <CLI11.hpp>
#include <json.hpp>

#include "oracles.hpp"
#include "rdlab/rdlab.hpp"

using namespace rdlab;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0)
{
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0)
{
    char buf[256];
    std::snprintf(buf, sizeof buf, f, a, b, c, d);
    return buf;
}

std::string slurp(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

struct Verdict {
    bool pass = false;
    std::string detail;
};

struct Settings {
    std::string cli;
    fs::path work;
    std::set<int> only;
    std::set<int> expected_fail;
    bool keep_pretrain = false;
    int lm_pairs = 12000;
    int lm_epochs = 2;
    int vision_images = 5000;
    int ordering_epochs = 2;
};

class Pipeline {
public:
    explicit Pipeline(Settings s) : s_(std::move(s))
    {
        if (!s_.keep_pretrain) {
            fs::remove_all(s_.work);
        }
        fs::create_directories(s_.work);
    }

    // Runs the tool, appending its output to work/commands.log. Returns the exit status.
    int run(const std::string& args)
    {
        const std::string log = (s_.work / "commands.log").string();
        {
            std::ofstream(log, std::ios::app) << "$ rdlab " << args << "\n";
        }
        const int st = std::system(("\"" + s_.cli + "\" " + args + " >>\"" + log + "\" 2>&1").c_str());
        return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
    }

    void must(const std::string& args)
    {
        if (const int code = run(args); code != 0) {
            throw std::runtime_error("rdlab " + args + " exited with " + std::to_string(code));
        }
    }

    fs::path path(const std::string& name) const { return s_.work / name; }
    std::string q(const std::string& name) const { return "\"" + path(name).string() + "\""; }

    void ensure_corpora()
    {
        if (corpora_) {
            return;
        }
        must("gen-data --force --single-op --n 2000 --seed 101 --out " + q("single"));
        must("gen-data --force --n 2000 --seed 202 --out " + q("full"));
        corpora_ = true;
    }

    void ensure_pretrain()
    {
        ensure_corpora();
        if (pretrained_) {
            return;
        }
        if (!(s_.keep_pretrain && fs::exists(path("pre.bin")))) {
            const auto t0 = Clock::now();
            must("pretrain --seed 303 --data " + q("full") + " --out " + q("pre.bin") +
                 " --vision-images " + std::to_string(s_.vision_images) + " --lm-pairs " + std::to_string(s_.lm_pairs) +
                 " --lm-epochs " + std::to_string(s_.lm_epochs));
            pretrain_seconds_ = seconds_since(t0);
        }
        pretrained_ = true;
    }

    double pretrain_seconds() const { return pretrain_seconds_; }
    const Settings& settings() const { return s_; }

private:
    Settings s_;
    bool corpora_ = false;
    bool pretrained_ = false;
    double pretrain_seconds_ = 0.0;
};

nlohmann::json partitions(const fs::path& report)
{
    return nlohmann::json::parse(slurp(report)).at("partitions");
}

// ---- criteria ----------------------------------------------------------------

Verdict grammar_round_trip()
{
    const auto t0 = Clock::now();
    std::size_t failures = 0;
    for (int i = 0; i < 10000; ++i) {
        const EditSpec spec = gen_record(0xac1, static_cast<std::uint64_t>(i)).spec;
        const ParsedPrediction p = parse_output(render_ground_truth(spec));
        bool ok = !p.malformed && p.ops.size() == spec.ops.size();
        for (std::size_t k = 0; ok && k < spec.ops.size(); ++k) {
            ok = p.ops[k].name == spec.ops[k].name && hundredths(p.ops[k].value) == hundredths(spec.ops[k].value);
        }
        failures += ok ? 0 : 1;
    }
    const double t = seconds_since(t0);
    return {failures == 0 && t < 5.0, fmt("10000 specs, %.0f failures, %.2f s", static_cast<double>(failures), t)};
}

Verdict metric_oracle()
{
    const oracle::EnumerationResult r = oracle::enumerate_metrics();
    ParsedPrediction superset;
    superset.ops = {{OpName::brightness, 0.1}, {OpName::contrast, 0.2}, {OpName::hue, 0.0}};
    const bool anchor_superset = accuracy(superset, EditSpec{{{OpName::brightness, 0.5}, {OpName::hue, -0.5}}}) == 1.0;
    const bool anchor_zero_fill = param_mse(ParsedPrediction{}, EditSpec{{{OpName::gamma, 0.5}}}) == 0.25;
    return {r.mismatches == 0 && anchor_superset && anchor_zero_fill,
            fmt("%.0f pairs, %.0f mismatches; ", static_cast<double>(r.pairs), static_cast<double>(r.mismatches)) +
                "superset anchor " + (anchor_superset ? "ok" : "failed") + ", zero-fill anchor " + (anchor_zero_fill ? "ok" : "failed")};
}

Verdict edit_identity_and_range()
{
    Rng rng(0xac3);
    std::size_t not_identical = 0, out_of_range = 0, outputs = 0;
    for (std::uint64_t i = 0; i < 1000; ++i) {
        Image img;
        if (i % 2 == 0) {
            img = synth_image(i);
        } else {
            for (auto& v : img.data) {
                v = static_cast<float>(rng.uniform(0.0, 1.0));
            }
        }
        for (OpName op : kAllOps) {
            not_identical += bit_identical(apply_op(img, {op, 0.0}), img) ? 0 : 1;
            for (double p : {-1.0, 1.0, rng.uniform(-1.0, 1.0)}) {
                const Image out = apply_op(img, {op, p});
                ++outputs;
                for (float v : out.data) {
                    if (!(v >= 0.0f && v <= 1.0f)) {
                        ++out_of_range;
                        break;
                    }
                }
            }
        }
    }
    return {not_identical == 0 && out_of_range == 0,
            fmt("1000 images x 5 ops: %.0f non-identical at p=0, %.0f of %.0f outputs out of range",
                static_cast<double>(not_identical), static_cast<double>(out_of_range), static_cast<double>(outputs))};
}

Verdict gradient_check()
{
    const auto t0 = Clock::now();
    const TokenVocab vocab = TokenVocab::build();
    ModelConfig cfg;
    cfg.vocab_size = vocab.size();
    cfg.seed = 0xac4;
    Model<double> model(cfg);
    const auto batch = make_probe_batch(vocab, cfg.k_tokens);
    const GradCheckResult lm = grad_check(model, batch, vocab, {120, 1e-4, false, 1});
    const GradCheckResult aux = grad_check(model, batch, vocab, {120, 1e-4, true, 2});
    model.mutable_config().freeze_vision = true;
    model.mutable_config().freeze_lm = true;
    const GradCheckResult frozen = grad_check(model, batch, vocab, {40, 1e-4, true, 3});
    const double t = seconds_since(t0);
    const bool ok = lm.checks.size() >= 100 && aux.checks.size() >= 100 && lm.max_rel_error < 1e-3 &&
                    aux.max_rel_error < 1e-3 && frozen.frozen_grad_abs_max == 0.0 && t < 120.0;
    return {ok, fmt("lm %.2e, lm+aux %.2e over %.0f scalars each; frozen |grad| max %.1g; ", lm.max_rel_error, aux.max_rel_error,
                    static_cast<double>(std::min(lm.checks.size(), aux.checks.size())), frozen.frozen_grad_abs_max) +
                    fmt("%.1f s", t)};
}

Verdict masking_contract()
{
    const TokenVocab vocab = TokenVocab::build();
    ModelConfig cfg;
    cfg.vocab_size = vocab.size();
    cfg.seed = 0xac5;
    Model<double> model(cfg);
    const auto batch = make_probe_batch(vocab, cfg.k_tokens);
    std::size_t violations = 0, trials = 0;
    for (const auto& item : batch) {
        auto grads_for = [&](const std::vector<int>& targets) {
            model.zero_grad();
            ForwardCache<double> cache;
            const Mat<double> logits = model.forward(item.sample, item.source, item.edited, &cache);
            Mat<double> d = Mat<double>::Zero(logits.rows(), logits.cols());
            const double loss =
                lm_loss(logits, std::span<const int>(targets), std::span<const std::uint8_t>(item.sample.loss_mask), &d);
            model.backward(cache, d);
            std::vector<Mat<double>> g;
            for (const auto* p : model.params()) {
                g.push_back(p->grad);
            }
            return std::make_pair(loss, g);
        };
        const auto base = grads_for(item.sample.token_ids);
        Rng rng(0xac5 + trials);
        // Each prompt position alone, then all of them at once.
        for (int t = 0; t <= item.sample.answer_start; ++t) {
            std::vector<int> perturbed = item.sample.token_ids;
            for (int u = 0; u < item.sample.answer_start; ++u) {
                if (u == t || t == item.sample.answer_start) {
                    perturbed[static_cast<std::size_t>(u)] = static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab.size())));
                }
            }
            const auto after = grads_for(perturbed);
            bool same = after.first == base.first;
            for (std::size_t i = 0; same && i < base.second.size(); ++i) {
                same = base.second[i] == after.second[i];
            }
            violations += same ? 0 : 1;
            ++trials;
        }
    }
    return {violations == 0, fmt("%.0f prompt perturbations, %.0f changed the loss or a gradient", static_cast<double>(trials),
                                 static_cast<double>(violations))};
}

Verdict learnability(Pipeline& pipe)
{
    pipe.ensure_pretrain();
    const auto t0 = Clock::now();
    pipe.must("train --exp 1 --unfrozen --epochs 4 --seed 61 --peak-lr 5e-4 --data " + pipe.q("single") + " --init " + pipe.q("pre.bin") +
              " --out " + pipe.q("smoke"));
    pipe.must("eval --split test --ckpt " + pipe.q("smoke/ckpt_best.bin") + " --data " + pipe.q("single") + " --out " +
              pipe.q("smoke/eval") + " --label \"Smoke (unfrozen)\"");
    const double t = seconds_since(t0);
    const auto parts = partitions(pipe.path("smoke/eval/report.json"));
    const double with = parts.at("with_command").at("accuracy").get<double>();
    const double without = parts.at("without_command").at("accuracy").get<double>();
    const double mse = parts.at("all").at("mse").get<double>();
    const bool ok = with >= 0.90 && without >= 0.60 && mse < 0.15 && t <= 900.0;
    return {ok, fmt("test accuracy with command %.4f, without %.4f, MSE %.4f; ", with, without, mse) +
                    fmt("train+eval %.0f s (shared pretraining %.0f s)", t, pipe.pretrain_seconds())};
}

Verdict directional_ordering(Pipeline& pipe)
{
    pipe.ensure_pretrain();
    const int epochs = pipe.settings().ordering_epochs;
    bool ok = true;
    std::string detail;
    for (int seed : {1, 2, 3}) {
        const std::string run = "ordering_seed" + std::to_string(seed);
        pipe.must("train --exp 1 --epochs " + std::to_string(epochs) + " --seed " + std::to_string(seed) + " --data " +
                  pipe.q("full") + " --init " + pipe.q("pre.bin") + " --out " + pipe.q(run));
        pipe.must("eval --split test --ckpt " + pipe.q(run + "/ckpt_best.bin") + " --data " + pipe.q("full") + " --out " +
                  pipe.q(run + "/eval") + " --label \"Exp. 1 seed " + std::to_string(seed) + "\"");
        const auto parts = partitions(pipe.path(run + "/eval/report.json"));
        const double with = parts.at("with_command").at("accuracy").get<double>();
        const double without = parts.at("without_command").at("accuracy").get<double>();
        ok = ok && with > without;
        detail += fmt("seed %.0f: %.4f vs %.4f; ", seed, with, without);
    }
    return {ok, detail + "frozen projection, " + std::to_string(epochs) + " epochs"};
}

Verdict table_shape(Pipeline& pipe)
{
    std::vector<std::string> runs;
    for (const char* r : {"smoke", "ordering_seed1", "ordering_seed2", "ordering_seed3"}) {
        if (fs::exists(pipe.path(std::string(r) + "/eval/report.json"))) {
            runs.push_back(pipe.q(r));
        }
    }
    if (runs.size() < 2) {
        return {false, "needs the evaluation reports from criteria 6 and 7"};
    }
    std::string args = "compare --out " + pipe.q("table.txt");
    for (const auto& r : runs) {
        args += " " + r;
    }
    pipe.must(args);
    const std::string first = slurp(pipe.path("table.txt"));
    pipe.must(args);
    const std::string second = slurp(pipe.path("table.txt"));

    std::vector<std::string> lines;
    std::istringstream in(first);
    for (std::string l; std::getline(in, l);) {
        lines.push_back(l);
    }
    bool columns_ok = true;
    for (auto col : kTableColumns) {
        columns_ok = columns_ok && count_occurrences(first, std::string(col)) == 1;
    }
    const std::size_t stars = count_occurrences(first, "*");
    const bool ok = first == second && columns_ok && lines.size() == 4 + runs.size() && stars == kTableColumns.size();
    return {ok, std::to_string(runs.size()) + " rows, 6 columns " + (columns_ok ? "present" : "missing") + ", " +
                    std::to_string(stars) + " best marks, " + (first == second ? "byte-identical rerun" : "rerun differs")};
}

Verdict determinism(Pipeline& pipe)
{
    pipe.ensure_pretrain();
    std::string hashes[2], ckpts[2], reports[2];
    for (int i = 0; i < 2; ++i) {
        const std::string tag = "det" + std::to_string(i);
        pipe.must("gen-data --force --n 200 --seed 909 --out " + pipe.q(tag + "_data"));
        std::istringstream summary(slurp(pipe.path(tag + "_data/summary.txt")));
        for (std::string line; std::getline(summary, line);) {
            if (line.rfind("manifest_hash=", 0) == 0) {
                hashes[i] = line;
            }
        }
        pipe.must("train --exp 3 --epochs 2 --seed 77 --train-limit 40 --val-limit 10 --data " + pipe.q(tag + "_data") +
                  " --init " + pipe.q("pre.bin") + " --out " + pipe.q(tag + "_run"));
        pipe.must("eval --split test --ckpt " + pipe.q(tag + "_run/ckpt_best.bin") + " --data " + pipe.q(tag + "_data") +
                  " --out " + pipe.q(tag + "_run/eval"));
        ckpts[i] = slurp(pipe.path(tag + "_run/ckpt_best.bin"));
        reports[i] = slurp(pipe.path(tag + "_run/eval/report.json"));
    }
    const bool ok = !hashes[0].empty() && hashes[0] == hashes[1] && !ckpts[0].empty() && ckpts[0] == ckpts[1] &&
                    !reports[0].empty() && reports[0] == reports[1];
    return {ok, std::string("manifest hash ") + (hashes[0] == hashes[1] ? "equal" : "differs") + ", best checkpoint bytes " +
                    (ckpts[0] == ckpts[1] ? "equal" : "differ") + ", report.json " +
                    (reports[0] == reports[1] ? "equal" : "differs")};
}

} // namespace

int main(int argc, char** argv)
{
    Settings s;
    std::string work;
    std::vector<int> only, expected_fail;
    CLI::App app{"Acceptance run"};
    app.add_option("--cli", s.cli, "Path to the rdlab tool")->required();
    app.add_option("--work", work, "Scratch directory")->required();
    app.add_option("--only", only, "Run only these criteria");
    app.add_option("--expected-fail", expected_fail, "Criteria known to be out of reach; reported but not fatal");
    app.add_flag("--keep-pretrain", s.keep_pretrain, "Reuse work/pre.bin if present");
    app.add_option("--lm-pairs", s.lm_pairs, "Pretraining text pairs");
    app.add_option("--lm-epochs", s.lm_epochs, "Pretraining LM epochs");
    app.add_option("--vision-images", s.vision_images, "Pretraining images");
    app.add_option("--ordering-epochs", s.ordering_epochs, "Epochs per seed for criterion 7");
    CLI11_PARSE(app, argc, argv);
    s.work = work;
    s.only = {only.begin(), only.end()};
    s.expected_fail = {expected_fail.begin(), expected_fail.end()};

    Pipeline pipe(s);
    const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria = {
        {"grammar round trip", grammar_round_trip},
        {"metric oracle equivalence", metric_oracle},
        {"edit identity and range", edit_identity_and_range},
        {"gradient check", gradient_check},
        {"masking contract", masking_contract},
        {"learnability smoke", [&] { return learnability(pipe); }},
        {"with-command beats without-command", [&] { return directional_ordering(pipe); }},
        {"comparison table shape", [&] { return table_shape(pipe); }},
        {"determinism", [&] { return determinism(pipe); }},
    };

    int passed = 0, failed = 0, unexpected = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int id = static_cast<int>(i) + 1;
        if (!s.only.empty() && !s.only.count(id)) {
            continue;
        }
        Verdict v;
        try {
            v = criteria[i].second();
        } catch (const std::exception& e) {
            v = {false, std::string("error: ") + e.what()};
        }
        const bool expected = s.expected_fail.count(id) > 0;
        (v.pass ? passed : failed) += 1;
        unexpected += !v.pass && !expected ? 1 : 0;
        std::cout << "AC" << id << " " << (v.pass ? "PASS" : "FAIL") << "  " << criteria[i].first << ": " << v.detail
                  << (!v.pass && expected ? " [expected failure]" : "") << std::endl;
    }
    std::cout << passed << " passed, " << failed << " failed (" << failed - unexpected << " expected)" << std::endl;
    return unexpected == 0 ? 0 : 1;
}
