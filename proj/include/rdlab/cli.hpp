#pragma once

// Command-line driver: gen-data, verify, pretrain, train, eval, compare,
// probe. Every subcommand accepts `--config FILE` with key=value lines whose
// keys are the long option names; explicit flags override the file.

#include <algorithm>
#include <exception>
#include <functional>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "rdlab/checkpoint.hpp"
#include "rdlab/dataset.hpp"
#include "rdlab/errors.hpp"
#include "rdlab/evalkit.hpp"
#include "rdlab/evaluate.hpp"
#include "rdlab/training.hpp"

namespace rdlab::cli {

namespace fs = std::filesystem;

/// key=value lines; '#' starts a comment line.
inline std::vector<std::pair<std::string, std::string>> read_config_file(const fs::path& path)
{
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot read config file " + path.string());
    }
    std::vector<std::pair<std::string, std::string>> out;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos || line[first] == '#') {
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(path.string() + ":" + std::to_string(line_no) + ": expected key=value");
        }
        auto trim = [](std::string s) {
            const auto a = s.find_first_not_of(" \t\r");
            const auto b = s.find_last_not_of(" \t\r");
            return a == std::string::npos ? std::string{} : s.substr(a, b - a + 1);
        };
        out.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return out;
}

/// Effective option values of a subcommand, by long name.
inline std::map<std::string, std::string> effective_config(const CLI::App& app)
{
    std::map<std::string, std::string> out;
    for (const CLI::Option* opt : app.get_options()) {
        const std::string name = opt->get_single_name();
        if (name.empty() || name == "help" || name == "config" || opt->get_lnames().empty()) {
            continue;
        }
        const bool is_flag = opt->get_expected_max() == 0;
        std::string value;
        if (opt->count() > 0) {
            const auto& res = opt->results();
            value = res.empty() ? "true" : res.back();
        } else {
            value = is_flag ? "false" : opt->get_default_str();
        }
        out[name] = value;
    }
    return out;
}

inline std::string render_kv(const std::map<std::string, std::string>& kv)
{
    std::string out;
    for (const auto& [k, v] : kv) {
        out += k + "=" + v + "\n";
    }
    return out;
}

inline bool parse_bool(const std::string& s)
{
    if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
    if (s == "false" || s == "0" || s == "no" || s == "off") return false;
    throw ConfigError("expected a boolean, got '" + s + "'");
}

inline std::string dataset_summary(const Manifest& m)
{
    std::array<std::size_t, 3> split_counts{};
    std::array<std::size_t, 4> op_counts{};
    std::array<std::size_t, kNumOps> name_counts{};
    for (const auto& r : m.records) {
        split_counts[static_cast<std::size_t>(r.split)] += 1;
        op_counts[std::min<std::size_t>(r.spec.ops.size(), 3)] += 1;
        for (const auto& op : r.spec.ops) {
            name_counts[static_cast<std::size_t>(op.name)] += 1;
        }
    }
    std::ostringstream out;
    out << "records=" << m.records.size() << "\n";
    out << "manifest_hash=" << manifest_hash(m) << "\n";
    out << "generator_version=" << m.generator_version << "\n";
    out << "split.train=" << split_counts[0] << "\nsplit.val=" << split_counts[1] << "\nsplit.test=" << split_counts[2] << "\n";
    for (std::size_t k = 1; k <= 3; ++k) {
        out << "ops_per_record." << k << "=" << op_counts[k] << "\n";
    }
    for (std::size_t i = 0; i < kNumOps; ++i) {
        out << "op." << kOpNames[i] << "=" << name_counts[i] << "\n";
    }
    return out.str();
}

inline bool dir_nonempty(const fs::path& p)
{
    return fs::exists(p) && fs::is_directory(p) && fs::directory_iterator(p) != fs::directory_iterator();
}

inline Manifest load_manifest_or_throw(const fs::path& dir)
{
    if (!fs::exists(dir / "manifest.jsonl")) {
        throw DataIntegrityError("no manifest.jsonl in " + dir.string());
    }
    return read_manifest(dir);
}

class Cli {
public:
    Cli(std::ostream& out, std::ostream& err) : out_(out), err_(err) {}

    int run(int argc, const char* const* argv)
    {
        std::vector<std::string> args(argv + 1, argv + argc);
        CLI::App app{"rdlab: reverse-designing image edits with a toy vision-language model", "rdlab"};
        app.require_subcommand(1);
        app.option_defaults()->always_capture_default()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
        setup(app);
        try {
            expand_config(app, args);
            std::reverse(args.begin(), args.end());
            app.parse(args);
        } catch (const CLI::ParseError& e) {
            const int code = app.exit(e, out_, err_);
            return code == 0 ? 0 : static_cast<int>(ErrorKind::config);
        } catch (const Error& e) {
            err_ << "error: " << e.what() << "\n";
            return e.exit_code();
        }
        try {
            action_();
            return status_;
        } catch (const Error& e) {
            err_ << "error: " << e.what() << "\n";
            return e.exit_code();
        } catch (const std::exception& e) {
            err_ << "error: " << e.what() << "\n";
            return 1;
        }
    }

private:
    // Inserts `--key=value` items from `--config FILE` right after the
    // subcommand name so explicit flags (which come later) win.
    void expand_config(CLI::App& app, std::vector<std::string>& args)
    {
        if (args.empty()) {
            return;
        }
        CLI::App* sub = nullptr;
        for (auto* s : app.get_subcommands({})) {
            if (s->get_name() == args[0]) {
                sub = s;
            }
        }
        if (!sub) {
            return;
        }
        std::string path;
        for (std::size_t i = 1; i < args.size(); ++i) {
            if (args[i] == "--config" && i + 1 < args.size()) {
                path = args[i + 1];
            } else if (args[i].rfind("--config=", 0) == 0) {
                path = args[i].substr(9);
            }
        }
        if (path.empty()) {
            return;
        }
        std::vector<std::string> injected;
        for (const auto& [key, value] : read_config_file(path)) {
            const CLI::Option* opt = sub->get_option_no_throw("--" + key);
            if (!opt || key == "config") {
                throw ConfigError("unknown config key '" + key + "' for " + args[0]);
            }
            injected.push_back("--" + key + "=" + value);
        }
        args.insert(args.begin() + 1, injected.begin(), injected.end());
    }

    void echo(const CLI::App& sub, const fs::path* file)
    {
        const std::string kv = render_kv(effective_config(sub));
        out_ << "# effective config (" << sub.get_name() << ")\n" << kv;
        if (file) {
            std::ofstream(*file) << kv;
        }
    }

    void setup(CLI::App& app)
    {
        setup_gen_data(app);
        setup_verify(app);
        setup_pretrain(app);
        setup_train(app);
        setup_eval(app);
        setup_compare(app);
        setup_probe(app);
    }

    static void add_config_flag(CLI::App* sub) { sub->add_option("--config", "key=value file with defaults for these options"); }

    // ---- gen-data --------------------------------------------------------

    struct GenArgs {
        std::string out;
        std::size_t n = 22000;
        std::uint64_t seed = 0;
        bool verify = false;
        bool force = false;
        bool single_op = false;
    } gen_;

    void setup_gen_data(CLI::App& app)
    {
        auto* sub = app.add_subcommand("gen-data", "Generate a synthetic triplet dataset");
        add_config_flag(sub);
        sub->add_option("--out", gen_.out, "Output directory")->required();
        sub->add_option("--n", gen_.n, "Number of records");
        sub->add_option("--seed", gen_.seed, "Global seed");
        sub->add_flag("--verify", gen_.verify, "Re-read and check every image after writing");
        sub->add_flag("--force", gen_.force, "Overwrite an existing dataset directory");
        sub->add_flag("--single-op", gen_.single_op, "One operation per record");
        sub->callback([this, sub] { action_ = [this, sub] { cmd_gen_data(*sub); }; });
    }

    void cmd_gen_data(const CLI::App& sub)
    {
        const fs::path dir = gen_.out;
        if (dir_nonempty(dir)) {
            if (!gen_.force) {
                throw ConfigError(dir.string() + " exists and is not empty (use --force to overwrite)");
            }
            for (const char* name : {"images", "manifest.jsonl", "meta.json", "summary.txt", "config.txt"}) {
                fs::remove_all(dir / name);
            }
        }
        fs::create_directories(dir);
        const fs::path cfg = dir / "config.txt";
        echo(sub, &cfg);
        const GenConfig gc = gen_.single_op ? GenConfig::single_op_only() : GenConfig{};
        const Manifest m = generate_manifest(gen_.n, gen_.seed, gc);
        write_manifest(m, dir);
        const std::string summary = dataset_summary(m);
        std::ofstream(dir / "summary.txt") << summary;
        out_ << summary;
        if (gen_.verify) {
            read_manifest(dir, true);
            out_ << "verify=ok\n";
        }
    }

    // ---- verify ------------------------------------------------------------

    std::string verify_dir_;

    void setup_verify(CLI::App& app)
    {
        auto* sub = app.add_subcommand("verify", "Check a dataset directory against its generator");
        add_config_flag(sub);
        sub->add_option("--data", verify_dir_, "Dataset directory")->required();
        sub->callback([this] {
            action_ = [this] {
                const Manifest m = read_manifest(verify_dir_, true);
                out_ << dataset_summary(m) << "verify=ok\n";
            };
        });
    }

    // ---- pretrain ------------------------------------------------------------

    struct PretrainArgs {
        std::string data;
        std::string out;
        std::uint64_t seed = 0;
        std::size_t vision_images = 5000;
        int vision_epochs = 5;
        std::size_t lm_pairs = 50000;
        int lm_epochs = 3;
        std::size_t lm_heldout = 500;
        int d_vision = 64;
        int d_lm = 128;
        int lm_layers = 4;
        int lm_heads = 4;
        int k_tokens = 16;
        int max_seq = 128;
    } pre_;

    void setup_pretrain(CLI::App& app)
    {
        auto* sub = app.add_subcommand("pretrain", "Pretrain the vision encoder and the language model");
        add_config_flag(sub);
        sub->add_option("--data", pre_.data, "Dataset directory")->required();
        sub->add_option("--out", pre_.out, "Output checkpoint path")->required();
        sub->add_option("--seed", pre_.seed, "Seed");
        sub->add_option("--vision-images", pre_.vision_images, "Images for encoder pretraining");
        sub->add_option("--vision-epochs", pre_.vision_epochs, "Maximum encoder pretraining epochs");
        sub->add_option("--lm-pairs", pre_.lm_pairs, "Text pairs for LM pretraining");
        sub->add_option("--lm-epochs", pre_.lm_epochs, "LM pretraining epochs");
        sub->add_option("--lm-heldout", pre_.lm_heldout, "Held-out text pairs");
        sub->add_option("--d-vision", pre_.d_vision, "Vision width");
        sub->add_option("--d-lm", pre_.d_lm, "LM width");
        sub->add_option("--lm-layers", pre_.lm_layers, "LM decoder blocks");
        sub->add_option("--lm-heads", pre_.lm_heads, "LM attention heads");
        sub->add_option("--k-tokens", pre_.k_tokens, "Image tokens per image");
        sub->add_option("--max-seq", pre_.max_seq, "Maximum sequence length");
        sub->callback([this, sub] { action_ = [this, sub] { cmd_pretrain(*sub); }; });
    }

    void cmd_pretrain(const CLI::App& sub)
    {
        const fs::path out = pre_.out;
        if (out.has_parent_path()) {
            fs::create_directories(out.parent_path());
        }
        const fs::path cfg_path = out.string() + ".config.txt";
        echo(sub, &cfg_path);
        const Manifest m = load_manifest_or_throw(pre_.data);
        const TokenVocab vocab = TokenVocab::build();

        ModelConfig mc;
        mc.d_vision = pre_.d_vision;
        mc.d_lm = pre_.d_lm;
        mc.lm_layers = pre_.lm_layers;
        mc.lm_heads = pre_.lm_heads;
        mc.k_tokens = pre_.k_tokens;
        mc.max_seq = pre_.max_seq;
        mc.vocab_size = vocab.size();
        mc.seed = pre_.seed;
        Model<float> model(mc);

        const PairLoader loader(pre_.data);
        std::vector<Image> images;
        for (const auto* r : m.split(Split::train)) {
            if (images.size() >= pre_.vision_images) {
                break;
            }
            auto [src, ed] = loader(*r);
            images.push_back(src);
            if (images.size() < pre_.vision_images) {
                images.push_back(ed);
            }
        }
        VisionPretrainConfig vc;
        vc.images = pre_.vision_images;
        vc.epochs = pre_.vision_epochs;
        vc.seed = mix_seed(pre_.seed, 1);
        const auto vr = pretrain_vision(model, std::move(images), vc, &err_);

        LmPretrainConfig lc;
        lc.pairs = pre_.lm_pairs;
        lc.epochs = pre_.lm_epochs;
        lc.heldout = pre_.lm_heldout;
        lc.seed = mix_seed(pre_.seed, 2);
        const auto lr = pretrain_lm(model, vocab, lc, &err_);

        CheckpointMeta meta;
        meta.vocab_fingerprint = vocab.fingerprint();
        meta.experiment = "pretrain";
        meta.extras = {
            {"vision_epochs", std::to_string(vr.epochs_run)},
            {"vision_train_mse", detail::fmt(vr.train_mse)},
            {"vision_heldout_mse", detail::fmt(vr.heldout_mse)},
            {"lm_epochs", std::to_string(lr.epochs_run)},
            {"lm_train_ce", detail::fmt(lr.train_ce)},
            {"lm_heldout_ce", detail::fmt(lr.heldout_ce)},
            {"lm_heldout_answer_ce", detail::fmt(lr.heldout_answer_ce)},
            {"data_manifest_hash", manifest_hash(m)},
        };
        save_checkpoint(model, meta, out);
        for (const auto& [k, v] : meta.extras) {
            out_ << k << "=" << v << "\n";
        }
    }

    // ---- train ---------------------------------------------------------------

    struct TrainArgs {
        std::string exp;
        std::string data;
        std::string init;
        std::string out;
        bool unfrozen = false;
        int epochs = 10;
        std::string aux_detached = "default";
        double aux_weight = 1.0;
        bool binary_c2 = false;
        std::uint64_t seed = 0;
        int batch_size = 2;
        std::int64_t warmup = 200;
        double peak_lr = 1e-3;
        double floor_lr = 1e-5;
        std::size_t train_limit = 0;
        std::size_t val_limit = 0;
        int max_new = 64;
    } tr_;

    void setup_train(CLI::App& app)
    {
        auto* sub = app.add_subcommand("train", "Fine-tune for one experiment");
        add_config_flag(sub);
        sub->add_option("--exp", tr_.exp, "Experiment: 1, 2, 3, 4 or 4x")->required();
        sub->add_option("--data", tr_.data, "Dataset directory")->required();
        sub->add_option("--init", tr_.init, "Pretrained checkpoint")->required();
        sub->add_option("--out", tr_.out, "Run directory")->required();
        sub->add_flag("--unfrozen", tr_.unfrozen, "Train every parameter group");
        sub->add_option("--epochs", tr_.epochs, "Epochs");
        sub->add_option("--aux-detached", tr_.aux_detached, "true, false or default (experiment 2: false, 3: true)");
        sub->add_option("--aux-weight", tr_.aux_weight, "Auxiliary loss weight");
        sub->add_flag("--binary-c2", tr_.binary_c2, "Experiment 3: binary intersection penalty");
        sub->add_option("--seed", tr_.seed, "Seed");
        sub->add_option("--batch-size", tr_.batch_size, "Batch size (even)");
        sub->add_option("--warmup", tr_.warmup, "Warmup steps");
        sub->add_option("--peak-lr", tr_.peak_lr, "Peak learning rate");
        sub->add_option("--floor-lr", tr_.floor_lr, "Final learning rate");
        sub->add_option("--train-limit", tr_.train_limit, "Use only the first N train records (0 = all)");
        sub->add_option("--val-limit", tr_.val_limit, "Validate on the first N val records (0 = all)");
        sub->add_option("--max-new", tr_.max_new, "Decode budget");
        sub->callback([this, sub] { action_ = [this, sub] { cmd_train(*sub); }; });
    }

    void cmd_train(const CLI::App& sub)
    {
        TrainConfig tc;
        tc.experiment = tr_.exp;
        tc.epochs = tr_.epochs;
        tc.batch_size = tr_.batch_size;
        tc.warmup = tr_.warmup;
        tc.peak_lr = tr_.peak_lr;
        tc.floor_lr = tr_.floor_lr;
        tc.aux_weight = tr_.aux_weight;
        if (tr_.aux_detached != "default") {
            tc.aux_detached = parse_bool(tr_.aux_detached);
        }
        tc.binary_c2 = tr_.binary_c2;
        tc.unfrozen = tr_.unfrozen;
        tc.seed = tr_.seed;
        tc.train_limit = tr_.train_limit;
        tc.val_limit = tr_.val_limit;
        tc.max_new = tr_.max_new;
        tc.validate();

        const auto args = effective_config(sub);
        echo(sub, nullptr);
        const Manifest m = load_manifest_or_throw(tr_.data);
        LoadedCheckpoint init = load_checkpoint(tr_.init);
        auto [model, vocab] = prepare_for_experiment(std::move(init.model), init.meta, tc);
        std::map<std::string, std::string> extra;
        for (const auto& [k, v] : args) {
            extra["cli." + k] = v;
        }
        if (!vocab.specials().empty()) {
            std::string names;
            for (const auto& s : vocab.specials()) {
                names += (names.empty() ? "" : " ") + s;
            }
            extra["special_tokens"] = names;
        }
        const TrainResult res = train(model, vocab, tc, m, PairLoader(tr_.data), tr_.out, extra, &err_);
        out_ << "best_epoch=" << res.best.epoch << "\nbest_step=" << res.best.step
             << "\nbest_accuracy=" << detail::fmt(res.best.accuracy) << "\nbest_mse=" << detail::fmt(res.best.mse)
             << "\nsteps=" << res.steps << "\nwith_command=" << res.with_command << "\nwithout_command=" << res.without_command
             << "\n";
    }

    // ---- eval ------------------------------------------------------------------

    struct EvalArgs {
        std::string ckpt;
        std::string data;
        std::string split = "test";
        std::string out;
        std::string label;
        std::size_t limit = 0;
        int max_new = 64;
    } ev_;

    void setup_eval(CLI::App& app)
    {
        auto* sub = app.add_subcommand("eval", "Evaluate a checkpoint on a split");
        add_config_flag(sub);
        sub->add_option("--ckpt", ev_.ckpt, "Checkpoint")->required();
        sub->add_option("--data", ev_.data, "Dataset directory")->required();
        sub->add_option("--split", ev_.split, "train, val or test");
        sub->add_option("--out", ev_.out, "Output directory")->required();
        sub->add_option("--label", ev_.label, "Row label (default: from the checkpoint's experiment)");
        sub->add_option("--limit", ev_.limit, "Evaluate only the first N records (0 = all)");
        sub->add_option("--max-new", ev_.max_new, "Decode budget");
        sub->callback([this, sub] { action_ = [this, sub] { cmd_eval(*sub); }; });
    }

    void cmd_eval(const CLI::App& sub)
    {
        const fs::path dir = ev_.out;
        fs::create_directories(dir);
        const fs::path cfg = dir / "config.txt";
        echo(sub, &cfg);
        const Split split = parse_split(ev_.split);
        const Manifest m = load_manifest_or_throw(ev_.data);
        const LoadedCheckpoint ck = load_checkpoint(ev_.ckpt);
        const TokenVocab vocab = vocab_for(ck.meta);
        const std::string label = ev_.label.empty() ? "Exp. " + ck.meta.experiment : ev_.label;
        const EvalResult res = evaluate(ck.model, vocab, m.split(split), PairLoader(ev_.data),
                                        {prompt_style_for(ck.meta.experiment), ev_.max_new, ev_.limit});
        write_eval_outputs(res, label, ev_.split, dir);
        out_ << render_report(label, res.report);
        if (res.report.malformed_rate() > 0.5) {
            err_ << "error: malformed-output rate " << detail::fmt(res.report.malformed_rate()) << " exceeds 0.5\n";
            status_ = static_cast<int>(ErrorKind::malformed_rate);
        }
    }

    // ---- compare -----------------------------------------------------------------

    std::vector<std::string> compare_runs_;
    std::string compare_out_;
    bool compare_no_mark_ = false;

    void setup_compare(CLI::App& app)
    {
        auto* sub = app.add_subcommand("compare", "Table of several evaluation reports with best-per-column marks");
        add_config_flag(sub);
        sub->add_option("runs", compare_runs_, "Evaluation directories (or run directories containing eval/)")->required();
        sub->add_option("--out", compare_out_, "Also write the table to this file");
        sub->add_flag("--no-mark", compare_no_mark_, "Do not mark best values");
        sub->callback([this] { action_ = [this] { cmd_compare(); }; });
    }

    void cmd_compare()
    {
        std::vector<TableRow> rows;
        for (const auto& run : compare_runs_) {
            fs::path report = fs::path(run) / "report.json";
            if (!fs::exists(report)) {
                report = fs::path(run) / "eval" / "report.json";
            }
            std::ifstream in(report);
            if (!in) {
                throw ConfigError("no report.json in " + run);
            }
            nlohmann::json j;
            try {
                j = nlohmann::json::parse(in);
            } catch (const nlohmann::json::exception& e) {
                throw DataIntegrityError(report.string() + ": " + e.what());
            }
            const auto& p = j.at("partitions");
            rows.push_back({j.at("label").get<std::string>(),
                            {p.at("all").at("accuracy").get<double>(), p.at("all").at("mse").get<double>(),
                             p.at("with_command").at("accuracy").get<double>(), p.at("with_command").at("mse").get<double>(),
                             p.at("without_command").at("accuracy").get<double>(),
                             p.at("without_command").at("mse").get<double>()}});
        }
        const std::string table = render_table(rows, !compare_no_mark_);
        out_ << table;
        if (!compare_out_.empty()) {
            std::ofstream(compare_out_) << table;
        }
    }

    // ---- probe ---------------------------------------------------------------------

    std::string probe_ckpt_;

    void setup_probe(CLI::App& app)
    {
        auto* sub = app.add_subcommand("probe", "Dump logits of the builtin probe batch as hex");
        add_config_flag(sub);
        sub->add_option("--ckpt", probe_ckpt_, "Checkpoint")->required();
        sub->callback([this] {
            action_ = [this] {
                const LoadedCheckpoint ck = load_checkpoint(probe_ckpt_);
                out_ << probe_hex(ck.model, vocab_for(ck.meta));
            };
        });
    }

    std::ostream& out_;
    std::ostream& err_;
    std::function<void()> action_ = [] {};
    int status_ = 0;
};

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr)
{
    Cli cli(out, err);
    return cli.run(argc, argv);
}

} // namespace rdlab::cli
