#pragma once

// Losses, optimizer, pretraining stages, the fine-tuning loop and gradient
// verification.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "rdlab/checkpoint.hpp"
#include "rdlab/dataset.hpp"
#include "rdlab/errors.hpp"
#include "rdlab/evalkit.hpp"
#include "rdlab/evaluate.hpp"
#include "rdlab/model.hpp"
#include "rdlab/prompting.hpp"

namespace rdlab {

inline constexpr const char* kVersionString = "rdlab 0.1.0";

// ---- losses -----------------------------------------------------------------

/// Mean next-token cross-entropy over positions t with mask[t] = 1, where
/// logits row t-1 predicts targets[t]. Writes d(loss)/d(logits) * scale into
/// `dlogits` (added) when given.
template <class T>
double lm_loss(const Mat<T>& logits, std::span<const int> targets, std::span<const std::uint8_t> mask,
               Mat<T>* dlogits = nullptr, double scale = 1.0)
{
    const auto n = static_cast<Eigen::Index>(targets.size());
    if (static_cast<Eigen::Index>(mask.size()) != n || logits.rows() != n) {
        throw ShapeError("lm_loss: logits, targets and mask disagree in length");
    }
    std::size_t count = 0;
    for (Eigen::Index t = 1; t < n; ++t) {
        count += mask[static_cast<std::size_t>(t)] ? 1 : 0;
    }
    if (count == 0) {
        throw LossError("lm_loss: loss mask selects no positions");
    }
    const double inv = 1.0 / static_cast<double>(count);
    const Eigen::Index v = logits.cols();
    std::vector<double> p(static_cast<std::size_t>(v));
    double total = 0.0;
    for (Eigen::Index t = 1; t < n; ++t) {
        if (!mask[static_cast<std::size_t>(t)]) {
            continue;
        }
        const auto row = logits.row(t - 1);
        double mx = -INFINITY;
        for (Eigen::Index j = 0; j < v; ++j) {
            mx = std::max(mx, static_cast<double>(row(j)));
        }
        double sum = 0.0;
        for (Eigen::Index j = 0; j < v; ++j) {
            p[static_cast<std::size_t>(j)] = std::exp(static_cast<double>(row(j)) - mx);
            sum += p[static_cast<std::size_t>(j)];
        }
        const int target = targets[static_cast<std::size_t>(t)];
        total += std::log(sum) + mx - static_cast<double>(row(target));
        if (dlogits) {
            for (Eigen::Index j = 0; j < v; ++j) {
                const double g = p[static_cast<std::size_t>(j)] / sum - (j == target ? 1.0 : 0.0);
                (*dlogits)(t - 1, j) += static_cast<T>(g * inv * scale);
            }
        }
    }
    return total * inv;
}

struct MseAuxResult {
    double value = 0.0;
    std::vector<double> predicted;  // reconstructed value per ground-truth op
};

/// Expected-digit surrogate of the parameter MSE at teacher-forced digit
/// positions. Gradient (times `scale`) is added into `dlogits` when given.
template <class T>
MseAuxResult mse_aux(const Mat<T>& logits, const EncodedSample& sample, const EditSpec& gt, const TokenVocab& vocab,
                     Mat<T>* dlogits = nullptr, double scale = 1.0)
{
    if (sample.value_digit_positions.empty() || sample.value_digit_positions.size() != 3 * gt.ops.size()) {
        throw LossError("mse_aux: sample has " + std::to_string(sample.value_digit_positions.size()) +
                        " digit positions for " + std::to_string(gt.ops.size()) + " ground-truth ops");
    }
    const auto digits = vocab.digit_ids();
    const std::size_t n_ops = gt.ops.size();
    const Eigen::Index v = logits.cols();

    struct Site {
        Eigen::Index row;
        std::vector<double> probs;  // over the full vocabulary
        double expected;
    };
    std::vector<Site> sites;
    sites.reserve(sample.value_digit_positions.size());
    MseAuxResult out;
    out.predicted.assign(n_ops, 0.0);
    for (const auto& dp : sample.value_digit_positions) {
        if (dp.position < 1 || dp.position >= logits.rows() || dp.op_index >= static_cast<int>(n_ops)) {
            throw LossError("mse_aux: digit position out of range");
        }
        Site s{dp.position - 1, std::vector<double>(static_cast<std::size_t>(v)), 0.0};
        const auto row = logits.row(s.row);
        double mx = -INFINITY;
        for (Eigen::Index j = 0; j < v; ++j) {
            mx = std::max(mx, static_cast<double>(row(j)));
        }
        double sum = 0.0;
        for (Eigen::Index j = 0; j < v; ++j) {
            s.probs[static_cast<std::size_t>(j)] = std::exp(static_cast<double>(row(j)) - mx);
            sum += s.probs[static_cast<std::size_t>(j)];
        }
        for (auto& q : s.probs) {
            q /= sum;
        }
        for (int d = 0; d < 10; ++d) {
            s.expected += d * s.probs[static_cast<std::size_t>(digits[static_cast<std::size_t>(d)])];
        }
        const double sign = gt.ops[static_cast<std::size_t>(dp.op_index)].value < 0 ? -1.0 : 1.0;
        out.predicted[static_cast<std::size_t>(dp.op_index)] += sign * s.expected * std::pow(10.0, -dp.place);
        sites.push_back(std::move(s));
    }
    for (std::size_t i = 0; i < n_ops; ++i) {
        const double d = out.predicted[i] - gt.ops[i].value;
        out.value += d * d;
    }
    out.value /= static_cast<double>(n_ops);

    if (dlogits) {
        std::vector<double> digit_of(static_cast<std::size_t>(v), 0.0);
        for (int d = 0; d < 10; ++d) {
            digit_of[static_cast<std::size_t>(digits[static_cast<std::size_t>(d)])] = d;
        }
        for (std::size_t k = 0; k < sites.size(); ++k) {
            const auto& dp = sample.value_digit_positions[k];
            const auto& s = sites[k];
            const auto& op = gt.ops[static_cast<std::size_t>(dp.op_index)];
            const double sign = op.value < 0 ? -1.0 : 1.0;
            const double dv = 2.0 * (out.predicted[static_cast<std::size_t>(dp.op_index)] - op.value) / static_cast<double>(n_ops);
            const double de = dv * sign * std::pow(10.0, -dp.place);
            for (Eigen::Index j = 0; j < v; ++j) {
                const double pj = s.probs[static_cast<std::size_t>(j)];
                (*dlogits)(s.row, j) += static_cast<T>(scale * de * pj * (digit_of[static_cast<std::size_t>(j)] - s.expected));
            }
        }
    }
    return out;
}

struct HeuristicAux {
    double c1 = 0.0;  // op-count mismatch
    double c2 = 0.0;  // intersection shortfall
    double c3 = 0.0;  // zero-fill parameter MSE
    double value() const { return (c1 + c2 + c3) / 3.0; }
};

/// With `binary_c2`, c2 is 1 only when no ground-truth op is predicted.
inline HeuristicAux heuristic_aux(const ParsedPrediction& pred, const EditSpec& gt, bool binary_c2 = false)
{
    if (gt.ops.empty()) {
        throw LossError("heuristic_aux: empty ground truth");
    }
    HeuristicAux h;
    const double n_gt = static_cast<double>(gt.ops.size());
    h.c1 = std::min(1.0, std::abs(static_cast<double>(pred.ops.size()) - n_gt) / n_gt);
    const double acc = accuracy(pred, gt);
    h.c2 = binary_c2 ? (acc == 0.0 ? 1.0 : 0.0) : 1.0 - acc;
    h.c3 = param_mse(pred, gt);
    return h;
}

/// Argmax tokens at the answer positions of a teacher-forced pass, cut at
/// the first <eos>.
template <class T>
std::vector<int> teacher_forced_argmax(const Mat<T>& logits, const EncodedSample& s)
{
    std::vector<int> out;
    for (int t = s.answer_start; t < s.length(); ++t) {
        const int id = argmax_lowest(logits.row(t - 1));
        if (id == TokenVocab::kEos) {
            break;
        }
        out.push_back(id);
    }
    return out;
}

// ---- optimizer ----------------------------------------------------------------

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    double clip_norm = 1.0;  // global gradient-norm clip; <= 0 disables
};

/// Adam with decoupled weight decay over an explicit parameter list.
/// Parameters outside the list are never touched.
template <class T>
class AdamW {
public:
    AdamW(std::vector<Param<T>*> params, AdamConfig cfg = {}) : params_(std::move(params)), cfg_(cfg)
    {
        for (auto* p : params_) {
            m_.push_back(Mat<T>::Zero(p->value.rows(), p->value.cols()));
            v_.push_back(Mat<T>::Zero(p->value.rows(), p->value.cols()));
        }
    }

    double grad_norm() const
    {
        double s = 0.0;
        for (auto* p : params_) {
            s += p->grad.template cast<double>().squaredNorm();
        }
        return std::sqrt(s);
    }

    /// Returns the pre-clip gradient norm.
    double step(double lr)
    {
        ++t_;
        const double norm = grad_norm();
        const double clip = cfg_.clip_norm > 0 && norm > cfg_.clip_norm ? cfg_.clip_norm / norm : 1.0;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Param<T>& p = *params_[i];
            const auto g = (p.grad.array() * static_cast<T>(clip)).eval();
            m_[i].array() = b1 * m_[i].array() + (T(1) - b1) * g;
            v_[i].array() = b2 * v_[i].array() + (T(1) - b2) * g.square();
            if (p.decay && cfg_.weight_decay > 0) {
                p.value *= static_cast<T>(1.0 - lr * cfg_.weight_decay);
            }
            const auto mhat = m_[i].array() / static_cast<T>(bc1);
            const auto vhat = v_[i].array() / static_cast<T>(bc2);
            p.value.array() -= static_cast<T>(lr) * mhat / (vhat.sqrt() + static_cast<T>(cfg_.eps));
        }
        return norm;
    }

    std::int64_t steps() const { return t_; }

private:
    std::vector<Param<T>*> params_;
    AdamConfig cfg_;
    std::vector<Mat<T>> m_, v_;
    std::int64_t t_ = 0;
};

/// Linear warmup to `peak`, then cosine decay to `floor` at `total` steps.
struct LrSchedule {
    std::int64_t warmup = 200;
    double peak = 1e-3;
    double floor = 1e-5;
    std::int64_t total = 1;

    double at(std::int64_t step) const
    {
        if (step < warmup) {
            return peak * static_cast<double>(step + 1) / static_cast<double>(warmup);
        }
        const double span = std::max<std::int64_t>(1, total - warmup);
        const double progress = std::min(1.0, static_cast<double>(step - warmup) / span);
        return floor + 0.5 * (peak - floor) * (1.0 + std::cos(std::numbers::pi * progress));
    }
};

template <class T>
std::vector<Param<T>*> trainable_params(Model<T>& model)
{
    std::vector<Param<T>*> out;
    for (auto* p : model.params()) {
        if (model.trainable(p->group)) {
            out.push_back(p);
        }
    }
    return out;
}

template <class T>
std::vector<Param<T>*> group_params(Model<T>& model, ParamGroup g)
{
    std::vector<Param<T>*> out;
    for (auto* p : model.params()) {
        if (p->group == g) {
            out.push_back(p);
        }
    }
    return out;
}

namespace detail {

inline void check_finite(double v, const std::string& what)
{
    if (!std::isfinite(v)) {
        throw DivergenceError(what + " is not finite");
    }
}

inline std::string fmt(double v)
{
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

inline std::string fmt_exact(double v)
{
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

} // namespace detail

// ---- vision pretraining -------------------------------------------------------

struct VisionPretrainConfig {
    std::size_t images = 5000;
    std::size_t heldout = 200;
    int epochs = 5;
    int batch = 8;
    double target_mse = 0.01;
    double lr = 1e-3;
    std::uint64_t seed = 0;
};

struct VisionPretrainResult {
    int epochs_run = 0;
    double train_mse = 0.0;
    double heldout_mse = 0.0;
};

/// Synthetic image for pretraining: a random scene, edited by a random spec
/// half of the time.
inline Image pretrain_image(std::uint64_t seed)
{
    Rng rng(mix_seed(seed, 0x7e1ULL));
    Image img = synth_image(seed);
    if (rng.coin()) {
        img = apply_spec(img, gen_spec(rng, GenConfig{}));
    }
    return dequantize(quantize(img));
}

/// Trains the vision encoder with a throwaway linear decoder that
/// reconstructs the image from its K tokens. `images` is topped up with
/// synthetic ones to `cfg.images`.
template <class T>
VisionPretrainResult pretrain_vision(Model<T>& model, std::vector<Image> images, const VisionPretrainConfig& cfg,
                                     std::ostream* log = nullptr)
{
    const ModelConfig& mc = model.config();
    if (images.size() > cfg.images) {
        images.resize(cfg.images);
    }
    for (std::size_t i = images.size(); i < cfg.images; ++i) {
        images.push_back(pretrain_image(mix_seed(cfg.seed, i)));
    }
    std::vector<Image> heldout;
    for (std::size_t i = 0; i < cfg.heldout; ++i) {
        heldout.push_back(pretrain_image(mix_seed(cfg.seed ^ 0x4e1d07ULL, i)));
    }

    Rng rng(mix_seed(cfg.seed, 0x7157ULL));
    Linear<T> decoder("vision.decoder", ParamGroup::vision, mc.k_tokens * mc.d_vision, Image::kSize);
    decoder.init(rng, 0.01);
    decoder.b.fill(T(0.5));

    const bool was_frozen = model.config().freeze_vision;
    model.mutable_config().freeze_vision = false;
    auto params = group_params(model, ParamGroup::vision);
    params.push_back(&decoder.w);
    params.push_back(&decoder.b);
    AdamW<T> opt(params, AdamConfig{.weight_decay = 0.0});

    auto reconstruct = [&](const Image& img, VisionCache<T>* cache, Mat<T>* flat) {
        Mat<T> tokens = model.encode_image(img, cache);
        Mat<T> f = Eigen::Map<const Mat<T>>(tokens.data(), 1, tokens.size());
        Mat<T> out = decoder.forward(f);
        if (flat) {
            *flat = std::move(f);
        }
        return out;
    };
    auto target_of = [](const Image& img) {
        Mat<T> t(1, Image::kSize);
        for (int i = 0; i < Image::kSize; ++i) {
            t(0, i) = static_cast<T>(img.data[static_cast<std::size_t>(i)]);
        }
        return t;
    };
    auto heldout_mse = [&] {
        double s = 0.0;
        for (const auto& img : heldout) {
            s += (reconstruct(img, nullptr, nullptr) - target_of(img)).template cast<double>().squaredNorm() / Image::kSize;
        }
        return heldout.empty() ? 0.0 : s / static_cast<double>(heldout.size());
    };

    VisionPretrainResult res;
    std::vector<std::size_t> order(images.size());
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), 0);
        Rng order_rng(mix_seed(cfg.seed, 0x0a0ULL + static_cast<std::uint64_t>(epoch)));
        order_rng.shuffle(order.begin(), order.end());
        double sum = 0.0;
        for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(cfg.batch)) {
            const std::size_t end = std::min(order.size(), b + static_cast<std::size_t>(cfg.batch));
            for (auto* p : params) {
                p->zero_grad();
            }
            for (std::size_t i = b; i < end; ++i) {
                const Image& img = images[order[i]];
                VisionCache<T> cache;
                Mat<T> flat;
                const Mat<T> diff = reconstruct(img, &cache, &flat) - target_of(img);
                const double mse = diff.template cast<double>().squaredNorm() / Image::kSize;
                detail::check_finite(mse, "vision reconstruction loss");
                sum += mse;
                const Mat<T> dy = diff * static_cast<T>(2.0 / Image::kSize / static_cast<double>(end - b));
                const Mat<T> dflat = decoder.backward(flat, dy, true);
                const Mat<T> dtokens = Eigen::Map<const Mat<T>>(dflat.data(), mc.k_tokens, mc.d_vision);
                model.encode_image_backward(cache, dtokens);
            }
            opt.step(cfg.lr);
        }
        res.epochs_run = epoch + 1;
        res.train_mse = sum / static_cast<double>(order.size());
        res.heldout_mse = heldout_mse();
        if (log) {
            *log << "pretrain-vision epoch " << res.epochs_run << " train_mse " << detail::fmt(res.train_mse)
                 << " heldout_mse " << detail::fmt(res.heldout_mse) << "\n";
        }
        if (res.heldout_mse < cfg.target_mse) {
            break;
        }
    }
    model.mutable_config().freeze_vision = was_frozen;
    for (auto* p : params) {
        p->zero_grad();
    }
    return res;
}

// ---- language-model pretraining ------------------------------------------------

struct LmPretrainConfig {
    std::size_t pairs = 50000;
    std::size_t heldout = 500;
    int epochs = 3;
    int batch = 8;
    std::int64_t warmup = 200;
    double peak_lr = 1e-3;
    double floor_lr = 1e-5;
    double break_fraction = 0.25;  // share of prompts rendered in the break style
    std::uint64_t seed = 0;
};

struct LmPretrainResult {
    int epochs_run = 0;
    double train_ce = 0.0;
    double heldout_ce = 0.0;         // over all text positions
    double heldout_answer_ce = 0.0;  // over answer positions only
};

/// One (prompt, answer) text pair over a random spec, assembled with image
/// slots that the LM sees as their marker embeddings only.
inline EncodedSample pretrain_text_sample(std::uint64_t seed, const TokenVocab& vocab, int k, double break_fraction,
                                          const PromptAssets& assets = builtin_prompt_assets())
{
    Rng rng(mix_seed(seed, 0x1a7ULL));
    TripletRecord r;
    r.id = "lm";
    r.spec = gen_spec(rng, GenConfig{});
    r.command = gen_command(r.spec, seed, assets);
    const bool use_command = rng.coin();
    const PromptStyle style = rng.uniform() < break_fraction ? PromptStyle::breaks : PromptStyle::plain;
    const RenderedPrompt prompt = select_and_render(r, use_command, rng, assets, style);
    EncodedSample s = assemble(vocab.tokenize(prompt.text), vocab.tokenize(render_ground_truth(r.spec)), k, vocab);
    s.uses_command = use_command;
    s.template_id = prompt.template_id;
    return s;
}

/// Mask over every text target: all positions after <bos> that are not
/// image slots.
inline std::vector<std::uint8_t> text_mask(const EncodedSample& s)
{
    std::vector<std::uint8_t> m(s.token_ids.size(), 0);
    for (std::size_t t = 1; t < m.size(); ++t) {
        const int id = s.token_ids[t];
        m[t] = id != TokenVocab::kSlot1 && id != TokenVocab::kSlot2 ? 1 : 0;
    }
    return m;
}

template <class T>
LmPretrainResult pretrain_lm(Model<T>& model, const TokenVocab& vocab, const LmPretrainConfig& cfg,
                             std::ostream* log = nullptr)
{
    const int k = model.config().k_tokens;
    std::vector<EncodedSample> corpus, heldout;
    corpus.reserve(cfg.pairs);
    for (std::size_t i = 0; i < cfg.pairs; ++i) {
        corpus.push_back(pretrain_text_sample(mix_seed(cfg.seed, i), vocab, k, cfg.break_fraction));
    }
    for (std::size_t i = 0; i < cfg.heldout; ++i) {
        heldout.push_back(pretrain_text_sample(mix_seed(cfg.seed ^ 0x4e1d07ULL, i), vocab, k, cfg.break_fraction));
    }

    const bool was_frozen = model.config().freeze_lm;
    model.mutable_config().freeze_lm = false;
    auto params = group_params(model, ParamGroup::lm);
    AdamW<T> opt(params);
    const std::int64_t steps_per_epoch = static_cast<std::int64_t>((corpus.size() + static_cast<std::size_t>(cfg.batch) - 1) /
                                                                   static_cast<std::size_t>(cfg.batch));
    const LrSchedule sched{cfg.warmup, cfg.peak_lr, cfg.floor_lr, steps_per_epoch * cfg.epochs};

    auto heldout_ce = [&](bool answer_only) {
        double s = 0.0;
        for (const auto& e : heldout) {
            const Mat<T> logits = model.lm_forward(e.token_ids, e.image_slots, {nullptr, nullptr}, nullptr);
            s += answer_only ? lm_loss(logits, std::span<const int>(e.token_ids), std::span<const std::uint8_t>(e.loss_mask))
                             : lm_loss(logits, std::span<const int>(e.token_ids), std::span<const std::uint8_t>(text_mask(e)));
        }
        return heldout.empty() ? 0.0 : s / static_cast<double>(heldout.size());
    };

    LmPretrainResult res;
    std::vector<std::size_t> order(corpus.size());
    std::int64_t step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), 0);
        Rng order_rng(mix_seed(cfg.seed, 0x1a0ULL + static_cast<std::uint64_t>(epoch)));
        order_rng.shuffle(order.begin(), order.end());
        double sum = 0.0;
        for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(cfg.batch), ++step) {
            const std::size_t end = std::min(order.size(), b + static_cast<std::size_t>(cfg.batch));
            for (auto* p : params) {
                p->zero_grad();
            }
            for (std::size_t i = b; i < end; ++i) {
                const EncodedSample& e = corpus[order[i]];
                LmCache<T> cache;
                const Mat<T> logits = model.lm_forward(e.token_ids, e.image_slots, {nullptr, nullptr}, &cache);
                Mat<T> dlogits = Mat<T>::Zero(logits.rows(), logits.cols());
                const auto mask = text_mask(e);
                const double loss = lm_loss(logits, std::span<const int>(e.token_ids), std::span<const std::uint8_t>(mask),
                                            &dlogits, 1.0 / static_cast<double>(end - b));
                detail::check_finite(loss, "LM pretraining loss");
                sum += loss;
                model.lm_backward(cache, dlogits);
            }
            opt.step(sched.at(step));
            if (log && step % 500 == 0) {
                *log << "pretrain-lm step " << step << " loss " << detail::fmt(sum / static_cast<double>(end)) << "\n";
            }
        }
        res.epochs_run = epoch + 1;
        res.train_ce = sum / static_cast<double>(order.size());
    }
    res.heldout_ce = heldout_ce(false);
    res.heldout_answer_ce = heldout_ce(true);
    if (log) {
        *log << "pretrain-lm done train_ce " << detail::fmt(res.train_ce) << " heldout_ce " << detail::fmt(res.heldout_ce)
             << " heldout_answer_ce " << detail::fmt(res.heldout_answer_ce) << "\n";
    }
    model.mutable_config().freeze_lm = was_frozen;
    for (auto* p : params) {
        p->zero_grad();
    }
    return res;
}

// ---- fine-tuning ----------------------------------------------------------------

inline const std::set<std::string>& experiment_ids()
{
    static const std::set<std::string> ids = {"1", "2", "3", "4", "4x"};
    return ids;
}

struct TrainConfig {
    std::string experiment = "1";
    int epochs = 10;
    int batch_size = 2;
    std::int64_t warmup = 200;
    double peak_lr = 1e-3;
    double floor_lr = 1e-5;
    double weight_decay = 0.01;
    double clip_norm = 1.0;
    double aux_weight = 1.0;
    std::optional<bool> aux_detached;  // unset: per-experiment default
    bool binary_c2 = false;
    bool unfrozen = false;
    std::uint64_t seed = 0;
    std::size_t train_limit = 0;  // 0 = whole train split
    std::size_t val_limit = 0;    // 0 = whole val split
    int max_new = 64;

    /// Experiment 2 defaults to the differentiable surrogate, experiment 3
    /// to the literal (gradient-free) reading.
    bool effective_aux_detached() const { return aux_detached.value_or(experiment == "3"); }

    void validate() const
    {
        if (!experiment_ids().contains(experiment)) {
            throw ConfigError("invalid experiment id '" + experiment + "' (expected 1, 2, 3, 4 or 4x)");
        }
        if (epochs < 1) {
            throw ConfigError("epochs must be >= 1");
        }
        if (batch_size < 2 || batch_size % 2 != 0) {
            throw ConfigError("batch_size must be even and >= 2 (half with command, half without)");
        }
    }

    std::map<std::string, std::string> to_map() const
    {
        return {
            {"experiment", experiment},
            {"epochs", std::to_string(epochs)},
            {"batch_size", std::to_string(batch_size)},
            {"warmup", std::to_string(warmup)},
            {"peak_lr", detail::fmt(peak_lr)},
            {"floor_lr", detail::fmt(floor_lr)},
            {"weight_decay", detail::fmt(weight_decay)},
            {"clip_norm", detail::fmt(clip_norm)},
            {"aux_weight", detail::fmt(aux_weight)},
            {"aux_detached", effective_aux_detached() ? "true" : "false"},
            {"binary_c2", binary_c2 ? "true" : "false"},
            {"unfrozen", unfrozen ? "true" : "false"},
            {"seed", std::to_string(seed)},
            {"train_limit", std::to_string(train_limit)},
            {"val_limit", std::to_string(val_limit)},
            {"max_new", std::to_string(max_new)},
        };
    }
};

struct ValidationPoint {
    int epoch = 0;
    std::int64_t step = 0;
    double accuracy = 0.0;
    double mse = 0.0;
};

/// True when `a` beats `b`: higher accuracy, then lower MSE, then earlier step.
inline bool better_checkpoint(const ValidationPoint& a, const ValidationPoint& b)
{
    if (a.accuracy != b.accuracy) {
        return a.accuracy > b.accuracy;
    }
    if (a.mse != b.mse) {
        return a.mse < b.mse;
    }
    return a.step < b.step;
}

struct TrainResult {
    ValidationPoint best;
    std::vector<ValidationPoint> validation;
    std::int64_t steps = 0;
    std::size_t with_command = 0;
    std::size_t without_command = 0;
};

/// Prepares a pretrained model for an experiment: registers the
/// experiment's special tokens, grows the vocabulary and initializes the new
/// rows, and applies the freeze flags.
inline std::pair<Model<float>, TokenVocab> prepare_for_experiment(Model<float> model, const CheckpointMeta& meta,
                                                                  const TrainConfig& cfg,
                                                                  const PromptAssets& assets = builtin_prompt_assets())
{
    const TokenVocab base = vocab_for(meta, assets);
    const SpecialRegistration reg = register_special_tokens(base, special_tokens_for(cfg.experiment));
    model.resize_vocab(reg.vocab.size());
    for (const auto& init : reg.inits) {
        model.init_special_embedding(init.id, init.old_ids);
    }
    model.mutable_config().freeze_vision = !cfg.unfrozen;
    model.mutable_config().freeze_lm = !cfg.unfrozen;
    return {std::move(model), reg.vocab};
}

namespace detail {

inline void write_kv(const std::filesystem::path& path, const std::map<std::string, std::string>& kv)
{
    std::ofstream out(path);
    for (const auto& [k, v] : kv) {
        out << k << "=" << v << "\n";
    }
}

} // namespace detail

inline constexpr const char* kRunlogHeader =
    "step,epoch,lm_loss,aux,aux_c1,aux_c2,aux_c3,total_loss,lr,grad_norm,with_command,without_command";
inline constexpr const char* kValidationHeader =
    "epoch,step,accuracy,mse,accuracy_with_command,accuracy_without_command,mse_with_command,mse_without_command,malformed";

/// Fine-tunes `model` (already prepared for the experiment) and writes the
/// run directory. Returns the validation history and best point.
inline TrainResult train(Model<float>& model, const TokenVocab& vocab, const TrainConfig& cfg, const Manifest& manifest,
                         const PairLoader& loader, const std::filesystem::path& run_dir,
                         const std::map<std::string, std::string>& extra_config = {}, std::ostream* log = nullptr,
                         const PromptAssets& assets = builtin_prompt_assets())
{
    namespace fs = std::filesystem;
    cfg.validate();
    auto train_set = manifest.split(Split::train);
    auto val_set = manifest.split(Split::val);
    if (train_set.empty() || val_set.empty()) {
        throw ConfigError("manifest needs non-empty train and val splits");
    }
    if (cfg.train_limit && train_set.size() > cfg.train_limit) {
        train_set.resize(cfg.train_limit);
    }
    if (train_set.size() < static_cast<std::size_t>(cfg.batch_size)) {
        throw ConfigError("train split smaller than one batch");
    }
    fs::create_directories(run_dir);

    auto cfg_map = cfg.to_map();
    for (const auto& [k, v] : model.config().to_map()) {
        cfg_map["model." + k] = v;
    }
    for (const auto& [k, v] : extra_config) {
        cfg_map[k] = v;
    }
    detail::write_kv(run_dir / "config.txt", cfg_map);
    detail::write_kv(run_dir / "meta.txt", {{"seed", std::to_string(cfg.seed)},
                                            {"threads", "1"},
                                            {"version", kVersionString},
                                            {"vocab_fingerprint", hex64(vocab.fingerprint())},
                                            {"manifest_hash", manifest_hash(manifest)}});

    const std::string& exp = cfg.experiment;
    const PromptStyle style = prompt_style_for(exp);
    const bool detached = cfg.effective_aux_detached();
    const bool vision_frozen = model.config().freeze_vision;
    const int k = model.config().k_tokens;

    // Frozen encoder: its features never change, so compute them once.
    std::vector<std::array<Mat<float>, 2>> features;
    if (vision_frozen) {
        features.reserve(train_set.size());
        for (const auto* r : train_set) {
            const auto [src, ed] = loader(*r);
            features.push_back({model.encode_image(src), model.encode_image(ed)});
        }
    }

    AdamW<float> opt(trainable_params(model), AdamConfig{.weight_decay = cfg.weight_decay, .clip_norm = cfg.clip_norm});
    const std::size_t half = static_cast<std::size_t>(cfg.batch_size / 2);
    const std::size_t steps_per_epoch = train_set.size() / static_cast<std::size_t>(cfg.batch_size);
    const LrSchedule sched{cfg.warmup, cfg.peak_lr, cfg.floor_lr, static_cast<std::int64_t>(steps_per_epoch) * cfg.epochs};

    std::ofstream runlog(run_dir / "runlog.csv");
    runlog << kRunlogHeader << "\n";
    std::ofstream vallog(run_dir / "validation.csv");
    vallog << kValidationHeader << "\n";

    CheckpointMeta meta;
    meta.vocab_fingerprint = vocab.fingerprint();
    meta.specials = vocab.specials();
    meta.experiment = exp;

    TrainResult res;
    bool have_best = false;
    std::int64_t step = 0;
    std::vector<std::size_t> order(train_set.size());
    Rng template_rng(mix_seed(cfg.seed, 0x7e3ULL));
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), 0);
        Rng order_rng(mix_seed(cfg.seed, 0x0deULL + static_cast<std::uint64_t>(epoch)));
        order_rng.shuffle(order.begin(), order.end());
        Rng aug_rng(mix_seed(cfg.seed, 0xa06ULL + static_cast<std::uint64_t>(epoch)));
        std::size_t with_count = 0, without_count = 0;

        for (std::size_t b = 0; b < steps_per_epoch; ++b, ++step) {
            // Exactly half of each batch gets a with-command prompt.
            std::vector<bool> use_command(static_cast<std::size_t>(cfg.batch_size), false);
            std::fill(use_command.begin(), use_command.begin() + static_cast<std::ptrdiff_t>(half), true);
            aug_rng.shuffle(use_command.begin(), use_command.end());

            model.zero_grad();
            double lm_sum = 0.0, aux_sum = 0.0;
            HeuristicAux parts_sum;
            const double inv_b = 1.0 / static_cast<double>(cfg.batch_size);
            for (std::size_t j = 0; j < static_cast<std::size_t>(cfg.batch_size); ++j) {
                const std::size_t idx = order[b * static_cast<std::size_t>(cfg.batch_size) + j];
                const TripletRecord& r = *train_set[idx];
                const RenderedPrompt prompt = select_and_render(r, use_command[j], template_rng, assets, style);
                EncodedSample s = assemble(vocab.tokenize(prompt.text), vocab.tokenize(render_ground_truth(r.spec)), k, vocab);
                s.uses_command = use_command[j];
                s.template_id = prompt.template_id;
                (use_command[j] ? with_count : without_count) += 1;

                ForwardCache<float> cache;
                Mat<float> logits;
                if (vision_frozen) {
                    logits = model.forward_features(s, features[idx][0], features[idx][1], &cache);
                } else {
                    const auto [src, ed] = loader(r);
                    logits = model.forward(s, src, ed, &cache);
                }
                Mat<float> dlogits = Mat<float>::Zero(logits.rows(), logits.cols());
                const double lm = lm_loss(logits, std::span<const int>(s.token_ids), std::span<const std::uint8_t>(s.loss_mask),
                                          &dlogits, inv_b);
                double aux = 0.0;
                if (exp == "2") {
                    if (detached) {
                        const auto pred = parse_output(vocab.detokenize(teacher_forced_argmax(logits, s)));
                        aux = param_mse(pred, r.spec);
                    } else {
                        aux = mse_aux(logits, s, r.spec, vocab, &dlogits, cfg.aux_weight * inv_b).value;
                    }
                } else if (exp == "3") {
                    const auto pred = parse_output(vocab.detokenize(teacher_forced_argmax(logits, s)));
                    HeuristicAux h = heuristic_aux(pred, r.spec, cfg.binary_c2);
                    if (!detached) {
                        h.c3 = mse_aux(logits, s, r.spec, vocab, &dlogits, cfg.aux_weight * inv_b / 3.0).value;
                    }
                    aux = h.value();
                    parts_sum.c1 += h.c1;
                    parts_sum.c2 += h.c2;
                    parts_sum.c3 += h.c3;
                }
                const double total = lm + cfg.aux_weight * aux;
                if (!std::isfinite(total)) {
                    std::ofstream(run_dir / "divergence.txt")
                        << "step=" << step << "\nepoch=" << epoch << "\nrecord=" << r.id << "\nlm_loss=" << lm
                        << "\naux=" << aux << "\nlr=" << sched.at(step) << "\n";
                    save_checkpoint(model, meta, run_dir / "ckpt_diverged.bin");
                    throw DivergenceError("training loss is not finite at step " + std::to_string(step) + " (record " + r.id +
                                          "); state dumped to " + (run_dir / "ckpt_diverged.bin").string());
                }
                lm_sum += lm;
                aux_sum += aux;
                model.backward(cache, dlogits);
            }
            const double lr = sched.at(step);
            const double gnorm = opt.step(lr);
            const double lm_mean = lm_sum * inv_b, aux_mean = aux_sum * inv_b;
            runlog << step << "," << epoch << "," << detail::fmt(lm_mean) << "," << detail::fmt(aux_mean) << ","
                   << detail::fmt(parts_sum.c1 * inv_b) << "," << detail::fmt(parts_sum.c2 * inv_b) << ","
                   << detail::fmt(parts_sum.c3 * inv_b) << "," << detail::fmt(lm_mean + cfg.aux_weight * aux_mean) << ","
                   << detail::fmt(lr) << "," << detail::fmt(gnorm) << "," << with_count << "," << without_count << "\n";
            if (log && step % 200 == 0) {
                *log << "train step " << step << " epoch " << epoch << " lm " << detail::fmt(lm_mean) << " aux "
                     << detail::fmt(aux_mean) << " lr " << detail::fmt(lr) << "\n";
            }
        }
        res.with_command += with_count;
        res.without_command += without_count;

        const EvalResult ev = evaluate(model, vocab, val_set, loader, {style, cfg.max_new, cfg.val_limit}, assets);
        const MetricsReport& rep = ev.report;
        const ValidationPoint vp{epoch, step, rep[kAll].accuracy(), rep[kAll].mse()};
        res.validation.push_back(vp);
        vallog << epoch << "," << step << "," << detail::fmt_exact(vp.accuracy) << "," << detail::fmt_exact(vp.mse) << ","
               << detail::fmt_exact(rep[kWithCommand].accuracy()) << "," << detail::fmt_exact(rep[kWithoutCommand].accuracy())
               << "," << detail::fmt_exact(rep[kWithCommand].mse()) << "," << detail::fmt_exact(rep[kWithoutCommand].mse())
               << "," << rep[kAll].malformed << "\n";
        vallog.flush();
        runlog.flush();
        if (log) {
            *log << "validation epoch " << epoch << " step " << step << " accuracy " << detail::fmt(vp.accuracy) << " mse "
                 << detail::fmt(vp.mse) << " (with " << detail::fmt(rep[kWithCommand].accuracy()) << ", without "
                 << detail::fmt(rep[kWithoutCommand].accuracy()) << ")\n";
        }
        meta.step = step;
        meta.val_accuracy = vp.accuracy;
        meta.val_mse = vp.mse;
        if (!have_best || better_checkpoint(vp, res.best)) {
            res.best = vp;
            have_best = true;
            save_checkpoint(model, meta, run_dir / "ckpt_best.bin");
        }
    }
    save_checkpoint(model, meta, run_dir / "ckpt_last.bin");
    res.steps = step;
    std::ofstream(run_dir / "best.txt") << "epoch=" << res.best.epoch << "\nstep=" << res.best.step
                                        << "\naccuracy=" << detail::fmt_exact(res.best.accuracy)
                                        << "\nmse=" << detail::fmt_exact(res.best.mse) << "\n";
    return res;
}

// ---- gradient verification -------------------------------------------------------

struct ProbeItem {
    EncodedSample sample;
    Image source;
    Image edited;
    EditSpec spec;
};

/// Fixed two-sample batch (one with command, one without) over builtin
/// records; used by grad_check and the probe dump.
inline std::vector<ProbeItem> make_probe_batch(const TokenVocab& vocab, int k, const PromptAssets& assets = builtin_prompt_assets())
{
    std::vector<ProbeItem> out;
    Rng rng(0x9b0be5eedULL);
    const PairLoader loader;
    for (int i = 0; i < 2; ++i) {
        GenConfig gc;
        gc.op_count_weights = {0.0, 1.0, 0.0};
        TripletRecord r = gen_record(0x9b0beULL, static_cast<std::uint64_t>(i), gc, assets);
        const bool use_command = i == 0;
        const RenderedPrompt prompt = select_and_render(r, use_command, rng, assets);
        ProbeItem item;
        item.sample = assemble(vocab.tokenize(prompt.text), vocab.tokenize(render_ground_truth(r.spec)), k, vocab);
        item.sample.uses_command = use_command;
        std::tie(item.source, item.edited) = loader(r);
        item.spec = r.spec;
        out.push_back(std::move(item));
    }
    return out;
}

/// Mean over the batch of lm_loss (+ mse_aux); accumulates gradients when
/// `backward` is set.
template <class T>
double probe_loss(Model<T>& model, const std::vector<ProbeItem>& batch, const TokenVocab& vocab, bool with_aux, bool backward)
{
    double total = 0.0;
    const double inv = 1.0 / static_cast<double>(batch.size());
    for (const auto& item : batch) {
        ForwardCache<T> cache;
        const Mat<T> logits = model.forward(item.sample, item.source, item.edited, backward ? &cache : nullptr);
        Mat<T> dlogits;
        if (backward) {
            dlogits = Mat<T>::Zero(logits.rows(), logits.cols());
        }
        total += lm_loss(logits, std::span<const int>(item.sample.token_ids), std::span<const std::uint8_t>(item.sample.loss_mask),
                         backward ? &dlogits : nullptr, inv) *
                 inv;
        if (with_aux) {
            total += mse_aux(logits, item.sample, item.spec, vocab, backward ? &dlogits : nullptr, inv).value * inv;
        }
        if (backward) {
            model.backward(cache, dlogits);
        }
    }
    return total;
}

struct ScalarCheck {
    std::string tensor;
    ParamGroup group = ParamGroup::lm;
    Eigen::Index index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_error = 0.0;
};

struct GradCheckOptions {
    std::size_t max_scalars = 200;
    double h = 1e-4;
    bool with_aux = true;
    std::uint64_t seed = 0;
};

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::vector<ScalarCheck> checks;
    std::map<ParamGroup, std::size_t> per_group;
    double frozen_grad_abs_max = 0.0;  // largest |grad| over frozen groups
};

template <class T>
bool is_key_bias(const Param<T>& p, Eigen::Index idx)
{
    const std::string suffix = ".attn.qkv.b";
    if (p.name.size() < suffix.size() || p.name.compare(p.name.size() - suffix.size(), suffix.size(), suffix) != 0) {
        return false;
    }
    const Eigen::Index dim = p.value.cols() / 3;
    return idx >= dim && idx < 2 * dim;
}

/// Picks up to `n` scalars round-robin over every tensor. Embedding rows
/// are restricted to tokens and positions the batch actually uses.
template <class T>
std::vector<std::pair<Param<T>*, Eigen::Index>> sample_scalars(Model<T>& model, const std::vector<ProbeItem>& batch,
                                                               std::size_t n, std::uint64_t seed)
{
    std::vector<int> used_tokens;
    int min_len = model.config().max_seq;
    for (const auto& item : batch) {
        for (int id : item.sample.token_ids) {
            if (id != TokenVocab::kSlot1 && id != TokenVocab::kSlot2) {
                used_tokens.push_back(id);
            }
        }
        min_len = std::min(min_len, item.sample.length());
    }
    Rng rng(mix_seed(seed, 0x96adULL));
    const auto params = model.params();
    std::vector<std::pair<Param<T>*, Eigen::Index>> out;
    std::set<std::pair<const Param<T>*, Eigen::Index>> seen;
    for (std::size_t round = 0; out.size() < n && round < 64; ++round) {
        for (auto* p : params) {
            if (out.size() >= n) {
                break;
            }
            const Eigen::Index cols = p->value.cols();
            Eigen::Index idx;
            if (p == &model.token_embedding()) {
                idx = used_tokens[rng.below(used_tokens.size())] * cols + static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(cols)));
            } else if (p->name == "lm.pos") {
                idx = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(min_len))) * cols +
                      static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(cols)));
            } else {
                idx = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(p->value.size())));
                // Key biases shift every score of a query row equally, so
                // softmax cancels them: their gradient is identically zero
                // and a relative error there only measures rounding noise.
                if (is_key_bias(*p, idx)) {
                    continue;
                }
            }
            if (seen.insert({p, idx}).second) {
                out.emplace_back(p, idx);
            }
        }
    }
    return out;
}

/// Central finite differences against the analytic gradient of the probe
/// loss. Frozen groups are excluded from the comparison; their analytic
/// gradient magnitude is reported instead.
template <class T>
GradCheckResult grad_check(Model<T>& model, const std::vector<ProbeItem>& batch, const TokenVocab& vocab,
                           const GradCheckOptions& opts = {})
{
    GradCheckResult res;
    model.zero_grad();
    probe_loss(model, batch, vocab, opts.with_aux, true);
    for (const auto* p : model.params()) {
        if (!model.trainable(p->group)) {
            res.frozen_grad_abs_max = std::max(res.frozen_grad_abs_max, static_cast<double>(p->grad.cwiseAbs().maxCoeff()));
        }
    }
    for (auto [p, idx] : sample_scalars(model, batch, opts.max_scalars, opts.seed)) {
        if (!model.trainable(p->group)) {
            continue;
        }
        T& x = p->value.data()[idx];
        const T saved = x;
        x = saved + static_cast<T>(opts.h);
        const double up = probe_loss(model, batch, vocab, opts.with_aux, false);
        x = saved - static_cast<T>(opts.h);
        const double down = probe_loss(model, batch, vocab, opts.with_aux, false);
        x = saved;
        ScalarCheck c;
        c.tensor = p->name;
        c.group = p->group;
        c.index = idx;
        c.analytic = static_cast<double>(p->grad.data()[idx]);
        c.numeric = (up - down) / (2.0 * opts.h);
        c.rel_error = std::abs(c.analytic - c.numeric) / (std::abs(c.analytic) + std::abs(c.numeric) + 1e-8);
        res.max_rel_error = std::max(res.max_rel_error, c.rel_error);
        res.per_group[c.group] += 1;
        res.checks.push_back(c);
    }
    model.zero_grad();
    return res;
}

// ---- probe dump ---------------------------------------------------------------------

/// Logits of the first probe sample as hex float32 bit patterns, one row
/// per line.
inline std::string probe_hex(const Model<float>& model, const TokenVocab& vocab)
{
    const auto batch = make_probe_batch(vocab, model.config().k_tokens);
    const auto& item = batch.front();
    const Mat<float> logits = model.forward(item.sample, item.source, item.edited);
    std::string out;
    char buf[16];
    for (Eigen::Index t = 0; t < logits.rows(); ++t) {
        for (Eigen::Index j = 0; j < logits.cols(); ++j) {
            std::snprintf(buf, sizeof buf, "%08x", std::bit_cast<std::uint32_t>(logits(t, j)));
            out += buf;
        }
        out += "\n";
    }
    return out;
}

} // namespace rdlab
