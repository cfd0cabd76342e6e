#pragma once

// Two-image vision-language model at desk scale: a shared patch-transformer
// vision encoder pooled to K tokens, a single affine projection into the LM
// embedding space, and a causal decoder-only LM with learned absolute
// positions over the interleaved sequence.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "rdlab/errors.hpp"
#include "rdlab/imgedit.hpp"
#include "rdlab/nn.hpp"
#include "rdlab/prompting.hpp"
#include "rdlab/rng.hpp"

namespace rdlab {

struct ModelConfig {
    int d_vision = 64;
    int d_lm = 128;
    int lm_layers = 4;
    int lm_heads = 4;
    int vision_layers = 2;
    int vision_heads = 4;
    int patch = 4;
    int k_tokens = 16;
    int max_seq = 128;
    int vocab_size = 0;
    bool freeze_vision = false;
    bool freeze_lm = false;
    std::uint64_t seed = 0;

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;

    int patches_per_side() const { return Image::kWidth / patch; }
    int num_patches() const { return patches_per_side() * patches_per_side(); }
    int patch_dim() const { return patch * patch * Image::kChannels; }

    void validate() const
    {
        if (d_lm % lm_heads != 0 || d_vision % vision_heads != 0) {
            throw ConfigError("model width must be divisible by the head count");
        }
        if (patch <= 0 || Image::kWidth % patch != 0) {
            throw ConfigError("patch size must divide the image width");
        }
        if (k_tokens <= 0 || 2 * k_tokens + 2 > max_seq) {
            throw ConfigError("two image slots must fit in max_seq");
        }
        if (vocab_size <= TokenVocab::kNumReserved) {
            throw ConfigError("vocab_size not set");
        }
    }

    std::map<std::string, std::string> to_map() const
    {
        return {
            {"d_vision", std::to_string(d_vision)},   {"d_lm", std::to_string(d_lm)},
            {"lm_layers", std::to_string(lm_layers)}, {"lm_heads", std::to_string(lm_heads)},
            {"vision_layers", std::to_string(vision_layers)}, {"vision_heads", std::to_string(vision_heads)},
            {"patch", std::to_string(patch)},         {"k_tokens", std::to_string(k_tokens)},
            {"max_seq", std::to_string(max_seq)},     {"vocab_size", std::to_string(vocab_size)},
            {"freeze_vision", freeze_vision ? "true" : "false"},
            {"freeze_lm", freeze_lm ? "true" : "false"},
            {"seed", std::to_string(seed)},
        };
    }

    static ModelConfig from_map(const std::map<std::string, std::string>& m)
    {
        ModelConfig c;
        auto get_int = [&](const char* key, int& out) {
            if (auto it = m.find(key); it != m.end()) {
                out = std::stoi(it->second);
            }
        };
        get_int("d_vision", c.d_vision);
        get_int("d_lm", c.d_lm);
        get_int("lm_layers", c.lm_layers);
        get_int("lm_heads", c.lm_heads);
        get_int("vision_layers", c.vision_layers);
        get_int("vision_heads", c.vision_heads);
        get_int("patch", c.patch);
        get_int("k_tokens", c.k_tokens);
        get_int("max_seq", c.max_seq);
        get_int("vocab_size", c.vocab_size);
        if (auto it = m.find("freeze_vision"); it != m.end()) c.freeze_vision = it->second == "true";
        if (auto it = m.find("freeze_lm"); it != m.end()) c.freeze_lm = it->second == "true";
        if (auto it = m.find("seed"); it != m.end()) c.seed = std::stoull(it->second);
        return c;
    }
};

template <class T>
struct VisionCache {
    Mat<T> patches;
    std::vector<BlockCache<T>> blocks;
    Mat<T> hidden;  // encoder output before pooling
    LayerNormCache<T> ln;
};

template <class T>
struct LmCache {
    std::vector<int> ids;
    std::array<ImageSlot, 2> slots{};
    std::vector<BlockCache<T>> blocks;
    LayerNormCache<T> ln_f;
    Mat<T> final_hidden;
};

template <class T>
struct ForwardCache {
    bool has_vision = false;
    std::array<VisionCache<T>, 2> vision;
    std::array<Mat<T>, 2> features;
    LmCache<T> lm;
};

/// Flattens a 32x32x3 image into (patches x patch_dim), patch order row-major,
/// element order (dy, dx, channel).
template <class T>
Mat<T> image_patches(const Image& img, int patch)
{
    const int side = Image::kWidth / patch;
    Mat<T> out(side * side, patch * patch * Image::kChannels);
    for (int py = 0; py < side; ++py) {
        for (int px = 0; px < side; ++px) {
            int col = 0;
            for (int dy = 0; dy < patch; ++dy) {
                for (int dx = 0; dx < patch; ++dx) {
                    for (int c = 0; c < Image::kChannels; ++c) {
                        out(py * side + px, col++) = static_cast<T>(img.at(py * patch + dy, px * patch + dx, c));
                    }
                }
            }
        }
    }
    return out;
}

template <class T>
class Model {
public:
    explicit Model(const ModelConfig& cfg) : cfg_(cfg)
    {
        cfg_.validate();
        build();
        Rng rng(mix_seed(cfg_.seed, 0x1417ULL));
        init(rng);
    }

    const ModelConfig& config() const { return cfg_; }
    ModelConfig& mutable_config() { return cfg_; }

    bool trainable(ParamGroup g) const
    {
        switch (g) {
        case ParamGroup::vision: return !cfg_.freeze_vision;
        case ParamGroup::lm: return !cfg_.freeze_lm;
        case ParamGroup::projection: return true;
        }
        return true;
    }

    template <class F>
    void visit(F&& f)
    {
        patch_embed_.visit(f);
        f(vision_pos_);
        for (auto& b : vision_blocks_) {
            b.visit(f);
        }
        f(pool_);
        vision_ln_.visit(f);
        projection_.visit(f);
        f(tok_emb_);
        f(pos_emb_);
        for (auto& b : blocks_) {
            b.visit(f);
        }
        ln_f_.visit(f);
        head_.visit(f);
    }

    std::vector<Param<T>*> params()
    {
        std::vector<Param<T>*> out;
        visit([&](Param<T>& p) { out.push_back(&p); });
        return out;
    }

    std::vector<const Param<T>*> params() const
    {
        std::vector<const Param<T>*> out;
        const_cast<Model*>(this)->visit([&](Param<T>& p) { out.push_back(&p); });
        return out;
    }

    void zero_grad()
    {
        visit([](Param<T>& p) { p.zero_grad(); });
    }

    std::size_t parameter_count() const
    {
        std::size_t n = 0;
        for (const auto* p : params()) {
            n += static_cast<std::size_t>(p->value.size());
        }
        return n;
    }

    template <class U>
    Model<U> cast() const
    {
        Model<U> out(cfg_);
        auto src = params();
        auto dst = out.params();
        for (std::size_t i = 0; i < src.size(); ++i) {
            dst[i]->value = src[i]->value.template cast<U>();
        }
        return out;
    }

    // ---- vision -------------------------------------------------------------

    /// K x d_vision tokens for one image.
    Mat<T> encode_image(const Image& img, VisionCache<T>* cache = nullptr) const
    {
        Mat<T> patches = image_patches<T>(img, cfg_.patch);
        Mat<T> h = patch_embed_.forward(patches);
        h += vision_pos_.value;
        if (cache) {
            cache->blocks.resize(vision_blocks_.size());
        }
        for (std::size_t i = 0; i < vision_blocks_.size(); ++i) {
            h = vision_blocks_[i].forward(h, cache ? &cache->blocks[i] : nullptr);
        }
        Mat<T> pooled = pool_.value * h;
        Mat<T> out = vision_ln_.forward(pooled, cache ? &cache->ln : nullptr);
        if (cache) {
            cache->patches = std::move(patches);
            cache->hidden = std::move(h);
        }
        return out;
    }

    void encode_image_backward(const VisionCache<T>& c, const Mat<T>& dtokens)
    {
        const bool acc = trainable(ParamGroup::vision);
        Mat<T> dpooled = vision_ln_.backward(c.ln, dtokens, acc);
        if (acc) {
            pool_.grad.noalias() += dpooled * c.hidden.transpose();
        }
        Mat<T> dh = pool_.value.transpose() * dpooled;
        for (std::size_t i = vision_blocks_.size(); i-- > 0;) {
            dh = vision_blocks_[i].backward(c.blocks[i], dh, acc);
        }
        if (acc) {
            vision_pos_.grad += dh;
            patch_embed_.backward(c.patches, dh, true);
        }
    }

    // ---- projection ---------------------------------------------------------

    Mat<T> project(const Mat<T>& features) const { return projection_.forward(features); }

    // ---- language model -----------------------------------------------------

    /// Logits (sequence x vocab). Slot positions hold the slot marker's
    /// embedding plus the given image embedding (marker alone when null), so
    /// the LM can tell source from edited wherever the template puts them.
    Mat<T> lm_forward(std::span<const int> ids, const std::array<ImageSlot, 2>& slots,
                      const std::array<const Mat<T>*, 2>& image_embeds, LmCache<T>* cache) const
    {
        const int n = static_cast<int>(ids.size());
        if (n > cfg_.max_seq) {
            throw ShapeError("sequence length " + std::to_string(n) + " exceeds max_seq");
        }
        Mat<T> x(n, cfg_.d_lm);
        for (int t = 0; t < n; ++t) {
            const int id = ids[static_cast<std::size_t>(t)];
            if (id < 0 || id >= tok_emb_.value.rows()) {
                throw ShapeError("token id out of range");
            }
            x.row(t) = tok_emb_.value.row(id);
        }
        for (int s = 0; s < 2; ++s) {
            const auto& slot = slots[static_cast<std::size_t>(s)];
            if (slot.length == 0) {
                continue;
            }
            if (slot.length != cfg_.k_tokens || slot.position + slot.length > n) {
                throw ShapeError("image slot does not match K");
            }
            const Mat<T>* e = image_embeds[static_cast<std::size_t>(s)];
            if (e) {
                if (e->rows() != cfg_.k_tokens || e->cols() != cfg_.d_lm) {
                    throw ShapeError("image embedding shape mismatch");
                }
                x.middleRows(slot.position, slot.length) += *e;
            }
        }
        x += pos_emb_.value.topRows(n);
        if (cache) {
            cache->blocks.resize(blocks_.size());
        }
        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            x = blocks_[i].forward(x, cache ? &cache->blocks[i] : nullptr);
        }
        Mat<T> xf = ln_f_.forward(x, cache ? &cache->ln_f : nullptr);
        Mat<T> logits = head_.forward(xf);
        if (cache) {
            cache->ids.assign(ids.begin(), ids.end());
            cache->slots = slots;
            cache->final_hidden = std::move(xf);
        }
        return logits;
    }

    /// Backpropagates through the LM; returns the gradients w.r.t. the two
    /// image-slot embeddings.
    std::array<Mat<T>, 2> lm_backward(const LmCache<T>& c, const Mat<T>& dlogits)
    {
        const bool acc = trainable(ParamGroup::lm);
        Mat<T> dx = ln_f_.backward(c.ln_f, head_.backward(c.final_hidden, dlogits, acc), acc);
        for (std::size_t i = blocks_.size(); i-- > 0;) {
            dx = blocks_[i].backward(c.blocks[i], dx, acc);
        }
        const int n = static_cast<int>(c.ids.size());
        std::array<Mat<T>, 2> dimg;
        for (int s = 0; s < 2; ++s) {
            const auto& slot = c.slots[static_cast<std::size_t>(s)];
            if (slot.length > 0) {
                dimg[static_cast<std::size_t>(s)] = dx.middleRows(slot.position, slot.length);
            }
        }
        if (acc) {
            pos_emb_.grad.topRows(n) += dx;
            for (int t = 0; t < n; ++t) {
                tok_emb_.grad.row(c.ids[static_cast<std::size_t>(t)]) += dx.row(t);
            }
        }
        return dimg;
    }

    // ---- full model ---------------------------------------------------------

    Mat<T> forward(const EncodedSample& s, const Image& source, const Image& edited, ForwardCache<T>* cache = nullptr) const
    {
        Mat<T> f1 = encode_image(source, cache ? &cache->vision[0] : nullptr);
        Mat<T> f2 = encode_image(edited, cache ? &cache->vision[1] : nullptr);
        if (cache) {
            cache->has_vision = true;
        }
        return forward_features(s, f1, f2, cache, true);
    }

    /// Forward from precomputed vision features (frozen encoder path).
    Mat<T> forward_features(const EncodedSample& s, const Mat<T>& f1, const Mat<T>& f2, ForwardCache<T>* cache = nullptr,
                            bool keep_vision = false) const
    {
        const Mat<T> p1 = project(f1);
        const Mat<T> p2 = project(f2);
        Mat<T> logits = lm_forward(s.token_ids, s.image_slots, {&p1, &p2}, cache ? &cache->lm : nullptr);
        if (cache) {
            cache->features = {f1, f2};
            if (!keep_vision) {
                cache->has_vision = false;
            }
        }
        return logits;
    }

    void backward(const ForwardCache<T>& c, const Mat<T>& dlogits)
    {
        auto dimg = lm_backward(c.lm, dlogits);
        for (std::size_t s = 0; s < 2; ++s) {
            if (dimg[s].size() == 0) {
                continue;
            }
            Mat<T> dfeat = projection_.backward(c.features[s], dimg[s], true);
            if (c.has_vision && trainable(ParamGroup::vision)) {
                encode_image_backward(c.vision[s], dfeat);
            }
        }
    }

    // ---- vocabulary growth --------------------------------------------------

    void resize_vocab(int n)
    {
        const auto old = static_cast<int>(tok_emb_.value.rows());
        if (n < old) {
            throw ShapeError("vocabulary can only grow");
        }
        auto grow = [&](Param<T>& p, bool rows) {
            Mat<T> v = rows ? Mat<T>::Zero(n, p.value.cols()) : Mat<T>::Zero(p.value.rows(), n);
            if (rows) {
                v.topRows(old) = p.value;
            } else {
                v.leftCols(old) = p.value;
            }
            p.value = std::move(v);
            p.grad = Mat<T>::Zero(p.value.rows(), p.value.cols());
        };
        grow(tok_emb_, true);
        grow(head_.w, true);
        grow(head_.b, false);
        cfg_.vocab_size = n;
    }

    /// Embedding (and output-head row) of `new_id` := mean of the rows of
    /// `old_ids`.
    void init_special_embedding(int new_id, std::span<const int> old_ids)
    {
        if (old_ids.empty()) {
            throw VocabError("special token initialization needs at least one source token");
        }
        if (new_id < 0 || new_id >= tok_emb_.value.rows()) {
            throw VocabError("special token id out of range");
        }
        Mat<T> emb = Mat<T>::Zero(1, tok_emb_.value.cols());
        Mat<T> head = Mat<T>::Zero(1, head_.w.value.cols());
        T bias = T(0);
        for (int id : old_ids) {
            emb += tok_emb_.value.row(id);
            head += head_.w.value.row(id);
            bias += head_.b.value(0, id);
        }
        const T inv = T(1) / static_cast<T>(old_ids.size());
        tok_emb_.value.row(new_id) = emb * inv;
        head_.w.value.row(new_id) = head * inv;
        head_.b.value(0, new_id) = bias * inv;
    }

    const Param<T>& token_embedding() const { return tok_emb_; }
    Param<T>& token_embedding() { return tok_emb_; }
    Linear<T>& head() { return head_; }
    Linear<T>& projection() { return projection_; }
    const Linear<T>& projection() const { return projection_; }

private:
    void build()
    {
        const int dv = cfg_.d_vision, d = cfg_.d_lm;
        patch_embed_ = Linear<T>("vision.patch", ParamGroup::vision, cfg_.patch_dim(), dv);
        vision_pos_ = Param<T>("vision.pos", ParamGroup::vision, cfg_.num_patches(), dv);
        vision_blocks_.clear();
        for (int i = 0; i < cfg_.vision_layers; ++i) {
            vision_blocks_.emplace_back("vision.block" + std::to_string(i), ParamGroup::vision, dv, cfg_.vision_heads, false);
        }
        pool_ = Param<T>("vision.pool", ParamGroup::vision, cfg_.k_tokens, cfg_.num_patches());
        vision_ln_ = LayerNorm<T>("vision.ln", ParamGroup::vision, dv);
        projection_ = Linear<T>("proj", ParamGroup::projection, dv, d);
        tok_emb_ = Param<T>("lm.tok", ParamGroup::lm, cfg_.vocab_size, d);
        pos_emb_ = Param<T>("lm.pos", ParamGroup::lm, cfg_.max_seq, d);
        blocks_.clear();
        for (int i = 0; i < cfg_.lm_layers; ++i) {
            blocks_.emplace_back("lm.block" + std::to_string(i), ParamGroup::lm, d, cfg_.lm_heads, true);
        }
        ln_f_ = LayerNorm<T>("lm.ln_f", ParamGroup::lm, d);
        head_ = Linear<T>("lm.head", ParamGroup::lm, d, cfg_.vocab_size);
    }

    void init(Rng& rng)
    {
        patch_embed_.init(rng);
        vision_pos_.normal_init(rng, 0.02);
        for (auto& b : vision_blocks_) {
            b.init(rng);
        }
        init_pool(rng);
        projection_.init(rng);
        tok_emb_.normal_init(rng, 0.02);
        pos_emb_.normal_init(rng, 0.02);
        for (auto& b : blocks_) {
            b.init(rng);
        }
        head_.init(rng);
    }

    // Spatial block averaging when K is a square grid dividing the patch grid;
    // otherwise a near-uniform average.
    void init_pool(Rng& rng)
    {
        const int side = cfg_.patches_per_side();
        const int g = static_cast<int>(std::lround(std::sqrt(static_cast<double>(cfg_.k_tokens))));
        if (g * g == cfg_.k_tokens && side % g == 0) {
            const int cell = side / g;
            const T w = T(1) / static_cast<T>(cell * cell);
            pool_.value.setZero();
            for (int k = 0; k < cfg_.k_tokens; ++k) {
                const int ky = k / g, kx = k % g;
                for (int y = 0; y < cell; ++y) {
                    for (int x = 0; x < cell; ++x) {
                        pool_.value(k, (ky * cell + y) * side + kx * cell + x) = w;
                    }
                }
            }
        } else {
            const double base = 1.0 / cfg_.num_patches();
            for (Eigen::Index i = 0; i < pool_.value.size(); ++i) {
                pool_.value.data()[i] = static_cast<T>(base * (1.0 + 0.1 * rng.normal()));
            }
        }
    }

    ModelConfig cfg_;
    Linear<T> patch_embed_;
    Param<T> vision_pos_;
    std::vector<Block<T>> vision_blocks_;
    Param<T> pool_;
    LayerNorm<T> vision_ln_;
    Linear<T> projection_;
    Param<T> tok_emb_;
    Param<T> pos_emb_;
    std::vector<Block<T>> blocks_;
    LayerNorm<T> ln_f_;
    Linear<T> head_;
};

/// Argmax with ties going to the lowest index.
template <class Row>
int argmax_lowest(const Row& row)
{
    int best = 0;
    for (int j = 1; j < static_cast<int>(row.size()); ++j) {
        if (row(j) > row(best)) {
            best = j;
        }
    }
    return best;
}

struct DecodeResult {
    std::vector<int> tokens;  // generated answer, <eos> excluded
    bool truncated = false;
};

/// Greedy decoding from an assembled prefix (no answer, no <eos>), given the
/// vision features of the two images.
template <class T>
DecodeResult greedy_decode(const Model<T>& model, const EncodedSample& prefix, const Mat<T>& source_features,
                           const Mat<T>& edited_features, int max_new = 64)
{
    const Mat<T> p1 = model.project(source_features);
    const Mat<T> p2 = model.project(edited_features);
    std::vector<int> ids = prefix.token_ids;
    DecodeResult out;
    for (int step = 0; step < max_new; ++step) {
        if (static_cast<int>(ids.size()) >= model.config().max_seq) {
            out.truncated = true;
            return out;
        }
        const Mat<T> logits = model.lm_forward(ids, prefix.image_slots, {&p1, &p2}, nullptr);
        const int next = argmax_lowest(logits.row(logits.rows() - 1));
        if (next == TokenVocab::kEos) {
            return out;
        }
        out.tokens.push_back(next);
        ids.push_back(next);
    }
    out.truncated = true;
    return out;
}

} // namespace rdlab
