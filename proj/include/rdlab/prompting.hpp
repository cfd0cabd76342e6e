#pragma once

// Closed-world tokenizer, special-token registration, prompt selection and
// assembly of model-ready sequences with loss masks and image slots.

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rdlab/assets.hpp"
#include "rdlab/dataset.hpp"
#include "rdlab/errors.hpp"
#include "rdlab/rng.hpp"

namespace rdlab {

namespace detail {

inline bool is_word_char(unsigned char c) { return std::isalpha(c) != 0 || c == '_'; }

inline bool is_alpha_word(std::string_view s)
{
    return !s.empty() && std::all_of(s.begin(), s.end(), [](unsigned char c) { return is_word_char(c); });
}

/// Splits one whitespace-free chunk: letter runs are words, every digit and
/// every other character is its own token.
inline void split_chunk(std::string_view chunk, std::vector<std::string>& out)
{
    std::size_t i = 0;
    while (i < chunk.size()) {
        const auto c = static_cast<unsigned char>(chunk[i]);
        if (is_word_char(c)) {
            std::size_t j = i;
            while (j < chunk.size() && is_word_char(static_cast<unsigned char>(chunk[j]))) {
                ++j;
            }
            out.emplace_back(chunk.substr(i, j - i));
            i = j;
        } else {
            out.emplace_back(1, chunk[i]);
            ++i;
        }
    }
}

inline std::vector<std::string_view> whitespace_chunks(std::string_view text)
{
    std::vector<std::string_view> out;
    std::size_t i = 0;
    while (i < text.size()) {
        while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) {
            ++i;
        }
        std::size_t j = i;
        while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) {
            ++j;
        }
        if (j > i) {
            out.push_back(text.substr(i, j - i));
        }
        i = j;
    }
    return out;
}

} // namespace detail

struct SpecialRegistration;
class TokenVocab;
SpecialRegistration register_special_tokens(const TokenVocab&, const std::vector<std::string>&);

/// Initialization record for a post-hoc special token: its id and the ids of
/// its tokenization before registration.
struct SpecialTokenInit {
    int id = 0;
    std::string name;
    std::vector<int> old_ids;
};

class TokenVocab {
public:
    static constexpr int kPad = 0;
    static constexpr int kUnk = 1;
    static constexpr int kBos = 2;
    static constexpr int kEos = 3;
    // Image-slot placeholders; the [IMG1]/[IMG2] markers tokenize to these.
    static constexpr int kSlot1 = 4;
    static constexpr int kSlot2 = 5;
    static constexpr int kNumReserved = 6;

    static TokenVocab build(const PromptAssets& assets = builtin_prompt_assets())
    {
        std::set<std::string> words;
        auto collect = [&](std::string_view text) {
            std::vector<std::string> pieces;
            for (auto chunk : detail::whitespace_chunks(text)) {
                detail::split_chunk(chunk, pieces);
            }
            words.insert(pieces.begin(), pieces.end());
        };
        for (const auto& t : assets.templates) {
            std::string body = t.body;
            for (auto marker : {kImg1Marker, kImg2Marker, kCommandMarker}) {
                for (auto pos = body.find(marker); pos != std::string::npos; pos = body.find(marker)) {
                    body.replace(pos, marker.size(), " ");
                }
            }
            collect(body);
        }
        for (const auto& per_op : assets.pools) {
            for (const auto& pool : per_op) {
                for (const auto& phrase : pool) {
                    collect(phrase);
                }
            }
        }
        for (const auto& p : assets.prefixes) {
            collect(p);
        }
        collect("The edit applied The edits applied were: , with value -0.00.");
        for (auto name : kOpNames) {
            collect(name);
        }
        for (char d = '0'; d <= '9'; ++d) {
            words.insert(std::string(1, d));
        }

        TokenVocab v;
        for (auto name : {"<pad>", "<unk>", "<bos>", "<eos>", "<ImageHere1>", "<ImageHere2>"}) {
            v.push(name);
        }
        for (const auto& w : words) {
            v.push(w);
        }
        v.base_size_ = v.size();
        return v;
    }

    int size() const { return static_cast<int>(tokens_.size()); }
    int base_size() const { return base_size_; }
    const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
    const std::vector<std::string>& tokens() const { return tokens_; }
    const std::vector<std::string>& specials() const { return specials_; }

    std::optional<int> find(std::string_view tok) const
    {
        auto it = index_.find(std::string(tok));
        if (it == index_.end()) {
            return std::nullopt;
        }
        return it->second;
    }

    bool is_special(int id) const { return id >= base_size_ || id < kNumReserved; }

    int digit_id(int d) const { return *find(std::string(1, static_cast<char>('0' + d))); }

    std::array<int, 10> digit_ids() const
    {
        std::array<int, 10> ids{};
        for (int d = 0; d < 10; ++d) {
            ids[d] = digit_id(d);
        }
        return ids;
    }

    std::uint64_t fingerprint() const
    {
        std::uint64_t h = fnv1a64("rdlab-vocab");
        for (const auto& t : tokens_) {
            h = fnv1a64(t, h);
            h = fnv1a64("\n", h);
        }
        return h;
    }

    std::vector<int> tokenize(std::string_view text) const
    {
        std::vector<int> ids;
        for (auto chunk : detail::whitespace_chunks(text)) {
            tokenize_chunk(chunk, ids);
        }
        return ids;
    }

    std::string detokenize(std::span<const int> ids) const
    {
        static const std::set<std::string_view> no_space_before = {".", ",", ":", ";", "?", "!", ")", "'", ">"};
        static const std::set<std::string_view> no_space_after = {"-", "(", "'", "<"};
        auto is_digit = [](std::string_view t) { return t.size() == 1 && std::isdigit(static_cast<unsigned char>(t[0])); };

        std::string out;
        std::string_view prev;
        for (int id : ids) {
            if (id == kPad || id == kBos) {
                continue;
            }
            std::string_view tok;
            if (id == kSlot1) {
                tok = kImg1Marker;
            } else if (id == kSlot2) {
                tok = kImg2Marker;
            } else {
                tok = token(id);
            }
            bool space = !out.empty();
            if (space && !is_special(id)) {
                if (no_space_before.count(tok) != 0 || no_space_after.count(prev) != 0) {
                    space = false;
                } else if (is_digit(tok) && (is_digit(prev) || prev == "." || prev == "-")) {
                    space = false;
                }
            }
            if (space) {
                out += ' ';
            }
            out += tok;
            prev = tok;
        }
        return out;
    }

private:
    friend SpecialRegistration register_special_tokens(const TokenVocab&, const std::vector<std::string>&);

    void push(std::string tok)
    {
        index_.emplace(tok, size());
        tokens_.push_back(std::move(tok));
    }

    void tokenize_chunk(std::string_view chunk, std::vector<int>& ids) const
    {
        while (!chunk.empty()) {
            // Leftmost, then longest, atomic match among markers and non-word specials.
            std::size_t best_pos = std::string_view::npos, best_len = 0;
            int best_id = kUnk;
            auto consider = [&](std::string_view atom, int id) {
                const auto pos = chunk.find(atom);
                if (pos == std::string_view::npos) {
                    return;
                }
                if (pos < best_pos || (pos == best_pos && atom.size() > best_len)) {
                    best_pos = pos;
                    best_len = atom.size();
                    best_id = id;
                }
            };
            consider(kImg1Marker, kSlot1);
            consider(kImg2Marker, kSlot2);
            for (const auto& s : specials_) {
                if (!detail::is_alpha_word(s)) {
                    consider(s, index_.at(s));
                }
            }
            const auto head = chunk.substr(0, std::min(best_pos, chunk.size()));
            std::vector<std::string> pieces;
            detail::split_chunk(head, pieces);
            for (const auto& p : pieces) {
                ids.push_back(word_id(p));
            }
            if (best_pos == std::string_view::npos) {
                break;
            }
            ids.push_back(best_id);
            chunk = chunk.substr(best_pos + best_len);
        }
    }

    int word_id(const std::string& w) const
    {
        // Alphabetic specials (for example op names) shadow their base entry.
        for (const auto& s : specials_) {
            if (s == w) {
                return index_.at(s + std::string(kSpecialSuffix));
            }
        }
        auto it = index_.find(w);
        return it == index_.end() ? kUnk : it->second;
    }

    // Index key for an alphabetic special that shares its text with a base word.
    static constexpr std::string_view kSpecialSuffix = "\x01special";

    std::vector<std::string> tokens_;
    std::map<std::string, int> index_;
    std::vector<std::string> specials_;
    int base_size_ = 0;
};

struct SpecialRegistration {
    TokenVocab vocab;
    std::vector<SpecialTokenInit> inits;
};

/// Appends atomic tokens. Each new token remembers its previous tokenization
/// so its embedding can be initialized as the mean of those rows.
inline SpecialRegistration register_special_tokens(const TokenVocab& vocab, const std::vector<std::string>& names)
{
    SpecialRegistration reg{vocab, {}};
    TokenVocab& v = reg.vocab;
    for (const auto& name : names) {
        if (name.empty() || std::any_of(name.begin(), name.end(), [](unsigned char c) { return std::isspace(c); })) {
            throw VocabError("special token must be a non-empty single chunk");
        }
        if (std::find(v.specials_.begin(), v.specials_.end(), name) != v.specials_.end()) {
            throw VocabError("special token '" + name + "' already registered");
        }
        SpecialTokenInit init;
        init.name = name;
        init.old_ids = v.tokenize(name);
        init.id = v.size();
        const bool alpha = detail::is_alpha_word(name);
        v.index_.emplace(alpha ? name + std::string(TokenVocab::kSpecialSuffix) : name, init.id);
        v.tokens_.push_back(name);
        v.specials_.push_back(name);
        reg.inits.push_back(std::move(init));
    }
    return reg;
}

/// Token names added per experiment variant.
inline std::vector<std::string> special_tokens_for(std::string_view experiment)
{
    if (experiment == "4") {
        return {"<break>"};
    }
    if (experiment == "4x") {
        std::vector<std::string> names = {"<break>", "<img1>", "<img2>"};
        names.insert(names.end(), kOpNames.begin(), kOpNames.end());
        return names;
    }
    return {};
}

inline PromptStyle prompt_style_for(std::string_view experiment)
{
    return experiment == "4" || experiment == "4x" ? PromptStyle::breaks : PromptStyle::plain;
}

struct RenderedPrompt {
    std::string text;
    int template_id = 0;
};

inline RenderedPrompt render_template(const PromptTemplate& t, std::string_view command)
{
    RenderedPrompt out{t.body, t.id};
    if (const auto pos = out.text.find(kCommandMarker); pos != std::string::npos) {
        out.text.replace(pos, kCommandMarker.size(), command);
    }
    return out;
}

/// Uniform template choice from the matching set; [COMMAND] is substituted,
/// image markers are kept for assembly.
inline RenderedPrompt select_and_render(const TripletRecord& record, bool use_command, Rng& rng,
                                        const PromptAssets& assets = builtin_prompt_assets(),
                                        PromptStyle style = PromptStyle::plain)
{
    if (use_command && record.command.empty()) {
        throw TemplateError("record " + record.id + " has no command");
    }
    const auto list = assets.templates_for(use_command ? CommandSet::with_command : CommandSet::without_command, style);
    if (list.empty()) {
        throw TemplateError("no templates for the requested prompt style");
    }
    const auto& t = list[rng.below(list.size())];
    return render_template(t, use_command ? std::string_view(record.command) : std::string_view{});
}

struct ImageSlot {
    int position = 0;
    int length = 0;
};

struct DigitPosition {
    int position = 0;  // sequence index of the digit token (a target)
    int place = 0;     // 0 = integer digit, 1 = tenths, 2 = hundredths
    int op_index = 0;  // index into the ground-truth spec
};

struct EncodedSample {
    std::vector<int> token_ids;
    std::vector<std::uint8_t> loss_mask;
    std::array<ImageSlot, 2> image_slots{};
    std::vector<DigitPosition> value_digit_positions;
    int answer_start = 0;
    bool uses_command = false;
    int template_id = 0;

    int length() const { return static_cast<int>(token_ids.size()); }
};

/// <bos> + prompt (each image marker expanded to K slot tokens) + answer + <eos>.
/// With `terminate == false` and an empty answer this yields a decoding prefix.
inline EncodedSample assemble(std::span<const int> prompt, std::span<const int> answer, int k,
                              const TokenVocab& vocab, bool terminate = true)
{
    if (k <= 0) {
        throw ShapeError("image token count must be positive");
    }
    const auto n1 = std::count(prompt.begin(), prompt.end(), TokenVocab::kSlot1);
    const auto n2 = std::count(prompt.begin(), prompt.end(), TokenVocab::kSlot2);
    if (n1 != 1 || n2 != 1) {
        throw TemplateError("prompt must contain each image marker exactly once");
    }
    EncodedSample s;
    s.token_ids.push_back(TokenVocab::kBos);
    s.loss_mask.push_back(0);
    for (int id : prompt) {
        if (id == TokenVocab::kSlot1 || id == TokenVocab::kSlot2) {
            s.image_slots[id == TokenVocab::kSlot1 ? 0 : 1] = {static_cast<int>(s.token_ids.size()), k};
            for (int i = 0; i < k; ++i) {
                s.token_ids.push_back(id);
                s.loss_mask.push_back(0);
            }
        } else {
            s.token_ids.push_back(id);
            s.loss_mask.push_back(0);
        }
    }
    s.answer_start = static_cast<int>(s.token_ids.size());
    for (int id : answer) {
        s.token_ids.push_back(id);
        s.loss_mask.push_back(1);
    }
    if (terminate) {
        s.token_ids.push_back(TokenVocab::kEos);
        s.loss_mask.push_back(1);
    }

    const auto digits = vocab.digit_ids();
    auto is_digit = [&](int id) { return std::find(digits.begin(), digits.end(), id) != digits.end(); };
    const auto dot = vocab.find(".");
    int op_index = 0;
    for (std::size_t i = 0; i + 3 < answer.size(); ++i) {
        if (is_digit(answer[i]) && dot && answer[i + 1] == *dot && is_digit(answer[i + 2]) && is_digit(answer[i + 3]) &&
            (i == 0 || !is_digit(answer[i - 1]))) {
            const int base = s.answer_start + static_cast<int>(i);
            s.value_digit_positions.push_back({base, 0, op_index});
            s.value_digit_positions.push_back({base + 2, 1, op_index});
            s.value_digit_positions.push_back({base + 3, 2, op_index});
            ++op_index;
            i += 3;
        }
    }
    return s;
}

} // namespace rdlab
