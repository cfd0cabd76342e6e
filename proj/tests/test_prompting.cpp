#include <gtest/gtest.h>

#include <map>
#include <numeric>

#include "rdlab/dataset.hpp"
#include "rdlab/model.hpp"
#include "rdlab/prompting.hpp"

using namespace rdlab;

namespace {

std::vector<std::string> names(const TokenVocab& v, const std::vector<int>& ids)
{
    std::vector<std::string> out;
    for (int id : ids) {
        out.push_back(v.token(id));
    }
    return out;
}

} // namespace

TEST(Templates, EightPerSetHalfImagesFirst)
{
    const auto& assets = builtin_prompt_assets();
    for (PromptStyle style : {PromptStyle::plain, PromptStyle::breaks}) {
        for (CommandSet set : {CommandSet::with_command, CommandSet::without_command}) {
            const auto list = assets.templates_for(set, style);
            ASSERT_EQ(list.size(), 8u);
            int first = 0;
            for (const auto& t : list) {
                first += t.images_at_start ? 1 : 0;
                EXPECT_EQ(count_occurrences(t.body, kImg1Marker), 1u);
                EXPECT_EQ(count_occurrences(t.body, kImg2Marker), 1u);
                EXPECT_EQ(count_occurrences(t.body, kCommandMarker), set == CommandSet::with_command ? 1u : 0u);
            }
            EXPECT_EQ(first, 4);
        }
    }
}

TEST(Templates, UniformSelection)
{
    const TripletRecord r = gen_record(3, 0);
    Rng rng(17);
    std::map<int, int> freq;
    for (int i = 0; i < 8000; ++i) {
        ++freq[select_and_render(r, true, rng).template_id];
    }
    ASSERT_EQ(freq.size(), 8u);
    for (const auto& [id, n] : freq) {
        EXPECT_NEAR(n, 1000, 110) << "template " << id;
    }
}

TEST(Templates, WithoutCommandOmitsCommand)
{
    for (int i = 0; i < 50; ++i) {
        const TripletRecord r = gen_record(3, static_cast<std::uint64_t>(i));
        Rng rng(static_cast<std::uint64_t>(i));
        const RenderedPrompt p = select_and_render(r, false, rng);
        EXPECT_EQ(p.text.find(r.command), std::string::npos);
        Rng a(5), b(5);
        EXPECT_EQ(select_and_render(r, true, a).text, select_and_render(r, true, b).text);
    }
}

TEST(Tokenizer, ValueSplitsIntoCharacters)
{
    const TokenVocab v = TokenVocab::build();
    EXPECT_EQ(names(v, v.tokenize("value -0.30.")), (std::vector<std::string>{"value", "-", "0", ".", "3", "0", "."}));
    EXPECT_EQ(v.tokenize("zebra")[0], TokenVocab::kUnk);
    const auto slots = v.tokenize("[IMG1] and [IMG2]");
    EXPECT_EQ(slots.front(), TokenVocab::kSlot1);
    EXPECT_EQ(slots.back(), TokenVocab::kSlot2);
}

TEST(Tokenizer, AnswerRoundTrip)
{
    const TokenVocab v = TokenVocab::build();
    for (int i = 0; i < 500; ++i) {
        const std::string text = render_ground_truth(gen_record(11, static_cast<std::uint64_t>(i)).spec);
        const auto ids = v.tokenize(text);
        EXPECT_EQ(v.detokenize(ids), text);
        EXPECT_EQ(v.tokenize(v.detokenize(ids)), ids);
        EXPECT_EQ(std::count(ids.begin(), ids.end(), TokenVocab::kUnk), 0);
    }
}

TEST(SpecialTokens, BreakRegistration)
{
    const TokenVocab base = TokenVocab::build();
    EXPECT_EQ(base.tokenize("a <break> b").size(), 5u);
    const SpecialRegistration reg = register_special_tokens(base, {"<break>"});
    EXPECT_EQ(reg.vocab.size(), base.size() + 1);
    const auto ids = reg.vocab.tokenize("a <break> b");
    ASSERT_EQ(ids.size(), 3u);
    EXPECT_EQ(ids[1], base.size());
    ASSERT_EQ(reg.inits.size(), 1u);
    EXPECT_EQ(reg.inits[0].old_ids, (std::vector<int>{*base.find("<"), *base.find("break"), *base.find(">")}));
    EXPECT_NE(reg.vocab.fingerprint(), base.fingerprint());
    EXPECT_THROW(register_special_tokens(reg.vocab, {"<break>"}), VocabError);
}

TEST(SpecialTokens, ExtendedSetAndBaselines)
{
    const TokenVocab base = TokenVocab::build();
    const auto ext = special_tokens_for("4x");
    EXPECT_EQ(ext.size(), 8u);
    const SpecialRegistration reg = register_special_tokens(base, ext);
    EXPECT_EQ(reg.vocab.size(), base.size() + 8);
    // Registered op names become atomic, but ordinary text keeps its old ids.
    EXPECT_EQ(reg.vocab.tokenize("<img1>").size(), 1u);
    for (const char* exp : {"1", "2", "3"}) {
        EXPECT_TRUE(special_tokens_for(exp).empty());
    }
    EXPECT_EQ(base.tokenize("<img1>").size(), 4u);
}

TEST(Assemble, LengthMaskAndDigits)
{
    const TokenVocab v = TokenVocab::build();
    std::vector<int> prompt(12, *v.find("image"));
    prompt[0] = TokenVocab::kSlot1;
    prompt[5] = TokenVocab::kSlot2;
    const std::vector<int> ten(10, *v.find("value"));
    const EncodedSample plain = assemble(prompt, ten, 16, v);
    EXPECT_EQ(plain.length(), 54);
    EXPECT_EQ(std::accumulate(plain.loss_mask.begin(), plain.loss_mask.end(), 0), 11);
    EXPECT_TRUE(plain.value_digit_positions.empty());

    const auto answer = v.tokenize("The edit applied brightness with value -0.30.");
    ASSERT_EQ(answer.size(), 12u);
    const EncodedSample s = assemble(prompt, answer, 16, v);
    EXPECT_EQ(s.length(), 56);
    EXPECT_EQ(s.token_ids.back(), TokenVocab::kEos);
    EXPECT_EQ(s.image_slots[0].position, 1);
    EXPECT_EQ(s.image_slots[1].position, 1 + 16 + 4);
    for (int p = 0; p < s.answer_start; ++p) {
        EXPECT_EQ(s.loss_mask[static_cast<std::size_t>(p)], 0);
    }
    ASSERT_EQ(s.value_digit_positions.size(), 3u);
    EXPECT_EQ(v.token(s.token_ids[static_cast<std::size_t>(s.value_digit_positions[0].position)]), "0");
    EXPECT_EQ(v.token(s.token_ids[static_cast<std::size_t>(s.value_digit_positions[1].position)]), "3");
    EXPECT_EQ(v.token(s.token_ids[static_cast<std::size_t>(s.value_digit_positions[2].position)]), "0");
}

TEST(Assemble, ThreeDigitPositionsPerValue)
{
    const TokenVocab v = TokenVocab::build();
    for (int i = 0; i < 200; ++i) {
        const TripletRecord r = gen_record(8, static_cast<std::uint64_t>(i));
        Rng rng(static_cast<std::uint64_t>(i));
        const auto prompt = v.tokenize(select_and_render(r, i % 2 == 0, rng).text);
        const auto answer = v.tokenize(render_ground_truth(r.spec));
        const EncodedSample s = assemble(prompt, answer, 16, v);
        EXPECT_EQ(s.value_digit_positions.size(), 3 * r.spec.ops.size());
        EXPECT_EQ(std::accumulate(s.loss_mask.begin(), s.loss_mask.end(), 0), static_cast<int>(answer.size()) + 1);
    }
}

TEST(Assemble, MarkerErrors)
{
    const TokenVocab v = TokenVocab::build();
    const std::vector<int> one{TokenVocab::kSlot1, 10};
    const std::vector<int> dup{TokenVocab::kSlot1, TokenVocab::kSlot1, TokenVocab::kSlot2};
    EXPECT_THROW(assemble(one, {}, 16, v), TemplateError);
    EXPECT_THROW(assemble(dup, {}, 16, v), TemplateError);
}

TEST(Assemble, WorstCaseFitsContext)
{
    // Longest template from every set with the longest 3-op command and answer.
    const ModelConfig cfg;
    const auto& assets = builtin_prompt_assets();
    for (const char* exp : {"1", "4", "4x"}) {
        const TokenVocab v = register_special_tokens(TokenVocab::build(), special_tokens_for(exp)).vocab;
        std::size_t longest_phrase = 0;
        std::vector<std::size_t> per_op;
        for (OpName op : kAllOps) {
            std::size_t m = 0;
            for (bool neg : {false, true}) {
                for (const auto& p : assets.pool(op, neg)) {
                    m = std::max(m, v.tokenize(p).size());
                }
            }
            per_op.push_back(m);
        }
        std::sort(per_op.rbegin(), per_op.rend());
        for (const auto& p : assets.prefixes) {
            longest_phrase = std::max(longest_phrase, v.tokenize(p).size());
        }
        const std::size_t command = longest_phrase + per_op[0] + per_op[1] + per_op[2] + 2;
        std::size_t longest_template = 0;
        for (const auto& t : assets.templates_for(CommandSet::with_command, prompt_style_for(exp))) {
            const auto ids = v.tokenize(render_template(t, "").text);
            longest_template = std::max(longest_template, ids.size() - 2);
        }
        const EditSpec worst{{{OpName::saturation, -0.55}, {OpName::brightness, -0.55}, {OpName::contrast, -0.55}}};
        const std::size_t answer = v.tokenize(render_ground_truth(worst)).size();
        const std::size_t total = 1 + longest_template + command + 2 * static_cast<std::size_t>(cfg.k_tokens) + answer + 1;
        EXPECT_LE(total, static_cast<std::size_t>(cfg.max_seq)) << "experiment " << exp;
    }
}
