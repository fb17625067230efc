#include <gtest/gtest.h>

#include "palette/queries.hpp"

using namespace palette;

namespace {

const char* kCanonicalRecord = R"({
  "framework": "MBTI",
  "pole": "T",
  "source": "unit fixture",
  "queries": [
    {
      "prompt": "[Question] Which do you usually feel more persuaded by: emotionally resonating things with you, or by factual arguments? Answer in one sentence. [Your answer] {} usually feel more persuaded by",
      "subject": "I",
      "target_new": {"str": "factual"},
      "original_token": "emotionally"
    }
  ]
})";

QuerySet tiny_set(std::vector<std::pair<std::string, std::string>> prompts_subjects,
                  const std::string& pole = "T") {
    QuerySet set;
    set.dimension = {Framework::MBTI, pole};
    set.source = "fixture";
    for (auto& [p, s] : prompts_subjects) set.queries.push_back({p, s, "x", ""});
    return set;
}

}  // namespace

TEST(Parse, CanonicalRecordParses) {
    auto set = parse_query_file(kCanonicalRecord);
    EXPECT_EQ(set.dimension.pole, "T");
    EXPECT_EQ(set.dimension.framework, Framework::MBTI);
    ASSERT_EQ(set.queries.size(), 1u);
    EXPECT_EQ(set.queries[0].subject, "I");
    EXPECT_EQ(set.queries[0].target_new, "factual");
    EXPECT_EQ(set.queries[0].original_token, "emotionally");
}

TEST(Parse, PlaceholderErrors) {
    auto with_prompt = [](const std::string& p) {
        return std::string(R"({"framework":"MBTI","pole":"T","source":"","queries":[{"prompt":")") +
               p + R"(","subject":"I","target_new":{"str":"x"}}]})";
    };
    try {
        parse_query_file(with_prompt("no placeholder here"));
        FAIL() << "expected placeholder error";
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("missing subject placeholder"), std::string::npos);
    }
    EXPECT_THROW(parse_query_file(with_prompt("two {} placeholders {}")), Error);
}

TEST(Parse, FieldAndDimensionErrors) {
    EXPECT_THROW(parse_query_file(R"({"framework":"MBTI","pole":"Q","source":"","queries":[]})"),
                 Error);
    EXPECT_THROW(parse_query_file(R"({"framework":"Enneagram","pole":"T","queries":[]})"), Error);
    EXPECT_THROW(
        parse_query_file(
            R"({"framework":"MBTI","pole":"T","queries":[{"prompt":"{} a","subject":"","target_new":{"str":"x"}}]})"),
        Error);
    EXPECT_THROW(
        parse_query_file(
            R"({"framework":"MBTI","pole":"T","queries":[{"prompt":"{} a","subject":"I","target_new":{"str":""}}]})"),
        Error);
    EXPECT_THROW(
        parse_query_file(
            R"({"framework":"MBTI","pole":"T","queries":[{"prompt":"{} a","subject":"I","target_new":{"str":"x"},"original_token":"x"}]})"),
        Error);
    EXPECT_THROW(parse_query_file("not json at all"), Error);
}

TEST(Parse, BigFivePolesAndOpposites) {
    auto set = parse_query_file(
        R"({"framework":"BigFive","pole":"N+","source":"","queries":[{"prompt":"{} a","subject":"I","target_new":{"str":"x"}}]})");
    EXPECT_EQ(set.dimension.opposite().pole, "N-");
    Dimension t{Framework::MBTI, "T"};
    EXPECT_EQ(t.opposite().pole, "F");
    EXPECT_EQ(t.opposite().opposite().pole, "T");
}

TEST(Parse, SerializeRoundTripIdentity) {
    auto set = parse_query_file(kCanonicalRecord);
    auto again = parse_query_file(serialize_query_set(set));
    ASSERT_EQ(again.queries.size(), set.queries.size());
    EXPECT_EQ(again.dimension.pole, set.dimension.pole);
    EXPECT_EQ(again.source, set.source);
    EXPECT_EQ(again.queries[0].prompt, set.queries[0].prompt);
    EXPECT_EQ(again.queries[0].subject, set.queries[0].subject);
    EXPECT_EQ(again.queries[0].target_new, set.queries[0].target_new);
    EXPECT_EQ(again.queries[0].original_token, set.queries[0].original_token);
    EXPECT_EQ(serialize_query_set(again), serialize_query_set(set));
}

TEST(Validate, WordOrderSwapIsFlagged) {
    auto set = tiny_set({{"at night {} prefer working quietly", "I"},
                         {"{} prefer quietly working at night", "I"}});
    auto rep = validate_set(set);
    ASSERT_EQ(rep.near_duplicates.size(), 1u);
    EXPECT_EQ(rep.near_duplicates[0].i, 0);
    EXPECT_EQ(rep.near_duplicates[0].j, 1);
    EXPECT_DOUBLE_EQ(rep.near_duplicates[0].similarity, 1.0);
}

TEST(Validate, DistinctQueriesClean) {
    std::vector<std::pair<std::string, std::string>> qs;
    for (int i = 0; i < 12; ++i)
        qs.push_back({"{} seek variant number " + std::to_string(i) + " with unique content word" +
                          std::string(1, static_cast<char>('a' + i)),
                      "I"});
    auto rep = validate_set(tiny_set(qs));
    EXPECT_TRUE(rep.near_duplicates.empty());
    EXPECT_FALSE(rep.cardinality_warning);
    EXPECT_TRUE(rep.non_first_person.empty());
    EXPECT_TRUE(rep.clean());
}

TEST(Validate, CardinalityWarnsButDoesNotError) {
    auto rep = validate_set(tiny_set({{"{} one alpha", "I"},
                                      {"{} two beta", "I"},
                                      {"{} three gamma", "I"},
                                      {"{} four delta", "I"}}));
    EXPECT_TRUE(rep.cardinality_warning);
    EXPECT_EQ(rep.cardinality, 4);
    EXPECT_TRUE(rep.near_duplicates.empty());
}

TEST(Validate, NonFirstPersonSubjectIsWarningOnly) {
    auto rep = validate_set(tiny_set({{"which do you prioritize: {} or feelings", "facts"}}));
    ASSERT_EQ(rep.non_first_person.size(), 1u);
    EXPECT_EQ(rep.non_first_person[0], 0);
}

TEST(Validate, OrderInsensitiveDuplicateDetection) {
    auto a = tiny_set({{"{} alpha beta gamma", "I"}, {"{} delta epsilon zeta", "I"},
                       {"gamma beta {} alpha", "I"}});
    auto b = tiny_set({{"gamma beta {} alpha", "I"}, {"{} delta epsilon zeta", "I"},
                       {"{} alpha beta gamma", "I"}});
    EXPECT_EQ(validate_set(a).near_duplicates.size(), validate_set(b).near_duplicates.size());
}

TEST(Realize, SpanSitsAtPlaceholder) {
    Tokenizer tok;
    AdjustmentQuery q{"tell me which option {} would pick for me", "me", "left", ""};
    auto r = realize(q, tok, 512);
    EXPECT_EQ(r.prompt_text, "tell me which option me would pick for me");
    EXPECT_EQ(r.subject_first, 1 + 21);
    EXPECT_EQ(r.subject_last, 1 + 22);
    // token at the span is the byte of 'm' from the placeholder site
    EXPECT_EQ(r.prompt_tokens[r.subject_first], static_cast<int>('m'));
    EXPECT_EQ(r.prompt_tokens[0], Tokenizer::kBos);
}

TEST(Realize, CanonicalQuerySpanOverInsertedI) {
    Tokenizer tok;
    auto set = parse_query_file(kCanonicalRecord);
    auto r = realize(set.queries[0], tok, 512);
    EXPECT_NE(r.prompt_text.find("I usually feel more persuaded by"), std::string::npos);
    EXPECT_EQ(r.subject_first, r.subject_last);
    EXPECT_EQ(r.prompt_tokens[r.subject_first], static_cast<int>('I'));
    EXPECT_EQ(r.target_text, " factual");
}

TEST(Realize, TargetSeparatorRules) {
    Tokenizer tok;
    auto r1 = realize({"{} said", "I", "up", ""}, tok, 512);
    EXPECT_EQ(r1.target_text, " up");
    auto r2 = realize({"{} said ", "I", "up", ""}, tok, 512);
    EXPECT_EQ(r2.target_text, "up");
    auto r3 = realize({"{} said", "I", " up", ""}, tok, 512);
    EXPECT_EQ(r3.target_text, " up");
}

TEST(Realize, Errors) {
    Tokenizer tok;
    EXPECT_THROW(realize({"{}", "I", "x", ""}, tok, 512), Error);
    EXPECT_THROW(realize({std::string(600, 'a') + "{}", "I", "x", ""}, tok, 512), Error);
    EXPECT_THROW(realize({"no placeholder", "I", "x", ""}, tok, 512), Error);
}

TEST(Templates, CountsAndDeterminism) {
    ModelConfig cfg;
    cfg.n_layers = 1;
    cfg.d_model = 8;
    cfg.n_heads = 1;
    cfg.d_mlp = 16;
    cfg.max_seq = 32;
    cfg.seed = 3;
    auto m = EditableModel::init(cfg);

    auto none = make_context_templates(m, {}, 7);
    ASSERT_EQ(none.size(), 1u);
    EXPECT_EQ(none[0].prefix, "");

    auto tpl = make_context_templates(m, {{5, 10}, {10, 10}}, 7);
    EXPECT_EQ(tpl.size(), 21u);
    int fives = 0, tens = 0;
    for (std::size_t i = 1; i < tpl.size(); ++i) {
        if (tpl[i].length_class == 5) {
            EXPECT_EQ(tpl[i].prefix.size(), 7u);  // 5 sampled bytes + ". "
            ++fives;
        } else {
            EXPECT_EQ(tpl[i].prefix.size(), 12u);
            ++tens;
        }
    }
    EXPECT_EQ(fives, 10);
    EXPECT_EQ(tens, 10);

    auto again = make_context_templates(m, {{5, 10}, {10, 10}}, 7);
    for (std::size_t i = 0; i < tpl.size(); ++i) EXPECT_EQ(tpl[i].prefix, again[i].prefix);
    auto other_seed = make_context_templates(m, {{5, 10}, {10, 10}}, 8);
    bool any_diff = false;
    for (std::size_t i = 0; i < tpl.size(); ++i) any_diff |= tpl[i].prefix != other_seed[i].prefix;
    EXPECT_TRUE(any_diff);
}
