#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "palette/common.hpp"
#include "palette/queries.hpp"

namespace palette {

struct RateVerdict {
    std::map<std::string, double> pole_percentages;
    std::string analysis;

    void validate(const Dimension& dim) const {
        const std::string a = dim.tag(), b = dim.opposite().tag();
        if (pole_percentages.size() != 2 || !pole_percentages.count(a) ||
            !pole_percentages.count(b))
            throw Error("rate verdict must cover exactly the poles " + a + " and " + b);
        const double sum = pole_percentages.at(a) + pole_percentages.at(b);
        if (std::abs(sum - 1.0) > 0.01)
            throw Error("rate verdict percentages sum to " + std::to_string(sum));
    }
};

struct ComparisonVerdict {
    int winner = 0;  // 1 or 2
    std::string analysis;
};

struct QualityScores {
    double naturalness = 0.0;
    double coherence = 0.0;
    std::string comment;
};

inline std::string pole_label(const Dimension& dim) {
    static const std::map<std::string, std::string> mbti{
        {"E", "Extraversion (E)"}, {"I", "Introversion (I)"}, {"N", "Intuition (N)"},
        {"S", "Sensing (S)"},      {"F", "Feeling (F)"},      {"T", "Thinking (T)"},
        {"P", "Perceiving (P)"},   {"J", "Judging (J)"}};
    static const std::map<std::string, std::string> big5{
        {"E+", "High Extraversion (E+)"},     {"E-", "Low Extraversion (E-)"},
        {"A+", "High Agreeableness (A+)"},    {"A-", "Low Agreeableness (A-)"},
        {"O+", "High Openness (O+)"},         {"O-", "Low Openness (O-)"},
        {"C+", "High Conscientiousness (C+)"}, {"C-", "Low Conscientiousness (C-)"},
        {"N+", "High Neuroticism (N+)"},      {"N-", "Low Neuroticism (N-)"}};
    const auto& table = dim.framework == Framework::MBTI ? mbti : big5;
    return table.at(dim.pole);
}

struct Judge {
    virtual RateVerdict rate(const std::string& context, const std::string& response,
                             const Dimension& target) const = 0;
    virtual ComparisonVerdict compare(const std::string& context, const std::string& response_1,
                                      const std::string& response_2,
                                      const Dimension& target) const = 0;
    virtual QualityScores quality(const std::string& context, const std::string& response,
                                  const std::string& induced_personality) const = 0;
    virtual ~Judge() = default;
};

using Lexicon = std::map<std::string, std::set<std::string>>;

inline Lexicon parse_lexicon(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw Error(std::string("lexicon file is not valid JSON: ") + e.what());
    }
    Lexicon lex;
    for (const auto& [pole, words] : j.items()) {
        if (!words.is_array()) throw Error("lexicon entry for " + pole + " must be a word list");
        std::set<std::string> set;
        for (const auto& w : words) set.insert(w.get<std::string>());
        lex[pole] = std::move(set);
    }
    return lex;
}

inline RateVerdict lexicon_rate(const std::string& response, const Dimension& target,
                                const Lexicon& lexicon) {
    target.validate();
    const Dimension other = target.opposite();
    if (!lexicon.count(target.tag()) || !lexicon.count(other.tag()))
        throw Error("no lexicon for dimension " + target.tag() + "/" + other.tag());
    const auto& twords = lexicon.at(target.tag());
    const auto& owords = lexicon.at(other.tag());
    int ct = 0, co = 0;
    for (const auto& w : split_words(response)) {
        if (twords.count(w)) ++ct;
        if (owords.count(w)) ++co;
    }
    const double pt = (ct + 1.0) / (ct + co + 2.0);
    RateVerdict v;
    v.pole_percentages[target.tag()] = pt;
    v.pole_percentages[other.tag()] = 1.0 - pt;
    v.analysis = "lexicon counts: " + target.tag() + "=" + std::to_string(ct) + ", " +
                 other.tag() + "=" + std::to_string(co);
    return v;
}

inline QualityScores lexicon_quality(const std::string& response) {
    const auto words = split_words(response);
    if (words.empty()) return {1.0, 1.0, "empty response"};
    const double n = static_cast<double>(words.size());
    const std::set<std::string> distinct(words.begin(), words.end());
    QualityScores q;
    q.naturalness = 1.0 + 4.0 * std::min(n, 25.0) / 25.0;
    q.coherence = 1.0 + 4.0 * static_cast<double>(distinct.size()) / n;
    q.comment = "heuristic: " + std::to_string(words.size()) + " words, " +
                std::to_string(distinct.size()) + " distinct";
    return q;
}

class LexiconJudge : public Judge {
  public:
    explicit LexiconJudge(const std::string& lexicon_dir = std::string(PALETTE_DATA_DIR) +
                                                           "/lexicons") {
        lexicons_[static_cast<int>(Framework::MBTI)] =
            parse_lexicon(read_file(lexicon_dir + "/mbti.json"));
        lexicons_[static_cast<int>(Framework::BigFive)] =
            parse_lexicon(read_file(lexicon_dir + "/bigfive.json"));
    }

    explicit LexiconJudge(Lexicon mbti, Lexicon bigfive = {}) {
        lexicons_[static_cast<int>(Framework::MBTI)] = std::move(mbti);
        lexicons_[static_cast<int>(Framework::BigFive)] = std::move(bigfive);
    }

    RateVerdict rate(const std::string&, const std::string& response,
                     const Dimension& target) const override {
        return lexicon_rate(response, target, lexicons_[static_cast<int>(target.framework)]);
    }

    ComparisonVerdict compare(const std::string& context, const std::string& response_1,
                              const std::string& response_2,
                              const Dimension& target) const override {
        const double p1 = rate(context, response_1, target).pole_percentages.at(target.tag());
        const double p2 = rate(context, response_2, target).pole_percentages.at(target.tag());
        ComparisonVerdict v;
        v.winner = p1 >= p2 ? 1 : 2;
        v.analysis = "lexicon rates: " + std::to_string(p1) + " vs " + std::to_string(p2);
        return v;
    }

    QualityScores quality(const std::string&, const std::string& response,
                          const std::string&) const override {
        return lexicon_quality(response);
    }

  private:
    Lexicon lexicons_[2];
};

inline RateVerdict lexicon_judge(const std::string& response, const Dimension& target) {
    static const LexiconJudge judge;
    return judge.rate("", response, target);
}

}  // namespace palette
