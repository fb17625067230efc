#pragma once

// Adjustment queries: parsing and validation of pole-tagged query files,
// subject-span realization against the byte tokenizer, near-duplicate
// detection, and context-template generation for key averaging.
//
// Query files are JSON: a header {framework, pole, source} plus a "queries"
// array of records {prompt, subject, target_new: {str}, original_token?}.
// The prompt carries exactly one "{}" placeholder for the subject.

#include <algorithm>
#include <cctype>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "palette/common.hpp"
#include "palette/model.hpp"
#include "palette/tokenizer.hpp"

namespace palette {

enum class Framework { MBTI, BigFive };

struct Dimension {
    Framework framework = Framework::MBTI;
    std::string pole;  // MBTI: E,I,N,S,F,T,P,J; BigFive: E+,E-,A+,A-,O+,O-,C+,C-,N+,N-

    static const std::vector<std::string>& mbti_poles() {
        static const std::vector<std::string> p{"E", "I", "N", "S", "F", "T", "P", "J"};
        return p;
    }
    static const std::vector<std::string>& bigfive_poles() {
        static const std::vector<std::string> p{"E+", "E-", "A+", "A-", "O+",
                                                "O-", "C+", "C-", "N+", "N-"};
        return p;
    }

    void validate() const {
        const auto& valid = framework == Framework::MBTI ? mbti_poles() : bigfive_poles();
        if (std::find(valid.begin(), valid.end(), pole) == valid.end())
            throw Error("unknown dimension tag: pole '" + pole + "' is not valid for " +
                        (framework == Framework::MBTI ? "MBTI" : "BigFive"));
    }

    Dimension opposite() const {
        Dimension d = *this;
        if (framework == Framework::MBTI) {
            static const std::vector<std::pair<std::string, std::string>> pairs{
                {"E", "I"}, {"N", "S"}, {"F", "T"}, {"P", "J"}};
            for (const auto& [a, b] : pairs) {
                if (pole == a) { d.pole = b; return d; }
                if (pole == b) { d.pole = a; return d; }
            }
        } else {
            d.pole = pole;
            d.pole[1] = pole[1] == '+' ? '-' : '+';
            return d;
        }
        throw Error("unknown dimension tag: " + pole);
    }

    std::string tag() const { return pole; }

    bool operator==(const Dimension& o) const {
        return framework == o.framework && pole == o.pole;
    }
};

inline std::string framework_name(Framework f) {
    return f == Framework::MBTI ? "MBTI" : "BigFive";
}

inline Framework parse_framework(const std::string& s) {
    std::string low;
    for (char c : s) low.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    if (low == "mbti") return Framework::MBTI;
    if (low == "bigfive" || low == "big5") return Framework::BigFive;
    throw Error("unknown framework tag: '" + s + "' (expected MBTI or BigFive)");
}

struct AdjustmentQuery {
    std::string prompt;   // template with exactly one "{}"
    std::string subject;
    std::string target_new;
    std::string original_token;  // optional, may be empty

    void validate() const {
        const auto first = prompt.find("{}");
        if (first == std::string::npos) throw Error("missing subject placeholder in prompt");
        if (prompt.find("{}", first + 2) != std::string::npos)
            throw Error("prompt must contain exactly one subject placeholder, found more");
        if (subject.empty()) throw Error("empty subject");
        if (target_new.empty()) throw Error("empty target_new");
        if (!original_token.empty() && target_new == original_token)
            throw Error("target_new must differ from original_token");
    }

    std::string realized_prompt() const {
        std::string out = prompt;
        out.replace(out.find("{}"), 2, subject);
        return out;
    }
};

struct QuerySet {
    Dimension dimension;
    std::vector<AdjustmentQuery> queries;
    std::string source;
};

inline QuerySet parse_query_file(const std::string& bytes) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(bytes);
    } catch (const std::exception& e) {
        throw Error(std::string("query file: malformed JSON: ") + e.what());
    }
    QuerySet set;
    try {
        set.dimension.framework = parse_framework(doc.at("framework").get<std::string>());
        set.dimension.pole = doc.at("pole").get<std::string>();
        set.source = doc.value("source", "");
        for (const auto& q : doc.at("queries")) {
            AdjustmentQuery a;
            a.prompt = q.at("prompt").get<std::string>();
            a.subject = q.at("subject").get<std::string>();
            a.target_new = q.at("target_new").at("str").get<std::string>();
            a.original_token = q.value("original_token", "");
            a.validate();
            set.queries.push_back(std::move(a));
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(std::string("query file: missing or mistyped field: ") + e.what());
    }
    set.dimension.validate();
    return set;
}

inline std::string serialize_query_set(const QuerySet& set) {
    nlohmann::json doc;
    doc["framework"] = framework_name(set.dimension.framework);
    doc["pole"] = set.dimension.pole;
    doc["source"] = set.source;
    doc["queries"] = nlohmann::json::array();
    for (const auto& q : set.queries) {
        nlohmann::json rec{{"prompt", q.prompt},
                           {"subject", q.subject},
                           {"target_new", {{"str", q.target_new}}}};
        if (!q.original_token.empty()) rec["original_token"] = q.original_token;
        doc["queries"].push_back(rec);
    }
    return doc.dump(2) + "\n";
}

inline QuerySet load_query_file(const std::string& path) {
    return parse_query_file(read_file(path));
}

inline std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> words;
    std::string cur;
    for (char ch : text) {
        if (std::isalnum(static_cast<unsigned char>(ch)))
            cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
        else if (!cur.empty()) {
            words.push_back(cur);
            cur.clear();
        }
    }
    if (!cur.empty()) words.push_back(cur);
    return words;
}

inline std::set<std::string> word_set(const std::string& text) {
    auto words = split_words(text);
    return {words.begin(), words.end()};
}

inline double jaccard(const std::set<std::string>& a, const std::set<std::string>& b) {
    if (a.empty() && b.empty()) return 1.0;
    std::size_t inter = 0;
    for (const auto& w : a) inter += b.count(w);
    const std::size_t uni = a.size() + b.size() - inter;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

struct ValidationReport {
    struct DuplicateFlag {
        int i, j;
        double similarity;
    };
    std::vector<DuplicateFlag> near_duplicates;
    bool cardinality_warning = false;
    int cardinality = 0;
    std::vector<int> non_first_person;  // indices whose subject is not a first-person pronoun

    bool clean() const {
        return near_duplicates.empty() && !cardinality_warning && non_first_person.empty();
    }
};

constexpr double kNearDuplicateJaccard = 0.9;
constexpr int kDefaultQueryCount = 12;

inline ValidationReport validate_set(const QuerySet& set) {
    ValidationReport rep;
    rep.cardinality = static_cast<int>(set.queries.size());
    rep.cardinality_warning = rep.cardinality != kDefaultQueryCount;
    static const std::set<std::string> first_person{"i", "me", "my", "myself", "we", "us"};
    std::vector<std::set<std::string>> words;
    words.reserve(set.queries.size());
    for (int i = 0; i < rep.cardinality; ++i) {
        words.push_back(word_set(set.queries[i].realized_prompt()));
        std::string subj = set.queries[i].subject;
        std::transform(subj.begin(), subj.end(), subj.begin(),
                       [](unsigned char c) { return std::tolower(c); });
        if (!first_person.count(subj)) rep.non_first_person.push_back(i);
    }
    for (int i = 0; i < rep.cardinality; ++i)
        for (int j = i + 1; j < rep.cardinality; ++j) {
            const double sim = jaccard(words[i], words[j]);
            if (sim > kNearDuplicateJaccard) rep.near_duplicates.push_back({i, j, sim});
        }
    return rep;
}

struct RealizedQuery {
    std::string prompt_text;       // placeholder replaced by the subject
    std::string target_text;       // separator-adjusted target
    std::vector<int> prompt_tokens;  // BOS + prompt bytes
    std::vector<int> target_tokens;  // target bytes, no specials
    int subject_first = 0;  // token indices into prompt_tokens
    int subject_last = 0;
};

inline bool is_space_byte(char c) {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r';
}

inline RealizedQuery realize(const AdjustmentQuery& query, const Tokenizer& tok, int max_seq) {
    query.validate();
    if (query.prompt == "{}") throw Error("realize: empty template around the placeholder");
    RealizedQuery r;
    const auto at = query.prompt.find("{}");
    r.prompt_text = query.prompt;
    r.prompt_text.replace(at, 2, query.subject);
    // Targets are usually continuations of a word boundary; insert the
    // separating space unless either side already provides whitespace.
    const bool has_sep = is_space_byte(r.prompt_text.back()) || is_space_byte(query.target_new.front());
    r.target_text = has_sep ? query.target_new : " " + query.target_new;
    r.prompt_tokens = tok.encode(r.prompt_text, true, false);
    r.target_tokens = tok.encode(r.target_text, false, false);
    if (static_cast<int>(r.prompt_tokens.size() + r.target_tokens.size()) > max_seq)
        throw Error("realize: prompt plus target exceeds max_seq");
    r.subject_first = 1 + static_cast<int>(at);  // +1 for BOS; bytes map 1:1 to tokens
    r.subject_last = r.subject_first + static_cast<int>(query.subject.size()) - 1;
    return r;
}

struct ContextTemplate {
    std::string prefix;  // prepended verbatim to the realized prompt text
    int length_class = 0;
};

inline std::vector<ContextTemplate> make_context_templates(
    const EditableModel& model, const std::vector<std::pair<int, int>>& params,
    std::uint32_t seed) {
    std::vector<ContextTemplate> out;
    out.push_back({"", 0});  // the bare prompt always participates
    const Tokenizer tok;
    std::uint32_t counter = 0;
    for (const auto& [length, count] : params) {
        if (length < 1 || count < 0) throw Error("make_context_templates: invalid (length, count)");
        for (int i = 0; i < count; ++i) {
            GenParams gp;
            gp.max_new = length;
            gp.greedy = false;
            gp.temperature = 1.0;
            gp.seed = seed * 2654435761u + counter++;
            gp.mask_specials = true;
            gp.stop_at_eos = false;
            std::vector<int> gen = model.generate({Tokenizer::kBos}, gp);
            out.push_back({tok.decode(gen) + ". ", length});
        }
    }
    return out;
}

}  // namespace palette
