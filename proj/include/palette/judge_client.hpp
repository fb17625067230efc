#pragma once

#include <cctype>
#include <chrono>
#include <cstdlib>
#include <functional>
#include <map>
#include <string>
#include <thread>

#include <json.hpp>

#include "palette/judge.hpp"

// httplib drags in <resolv.h>, whose _res macro corrupts Eigen if it is
// lexed first; keep this include below the model headers.
#include <httplib.h>
#ifdef _res
#undef _res
#endif

namespace palette {

inline std::string render_template(std::string text,
                                   const std::map<std::string, std::string>& slots) {
    for (const auto& [name, value] : slots) {
        const std::string needle = "{" + name + "}";
        std::size_t at = 0;
        while ((at = text.find(needle, at)) != std::string::npos) {
            text.replace(at, needle.size(), value);
            at += value.size();
        }
    }
    return text;
}

inline std::string dimension_file_key(const Dimension& dim) {
    if (dim.framework == Framework::BigFive) return "big5_" + dim.pole.substr(0, 1);
    static const std::map<std::string, std::string> pair{
        {"E", "EI"}, {"I", "EI"}, {"N", "NS"}, {"S", "NS"},
        {"T", "TF"}, {"F", "TF"}, {"P", "PJ"}, {"J", "PJ"}};
    return pair.at(dim.pole);
}

inline std::string judge_prompt_path(const std::string& task, const Dimension& dim,
                                     const std::string& prompt_dir = std::string(
                                         PALETTE_DATA_DIR) +
                                                                     "/judge_prompts") {
    if (task == "quality") return prompt_dir + "/quality.txt";
    return prompt_dir + "/" + task + "_" + dimension_file_key(dim) + ".txt";
}

namespace detail {

// Pulls the outermost {...} out of a reply that may carry prose or fencing,
// and drops trailing commas, which the judge format examples contain.
inline nlohmann::json extract_reply_json(const std::string& raw) {
    const auto first = raw.find('{');
    const auto last = raw.rfind('}');
    if (first == std::string::npos || last == std::string::npos || last < first)
        throw JudgeFormatError("reply contains no JSON object", raw);
    std::string body = raw.substr(first, last - first + 1);
    std::string cleaned;
    cleaned.reserve(body.size());
    bool in_string = false;
    for (std::size_t i = 0; i < body.size(); ++i) {
        const char c = body[i];
        if (in_string) {
            cleaned.push_back(c);
            if (c == '\\' && i + 1 < body.size())
                cleaned.push_back(body[++i]);
            else if (c == '"')
                in_string = false;
            continue;
        }
        if (c == '"') in_string = true;
        if (c == ',') {
            std::size_t j = i + 1;
            while (j < body.size() && std::isspace(static_cast<unsigned char>(body[j]))) ++j;
            if (j < body.size() && (body[j] == '}' || body[j] == ']')) continue;
        }
        cleaned.push_back(c);
    }
    try {
        return nlohmann::json::parse(cleaned);
    } catch (const nlohmann::json::exception& e) {
        throw JudgeFormatError(std::string("reply is not parseable JSON: ") + e.what(), raw);
    }
}

inline double parse_percent(const nlohmann::json& v, const std::string& raw) {
    if (v.is_number()) return v.get<double>();
    if (!v.is_string()) throw JudgeFormatError("percentage must be a string or number", raw);
    std::string s;
    for (char c : v.get<std::string>())
        if (!std::isspace(static_cast<unsigned char>(c))) s.push_back(c);
    if (!s.empty() && s.back() == '%') s.pop_back();
    if (s.empty()) throw JudgeFormatError("empty percentage string", raw);
    std::size_t used = 0;
    double value = 0.0;
    try {
        value = std::stod(s, &used);
    } catch (const std::exception&) {
        throw JudgeFormatError("unparseable percentage '" + s + "'", raw);
    }
    if (used != s.size()) throw JudgeFormatError("unparseable percentage '" + s + "'", raw);
    return value;
}

inline std::string pole_tag_of_key(const std::string& key) {
    const auto open = key.rfind('(');
    const auto close = key.rfind(')');
    if (open != std::string::npos && close != std::string::npos && close > open)
        return key.substr(open + 1, close - open - 1);
    std::string trimmed = key;
    while (!trimmed.empty() && std::isspace(static_cast<unsigned char>(trimmed.front())))
        trimmed.erase(trimmed.begin());
    while (!trimmed.empty() && std::isspace(static_cast<unsigned char>(trimmed.back())))
        trimmed.pop_back();
    return trimmed;
}

inline std::string analysis_of(const nlohmann::json& j) {
    if (!j.contains("analysis")) return "";
    return j.at("analysis").is_string() ? j.at("analysis").get<std::string>()
                                        : j.at("analysis").dump();
}

}  // namespace detail

inline RateVerdict parse_rate_reply(const std::string& raw, const Dimension& target) {
    target.validate();
    const auto j = detail::extract_reply_json(raw);
    if (!j.contains("result") || !j.at("result").is_object())
        throw JudgeFormatError("missing result object", raw);
    const std::string want_t = target.tag(), want_o = target.opposite().tag();
    std::map<std::string, double> raw_pct;
    for (const auto& [key, value] : j.at("result").items()) {
        const std::string tag = detail::pole_tag_of_key(key);
        if (tag != want_t && tag != want_o)
            throw JudgeFormatError("unexpected pole '" + key + "'", raw);
        if (raw_pct.count(tag)) throw JudgeFormatError("duplicate pole '" + tag + "'", raw);
        raw_pct[tag] = detail::parse_percent(value, raw);
    }
    if (raw_pct.size() != 2)
        throw JudgeFormatError("result must cover poles " + want_t + " and " + want_o, raw);
    const double sum = raw_pct.at(want_t) + raw_pct.at(want_o);
    if (std::abs(sum - 100.0) > 1.0)
        throw JudgeFormatError("percentages sum to " + std::to_string(sum) +
                                   ", outside 100 +/- 1",
                               raw);
    RateVerdict v;
    v.pole_percentages[want_t] = raw_pct.at(want_t) / sum;
    v.pole_percentages[want_o] = raw_pct.at(want_o) / sum;
    v.analysis = detail::analysis_of(j);
    return v;
}

inline ComparisonVerdict parse_comparison_reply(const std::string& raw) {
    const auto j = detail::extract_reply_json(raw);
    if (!j.contains("result")) throw JudgeFormatError("missing result field", raw);
    const auto& r = j.at("result");
    int winner = 0;
    if (r.is_number_integer())
        winner = r.get<int>();
    else if (r.is_string()) {
        const std::string s = r.get<std::string>();
        if (s == "1")
            winner = 1;
        else if (s == "2")
            winner = 2;
    }
    if (winner != 1 && winner != 2)
        throw JudgeFormatError("result must be \"1\" or \"2\", got " + r.dump(), raw);
    ComparisonVerdict v;
    v.winner = winner;
    v.analysis = detail::analysis_of(j);
    return v;
}

inline QualityScores parse_quality_reply(const std::string& raw) {
    const auto j = detail::extract_reply_json(raw);
    QualityScores q;
    const std::pair<const char*, double*> fields[] = {{"Naturalness", &q.naturalness},
                                                      {"Coherence", &q.coherence}};
    for (const auto& [field, out] : fields) {
        if (!j.contains(field)) throw JudgeFormatError(std::string("missing ") + field, raw);
        const auto& v = j.at(field);
        if (v.is_number())
            *out = v.get<double>();
        else if (v.is_string())
            *out = detail::parse_percent(v, raw);
        else
            throw JudgeFormatError(std::string(field) + " must be numeric", raw);
        if (*out < 1.0 || *out > 5.0)
            throw JudgeFormatError(std::string(field) + " score outside [1,5]", raw);
    }
    if (j.contains("comment") && j.at("comment").is_string())
        q.comment = j.at("comment").get<std::string>();
    return q;
}

struct JudgeClientConfig {
    std::string endpoint;  // falls back to PALETTE_JUDGE_ENDPOINT
    std::string path = "/v1/chat/completions";
    std::string model = "gpt-4o";
    std::string api_key_env = "PALETTE_JUDGE_KEY";
    double temperature = 0.0;
    int max_retries = 3;
    int backoff_ms = 250;
    int timeout_s = 30;
};

using ReplyArchive = std::function<void(const std::string& prompt, const std::string& raw)>;

class JudgeClient {
  public:
    explicit JudgeClient(JudgeClientConfig config, ReplyArchive archive = {})
        : config_(std::move(config)), archive_(std::move(archive)) {
        if (config_.endpoint.empty()) {
            const char* env = std::getenv("PALETTE_JUDGE_ENDPOINT");
            if (env) config_.endpoint = env;
        }
        if (config_.endpoint.empty())
            throw Error("judge endpoint not configured (set PALETTE_JUDGE_ENDPOINT)");
    }

    std::string complete(const std::string& prompt) const {
        nlohmann::json payload{
            {"model", config_.model},
            {"temperature", config_.temperature},
            {"messages", {{{"role", "user"}, {"content", prompt}}}}};
        const std::string body = payload.dump();
        std::string last_error;
        for (int attempt = 0; attempt <= config_.max_retries; ++attempt) {
            if (attempt > 0)
                std::this_thread::sleep_for(
                    std::chrono::milliseconds(config_.backoff_ms << (attempt - 1)));
            httplib::Client cli(config_.endpoint);
            cli.set_connection_timeout(config_.timeout_s);
            cli.set_read_timeout(config_.timeout_s);
            httplib::Headers headers;
            const char* key = std::getenv(config_.api_key_env.c_str());
            if (key && *key) headers.emplace("Authorization", std::string("Bearer ") + key);
            auto res = cli.Post(config_.path, headers, body, "application/json");
            if (!res) {
                last_error = "transport error: " + httplib::to_string(res.error());
                continue;
            }
            if (res->status == 429 || res->status >= 500) {
                last_error = "transport error: HTTP " + std::to_string(res->status);
                continue;
            }
            if (res->status != 200)
                throw Error("judge request rejected: HTTP " + std::to_string(res->status) + " " +
                            res->body);
            if (archive_) archive_(prompt, res->body);
            return extract_content(res->body);
        }
        throw Error("judge unreachable after " + std::to_string(config_.max_retries + 1) +
                    " attempts: " + last_error);
    }

    const JudgeClientConfig& config() const { return config_; }

  private:
    static std::string extract_content(const std::string& body) {
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(body);
        } catch (const nlohmann::json::exception&) {
            throw JudgeFormatError("completion body is not JSON", body);
        }
        if (!j.contains("choices") || !j.at("choices").is_array() || j.at("choices").empty())
            throw JudgeFormatError("completion body has no choices", body);
        const auto& msg = j.at("choices").at(0);
        if (!msg.contains("message") || !msg.at("message").contains("content") ||
            !msg.at("message").at("content").is_string())
            throw JudgeFormatError("completion body has no message content", body);
        return msg.at("message").at("content").get<std::string>();
    }

    JudgeClientConfig config_;
    ReplyArchive archive_;
};

class LlmJudge : public Judge {
  public:
    LlmJudge(JudgeClientConfig config, ReplyArchive archive = {},
             std::string prompt_dir = std::string(PALETTE_DATA_DIR) + "/judge_prompts")
        : client_(std::move(config), std::move(archive)), prompt_dir_(std::move(prompt_dir)) {}

    RateVerdict rate(const std::string& context, const std::string& response,
                     const Dimension& target) const override {
        const auto tmpl = read_file(judge_prompt_path("rate", target, prompt_dir_));
        const auto prompt = render_template(
            tmpl, {{"previous_utterance", context}, {"response", response}});
        return parse_rate_reply(client_.complete(prompt), target);
    }

    ComparisonVerdict compare(const std::string& context, const std::string& response_1,
                              const std::string& response_2,
                              const Dimension& target) const override {
        const auto tmpl = read_file(judge_prompt_path("compare", target, prompt_dir_));
        const auto prompt = render_template(tmpl, {{"target_personality", pole_label(target)},
                                                   {"previous_utterance", context},
                                                   {"response_1", response_1},
                                                   {"response_2", response_2}});
        return parse_comparison_reply(client_.complete(prompt));
    }

    QualityScores quality(const std::string& context, const std::string& response,
                          const std::string& induced_personality) const override {
        const auto tmpl = read_file(prompt_dir_ + "/quality.txt");
        const auto prompt = render_template(tmpl, {{"previous_utterance", context},
                                                   {"response", response},
                                                   {"edited_personality", induced_personality}});
        return parse_quality_reply(client_.complete(prompt));
    }

  private:
    JudgeClient client_;
    std::string prompt_dir_;
};

}  // namespace palette
