#pragma once

#include <atomic>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "palette/judge.hpp"

namespace palette {

struct EvalItem {
    std::string context;
    std::string response;
};

struct WinPair {
    std::string context;
    std::string response_a;
    std::string response_b;
};

namespace detail {

// Runs fn(0..n-1) with at most max_in_flight concurrent calls. Results must be
// written into index-addressed slots by fn; the caller folds them in order, so
// aggregation stays deterministic. Returns one error string per index ("" = ok).
template <typename Fn>
std::vector<std::string> run_indexed(int n, int max_in_flight, Fn&& fn) {
    std::vector<std::string> errors(n);
    auto guarded = [&](int i) {
        try {
            fn(i);
        } catch (const std::exception& e) {
            errors[i] = e.what();
            if (errors[i].empty()) errors[i] = "unknown judge error";
        }
    };
    if (max_in_flight <= 1 || n <= 1) {
        for (int i = 0; i < n; ++i) guarded(i);
    } else {
        std::atomic<int> next{0};
        auto worker = [&] {
            for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) guarded(i);
        };
        std::vector<std::thread> pool;
        const int k = std::min(max_in_flight, n);
        pool.reserve(k);
        for (int t = 0; t < k; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    return errors;
}

inline void throw_first_error(const std::vector<std::string>& errors) {
    for (std::size_t i = 0; i < errors.size(); ++i)
        if (!errors[i].empty())
            throw Error("judge error at item " + std::to_string(i) + ": " + errors[i]);
}

}  // namespace detail

struct ExpressionResult {
    double p = 0.0;
    double p_thresholded = 0.0;
    int n = 0;
    std::vector<RateVerdict> verdicts;
};

using VerdictHook = std::function<void(int, const nlohmann::json&)>;

inline ExpressionResult expression_rate(const std::vector<EvalItem>& items,
                                        const Dimension& target, const Judge& judge,
                                        int max_in_flight = 1,
                                        const VerdictHook& on_verdict = {}) {
    if (items.empty()) throw Error("expression_rate: empty evaluation set");
    target.validate();
    ExpressionResult result;
    result.n = static_cast<int>(items.size());
    result.verdicts.resize(items.size());
    auto errors = detail::run_indexed(result.n, max_in_flight, [&](int i) {
        result.verdicts[i] = judge.rate(items[i].context, items[i].response, target);
        result.verdicts[i].validate(target);
    });
    double sum = 0.0, hits = 0.0;
    for (int i = 0; i < result.n; ++i) {
        if (!errors[i].empty()) continue;
        const double pct = result.verdicts[i].pole_percentages.at(target.tag());
        sum += pct;
        hits += pct > 0.5 ? 1.0 : (pct == 0.5 ? 0.5 : 0.0);
        if (on_verdict)
            on_verdict(i, nlohmann::json{{"index", i},
                                         {"pole_percentages", result.verdicts[i].pole_percentages},
                                         {"analysis", result.verdicts[i].analysis}});
    }
    detail::throw_first_error(errors);
    result.p = sum / result.n;
    result.p_thresholded = hits / result.n;
    return result;
}

// Exact two-sided binomial test of k successes in n fair trials. The PMF
// recurrence keeps the n=10 reference value 0.001953125 exact.
inline double binomial_p_value(int k, int n) {
    if (n <= 0 || k < 0 || k > n) throw Error("binomial_p_value: need 0 <= k <= n, n > 0");
    std::vector<double> pmf(n + 1);
    pmf[0] = std::pow(0.5, n);
    for (int i = 0; i < n; ++i) pmf[i + 1] = pmf[i] * (n - i) / (i + 1);
    const long long dev = std::abs(2LL * k - n);
    double p = 0.0;
    for (int i = 0; i <= n; ++i)
        if (std::abs(2LL * i - n) >= dev) p += pmf[i];
    return std::min(p, 1.0);
}

struct WinRateResult {
    double rate = 0.0;
    double p_value = 1.0;
    int wins = 0;
    int n = 0;
    std::vector<ComparisonVerdict> verdicts;
};

inline WinRateResult win_rate(const std::vector<WinPair>& pairs, const Dimension& target,
                              const Judge& judge, bool position_debias = true,
                              int max_in_flight = 1, const VerdictHook& on_verdict = {}) {
    if (pairs.empty()) throw Error("win_rate: empty pair set");
    target.validate();
    WinRateResult result;
    const int per_pair = position_debias ? 2 : 1;
    result.n = static_cast<int>(pairs.size()) * per_pair;
    result.verdicts.resize(result.n);
    auto errors = detail::run_indexed(result.n, max_in_flight, [&](int j) {
        const auto& pair = pairs[j / per_pair];
        const bool swapped = position_debias && (j % 2 == 1);
        const auto& first = swapped ? pair.response_b : pair.response_a;
        const auto& second = swapped ? pair.response_a : pair.response_b;
        auto v = judge.compare(pair.context, first, second, target);
        if (v.winner != 1 && v.winner != 2)
            throw Error("comparison winner must be 1 or 2, got " + std::to_string(v.winner));
        result.verdicts[j] = v;
    });
    for (int j = 0; j < result.n; ++j) {
        if (!errors[j].empty()) continue;
        const bool swapped = position_debias && (j % 2 == 1);
        const bool a_won = result.verdicts[j].winner == (swapped ? 2 : 1);
        if (a_won) ++result.wins;
        if (on_verdict)
            on_verdict(j, nlohmann::json{{"index", j},
                                         {"pair", j / per_pair},
                                         {"order_swapped", swapped},
                                         {"winner", result.verdicts[j].winner},
                                         {"a_won", a_won},
                                         {"analysis", result.verdicts[j].analysis}});
    }
    detail::throw_first_error(errors);
    result.rate = static_cast<double>(result.wins) / result.n;
    result.p_value = binomial_p_value(result.wins, result.n);
    return result;
}

struct Robustness {
    double r = 0.0;
    bool saturated = false;
};

inline Robustness robustness(double p) {
    if (!(p >= 0.0 && p <= 1.0)) throw Error("robustness: p must be in [0, 1]");
    const double dev = std::abs(p - 0.5);
    if (dev < 1e-9) return {0.0, true};
    return {1.0 / dev, false};
}

struct QualityResult {
    double naturalness = 0.0;
    double coherence = 0.0;
    int n = 0;
    std::vector<QualityScores> scores;
};

inline QualityResult quality_eval(const std::vector<EvalItem>& items,
                                  const std::string& induced_personality, const Judge& judge,
                                  int max_in_flight = 1, const VerdictHook& on_verdict = {}) {
    if (items.empty()) throw Error("quality_eval: empty evaluation set");
    QualityResult result;
    result.n = static_cast<int>(items.size());
    result.scores.resize(items.size());
    auto errors = detail::run_indexed(result.n, max_in_flight, [&](int i) {
        auto s = judge.quality(items[i].context, items[i].response, induced_personality);
        if (s.naturalness < 1.0 || s.naturalness > 5.0 || s.coherence < 1.0 || s.coherence > 5.0)
            throw Error("quality score outside [1,5]");
        result.scores[i] = std::move(s);
    });
    detail::throw_first_error(errors);
    for (int i = 0; i < result.n; ++i) {
        result.naturalness += result.scores[i].naturalness;
        result.coherence += result.scores[i].coherence;
        if (on_verdict)
            on_verdict(i, nlohmann::json{{"index", i},
                                         {"naturalness", result.scores[i].naturalness},
                                         {"coherence", result.scores[i].coherence},
                                         {"comment", result.scores[i].comment}});
    }
    result.naturalness /= result.n;
    result.coherence /= result.n;
    return result;
}

struct MetricReport {
    struct Expression {
        double p = 0.0;
        double p_thresholded = 0.0;
        int n = 0;
    };
    struct Win {
        double rate = 0.0;
        double p_value = 1.0;
        int wins = 0;
        int n = 0;
    };
    struct Robust {
        double p_opposing = 0.0;
        double r = 0.0;
        bool saturated = false;
        int n = 0;
    };
    struct Quality {
        double naturalness = 0.0;
        double coherence = 0.0;
        int n = 0;
    };

    std::optional<Expression> expression;
    std::optional<Win> win;
    std::optional<Robust> robust;
    std::optional<Quality> quality;

    nlohmann::json to_json() const {
        nlohmann::json j = nlohmann::json::object();
        if (expression)
            j["expression_rate"] = {{"p", expression->p},
                                    {"p_thresholded", expression->p_thresholded},
                                    {"n", expression->n}};
        if (win)
            j["win_rate"] = {{"rate", win->rate},
                             {"p_value", win->p_value},
                             {"wins", win->wins},
                             {"n", win->n}};
        if (robust)
            j["robustness"] = {{"p_opposing", robust->p_opposing},
                               {"r", robust->r},
                               {"saturated", robust->saturated},
                               {"n", robust->n}};
        if (quality)
            j["quality"] = {{"naturalness", quality->naturalness},
                            {"coherence", quality->coherence},
                            {"n", quality->n}};
        return j;
    }

    static MetricReport from_json(const nlohmann::json& j) {
        MetricReport r;
        if (j.contains("expression_rate")) {
            const auto& e = j.at("expression_rate");
            r.expression = Expression{e.at("p").get<double>(), e.at("p_thresholded").get<double>(),
                                      e.at("n").get<int>()};
        }
        if (j.contains("win_rate")) {
            const auto& w = j.at("win_rate");
            r.win = Win{w.at("rate").get<double>(), w.at("p_value").get<double>(),
                        w.at("wins").get<int>(), w.at("n").get<int>()};
        }
        if (j.contains("robustness")) {
            const auto& b = j.at("robustness");
            r.robust = Robust{b.at("p_opposing").get<double>(), b.at("r").get<double>(),
                              b.at("saturated").get<bool>(), b.at("n").get<int>()};
        }
        if (j.contains("quality")) {
            const auto& q = j.at("quality");
            r.quality = Quality{q.at("naturalness").get<double>(), q.at("coherence").get<double>(),
                                q.at("n").get<int>()};
        }
        return r;
    }
};

}  // namespace palette
