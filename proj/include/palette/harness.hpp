#pragma once

// Experiment runner: config loading, dialogue ingestion, the edit -> generate
// -> evaluate pipeline, query-count sweeps, robustness runs, and reports.

#include <algorithm>
#include <filesystem>
#include <iomanip>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "palette/checkpoint.hpp"
#include "palette/editor.hpp"
#include "palette/judge_client.hpp"
#include "palette/metrics.hpp"

namespace palette {

struct DialogueItem {
    std::string speaker_utter;
    std::string id;
};

// Minimal RFC-4180 reader: quoted cells, doubled quotes, CR/LF endings.
inline std::vector<std::vector<std::string>> parse_delimited(const std::string& text,
                                                             char sep = ',') {
    std::vector<std::vector<std::string>> rows;
    std::vector<std::string> row;
    std::string cell;
    bool quoted = false;
    bool row_has_sep = false;
    auto flush_row = [&] {
        if (row_has_sep || !cell.empty() || !row.empty()) {
            row.push_back(cell);
            rows.push_back(row);
        }
        row.clear();
        cell.clear();
        row_has_sep = false;
    };
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < text.size() && text[i + 1] == '"') {
                    cell.push_back('"');
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                cell.push_back(c);
            }
        } else if (c == '"' && cell.empty()) {
            quoted = true;
        } else if (c == sep) {
            row.push_back(cell);
            cell.clear();
            row_has_sep = true;
        } else if (c == '\n' || c == '\r') {
            if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
            flush_row();
        } else {
            cell.push_back(c);
        }
    }
    if (quoted) throw Error("delimited file ends inside a quoted cell");
    flush_row();
    return rows;
}

inline std::vector<DialogueItem> ingest_dialogues(const std::string& path, int limit = -1) {
    if (limit == 0) throw Error("ingest_dialogues: limit must be positive");
    const auto rows = parse_delimited(read_file(path));
    if (rows.empty()) throw Error("dialogue file is empty: " + path);
    const auto& header = rows[0];
    int utter_col = -1, id_col = -1;
    for (std::size_t i = 0; i < header.size(); ++i) {
        if (header[i] == "speaker_utter") utter_col = static_cast<int>(i);
        if (header[i] == "id") id_col = static_cast<int>(i);
    }
    if (utter_col < 0) {
        std::string cols;
        for (const auto& h : header) cols += (cols.empty() ? "" : ", ") + h;
        throw Error("dialogue file has no speaker_utter column; available columns: " + cols);
    }
    std::vector<DialogueItem> items;
    std::set<std::string> seen;
    for (std::size_t r = 1; r < rows.size(); ++r) {
        const auto& row = rows[r];
        std::string id =
            id_col >= 0 && id_col < static_cast<int>(row.size()) ? row[id_col] : "";
        if (id.empty()) id = "row" + std::to_string(r);
        if (!seen.insert(id).second) continue;
        const std::string utter =
            utter_col < static_cast<int>(row.size()) ? row[utter_col] : "";
        if (utter.empty()) throw Error("dialogue row '" + id + "' has an empty speaker_utter");
        items.push_back({utter, id});
        if (limit > 0 && static_cast<int>(items.size()) == limit) break;
    }
    if (items.empty()) throw Error("dialogue file has no data rows: " + path);
    return items;
}

inline std::string default_prompt_dir() { return std::string(PALETTE_DATA_DIR) + "/prompts"; }

inline std::string base_prompt_path(const std::string& dir = default_prompt_dir()) {
    return dir + "/base.txt";
}

inline std::string pole_prompt_path(const Dimension& dim,
                                    const std::string& dir = default_prompt_dir()) {
    dim.validate();
    if (dim.framework == Framework::MBTI) return dir + "/" + dim.pole + ".txt";
    const std::string level = dim.pole[1] == '+' ? "high" : "low";
    return dir + "/big5_" + dim.pole.substr(0, 1) + "_" + level + ".txt";
}

struct RunConfig {
    std::string checkpoint;
    std::vector<std::string> query_files;
    EditHyperparams hyper;
    std::string mom2_dataset = "wikipedia";
    GenParams gen;
    std::string dialogues;
    int eval_size = 10;
    std::string judge = "lexicon";  // lexicon | llm
    std::string mode = "base";      // base | edited | prompt | edited+prompt
    std::string prompt_pole;
    std::string output_dir;
    std::string prompt_dir = default_prompt_dir();
    std::uint32_t seed = 0;
    bool expression_only = false;  // set by sweeps: skip win/robustness/quality
    bool edit_only = false;        // stop after the edit stage
    bool skip_eval = false;        // stop after generation
    nlohmann::json ignored = nlohmann::json::object();
    nlohmann::json raw = nlohmann::json::object();
};

inline bool mode_includes_edited(const std::string& mode) {
    return mode == "edited" || mode == "edited+prompt";
}

inline bool mode_includes_prompt(const std::string& mode) {
    return mode == "prompt" || mode == "edited+prompt";
}

namespace detail {

inline void parse_edit_block(const nlohmann::json& edit, RunConfig& cfg) {
    static const std::set<std::string> ignored{
        "attn_module_tmp", "ln_f_module",       "layer_module_tmp", "mlp_module_tmp",
        "rewrite_module_tmp", "mom2_dtype",     "lm_head_module"};
    for (const auto& [key, value] : edit.items()) {
        if (key == "layers") {
            if (!value.is_array() || value.size() != 1)
                throw Error("edit.layers must be a one-element list");
            cfg.hyper.layer = value.at(0).get<int>();
        } else if (key == "fact_token") {
            cfg.hyper.fact_token = value.get<std::string>();
        } else if (key == "v_num_grad_steps") {
            cfg.hyper.v_num_grad_steps = value.get<int>();
        } else if (key == "v_lr") {
            cfg.hyper.v_lr = value.get<double>();
        } else if (key == "v_loss_layer") {
            cfg.hyper.v_loss_layer = value.get<int>();
        } else if (key == "v_weight_decay") {
            cfg.hyper.v_weight_decay = value.get<double>();
        } else if (key == "clamp_norm_factor") {
            cfg.hyper.clamp_norm_factor = value.get<double>();
        } else if (key == "kl_factor") {
            cfg.hyper.kl_factor = value.get<double>();
        } else if (key == "mom2_adjustment") {
            cfg.hyper.mom2_adjustment = value.get<bool>();
        } else if (key == "context_template_length_params") {
            cfg.hyper.context_template_length_params.clear();
            for (const auto& p : value) {
                if (!p.is_array() || p.size() != 2)
                    throw Error("edit.context_template_length_params entries must be [length, count]");
                cfg.hyper.context_template_length_params.emplace_back(p.at(0).get<int>(),
                                                                      p.at(1).get<int>());
            }
        } else if (key == "mom2_dataset") {
            cfg.mom2_dataset = value.get<std::string>();
        } else if (key == "mom2_n_samples") {
            cfg.hyper.mom2_n_samples = value.get<int>();
        } else if (ignored.count(key)) {
            cfg.ignored[key] = value;
        } else {
            throw Error("unknown edit config key: " + key);
        }
    }
}

}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& doc) {
    if (!doc.is_object()) throw Error("run config must be a JSON object");
    static const std::set<std::string> top_keys{
        "checkpoint", "query_files", "edit",       "generation", "evaluation", "judge",
        "mode",       "prompt_pole", "output_dir", "prompt_dir", "seed"};
    for (const auto& [key, value] : doc.items())
        if (!top_keys.count(key)) throw Error("unknown config key: " + key);
    RunConfig cfg;
    cfg.raw = doc;
    try {
        cfg.checkpoint = doc.value("checkpoint", "");
        if (doc.contains("query_files"))
            for (const auto& q : doc.at("query_files")) cfg.query_files.push_back(q.get<std::string>());
        cfg.seed = doc.value("seed", 0u);
        cfg.hyper.template_seed = cfg.seed;
        cfg.gen.seed = cfg.seed;
        if (doc.contains("edit")) detail::parse_edit_block(doc.at("edit"), cfg);
        if (doc.contains("generation")) {
            for (const auto& [key, value] : doc.at("generation").items()) {
                if (key == "max_new") cfg.gen.max_new = value.get<int>();
                else if (key == "greedy") cfg.gen.greedy = value.get<bool>();
                else if (key == "temperature") cfg.gen.temperature = value.get<double>();
                else if (key == "seed") cfg.gen.seed = value.get<std::uint32_t>();
                else throw Error("unknown generation config key: " + key);
            }
        }
        if (doc.contains("evaluation")) {
            for (const auto& [key, value] : doc.at("evaluation").items()) {
                if (key == "dialogues") cfg.dialogues = value.get<std::string>();
                else if (key == "size") cfg.eval_size = value.get<int>();
                else throw Error("unknown evaluation config key: " + key);
            }
        }
        cfg.judge = doc.value("judge", "lexicon");
        cfg.mode = doc.value("mode", "base");
        cfg.prompt_pole = doc.value("prompt_pole", "");
        cfg.output_dir = doc.value("output_dir", "");
        cfg.prompt_dir = doc.value("prompt_dir", default_prompt_dir());
    } catch (const nlohmann::json::exception& e) {
        throw Error(std::string("run config: missing or mistyped field: ") + e.what());
    }
    if (cfg.judge != "lexicon" && cfg.judge != "llm")
        throw Error("config: judge must be lexicon or llm, got '" + cfg.judge + "'");
    if (cfg.mode != "base" && cfg.mode != "edited" && cfg.mode != "prompt" &&
        cfg.mode != "edited+prompt")
        throw Error("config: mode must be base, edited, prompt, or edited+prompt, got '" +
                    cfg.mode + "'");
    if (cfg.eval_size < 1) throw Error("config: evaluation.size must be positive");
    if (cfg.gen.max_new < 1) throw Error("config: generation.max_new must be positive");
    if (mode_includes_prompt(cfg.mode) && cfg.prompt_pole.empty())
        throw Error("config: prompt modes need prompt_pole");
    cfg.hyper.validate();
    return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw Error("run config " + path + " is not valid JSON: " + e.what());
    }
    return parse_run_config(doc);
}

inline std::vector<std::vector<int>> load_mom2_corpus(const Tokenizer& tok,
                                                      const std::string& dataset, int max_seq) {
    const std::string path = dataset == "wikipedia"
                                 ? std::string(PALETTE_DATA_DIR) + "/corpora/wikipedia_sample.txt"
                                 : dataset;
    std::istringstream ss(read_file(path));
    std::vector<std::vector<int>> corpus;
    std::string line;
    while (std::getline(ss, line)) {
        if (line.empty()) continue;
        auto toks = tok.encode(line);
        if (static_cast<int>(toks.size()) > max_seq) toks.resize(max_seq);
        corpus.push_back(std::move(toks));
    }
    if (corpus.empty()) throw Error("second-moment corpus is empty: " + path);
    return corpus;
}

struct ResponseRow {
    std::string id;
    std::string context;
    std::string response;
};

// One response per dialogue item. Prompts longer than the context window are
// trimmed from the left, keeping BOS plus the tail ending in the response cue.
inline std::vector<ResponseRow> generate_responses(const EditableModel& model,
                                                   const std::vector<DialogueItem>& items,
                                                   const std::string& template_text,
                                                   const GenParams& gp) {
    std::vector<ResponseRow> rows;
    rows.reserve(items.size());
    const int budget = std::max(2, model.config.max_seq - gp.max_new);
    for (std::size_t i = 0; i < items.size(); ++i) {
        const std::string prompt =
            render_template(template_text, {{"previous_utterance", items[i].speaker_utter}});
        auto tokens = model.tokenizer.encode(prompt);
        if (static_cast<int>(tokens.size()) > budget) {
            std::vector<int> cut;
            cut.push_back(tokens.front());
            cut.insert(cut.end(), tokens.end() - (budget - 1), tokens.end());
            tokens.swap(cut);
        }
        GenParams g = gp;
        g.seed = gp.seed + static_cast<std::uint32_t>(i);
        rows.push_back({items[i].id, items[i].speaker_utter,
                        sanitize_utf8(model.tokenizer.decode(model.generate(tokens, g)))});
    }
    return rows;
}

namespace detail {

inline void write_jsonl(const std::string& path, const std::vector<nlohmann::json>& rows) {
    std::string out;
    for (const auto& r : rows) out += r.dump() + "\n";
    write_file(path, out);
}

inline std::vector<nlohmann::json> response_rows_json(const std::vector<ResponseRow>& rows) {
    std::vector<nlohmann::json> out;
    out.reserve(rows.size());
    for (const auto& r : rows)
        out.push_back({{"id", r.id}, {"context", r.context}, {"response", r.response}});
    return out;
}

inline std::vector<ResponseRow> read_responses_jsonl(const std::string& path) {
    std::istringstream ss(read_file(path));
    std::vector<ResponseRow> rows;
    std::string line;
    while (std::getline(ss, line)) {
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw Error("responses file " + path + " has a malformed line: " + e.what());
        }
        rows.push_back({j.value("id", ""), j.value("context", ""), j.value("response", "")});
    }
    if (rows.empty()) throw Error("responses file is empty: " + path);
    return rows;
}

struct JudgeHandle {
    const Judge* judge = nullptr;
    std::unique_ptr<Judge> owned;
    std::vector<nlohmann::json> raw_replies;
};

inline JudgeHandle make_judge(const RunConfig& cfg, const Judge* judge_override) {
    JudgeHandle h;
    if (judge_override) {
        h.judge = judge_override;
        return h;
    }
    if (cfg.judge == "lexicon") {
        h.owned = std::make_unique<LexiconJudge>();
    } else {
        auto* replies = &h.raw_replies;
        h.owned = std::make_unique<LlmJudge>(
            JudgeClientConfig{}, [replies](const std::string& prompt, const std::string& raw) {
                replies->push_back(
                    {{"prompt_hash", hex64(fnv1a64(prompt))}, {"reply", raw}});
            });
    }
    h.judge = h.owned.get();
    return h;
}

inline double mean_words(const std::vector<ResponseRow>& rows) {
    if (rows.empty()) return 0.0;
    double total = 0.0;
    for (const auto& r : rows) total += static_cast<double>(split_words(r.response).size());
    return total / static_cast<double>(rows.size());
}

}  // namespace detail

struct PipelineResult {
    MetricReport report;
    std::string dir;
    nlohmann::json manifest;
};

inline PipelineResult run_pipeline(const RunConfig& cfg, const Judge* judge_override = nullptr) {
    namespace fs = std::filesystem;
    if (cfg.checkpoint.empty()) throw Error("run: config needs a checkpoint path");
    if (cfg.output_dir.empty()) throw Error("run: config needs output_dir");
    if (cfg.query_files.empty())
        throw Error("run: config needs query_files (the first file sets the target dimension)");
    if (cfg.dialogues.empty()) throw Error("run: config needs evaluation.dialogues");
    fs::create_directories(cfg.output_dir);
    auto path_in = [&](const std::string& name) {
        return (fs::path(cfg.output_dir) / name).string();
    };

    nlohmann::json manifest;
    manifest["status"] = "failed";
    manifest["mode"] = cfg.mode;
    manifest["judge"] = cfg.judge;
    manifest["config"] = cfg.raw;
    manifest["decoding"] = {{"greedy", cfg.gen.greedy},
                            {"temperature", cfg.gen.temperature},
                            {"max_new", cfg.gen.max_new},
                            {"seed", cfg.gen.seed}};
    if (!cfg.ignored.empty()) manifest["ignored_config_keys"] = cfg.ignored;
    manifest["artifacts"] = nlohmann::json::object();
    manifest["hashes"] = nlohmann::json::object();
    write_file(path_in("config.json"), cfg.raw.dump(2) + "\n");
    manifest["artifacts"]["config"] = "config.json";

    PipelineResult result;
    result.dir = cfg.output_dir;
    std::vector<nlohmann::json> verdict_rows;
    detail::JudgeHandle judge;
    auto finalize = [&](bool ok) {
        detail::write_jsonl(path_in("verdicts.jsonl"), verdict_rows);
        manifest["artifacts"]["verdicts"] = "verdicts.jsonl";
        if (!judge.raw_replies.empty()) {
            detail::write_jsonl(path_in("judge_replies.jsonl"), judge.raw_replies);
            manifest["artifacts"]["judge_replies"] = "judge_replies.jsonl";
        }
        if (ok) manifest["status"] = "ok";
        write_file(path_in("manifest.json"), manifest.dump(2) + "\n");
    };

    try {
        const EditableModel base_model = load_checkpoint(cfg.checkpoint);
        const std::string base_hash = hex64(checkpoint_hash(base_model));
        manifest["hashes"]["base_checkpoint"] = base_hash;

        const auto items = ingest_dialogues(cfg.dialogues, cfg.eval_size);
        manifest["n_items"] = items.size();

        std::vector<QuerySet> sets;
        manifest["query_hygiene"] = nlohmann::json::object();
        for (const auto& file : cfg.query_files) {
            QuerySet set = load_query_file(file);
            const auto hygiene = validate_set(set);
            nlohmann::json pairs = nlohmann::json::array();
            for (const auto& d : hygiene.near_duplicates) pairs.push_back({d.i, d.j});
            manifest["query_hygiene"][fs::path(file).filename().string()] = {
                {"near_duplicates", pairs},
                {"cardinality_warning", hygiene.cardinality_warning},
                {"non_first_person", hygiene.non_first_person}};
            sets.push_back(std::move(set));
        }
        const Dimension target = sets[0].dimension;
        manifest["target"] = {{"framework", framework_name(target.framework)},
                              {"pole", target.tag()}};

        judge = detail::make_judge(cfg, judge_override);
        auto hook = [&verdict_rows](const char* metric) {
            return [&verdict_rows, metric](int, const nlohmann::json& v) {
                nlohmann::json row = v;
                row["metric"] = metric;
                verdict_rows.push_back(std::move(row));
            };
        };

        EditableModel model = base_model;
        if (mode_includes_edited(cfg.mode)) {
            const int layer = cfg.hyper.resolve_layer(model.config.n_layers);
            const SecondMoment c0 =
                cfg.hyper.mom2_adjustment
                    ? estimate_second_moment(
                          model,
                          load_mom2_corpus(model.tokenizer, cfg.mom2_dataset,
                                           model.config.max_seq),
                          layer, cfg.hyper.mom2_n_samples)
                    : identity_moment(model.config.d_mlp, layer);
            const SequenceResult seq =
                sets.size() == 1 ? apply_query_set(model, sets[0], c0, cfg.hyper)
                                 : apply_multi_dimension(model, sets, c0, cfg.hyper);
            std::vector<nlohmann::json> rec_rows;
            for (const auto& o : seq.outcomes) {
                nlohmann::json r{{"index", o.index},
                                 {"ok", o.ok},
                                 {"base_checkpoint", base_hash}};
                if (o.ok) {
                    r["dimension"] = o.record.dimension_tag;
                    r["prompt"] = o.record.prompt;
                    r["subject"] = o.record.subject;
                    r["target"] = o.record.target;
                    r["layer"] = o.record.layer;
                    r["delta_frobenius"] = o.record.delta_frobenius;
                    r["pre_target_logprob"] = o.record.pre_target_logprob;
                    r["post_target_logprob"] = o.record.post_target_logprob;
                    r["loss_initial"] = o.record.loss_initial;
                    r["loss_final"] = o.record.loss_final;
                    r["clamped"] = o.record.clamped;
                    r["templates_used"] = o.record.templates_used;
                } else {
                    r["error"] = o.error;
                }
                rec_rows.push_back(std::move(r));
            }
            detail::write_jsonl(path_in("edit_records.jsonl"), rec_rows);
            manifest["artifacts"]["edit_records"] = "edit_records.jsonl";
            manifest["edit"] = {{"n_records", seq.outcomes.size()},
                                {"n_ok", seq.successes()},
                                {"mom2_adjustment", cfg.hyper.mom2_adjustment}};
            if (seq.aborted) throw Error("edit stage aborted: " + seq.abort_reason);
            save_checkpoint(model, path_in("edited.ckpt"));
            manifest["artifacts"]["edited_checkpoint"] = "edited.ckpt";
            manifest["hashes"]["edited_checkpoint"] = hex64(checkpoint_hash(model));
        }
        if (cfg.edit_only) {
            finalize(true);
            result.manifest = manifest;
            return result;
        }

        std::string tmpl_path;
        if (mode_includes_prompt(cfg.mode)) {
            Dimension prompt_dim = target;
            prompt_dim.pole = cfg.prompt_pole;
            tmpl_path = pole_prompt_path(prompt_dim, cfg.prompt_dir);
        } else {
            tmpl_path = base_prompt_path(cfg.prompt_dir);
        }
        manifest["prompt_template"] = fs::path(tmpl_path).filename().string();
        const auto responses =
            generate_responses(model, items, read_file(tmpl_path), cfg.gen);
        detail::write_jsonl(path_in("responses.jsonl"), detail::response_rows_json(responses));
        manifest["artifacts"]["responses"] = "responses.jsonl";
        manifest["hashes"]["responses"] = hex64(fnv1a64(read_file(path_in("responses.jsonl"))));
        manifest["mean_response_words"] = detail::mean_words(responses);
        if (cfg.skip_eval) {
            finalize(true);
            result.manifest = manifest;
            return result;
        }

        std::vector<EvalItem> eval_items;
        for (const auto& r : responses) eval_items.push_back({r.context, r.response});
        const auto expr = expression_rate(eval_items, target, *judge.judge, 1, hook("expression"));
        result.report.expression = MetricReport::Expression{expr.p, expr.p_thresholded, expr.n};

        if (cfg.mode != "base" && !cfg.expression_only) {
            const auto base_responses = generate_responses(
                base_model, items, read_file(base_prompt_path(cfg.prompt_dir)), cfg.gen);
            detail::write_jsonl(path_in("responses_base.jsonl"),
                                detail::response_rows_json(base_responses));
            manifest["artifacts"]["responses_base"] = "responses_base.jsonl";
            std::vector<WinPair> pairs;
            for (std::size_t i = 0; i < responses.size(); ++i)
                pairs.push_back(
                    {responses[i].context, responses[i].response, base_responses[i].response});
            const auto win = win_rate(pairs, target, *judge.judge, true, 1, hook("win"));
            result.report.win = MetricReport::Win{win.rate, win.p_value, win.wins, win.n};
        }

        if (mode_includes_edited(cfg.mode) && !cfg.expression_only) {
            const Dimension opposing = target.opposite();
            const auto opp_responses = generate_responses(
                model, items, read_file(pole_prompt_path(opposing, cfg.prompt_dir)), cfg.gen);
            detail::write_jsonl(path_in("responses_opposing.jsonl"),
                                detail::response_rows_json(opp_responses));
            manifest["artifacts"]["responses_opposing"] = "responses_opposing.jsonl";
            std::vector<EvalItem> opp_items;
            for (const auto& r : opp_responses) opp_items.push_back({r.context, r.response});
            const auto opp =
                expression_rate(opp_items, target, *judge.judge, 1, hook("robustness"));
            const auto rob = robustness(opp.p);
            result.report.robust =
                MetricReport::Robust{opp.p, rob.r, rob.saturated, opp.n};
            manifest["robustness_label"] =
                "edited=" + target.tag() + ", prompt=" + opposing.tag();
        }

        if (!cfg.expression_only) {
            const auto q =
                quality_eval(eval_items, pole_label(target), *judge.judge, 1, hook("quality"));
            result.report.quality = MetricReport::Quality{q.naturalness, q.coherence, q.n};
        }

        const std::string report_bytes = result.report.to_json().dump(2) + "\n";
        write_file(path_in("metric_report.json"), report_bytes);
        manifest["artifacts"]["metric_report"] = "metric_report.json";
        manifest["hashes"]["metric_report"] = hex64(fnv1a64(report_bytes));
    } catch (const std::exception& e) {
        manifest["error"] = e.what();
        finalize(false);
        throw;
    }
    finalize(true);
    result.manifest = manifest;
    return result;
}

struct SweepRow {
    int count = 0;
    double p = 0.0;
    std::string base_checkpoint;
    std::string edited_checkpoint;
    int n_edits_ok = 0;
    std::string dir;
};

inline std::vector<SweepRow> sweep_query_count(const RunConfig& cfg,
                                               const std::vector<int>& counts = {4, 8, 12, 16},
                                               const Judge* judge_override = nullptr) {
    namespace fs = std::filesystem;
    if (counts.empty()) throw Error("sweep: counts must be nonempty");
    for (int c : counts)
        if (c < 1) throw Error("sweep: counts must be positive, got " + std::to_string(c));
    if (cfg.query_files.empty()) throw Error("sweep: config needs a query file");
    if (cfg.output_dir.empty()) throw Error("sweep: config needs output_dir");
    const QuerySet full = load_query_file(cfg.query_files[0]);
    const int need = *std::max_element(counts.begin(), counts.end());
    if (static_cast<int>(full.queries.size()) < need)
        throw Error("sweep: insufficient queries: file has " +
                    std::to_string(full.queries.size()) + ", need " + std::to_string(need));
    fs::create_directories(cfg.output_dir);

    std::vector<SweepRow> rows;
    nlohmann::json table = nlohmann::json::array();
    for (int k : counts) {
        RunConfig sub = cfg;
        sub.mode = "edited";
        sub.expression_only = true;
        sub.output_dir = (fs::path(cfg.output_dir) / ("sweep_" + std::to_string(k))).string();
        fs::create_directories(sub.output_dir);
        QuerySet trunc = full;
        trunc.queries.resize(k);
        const std::string qpath = (fs::path(sub.output_dir) / "queries.json").string();
        write_file(qpath, serialize_query_set(trunc));
        sub.query_files = {qpath};
        sub.raw["mode"] = "edited";
        sub.raw["output_dir"] = sub.output_dir;
        sub.raw["query_files"] = {qpath};

        const auto res = run_pipeline(sub, judge_override);
        SweepRow row;
        row.count = k;
        row.p = res.report.expression->p;
        row.base_checkpoint = res.manifest.at("hashes").at("base_checkpoint").get<std::string>();
        row.edited_checkpoint =
            res.manifest.at("hashes").at("edited_checkpoint").get<std::string>();
        row.n_edits_ok = res.manifest.at("edit").at("n_ok").get<int>();
        row.dir = sub.output_dir;
        rows.push_back(row);
        table.push_back({{"count", k},
                         {"p", row.p},
                         {"base_checkpoint", row.base_checkpoint},
                         {"edited_checkpoint", row.edited_checkpoint},
                         {"n_edits_ok", row.n_edits_ok},
                         {"dir", "sweep_" + std::to_string(k)}});
    }
    write_file((fs::path(cfg.output_dir) / "sweep.json").string(),
               nlohmann::json{{"rows", table}}.dump(2) + "\n");
    const nlohmann::json manifest{{"status", "ok"},
                                  {"kind", "sweep"},
                                  {"mode", "edited"},
                                  {"judge", cfg.judge},
                                  {"config", cfg.raw},
                                  {"counts", counts},
                                  {"hashes", {{"base_checkpoint", rows[0].base_checkpoint}}},
                                  {"artifacts", {{"sweep", "sweep.json"}}}};
    write_file((fs::path(cfg.output_dir) / "manifest.json").string(), manifest.dump(2) + "\n");
    return rows;
}

struct RobustnessOutcome {
    double p_opposing = 0.0;
    Robustness rob;
    std::string edited_pole;
    std::string prompt_pole;
    int n = 0;
    std::string dir;
};

// Rates responses generated under the opposing-personality prompt against the
// edited pole; cfg.checkpoint should point at the edited model.
inline RobustnessOutcome robustness_run(const RunConfig& cfg,
                                        const Judge* judge_override = nullptr) {
    namespace fs = std::filesystem;
    if (cfg.checkpoint.empty()) throw Error("robustness: config needs a checkpoint path");
    if (cfg.output_dir.empty()) throw Error("robustness: config needs output_dir");
    if (cfg.query_files.empty())
        throw Error("robustness: config needs query_files to name the edited pole");
    if (cfg.dialogues.empty()) throw Error("robustness: config needs evaluation.dialogues");
    fs::create_directories(cfg.output_dir);
    auto path_in = [&](const std::string& name) {
        return (fs::path(cfg.output_dir) / name).string();
    };

    const EditableModel model = load_checkpoint(cfg.checkpoint);
    const Dimension target = load_query_file(cfg.query_files[0]).dimension;
    Dimension prompt_dim = target.opposite();
    if (!cfg.prompt_pole.empty()) {
        prompt_dim.pole = cfg.prompt_pole;
        prompt_dim.validate();
    }
    const std::string tmpl = read_file(pole_prompt_path(prompt_dim, cfg.prompt_dir));
    const auto items = ingest_dialogues(cfg.dialogues, cfg.eval_size);
    const auto responses = generate_responses(model, items, tmpl, cfg.gen);
    detail::write_jsonl(path_in("responses_opposing.jsonl"),
                        detail::response_rows_json(responses));

    auto judge = detail::make_judge(cfg, judge_override);
    std::vector<nlohmann::json> verdict_rows;
    std::vector<EvalItem> eval_items;
    for (const auto& r : responses) eval_items.push_back({r.context, r.response});
    const auto expr = expression_rate(eval_items, target, *judge.judge, 1,
                                      [&verdict_rows](int, const nlohmann::json& v) {
                                          nlohmann::json row = v;
                                          row["metric"] = "robustness";
                                          verdict_rows.push_back(std::move(row));
                                      });
    detail::write_jsonl(path_in("verdicts_robustness.jsonl"), verdict_rows);
    if (!judge.raw_replies.empty())
        detail::write_jsonl(path_in("judge_replies.jsonl"), judge.raw_replies);

    RobustnessOutcome out;
    out.p_opposing = expr.p;
    out.rob = robustness(expr.p);
    out.edited_pole = target.tag();
    out.prompt_pole = prompt_dim.tag();
    out.n = expr.n;
    out.dir = cfg.output_dir;

    const nlohmann::json doc{{"label", "edited=" + out.edited_pole + ", prompt=" + out.prompt_pole},
                             {"edited_pole", out.edited_pole},
                             {"prompt_pole", out.prompt_pole},
                             {"p_opposing", out.p_opposing},
                             {"r", out.rob.r},
                             {"saturated", out.rob.saturated},
                             {"n", out.n}};
    write_file(path_in("robustness.json"), doc.dump(2) + "\n");

    nlohmann::json manifest{{"status", "ok"},
                            {"kind", "robustness"},
                            {"mode", cfg.mode},
                            {"judge", cfg.judge},
                            {"config", cfg.raw},
                            {"robustness_label", doc.at("label")},
                            {"hashes",
                             {{"edited_checkpoint", hex64(checkpoint_hash(model))}}},
                            {"artifacts",
                             {{"responses_opposing", "responses_opposing.jsonl"},
                              {"verdicts", "verdicts_robustness.jsonl"},
                              {"robustness", "robustness.json"}}}};
    write_file(path_in("manifest.json"), manifest.dump(2) + "\n");
    return out;
}

struct ReportBundle {
    std::string text;
    nlohmann::json machine;
};

namespace detail {

inline std::string fmt_double(double v, int digits = 4) {
    std::ostringstream ss;
    ss << std::fixed << std::setprecision(digits) << v;
    return ss.str();
}

}  // namespace detail

// Renders the metric tables for one or more run directories side by side,
// plus a machine-readable summary of the same content.
inline ReportBundle render_report(const std::vector<std::string>& dirs) {
    namespace fs = std::filesystem;
    if (dirs.empty()) throw Error("report: no run directories given");

    struct RunView {
        std::string name;
        nlohmann::json manifest;
        std::optional<MetricReport> report;
        nlohmann::json robustness;
        nlohmann::json sweep;
    };
    std::vector<RunView> runs;
    for (const auto& dir : dirs) {
        RunView view;
        const fs::path p(dir);
        view.name = p.filename().empty() ? p.parent_path().filename().string()
                                         : p.filename().string();
        const std::string mpath = (p / "manifest.json").string();
        if (!fs::exists(mpath)) throw Error("report: missing manifest: " + mpath);
        try {
            view.manifest = nlohmann::json::parse(read_file(mpath));
        } catch (const nlohmann::json::exception& e) {
            throw Error("report: corrupt manifest " + mpath + ": " + e.what());
        }
        if (fs::exists(p / "metric_report.json")) {
            try {
                view.report = MetricReport::from_json(
                    nlohmann::json::parse(read_file((p / "metric_report.json").string())));
            } catch (const std::exception& e) {
                throw Error("report: corrupt metric report in " + dir + ": " + e.what());
            }
        }
        if (fs::exists(p / "robustness.json"))
            view.robustness = nlohmann::json::parse(read_file((p / "robustness.json").string()));
        if (fs::exists(p / "sweep.json"))
            view.sweep = nlohmann::json::parse(read_file((p / "sweep.json").string()));
        runs.push_back(std::move(view));
    }

    const std::string missing = "(missing)";
    std::vector<std::pair<std::string, std::vector<std::string>>> table;
    table.reserve(16);  // references below must survive push_back
    auto add_row = [&](const std::string& label) -> std::vector<std::string>& {
        table.push_back({label, std::vector<std::string>(runs.size(), missing)});
        return table.back().second;
    };

    auto& mode_row = add_row("mode");
    auto& judge_row = add_row("judge");
    auto& status_row = add_row("status");
    auto& n_row = add_row("items");
    auto& words_row = add_row("mean response words");
    auto& expr_row = add_row("expression rate p");
    auto& thr_row = add_row("expression rate (thresholded)");
    auto& win_row = add_row("win rate vs base");
    auto& winp_row = add_row("win rate p-value");
    auto& rob_row = add_row("robustness R");
    auto& robp_row = add_row("p under opposing prompt");
    auto& nat_row = add_row("quality naturalness");
    auto& coh_row = add_row("quality coherence");

    nlohmann::json machine_runs = nlohmann::json::array();
    for (std::size_t i = 0; i < runs.size(); ++i) {
        const auto& r = runs[i];
        mode_row[i] = r.manifest.value("mode", missing);
        judge_row[i] = r.manifest.value("judge", missing);
        status_row[i] = r.manifest.value("status", missing);
        if (r.manifest.contains("n_items"))
            n_row[i] = std::to_string(r.manifest.at("n_items").get<int>());
        if (r.manifest.contains("mean_response_words"))
            words_row[i] =
                detail::fmt_double(r.manifest.at("mean_response_words").get<double>(), 1);

        nlohmann::json mr;
        if (r.report) {
            mr = r.report->to_json();
            if (r.report->expression) {
                expr_row[i] = detail::fmt_double(r.report->expression->p) + " (n=" +
                              std::to_string(r.report->expression->n) + ")";
                thr_row[i] = detail::fmt_double(r.report->expression->p_thresholded);
            }
            if (r.report->win) {
                win_row[i] = detail::fmt_double(r.report->win->rate) + " (" +
                             std::to_string(r.report->win->wins) + "/" +
                             std::to_string(r.report->win->n) + ")";
                winp_row[i] = detail::fmt_double(r.report->win->p_value, 6);
            }
            if (r.report->robust) {
                rob_row[i] = r.report->robust->saturated
                                 ? "saturated"
                                 : detail::fmt_double(r.report->robust->r, 2);
                robp_row[i] = detail::fmt_double(r.report->robust->p_opposing);
            }
            if (r.report->quality) {
                nat_row[i] = detail::fmt_double(r.report->quality->naturalness, 2);
                coh_row[i] = detail::fmt_double(r.report->quality->coherence, 2);
            }
        }
        if (!r.robustness.is_null() && rob_row[i] == missing) {
            rob_row[i] = r.robustness.value("saturated", false)
                             ? "saturated"
                             : detail::fmt_double(r.robustness.value("r", 0.0), 2);
            robp_row[i] = detail::fmt_double(r.robustness.value("p_opposing", 0.0));
        }

        nlohmann::json entry{{"name", r.name},
                             {"dir", dirs[i]},
                             {"status", r.manifest.value("status", "")},
                             {"mode", r.manifest.value("mode", "")},
                             {"judge", r.manifest.value("judge", "")}};
        entry["metrics"] = mr.is_null() ? nlohmann::json() : mr;
        if (!r.robustness.is_null()) entry["robustness"] = r.robustness;
        if (!r.sweep.is_null()) entry["sweep"] = r.sweep;
        machine_runs.push_back(std::move(entry));
    }

    std::size_t label_w = 0;
    for (const auto& [label, cells] : table) label_w = std::max(label_w, label.size());
    std::vector<std::size_t> col_w(runs.size());
    for (std::size_t i = 0; i < runs.size(); ++i) {
        col_w[i] = runs[i].name.size();
        for (const auto& [label, cells] : table) col_w[i] = std::max(col_w[i], cells[i].size());
    }

    std::ostringstream out;
    out << std::left << std::setw(static_cast<int>(label_w)) << "metric";
    for (std::size_t i = 0; i < runs.size(); ++i)
        out << " | " << std::setw(static_cast<int>(col_w[i])) << runs[i].name;
    out << "\n";
    out << std::string(label_w, '-');
    for (std::size_t i = 0; i < runs.size(); ++i) out << "-+-" << std::string(col_w[i], '-');
    out << "\n";
    for (const auto& [label, cells] : table) {
        out << std::left << std::setw(static_cast<int>(label_w)) << label;
        for (std::size_t i = 0; i < runs.size(); ++i)
            out << " | " << std::setw(static_cast<int>(col_w[i])) << cells[i];
        out << "\n";
    }
    for (std::size_t i = 0; i < runs.size(); ++i) {
        if (runs[i].sweep.is_null()) continue;
        out << "\n" << runs[i].name << " adjustment-query sweep\n";
        out << "queries | expression rate p\n";
        for (const auto& row : runs[i].sweep.at("rows"))
            out << std::left << std::setw(7) << row.at("count").get<int>() << " | "
                << detail::fmt_double(row.at("p").get<double>()) << "\n";
    }

    return {out.str(), nlohmann::json{{"runs", machine_runs}}};
}

}  // namespace palette
