// Command-line front end: checkpoint creation, pipeline runs, stage-wise
// verbs, sweeps, robustness runs, and report rendering.

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "palette/harness.hpp"

namespace fs = std::filesystem;
using namespace palette;

namespace {

RunConfig load_cfg(const std::string& config_path, const std::string& output_dir) {
    RunConfig cfg = load_run_config(config_path);
    if (!output_dir.empty()) {
        cfg.output_dir = output_dir;
        cfg.raw["output_dir"] = output_dir;
    }
    return cfg;
}

void print_report(const MetricReport& r) {
    if (r.expression)
        std::printf("expression rate: p=%.4f thresholded=%.4f n=%d\n", r.expression->p,
                    r.expression->p_thresholded, r.expression->n);
    if (r.win)
        std::printf("win rate vs base: %.4f (%d/%d), p-value=%.6g\n", r.win->rate, r.win->wins,
                    r.win->n, r.win->p_value);
    if (r.robust) {
        if (r.robust->saturated)
            std::printf("robustness: saturated (p_opposing=%.4f, n=%d)\n", r.robust->p_opposing,
                        r.robust->n);
        else
            std::printf("robustness: R=%.2f (p_opposing=%.4f, n=%d)\n", r.robust->r,
                        r.robust->p_opposing, r.robust->n);
    }
    if (r.quality)
        std::printf("quality: naturalness=%.2f coherence=%.2f n=%d\n", r.quality->naturalness,
                    r.quality->coherence, r.quality->n);
}

std::vector<EvalItem> to_eval_items(const std::vector<ResponseRow>& rows) {
    std::vector<EvalItem> items;
    items.reserve(rows.size());
    for (const auto& r : rows) items.push_back({r.context, r.response});
    return items;
}

void write_eval_artifacts(const RunConfig& cfg, const MetricReport& report,
                          const std::vector<nlohmann::json>& verdicts, const char* kind) {
    if (cfg.output_dir.empty()) return;
    fs::create_directories(cfg.output_dir);
    detail::write_jsonl((fs::path(cfg.output_dir) / "verdicts.jsonl").string(), verdicts);
    write_file((fs::path(cfg.output_dir) / "metric_report.json").string(),
               report.to_json().dump(2) + "\n");
    const nlohmann::json manifest{{"status", "ok"},
                                  {"kind", kind},
                                  {"judge", cfg.judge},
                                  {"mode", cfg.mode},
                                  {"config", cfg.raw},
                                  {"artifacts",
                                   {{"verdicts", "verdicts.jsonl"},
                                    {"metric_report", "metric_report.json"}}}};
    write_file((fs::path(cfg.output_dir) / "manifest.json").string(), manifest.dump(2) + "\n");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"palette: rank-one personality editing for small transformers"};
    app.require_subcommand(1);

    std::string config_path, output_dir;
    auto add_common = [&](CLI::App* sub, bool dir_option = true) {
        sub->add_option("--config", config_path, "run config JSON")->required();
        if (dir_option) sub->add_option("--output-dir", output_dir, "override output directory");
    };

    // init
    auto* init_cmd = app.add_subcommand("init", "create a randomly initialized checkpoint");
    std::string init_out;
    ModelConfig init_cfg;
    init_cmd->add_option("--out", init_out, "checkpoint path")->required();
    init_cmd->add_option("--layers", init_cfg.n_layers, "transformer blocks");
    init_cmd->add_option("--d-model", init_cfg.d_model, "residual width");
    init_cmd->add_option("--d-mlp", init_cfg.d_mlp, "MLP hidden width");
    init_cmd->add_option("--heads", init_cfg.n_heads, "attention heads");
    init_cmd->add_option("--max-seq", init_cfg.max_seq, "context window");
    init_cmd->add_option("--seed", init_cfg.seed, "init seed");

    auto* run_cmd = app.add_subcommand("run", "edit -> generate -> evaluate pipeline");
    add_common(run_cmd);
    auto* edit_cmd = app.add_subcommand("edit", "apply the query-set edit, write edited.ckpt");
    add_common(edit_cmd);
    auto* gen_cmd = app.add_subcommand("generate", "generate responses without evaluating");
    add_common(gen_cmd);

    auto* rate_cmd = app.add_subcommand("eval-rate", "expression rate over a responses file");
    std::string responses_path, baseline_path;
    add_common(rate_cmd);
    rate_cmd->add_option("--responses", responses_path, "responses.jsonl")->required();

    auto* cmp_cmd = app.add_subcommand("eval-compare", "win rate of responses vs a baseline");
    add_common(cmp_cmd);
    cmp_cmd->add_option("--responses", responses_path, "responses.jsonl")->required();
    cmp_cmd->add_option("--baseline", baseline_path, "baseline responses.jsonl")->required();

    auto* rob_cmd = app.add_subcommand("eval-robustness",
                                       "rate opposing-prompt responses of an edited model");
    add_common(rob_cmd);

    auto* sweep_cmd = app.add_subcommand("sweep", "re-edit with the first k queries per count");
    std::vector<int> counts{4, 8, 12, 16};
    add_common(sweep_cmd);
    sweep_cmd->add_option("--counts", counts, "query counts");

    auto* report_cmd = app.add_subcommand("report", "render metric tables for run directories");
    std::vector<std::string> report_dirs;
    std::string machine_out;
    report_cmd->add_option("dirs", report_dirs, "run directories")->required();
    report_cmd->add_option("--machine", machine_out, "also write machine-readable JSON here");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*init_cmd) {
            save_checkpoint(EditableModel::init(init_cfg), init_out);
            std::printf("wrote %s (hash %s)\n", init_out.c_str(),
                        hex64(checkpoint_file_hash(init_out)).c_str());
            return 0;
        }
        if (*run_cmd) {
            const auto res = run_pipeline(load_cfg(config_path, output_dir));
            std::printf("run ok: %s\n", res.dir.c_str());
            print_report(res.report);
            return 0;
        }
        if (*edit_cmd) {
            RunConfig cfg = load_cfg(config_path, output_dir);
            if (!mode_includes_edited(cfg.mode)) {
                cfg.mode = "edited";
                cfg.raw["mode"] = "edited";
            }
            cfg.edit_only = true;
            const auto res = run_pipeline(cfg);
            std::printf("edit ok: %s/edited.ckpt (%d/%d edits, hash %s)\n", res.dir.c_str(),
                        res.manifest.at("edit").at("n_ok").get<int>(),
                        res.manifest.at("edit").at("n_records").get<int>(),
                        res.manifest.at("hashes").at("edited_checkpoint")
                            .get<std::string>()
                            .c_str());
            return 0;
        }
        if (*gen_cmd) {
            RunConfig cfg = load_cfg(config_path, output_dir);
            cfg.skip_eval = true;
            const auto res = run_pipeline(cfg);
            std::printf("generated %s/responses.jsonl (mean %.1f words)\n", res.dir.c_str(),
                        res.manifest.at("mean_response_words").get<double>());
            return 0;
        }
        if (*rate_cmd) {
            const RunConfig cfg = load_cfg(config_path, output_dir);
            if (cfg.query_files.empty())
                throw Error("eval-rate: config needs query_files to name the target dimension");
            const Dimension target = load_query_file(cfg.query_files[0]).dimension;
            const auto rows = detail::read_responses_jsonl(responses_path);
            auto judge = detail::make_judge(cfg, nullptr);
            std::vector<nlohmann::json> verdicts;
            const auto expr = expression_rate(to_eval_items(rows), target, *judge.judge, 1,
                                              [&](int, const nlohmann::json& v) {
                                                  verdicts.push_back(v);
                                              });
            MetricReport report;
            report.expression = MetricReport::Expression{expr.p, expr.p_thresholded, expr.n};
            write_eval_artifacts(cfg, report, verdicts, "eval-rate");
            print_report(report);
            return 0;
        }
        if (*cmp_cmd) {
            const RunConfig cfg = load_cfg(config_path, output_dir);
            if (cfg.query_files.empty())
                throw Error("eval-compare: config needs query_files to name the target dimension");
            const Dimension target = load_query_file(cfg.query_files[0]).dimension;
            const auto a = detail::read_responses_jsonl(responses_path);
            const auto b = detail::read_responses_jsonl(baseline_path);
            if (a.size() != b.size())
                throw Error("eval-compare: responses and baseline differ in length");
            std::vector<WinPair> pairs;
            for (std::size_t i = 0; i < a.size(); ++i)
                pairs.push_back({a[i].context, a[i].response, b[i].response});
            auto judge = detail::make_judge(cfg, nullptr);
            std::vector<nlohmann::json> verdicts;
            const auto win = win_rate(pairs, target, *judge.judge, true, 1,
                                      [&](int, const nlohmann::json& v) {
                                          verdicts.push_back(v);
                                      });
            MetricReport report;
            report.win = MetricReport::Win{win.rate, win.p_value, win.wins, win.n};
            write_eval_artifacts(cfg, report, verdicts, "eval-compare");
            print_report(report);
            return 0;
        }
        if (*rob_cmd) {
            const auto out = robustness_run(load_cfg(config_path, output_dir));
            if (out.rob.saturated)
                std::printf("robustness (edited=%s, prompt=%s): saturated, p_opposing=%.4f n=%d\n",
                            out.edited_pole.c_str(), out.prompt_pole.c_str(), out.p_opposing,
                            out.n);
            else
                std::printf("robustness (edited=%s, prompt=%s): R=%.2f, p_opposing=%.4f n=%d\n",
                            out.edited_pole.c_str(), out.prompt_pole.c_str(), out.rob.r,
                            out.p_opposing, out.n);
            return 0;
        }
        if (*sweep_cmd) {
            const auto rows = sweep_query_count(load_cfg(config_path, output_dir), counts);
            std::printf("queries | expression rate p\n");
            for (const auto& row : rows) std::printf("%-7d | %.4f\n", row.count, row.p);
            return 0;
        }
        if (*report_cmd) {
            const auto bundle = render_report(report_dirs);
            std::fputs(bundle.text.c_str(), stdout);
            if (!machine_out.empty()) {
                write_file(machine_out, bundle.machine.dump(2) + "\n");
                std::printf("\nwrote %s\n", machine_out.c_str());
            }
            return 0;
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
