#pragma once

// Rank-one personality editing: key extraction at the subject token, value
// optimization against the target continuation, the closed-form update
//   delta_W = (v_e - W0 k_e) * (k_e^T C0^-1) / (k_e^T C0^-1 k_e),
// and sequential multi-query / multi-dimension application.
//
// The default update uses one shared template-averaged key in both the
// numerator residual and the denominator (the robust formulation). The
// original split-key behavior (bare-prompt key in the numerator) stays
// available behind `split_key` for comparison.

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "palette/common.hpp"
#include "palette/model.hpp"
#include "palette/queries.hpp"
#include "palette/stats.hpp"

namespace palette {

struct EditHyperparams {
    int layer = -1;  // -1 resolves to n_layers / 2
    std::string fact_token = "subject_first";
    int v_num_grad_steps = 25;
    double v_lr = 0.4;
    int v_loss_layer = -1;  // -1 resolves to the final layer
    double v_weight_decay = 1e-4;
    double clamp_norm_factor = 4.0;
    double kl_factor = 0.0625;
    bool mom2_adjustment = false;
    std::vector<std::pair<int, int>> context_template_length_params = {{5, 10}, {10, 10}};
    int mom2_n_samples = 20;
    bool split_key = false;
    std::uint32_t template_seed = 0;

    void validate() const {
        if (v_num_grad_steps < 1) throw Error("hyperparams: v_num_grad_steps must be >= 1");
        if (!(v_lr > 0)) throw Error("hyperparams: v_lr must be positive");
        if (!(clamp_norm_factor > 0)) throw Error("hyperparams: clamp_norm_factor must be positive");
        if (kl_factor < 0) throw Error("hyperparams: kl_factor must be >= 0");
        if (v_weight_decay < 0) throw Error("hyperparams: v_weight_decay must be >= 0");
        if (fact_token != "subject_first" && fact_token != "subject_last")
            throw Error("hyperparams: fact_token must be subject_first or subject_last");
        if (mom2_n_samples < 1) throw Error("hyperparams: mom2_n_samples must be >= 1");
    }

    int resolve_layer(int n_layers) const {
        const int l = layer < 0 ? n_layers / 2 : layer;
        if (l < 0 || l >= n_layers) throw Error("hyperparams: edit layer out of range");
        return l;
    }

    int resolve_loss_layer(int n_layers) const {
        const int l = v_loss_layer < 0 ? n_layers - 1 : v_loss_layer;
        if (l < 0 || l >= n_layers) throw Error("hyperparams: v_loss_layer out of range");
        return l;
    }
};

namespace detail {

struct TemplatedQuery {
    std::vector<int> prompt_tokens;  // BOS + prefix + realized prompt
    std::vector<int> full_tokens;    // prompt_tokens + target tokens
    int fact_pos = 0;
    int prompt_len = 0;
};

inline int fact_index(const RealizedQuery& r, const std::string& fact_token) {
    return fact_token == "subject_last" ? r.subject_last : r.subject_first;
}

inline std::vector<TemplatedQuery> build_templated(const RealizedQuery& r,
                                                   const std::vector<ContextTemplate>& templates,
                                                   const std::string& fact_token, int max_seq,
                                                   std::vector<std::string>* skipped) {
    std::vector<TemplatedQuery> out;
    const Tokenizer tok;
    for (const auto& tpl : templates) {
        TemplatedQuery tq;
        tq.prompt_tokens = tok.encode(tpl.prefix + r.prompt_text, true, false);
        tq.full_tokens = tq.prompt_tokens;
        for (int t : r.target_tokens) tq.full_tokens.push_back(t);
        if (static_cast<int>(tq.full_tokens.size()) > max_seq) {
            if (skipped)
                skipped->push_back("template of length class " + std::to_string(tpl.length_class) +
                                   " exceeds max_seq, skipped");
            continue;
        }
        tq.fact_pos = fact_index(r, fact_token) + static_cast<int>(tpl.prefix.size());
        tq.prompt_len = static_cast<int>(tq.prompt_tokens.size());
        out.push_back(std::move(tq));
    }
    if (out.empty()) throw Error("all context templates failed to fit the query");
    return out;
}

}  // namespace detail

// Template-averaged mlp_input activation at the subject token.
inline Vec compute_key(const EditableModel& model, const RealizedQuery& r,
                       const std::vector<ContextTemplate>& templates,
                       const EditHyperparams& hyper) {
    hyper.validate();
    const int layer = hyper.resolve_layer(model.config.n_layers);
    auto templated = detail::build_templated(r, templates, hyper.fact_token,
                                             model.config.max_seq, nullptr);
    Vec sum = Vec::Zero(model.config.d_mlp);
    for (const auto& tq : templated) {
        auto res = model.forward(tq.prompt_tokens, {{layer, Site::mlp_input, {tq.fact_pos}}});
        sum += res.captures[0].value;
    }
    return sum / static_cast<double>(templated.size());
}

// Key of the bare (untemplated) prompt; numerator key in split mode, also the
// anchor for h0 and the KL probe.
inline Vec compute_bare_key(const EditableModel& model, const RealizedQuery& r,
                            const EditHyperparams& hyper) {
    const int layer = hyper.resolve_layer(model.config.n_layers);
    auto res = model.forward(r.prompt_tokens,
                             {{layer, Site::mlp_input, {detail::fact_index(r, hyper.fact_token)}}});
    return res.captures[0].value;
}

inline double mean_target_logprob(const EditableModel& model, const RealizedQuery& r,
                                  const Injection* inj = nullptr) {
    std::vector<int> tokens = r.prompt_tokens;
    for (int t : r.target_tokens) tokens.push_back(t);
    ForwardTrace tr = model.run_forward(tokens, inj);
    const int p = static_cast<int>(r.prompt_tokens.size());
    double sum = 0.0;
    for (std::size_t j = 0; j < r.target_tokens.size(); ++j) {
        Vec probs = EditableModel::softmax_row(tr.logits.row(p - 1 + static_cast<int>(j)));
        sum += std::log(std::max(probs[r.target_tokens[j]], 1e-300));
    }
    return sum / static_cast<double>(r.target_tokens.size());
}

struct ValueDiagnostics {
    double loss_initial = 0.0;
    double loss_final = 0.0;
    double target_logprob_initial = 0.0;
    double target_logprob_final = 0.0;
    Vec h0;
    bool clamped = false;
    int templates_used = 0;
    std::vector<std::string> skipped_templates;
};

// Gradient descent on an offset delta injected at (edit layer, subject token),
// minimizing mean-over-templates NLL of the target + kl_factor * KL(original
// || injected) at the subject token of the bare prompt + v_weight_decay *
// ||delta||^2, clamping ||delta|| <= clamp_norm_factor * ||h0|| after every
// step. Returns v_e = h0 + delta.
inline std::pair<Vec, ValueDiagnostics> optimize_value(const EditableModel& model,
                                                       const RealizedQuery& r,
                                                       const std::vector<ContextTemplate>& templates,
                                                       const EditHyperparams& hyper) {
    hyper.validate();
    if (r.target_tokens.empty()) throw Error("optimize_value: empty target");
    const int layer = hyper.resolve_layer(model.config.n_layers);
    const int loss_layer = hyper.resolve_loss_layer(model.config.n_layers);
    ValueDiagnostics diag;
    auto templated = detail::build_templated(r, templates, hyper.fact_token, model.config.max_seq,
                                             &diag.skipped_templates);
    diag.templates_used = static_cast<int>(templated.size());

    const int bare_fact = detail::fact_index(r, hyper.fact_token);
    auto bare = model.forward(r.prompt_tokens, {{layer, Site::mlp_output, {bare_fact}}});
    const Vec h0 = bare.captures[0].value;
    diag.h0 = h0;
    const Vec ref_probs = EditableModel::softmax_row(bare.logits.row(bare_fact));

    const double n_tpl = static_cast<double>(templated.size());
    const double n_tgt = static_cast<double>(r.target_tokens.size());
    const double max_norm = hyper.clamp_norm_factor * h0.norm();

    Vec delta = Vec::Zero(model.config.d_model);
    auto evaluate = [&](const Vec& d, Vec* grad_out) {
        double loss = 0.0;
        Vec grad = Vec::Zero(model.config.d_model);
        for (const auto& tq : templated) {
            Injection inj{layer, tq.fact_pos, d};
            LossSpec spec;
            spec.logit_layer = loss_layer;
            for (std::size_t j = 0; j < r.target_tokens.size(); ++j)
                spec.nll.push_back({tq.prompt_len - 1 + static_cast<int>(j), r.target_tokens[j],
                                    1.0 / (n_tpl * n_tgt)});
            auto [value, g] = model.grad_wrt_injection(tq.full_tokens, inj, spec);
            loss += value;
            grad += g;
        }
        if (hyper.kl_factor > 0) {
            Injection inj{layer, bare_fact, d};
            LossSpec spec;
            spec.logit_layer = loss_layer;
            spec.kl = KlTerm{bare_fact, ref_probs, hyper.kl_factor};
            auto [value, g] = model.grad_wrt_injection(r.prompt_tokens, inj, spec);
            loss += value;
            grad += g;
        }
        loss += hyper.v_weight_decay * d.squaredNorm();
        grad += 2.0 * hyper.v_weight_decay * d;
        if (grad_out) *grad_out = grad;
        return loss;
    };

    for (int step = 0; step < hyper.v_num_grad_steps; ++step) {
        Vec grad;
        const double loss = evaluate(delta, &grad);
        if (!std::isfinite(loss)) throw Error("optimize_value: non-finite loss at step " +
                                              std::to_string(step));
        if (step == 0) diag.loss_initial = loss;
        delta -= hyper.v_lr * grad;
        const double norm = delta.norm();
        if (norm > max_norm) {
            delta *= max_norm / norm;
            diag.clamped = true;
        }
    }
    diag.loss_final = evaluate(delta, nullptr);
    if (!std::isfinite(diag.loss_final)) throw Error("optimize_value: non-finite final loss");

    Injection zero{layer, bare_fact, Vec::Zero(model.config.d_model)};
    Injection final_inj{layer, bare_fact, delta};
    diag.target_logprob_initial = mean_target_logprob(model, r, &zero);
    diag.target_logprob_final = mean_target_logprob(model, r, &final_inj);
    return {Vec(h0 + delta), diag};
}

inline Mat rank_one_update_split(const Mat& w0, const Vec& k_num, const Vec& k_e, const Vec& v_e,
                                 const SecondMoment& c0) {
    if (w0.cols() != k_e.size() || w0.rows() != v_e.size())
        throw Error("rank_one_update: shape mismatch");
    const Vec u = solve_second_moment(c0, k_e);
    const double denom = k_e.dot(u);
    if (!std::isfinite(denom) || denom <= 1e-12 * std::max(1.0, k_e.norm() * u.norm()))
        throw Error("degenerate key: k_e^T C0^-1 k_e is not safely positive");
    Vec resid = v_e - w0 * k_num;
    Mat delta = resid * (u.transpose() / denom);
    if (!delta.allFinite()) throw Error("rank_one_update: non-finite update");
    return delta;
}

inline Mat rank_one_update(const Mat& w0, const Vec& k_e, const Vec& v_e, const SecondMoment& c0) {
    return rank_one_update_split(w0, k_e, k_e, v_e, c0);
}

struct EditRecord {
    std::string prompt;
    std::string subject;
    std::string target;
    std::string dimension_tag;
    int layer = 0;
    Vec k_e;
    Vec v_e;
    double delta_frobenius = 0.0;
    double pre_target_logprob = 0.0;
    double post_target_logprob = 0.0;
    double loss_initial = 0.0;
    double loss_final = 0.0;
    bool clamped = false;
    int templates_used = 0;
};

inline EditRecord apply_edit(EditableModel& model, const AdjustmentQuery& query,
                             const std::vector<ContextTemplate>& templates, const SecondMoment& c0,
                             const EditHyperparams& hyper) {
    hyper.validate();
    const int layer = hyper.resolve_layer(model.config.n_layers);
    if (c0.matrix.rows() != model.config.d_mlp)
        throw Error("apply_edit: second moment dimension does not match d_mlp");
    const RealizedQuery r = realize(query, model.tokenizer, model.config.max_seq);

    EditRecord rec;
    rec.prompt = query.prompt;
    rec.subject = query.subject;
    rec.target = query.target_new;
    rec.layer = layer;
    rec.pre_target_logprob = mean_target_logprob(model, r);

    const Vec k_e = compute_key(model, r, templates, hyper);
    auto [v_e, diag] = optimize_value(model, r, templates, hyper);
    rec.k_e = k_e;
    rec.v_e = v_e;
    rec.loss_initial = diag.loss_initial;
    rec.loss_final = diag.loss_final;
    rec.clamped = diag.clamped;
    rec.templates_used = diag.templates_used;

    const Mat& w0 = model.layers[layer].w_down;
    const Mat delta = hyper.split_key
                          ? rank_one_update_split(w0, compute_bare_key(model, r, hyper), k_e, v_e, c0)
                          : rank_one_update(w0, k_e, v_e, c0);
    rec.delta_frobenius = delta.norm();
    Mat w_new = w0 + delta;
    if (!w_new.allFinite()) throw Error("apply_edit: non-finite edited weight");
    model.set_layer_weight(layer, w_new.cast<float>());

    rec.post_target_logprob = mean_target_logprob(model, r);
    return rec;
}

struct EditOutcome {
    int index = 0;
    bool ok = false;
    std::string error;
    EditRecord record;
};

struct SequenceResult {
    std::vector<EditOutcome> outcomes;
    bool aborted = false;
    std::string abort_reason;

    int successes() const {
        int n = 0;
        for (const auto& o : outcomes) n += o.ok ? 1 : 0;
        return n;
    }
};

namespace detail {

inline bool model_state_sane(const EditableModel& model) {
    return model.forward({0}).logits.allFinite();
}

}  // namespace detail

// Sequential application in file order. Keys for each edit are recomputed on
// the already-edited weights; per-query failures are recorded and the run
// continues unless the model state itself goes non-finite.
inline SequenceResult apply_query_set(EditableModel& model, const QuerySet& set,
                                      const SecondMoment& c0, const EditHyperparams& hyper) {
    hyper.validate();
    SequenceResult result;
    const auto templates = make_context_templates(model, hyper.context_template_length_params,
                                                  hyper.template_seed);
    for (int i = 0; i < static_cast<int>(set.queries.size()); ++i) {
        EditOutcome out;
        out.index = i;
        try {
            out.record = apply_edit(model, set.queries[i], templates, c0, hyper);
            out.record.dimension_tag = set.dimension.tag();
            out.ok = true;
        } catch (const Error& e) {
            out.error = e.what();
        }
        result.outcomes.push_back(std::move(out));
        if (!detail::model_state_sane(model)) {
            result.aborted = true;
            result.abort_reason = "model produced non-finite logits after edit " + std::to_string(i);
            break;
        }
    }
    return result;
}

// Interleaved round-robin application across sets targeting distinct poles.
inline SequenceResult apply_multi_dimension(EditableModel& model,
                                            const std::vector<QuerySet>& sets,
                                            const SecondMoment& c0, const EditHyperparams& hyper) {
    hyper.validate();
    for (std::size_t a = 0; a < sets.size(); ++a)
        for (std::size_t b = a + 1; b < sets.size(); ++b)
            if (sets[a].dimension == sets[b].dimension)
                throw Error("apply_multi_dimension: duplicate dimension " + sets[a].dimension.tag());
    SequenceResult result;
    const auto templates = make_context_templates(model, hyper.context_template_length_params,
                                                  hyper.template_seed);
    std::size_t longest = 0;
    for (const auto& s : sets) longest = std::max(longest, s.queries.size());
    int counter = 0;
    for (std::size_t i = 0; i < longest && !result.aborted; ++i) {
        for (const auto& set : sets) {
            if (i >= set.queries.size()) continue;
            EditOutcome out;
            out.index = counter++;
            try {
                out.record = apply_edit(model, set.queries[i], templates, c0, hyper);
                out.record.dimension_tag = set.dimension.tag();
                out.ok = true;
            } catch (const Error& e) {
                out.error = e.what();
            }
            result.outcomes.push_back(std::move(out));
            if (!detail::model_state_sane(model)) {
                result.aborted = true;
                result.abort_reason = "model produced non-finite logits";
                break;
            }
        }
    }
    return result;
}

}  // namespace palette
