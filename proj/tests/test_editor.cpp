#include <gtest/gtest.h>

#include "palette/checkpoint.hpp"
#include "palette/editor.hpp"

using namespace palette;

namespace {

ModelConfig edit_config(std::uint32_t seed = 1) {
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 32;
    cfg.n_heads = 4;
    cfg.d_mlp = 64;
    cfg.max_seq = 96;
    cfg.seed = seed;
    return cfg;
}

EditHyperparams fast_hyper() {
    EditHyperparams h;
    h.layer = 1;
    h.v_num_grad_steps = 20;
    h.v_lr = 0.5;
    h.context_template_length_params = {};
    return h;
}

AdjustmentQuery short_query() {
    return {"[Q] up or down? [A] {}", "I", "up", ""};
}

QuerySet make_set(const std::string& pole, int n) {
    static const char* verbs[] = {"say", "pick", "want", "take", "see", "like",
                                  "hear", "read", "note", "get", "find", "keep"};
    QuerySet set;
    set.dimension = {Framework::MBTI, pole};
    set.source = "fixture";
    for (int i = 0; i < n; ++i)
        set.queries.push_back({"[Q] up or down number " + std::to_string(i) + "? [A] {} " +
                                   verbs[i % 12],
                               "I", "up", ""});
    return set;
}

}  // namespace

TEST(ComputeKey, EmptyTemplateEqualsRawActivation) {
    auto m = EditableModel::init(edit_config());
    auto h = fast_hyper();
    auto r = realize(short_query(), m.tokenizer, m.config.max_seq);
    Vec k = compute_key(m, r, {{"", 0}}, h);
    auto cap = m.forward(r.prompt_tokens, {{1, Site::mlp_input, {r.subject_first}}}).captures[0].value;
    EXPECT_EQ(k, cap);
    EXPECT_EQ(compute_bare_key(m, r, h), cap);
}

TEST(ComputeKey, TwoTemplatesAverage) {
    auto m = EditableModel::init(edit_config());
    auto h = fast_hyper();
    auto r = realize(short_query(), m.tokenizer, m.config.max_seq);
    const std::string prefix = "xy. ";
    Vec ka = compute_key(m, r, {{"", 0}}, h);
    Tokenizer tok;
    auto toks = tok.encode(prefix + r.prompt_text, true, false);
    Vec kb = m.forward(toks, {{1, Site::mlp_input, {r.subject_first + 4}}}).captures[0].value;
    Vec avg = compute_key(m, r, {{"", 0}, {prefix, 0}}, h);
    EXPECT_LT((avg - 0.5 * (ka + kb)).norm(), 1e-14);
}

TEST(ComputeKey, SubjectFirstAndLastAgreeOnSingleToken) {
    auto m = EditableModel::init(edit_config());
    auto r = realize(short_query(), m.tokenizer, m.config.max_seq);
    auto h1 = fast_hyper();
    auto h2 = fast_hyper();
    h2.fact_token = "subject_last";
    EXPECT_EQ(compute_key(m, r, {{"", 0}}, h1), compute_key(m, r, {{"", 0}}, h2));
}

TEST(OptimizeValue, SingleStepIsExactGradientStep) {
    auto m = EditableModel::init(edit_config());
    auto h = fast_hyper();
    h.v_num_grad_steps = 1;
    h.v_lr = 0.1;
    h.kl_factor = 0.0;
    h.v_weight_decay = 0.0;
    auto r = realize(short_query(), m.tokenizer, m.config.max_seq);

    auto [v_e, diag] = optimize_value(m, r, {{"", 0}}, h);

    auto cap = m.forward(r.prompt_tokens, {{1, Site::mlp_output, {r.subject_first}}});
    Vec h0 = cap.captures[0].value;
    std::vector<int> full = r.prompt_tokens;
    for (int t : r.target_tokens) full.push_back(t);
    LossSpec spec;
    spec.logit_layer = 1;
    const int p = static_cast<int>(r.prompt_tokens.size());
    for (std::size_t j = 0; j < r.target_tokens.size(); ++j)
        spec.nll.push_back({p - 1 + static_cast<int>(j), r.target_tokens[j],
                            1.0 / static_cast<double>(r.target_tokens.size())});
    Injection inj{1, r.subject_first, Vec::Zero(32)};
    Vec grad = m.grad_wrt_injection(full, inj, spec).second;

    EXPECT_LT((v_e - (h0 - 0.1 * grad)).norm(), 1e-12);
    EXPECT_EQ(diag.templates_used, 1);
}

TEST(OptimizeValue, ClampBoundsDeltaNorm) {
    auto m = EditableModel::init(edit_config(3));
    auto h = fast_hyper();
    h.v_lr = 10.0;  // aggressive on purpose
    h.v_num_grad_steps = 8;
    auto r = realize(short_query(), m.tokenizer, m.config.max_seq);
    auto [v_e, diag] = optimize_value(m, r, {{"", 0}}, h);
    EXPECT_LE((v_e - diag.h0).norm(), 4.0 * diag.h0.norm() * (1 + 1e-12));
    EXPECT_TRUE(diag.clamped);
}

TEST(OptimizeValue, SaturatedTargetKeepsDeltaNearZero) {
    auto m = EditableModel::init(edit_config(5));
    // Construct saturation: make the target token's unembedding row point at
    // the model's own final-state direction so its probability is ~1.
    AdjustmentQuery q{"[Q] u or d? [A] {} ", "I", "u", ""};
    auto r = realize(q, m.tokenizer, m.config.max_seq);
    ASSERT_EQ(r.target_tokens.size(), 1u);
    const int target = r.target_tokens[0];
    ForwardTrace tr = m.run_forward(r.prompt_tokens, nullptr);
    const int last = static_cast<int>(r.prompt_tokens.size()) - 1;
    Vec x = tr.layers.back().x_out.row(last).transpose();
    Vec normed = (x.array() - tr.lnf_mean[last]).matrix() * tr.lnf_istd[last];
    Vec row = 40.0 * normed / normed.norm();
    quantize_f32(row);
    m.unembed.row(target) = row.transpose();

    auto h = fast_hyper();
    h.kl_factor = 0.0;
    h.v_weight_decay = 0.0;
    auto check = m.forward(r.prompt_tokens);
    Vec probs = EditableModel::softmax_row(check.logits.row(last));
    ASSERT_GT(std::log(probs[target]), -0.01);

    auto [v_e, diag] = optimize_value(m, r, {{"", 0}}, h);
    EXPECT_LE((v_e - diag.h0).norm(), 0.05 * diag.h0.norm());
}

TEST(RankOne, ClosedFormAlgebraTwoByTwo) {
    SecondMoment c0 = identity_moment(2, 0);
    Mat w0 = Mat::Zero(2, 2);
    Vec k(2), v(2);
    k << 1, 0;
    v << 3, 4;
    Mat delta = rank_one_update(w0, k, v, c0);
    Mat expect(2, 2);
    expect << 3, 0, 4, 0;
    EXPECT_LT((delta - expect).norm(), 1e-14);
}

TEST(RankOne, IdentityRankAndLocality) {
    Gaussian g(17);
    const int d_out = 12, d_in = 20;
    Mat w0(d_out, d_in);
    for (int i = 0; i < d_out; ++i)
        for (int j = 0; j < d_in; ++j) w0(i, j) = 0.1 * g();
    Mat b(d_in, d_in);
    for (int i = 0; i < d_in; ++i)
        for (int j = 0; j < d_in; ++j) b(i, j) = g();
    SecondMoment c0;
    c0.matrix = b * b.transpose() / d_in + 0.1 * Mat::Identity(d_in, d_in);
    c0.epsilon = 0.0;
    Vec k(d_in), v(d_out);
    for (int i = 0; i < d_in; ++i) k[i] = g();
    for (int i = 0; i < d_out; ++i) v[i] = g();

    Mat delta = rank_one_update(w0, k, v, c0);
    EXPECT_LT(((w0 + delta) * k - v).norm(), 1e-5 * v.norm());

    Eigen::JacobiSVD<Mat> svd(delta);
    const auto& sv = svd.singularValues();
    EXPECT_LE(sv[1], 1e-6 * sv[0]);

    Vec u = solve_second_moment(c0, k);
    for (int trial = 0; trial < 20; ++trial) {
        Vec kp(d_in);
        for (int i = 0; i < d_in; ++i) kp[i] = g();
        kp -= u * (u.dot(kp) / u.squaredNorm());
        EXPECT_LE((delta * kp).norm(), 1e-6 * delta.norm() * kp.norm());
    }
}

TEST(RankOne, DegenerateKeyRejected) {
    SecondMoment c0 = identity_moment(4, 0);
    Mat w0 = Mat::Zero(3, 4);
    try {
        rank_one_update(w0, Vec::Zero(4), Vec::Ones(3), c0);
        FAIL() << "expected degenerate key error";
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("degenerate key"), std::string::npos);
    }
    EXPECT_THROW(rank_one_update(w0, Vec::Ones(3), Vec::Ones(3), c0), Error);
}

TEST(ApplyEdit, RaisesTargetLogprobAndArgmax) {
    auto m = EditableModel::init(edit_config(11));
    SecondMoment c0 = identity_moment(64, 1);
    auto rec = apply_edit(m, short_query(), {{"", 0}}, c0, fast_hyper());
    EXPECT_GT(rec.post_target_logprob, rec.pre_target_logprob);
    EXPECT_EQ(rec.k_e.size(), 64);
    EXPECT_EQ(rec.v_e.size(), 32);
    EXPECT_EQ(rec.layer, 1);
    EXPECT_TRUE(std::isfinite(rec.delta_frobenius));
    EXPECT_GT(rec.delta_frobenius, 0.0);

    auto r = realize(short_query(), m.tokenizer, m.config.max_seq);
    GenParams gp;
    gp.max_new = 1;
    auto next = m.generate(r.prompt_tokens, gp);
    ASSERT_EQ(next.size(), 1u);
    EXPECT_EQ(next[0], r.target_tokens[0]);
}

TEST(ApplyEdit, ExactValueRealizationWithBareTemplate) {
    // With only the empty template the key is the bare-prompt key, so the
    // closed form lands the post-edit mlp_output exactly on v_e (up to f32).
    auto m = EditableModel::init(edit_config(12));
    SecondMoment c0 = identity_moment(64, 1);
    auto rec = apply_edit(m, short_query(), {{"", 0}}, c0, fast_hyper());
    auto r = realize(short_query(), m.tokenizer, m.config.max_seq);
    auto cap = m.forward(r.prompt_tokens, {{1, Site::mlp_output, {r.subject_first}}});
    EXPECT_LT((cap.captures[0].value - rec.v_e).norm(), 1e-5 * rec.v_e.norm());
}

TEST(ApplyEdit, AtomicOnFailure) {
    auto m = EditableModel::init(edit_config(13));
    const auto before = save_checkpoint_bytes(m);

    AdjustmentQuery too_long{std::string(200, 'a') + "{}", "I", "x", ""};
    SecondMoment c0 = identity_moment(64, 1);
    EXPECT_THROW(apply_edit(m, too_long, {{"", 0}}, c0, fast_hyper()), Error);
    EXPECT_EQ(save_checkpoint_bytes(m), before);

    SecondMoment wrong_dim = identity_moment(32, 1);
    EXPECT_THROW(apply_edit(m, short_query(), {{"", 0}}, wrong_dim, fast_hyper()), Error);
    EXPECT_EQ(save_checkpoint_bytes(m), before);
}

TEST(ApplyEdit, NearIdempotence) {
    auto m = EditableModel::init(edit_config(14));
    SecondMoment c0 = identity_moment(64, 1);
    auto h = fast_hyper();
    h.v_num_grad_steps = 60;
    h.v_lr = 0.5;
    h.kl_factor = 0.0;
    auto rec1 = apply_edit(m, short_query(), {{"", 0}}, c0, h);
    auto rec2 = apply_edit(m, short_query(), {{"", 0}}, c0, h);
    EXPECT_LE(rec2.delta_frobenius, 0.1 * rec1.delta_frobenius);
}

TEST(ApplyQuerySet, EmptySetLeavesWeightsUntouched) {
    auto m = EditableModel::init(edit_config(15));
    const auto before = save_checkpoint_bytes(m);
    SecondMoment c0 = identity_moment(64, 1);
    QuerySet set;
    set.dimension = {Framework::MBTI, "T"};
    auto result = apply_query_set(m, set, c0, fast_hyper());
    EXPECT_TRUE(result.outcomes.empty());
    EXPECT_FALSE(result.aborted);
    EXPECT_EQ(save_checkpoint_bytes(m), before);
}

TEST(ApplyQuerySet, SequentialRecordsWithTags) {
    auto m = EditableModel::init(edit_config(16));
    SecondMoment c0 = identity_moment(64, 1);
    auto h = fast_hyper();
    h.v_num_grad_steps = 10;
    auto result = apply_query_set(m, make_set("T", 4), c0, h);
    ASSERT_EQ(result.outcomes.size(), 4u);
    EXPECT_FALSE(result.aborted);
    for (const auto& o : result.outcomes) {
        EXPECT_TRUE(o.ok) << o.error;
        EXPECT_EQ(o.record.dimension_tag, "T");
        EXPECT_GE(o.record.post_target_logprob, o.record.pre_target_logprob);
    }
}

TEST(ApplyQuerySet, PerQueryErrorsAreRecordedAndRunContinues) {
    auto m = EditableModel::init(edit_config(17));
    SecondMoment c0 = identity_moment(64, 1);
    auto h = fast_hyper();
    h.v_num_grad_steps = 5;
    QuerySet set = make_set("T", 2);
    set.queries.insert(set.queries.begin() + 1,
                       {std::string(200, 'b') + "{}", "I", "x", ""});  // cannot realize
    auto result = apply_query_set(m, set, c0, h);
    ASSERT_EQ(result.outcomes.size(), 3u);
    EXPECT_TRUE(result.outcomes[0].ok);
    EXPECT_FALSE(result.outcomes[1].ok);
    EXPECT_FALSE(result.outcomes[1].error.empty());
    EXPECT_TRUE(result.outcomes[2].ok);
    EXPECT_FALSE(result.aborted);
}

TEST(MultiDimension, InterleavesAndTags) {
    auto m = EditableModel::init(edit_config(18));
    SecondMoment c0 = identity_moment(64, 1);
    auto h = fast_hyper();
    h.v_num_grad_steps = 5;
    auto result = apply_multi_dimension(m, {make_set("I", 2), make_set("T", 2)}, c0, h);
    ASSERT_EQ(result.outcomes.size(), 4u);
    EXPECT_EQ(result.outcomes[0].record.dimension_tag, "I");
    EXPECT_EQ(result.outcomes[1].record.dimension_tag, "T");
    EXPECT_EQ(result.outcomes[2].record.dimension_tag, "I");
    EXPECT_EQ(result.outcomes[3].record.dimension_tag, "T");
}

TEST(MultiDimension, SingleSetMatchesApplyQuerySet) {
    auto m1 = EditableModel::init(edit_config(19));
    auto m2 = EditableModel::init(edit_config(19));
    SecondMoment c0 = identity_moment(64, 1);
    auto h = fast_hyper();
    h.v_num_grad_steps = 5;
    apply_query_set(m1, make_set("T", 2), c0, h);
    apply_multi_dimension(m2, {make_set("T", 2)}, c0, h);
    EXPECT_EQ(save_checkpoint_bytes(m1), save_checkpoint_bytes(m2));
}

TEST(MultiDimension, DuplicatePoleRejected) {
    auto m = EditableModel::init(edit_config(20));
    SecondMoment c0 = identity_moment(64, 1);
    EXPECT_THROW(apply_multi_dimension(m, {make_set("T", 1), make_set("T", 1)}, c0, fast_hyper()),
                 Error);
}
