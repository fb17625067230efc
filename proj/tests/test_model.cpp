#include <gtest/gtest.h>

#include <random>

#include "palette/checkpoint.hpp"
#include "palette/model.hpp"

using namespace palette;

namespace {

ModelConfig tiny_config(std::uint32_t seed = 1) {
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.d_mlp = 32;
    cfg.vocab_size = 64;
    cfg.max_seq = 32;
    cfg.seed = seed;
    return cfg;
}

std::vector<int> random_tokens(int n, int vocab, std::uint32_t seed) {
    std::mt19937 eng(seed);
    std::vector<int> out(n);
    for (int& t : out) t = static_cast<int>(eng() % vocab);
    return out;
}

void expect_all_close(const Mat& a, const Mat& b, double atol, double rtol) {
    ASSERT_EQ(a.rows(), b.rows());
    ASSERT_EQ(a.cols(), b.cols());
    for (Eigen::Index i = 0; i < a.rows(); ++i)
        for (Eigen::Index j = 0; j < a.cols(); ++j) {
            const double tol = atol + rtol * std::abs(b(i, j));
            ASSERT_NEAR(a(i, j), b(i, j), tol) << "at (" << i << "," << j << ")";
        }
}

}  // namespace

TEST(Model, InitDeterministicBitIdentical) {
    auto m1 = EditableModel::init(tiny_config(7));
    auto m2 = EditableModel::init(tiny_config(7));
    EXPECT_EQ(save_checkpoint_bytes(m1), save_checkpoint_bytes(m2));
}

TEST(Model, InitRejectsBadHeadCount) {
    ModelConfig cfg = tiny_config();
    cfg.n_heads = 3;
    cfg.d_model = 8;
    try {
        EditableModel::init(cfg);
        FAIL() << "expected config error";
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("n_heads must divide d_model"), std::string::npos);
    }
}

TEST(Model, ForwardShapeContract) {
    auto m = EditableModel::init(tiny_config());
    auto res = m.forward({1, 2, 3});
    EXPECT_EQ(res.logits.rows(), 3);
    EXPECT_EQ(res.logits.cols(), 64);
    EXPECT_TRUE(res.logits.allFinite());
    EXPECT_TRUE(res.captures.empty());
}

TEST(Model, ForwardCaptureShapesAndPurity) {
    auto m = EditableModel::init(tiny_config());
    auto toks = random_tokens(5, 64, 3);
    std::vector<CaptureSpec> specs{{1, Site::mlp_input, {4}},
                                   {0, Site::mlp_output, {}},
                                   {1, Site::layer_output, {0, 2}}};
    auto r1 = m.forward(toks, specs);
    auto r2 = m.forward(toks, specs);
    ASSERT_EQ(r1.captures.size(), 1u + 5u + 2u);
    EXPECT_EQ(r1.captures[0].value.size(), 32);
    EXPECT_EQ(r1.captures[1].value.size(), 16);
    ASSERT_EQ(r1.captures.size(), r2.captures.size());
    for (size_t i = 0; i < r1.captures.size(); ++i)
        EXPECT_EQ(r1.captures[i].value, r2.captures[i].value);
    EXPECT_EQ(r1.logits, r2.logits);
}

TEST(Model, ForwardRejectsBadInput) {
    auto m = EditableModel::init(tiny_config());
    EXPECT_THROW(m.forward(random_tokens(33, 64, 1)), Error);
    EXPECT_THROW(m.forward({}), Error);
    EXPECT_THROW(m.forward({0, 64}), Error);
    EXPECT_THROW(m.forward({0, 1}, {{5, Site::mlp_input, {}}}), Error);
}

TEST(Model, InjectedZeroDeltaIsExactIdentity) {
    auto m = EditableModel::init(tiny_config());
    auto toks = random_tokens(7, 64, 11);
    Injection inj{1, 3, Vec::Zero(16)};
    auto plain = m.forward(toks);
    auto injected = m.forward_injected(toks, inj);
    EXPECT_EQ(plain.logits, injected.logits);
}

TEST(Model, InjectionRespectsCausality) {
    auto m = EditableModel::init(tiny_config());
    auto toks = random_tokens(7, 64, 12);
    Injection inj{0, 4, Vec::Constant(16, 0.5)};
    auto plain = m.forward(toks);
    auto injected = m.forward_injected(toks, inj);
    for (int t = 0; t < 4; ++t)
        EXPECT_EQ(plain.logits.row(t), injected.logits.row(t)) << "position " << t;
    EXPECT_GT((plain.logits.row(4) - injected.logits.row(4)).norm(), 0.0);
}

TEST(Model, SuffixPerturbationCausality) {
    auto m = EditableModel::init(tiny_config());
    auto toks = random_tokens(8, 64, 13);
    auto toks2 = toks;
    toks2[6] = (toks2[6] + 1) % 64;
    std::vector<CaptureSpec> specs{{1, Site::layer_output, {}}};
    auto r1 = m.forward(toks, specs);
    auto r2 = m.forward(toks2, specs);
    for (int t = 0; t < 6; ++t) {
        EXPECT_EQ(r1.captures[t].value, r2.captures[t].value) << "position " << t;
        EXPECT_EQ(r1.logits.row(t), r2.logits.row(t));
    }
}

TEST(Model, SmallDeltaFirstOrderResponse) {
    auto m = EditableModel::init(tiny_config());
    auto toks = random_tokens(6, 64, 14);
    Gaussian g(5);
    Vec u(16);
    for (int i = 0; i < 16; ++i) u[i] = g();
    u.normalize();
    auto base = m.forward(toks).logits;
    auto at = [&](double eps) {
        Injection inj{0, 2, eps * u};
        return (m.forward_injected(toks, inj).logits - base).norm();
    };
    const double d3 = at(1e-3), d4 = at(1e-4);
    EXPECT_GT(d4, 0.0);
    EXPECT_NEAR(d3 / d4, 10.0, 0.5);
}

TEST(Model, GradMatchesCentralFiniteDifferences) {
    for (std::uint32_t seed : {21u, 22u}) {
        auto m = EditableModel::init(tiny_config(seed));
        auto toks = random_tokens(7, 64, 100 + seed);
        Gaussian g(seed);
        Vec delta(16);
        for (int i = 0; i < 16; ++i) delta[i] = 0.3 * g();
        Injection inj{0, 2, delta};
        LossSpec loss;
        loss.nll = {{5, 9, 1.0}, {6, 17, 0.5}};
        Vec ref = Vec::Constant(64, 1.0 / 64.0);
        loss.kl = KlTerm{2, ref, 0.25};
        auto [value, grad] = m.grad_wrt_injection(toks, inj, loss);
        EXPECT_TRUE(std::isfinite(value));
        std::mt19937 pick(seed);
        const double h = 1e-5;
        for (int c = 0; c < 8; ++c) {
            const int i = static_cast<int>(pick() % 16);
            Injection plus = inj, minus = inj;
            plus.delta[i] += h;
            minus.delta[i] -= h;
            const double fp = m.grad_wrt_injection(toks, plus, loss).first;
            const double fm = m.grad_wrt_injection(toks, minus, loss).first;
            const double fd = (fp - fm) / (2 * h);
            EXPECT_NEAR(grad[i], fd, 1e-3 * std::max(1.0, std::abs(fd)))
                << "seed " << seed << " coord " << i;
        }
    }
}

TEST(Model, GradZeroWhenLossPrecedesInjection) {
    auto m = EditableModel::init(tiny_config());
    auto toks = random_tokens(7, 64, 31);
    Injection inj{0, 5, Vec::Constant(16, 0.2)};
    LossSpec loss;
    loss.nll = {{2, 3, 1.0}};
    auto [value, grad] = m.grad_wrt_injection(toks, inj, loss);
    EXPECT_TRUE(std::isfinite(value));
    EXPECT_EQ(grad.norm(), 0.0);
}

TEST(Model, GradLinearInLossWeight) {
    auto m = EditableModel::init(tiny_config());
    auto toks = random_tokens(6, 64, 32);
    Injection inj{0, 1, Vec::Constant(16, 0.1)};
    LossSpec one, two;
    one.nll = {{4, 7, 1.0}};
    two.nll = {{4, 7, 2.0}};
    auto g1 = m.grad_wrt_injection(toks, inj, one).second;
    auto g2 = m.grad_wrt_injection(toks, inj, two).second;
    expect_all_close(g2, 2.0 * g1, 1e-12, 1e-12);
}

TEST(Model, GradAtEarlierLogitLayer) {
    auto m = EditableModel::init(tiny_config());
    auto toks = random_tokens(6, 64, 33);
    Injection inj{0, 2, Vec::Constant(16, 0.15)};
    LossSpec loss;
    loss.nll = {{4, 11, 1.0}};
    loss.logit_layer = 0;
    auto [value, grad] = m.grad_wrt_injection(toks, inj, loss);
    const double h = 1e-5;
    Injection plus = inj, minus = inj;
    plus.delta[3] += h;
    minus.delta[3] -= h;
    const double fd =
        (m.grad_wrt_injection(toks, plus, loss).first - m.grad_wrt_injection(toks, minus, loss).first) /
        (2 * h);
    EXPECT_NEAR(grad[3], fd, 1e-3 * std::max(1.0, std::abs(fd)));
    EXPECT_TRUE(std::isfinite(value));

    // loss read below the injection layer sees no dependence
    Injection above{1, 2, Vec::Constant(16, 0.15)};
    EXPECT_EQ(m.grad_wrt_injection(toks, above, loss).second.norm(), 0.0);
}

TEST(Model, LayerWeightRoundTrip) {
    auto m = EditableModel::init(tiny_config());
    auto toks = random_tokens(5, 64, 41);
    auto before = m.forward(toks).logits;
    MatF w = m.get_layer_weight(1);
    m.set_layer_weight(1, w);
    EXPECT_EQ(m.forward(toks).logits, before);

    MatF delta = MatF::Constant(16, 32, 0.25f);
    MatF edited = w + delta;
    m.set_layer_weight(1, edited);
    MatF back = m.get_layer_weight(1);
    EXPECT_EQ(MatF(back), MatF(edited));

    EXPECT_THROW(m.set_layer_weight(1, MatF::Zero(3, 3)), Error);
    EXPECT_THROW(m.set_layer_weight(9, w), Error);
}

TEST(Model, GenerateDeterminism) {
    auto m = EditableModel::init(tiny_config());
    auto prompt = random_tokens(4, 64, 51);
    GenParams greedy;
    greedy.max_new = 8;
    EXPECT_EQ(m.generate(prompt, greedy), m.generate(prompt, greedy));

    GenParams none = greedy;
    none.max_new = 0;
    EXPECT_TRUE(m.generate(prompt, none).empty());

    GenParams sampled;
    sampled.max_new = 8;
    sampled.greedy = false;
    sampled.seed = 3;
    auto s1 = m.generate(prompt, sampled);
    EXPECT_EQ(s1, m.generate(prompt, sampled));
    EXPECT_EQ(s1.size(), 8u);
}

TEST(Checkpoint, RoundTripLogitsExact) {
    auto m = EditableModel::init(tiny_config(99));
    auto bytes = save_checkpoint_bytes(m);
    auto loaded = load_checkpoint_bytes(bytes);
    for (std::uint32_t s = 0; s < 10; ++s) {
        auto toks = random_tokens(6, 64, 200 + s);
        EXPECT_EQ(m.forward(toks).logits, loaded.forward(toks).logits);
    }
    EXPECT_EQ(save_checkpoint_bytes(loaded), bytes);
}

TEST(Checkpoint, EditedModelRoundTripsWithDelta) {
    auto m = EditableModel::init(tiny_config(5));
    MatF w = m.get_layer_weight(0);
    w(2, 3) += 1.5f;
    m.set_layer_weight(0, w);
    auto loaded = load_checkpoint_bytes(save_checkpoint_bytes(m));
    EXPECT_EQ(MatF(loaded.get_layer_weight(0)), MatF(w));
}

TEST(Checkpoint, StructuredErrorsOnCorruptPayloads) {
    auto m = EditableModel::init(tiny_config());
    auto bytes = save_checkpoint_bytes(m);

    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    EXPECT_THROW(load_checkpoint_bytes(bad_magic), Error);

    auto bad_version = bytes;
    bad_version[8] = 9;
    EXPECT_THROW(load_checkpoint_bytes(bad_version), Error);

    auto bad_len = bytes;
    bad_len[12] = static_cast<char>(0xff);  // corrupt header length field
    EXPECT_THROW(load_checkpoint_bytes(bad_len), Error);

    auto truncated = bytes.substr(0, bytes.size() - 7);
    EXPECT_THROW(load_checkpoint_bytes(truncated), Error);

    auto trailing = bytes + "xx";
    EXPECT_THROW(load_checkpoint_bytes(trailing), Error);
}
