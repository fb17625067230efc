#pragma once

// Tiny decoder-only transformer (pre-LN GPT blocks, GELU MLP, learned
// positional embeddings, byte-level vocabulary). Provides forward passes with
// activation capture, residual injection at an MLP output, an analytic
// gradient w.r.t. the injected vector, generation, and layer-weight access.
//
// Conventions: activations are (T x dim) matrices, one row per position.
// Weight matrices are (out_dim x in_dim); a linear layer computes Y = X * W^T.
// All math runs in double; persistent weights are kept float32-representable.

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "palette/common.hpp"
#include "palette/tokenizer.hpp"

namespace palette {

struct ModelConfig {
    int n_layers = 4;
    int d_model = 64;
    int n_heads = 4;
    int d_mlp = 256;
    int vocab_size = Tokenizer::kVocab;
    int max_seq = 512;
    std::uint32_t seed = 0;

    void validate() const {
        if (n_layers < 1) throw Error("invalid config: n_layers must be >= 1");
        if (d_model < 1) throw Error("invalid config: d_model must be >= 1");
        if (n_heads < 1) throw Error("invalid config: n_heads must be >= 1");
        if (d_mlp < 1) throw Error("invalid config: d_mlp must be >= 1");
        if (vocab_size < 1) throw Error("invalid config: vocab_size must be >= 1");
        if (max_seq < 2) throw Error("invalid config: max_seq must be >= 2");
        if (d_model % n_heads != 0) throw Error("invalid config: n_heads must divide d_model");
    }
};

enum class Site { mlp_input, mlp_output, layer_output };

inline std::string site_name(Site s) {
    switch (s) {
        case Site::mlp_input: return "mlp_input";
        case Site::mlp_output: return "mlp_output";
        case Site::layer_output: return "layer_output";
    }
    return "?";
}

struct CaptureSpec {
    int layer = 0;
    Site site = Site::mlp_input;
    std::vector<int> positions;  // empty means every position
};

struct Captured {
    int layer;
    Site site;
    int position;
    Vec value;
};

struct Injection {
    int layer = 0;
    int token_position = 0;
    Vec delta;  // length d_model, added to the MLP output at (layer, position)
};

struct NllTerm {
    int position;  // position whose next-token distribution is scored
    int token;     // the token expected at position+1
    double weight = 1.0;
};

struct KlTerm {
    int position;
    Vec ref_probs;  // reference distribution over the vocabulary
    double weight = 1.0;
};

struct LossSpec {
    std::vector<NllTerm> nll;
    std::optional<KlTerm> kl;
    int logit_layer = -1;  // -1 reads logits at the final layer
};

namespace detail {

constexpr double kLnEps = 1e-5;
constexpr double kInitStd = 0.08;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

inline double gelu(double x) {
    return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
}

inline double gelu_grad(double x) {
    const double u = kGeluC * (x + kGeluA * x * x * x);
    const double t = std::tanh(u);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
}

}  // namespace detail

struct LayerWeights {
    Vec ln1_gain, ln1_bias;
    Mat w_q, w_k, w_v, w_o;  // each (d_model x d_model)
    Vec ln2_gain, ln2_bias;
    Mat w_fc;    // (d_mlp x d_model)
    Mat w_down;  // (d_model x d_mlp), the edit site
};

struct LayerCache {
    Mat x_in;            // (T x d) residual entering the block
    Vec ln1_mean, ln1_istd;
    Mat ln1_out;
    Mat q, k, v;         // (T x d)
    std::vector<Mat> att;  // per head, (T x T) row-softmax probabilities
    Mat att_concat;      // (T x d) heads reassembled
    Mat x_mid;           // residual after attention
    Vec ln2_mean, ln2_istd;
    Mat ln2_out;
    Mat fc_pre;          // (T x d_mlp)
    Mat mlp_in;          // (T x d_mlp) post-GELU, the key site
    Mat mlp_out;         // (T x d) down-projection output (+ injection)
    Mat x_out;           // residual leaving the block
};

struct ForwardTrace {
    Mat embed;
    std::vector<LayerCache> layers;
    Vec lnf_mean, lnf_istd;  // stats of ln_f over the logit source layer
    Mat logits;              // (T x vocab) at the final layer
};

struct ForwardResult {
    Mat logits;
    std::vector<Captured> captures;
};

struct GenParams {
    int max_new = 64;
    bool greedy = true;
    double temperature = 0.8;
    std::uint32_t seed = 0;
    bool mask_specials = true;  // forbid BOS/EOS/PAD in sampled/greedy picks
    bool stop_at_eos = true;
};

struct EditableModel {
    ModelConfig config;
    Tokenizer tokenizer;
    Mat tok_embed;  // (vocab x d_model)
    Mat pos_embed;  // (max_seq x d_model)
    std::vector<LayerWeights> layers;
    Vec lnf_gain, lnf_bias;
    Mat unembed;  // (vocab x d_model)

    static EditableModel init(const ModelConfig& cfg) {
        cfg.validate();
        EditableModel m;
        m.config = cfg;
        Gaussian g(cfg.seed);
        auto fill = [&g](Mat& mat, int rows, int cols) {
            mat.resize(rows, cols);
            for (Eigen::Index i = 0; i < mat.rows(); ++i)
                for (Eigen::Index j = 0; j < mat.cols(); ++j)
                    mat(i, j) = to_f32(detail::kInitStd * g());
        };
        fill(m.tok_embed, cfg.vocab_size, cfg.d_model);
        fill(m.pos_embed, cfg.max_seq, cfg.d_model);
        m.layers.resize(cfg.n_layers);
        for (auto& lw : m.layers) {
            lw.ln1_gain = Vec::Ones(cfg.d_model);
            lw.ln1_bias = Vec::Zero(cfg.d_model);
            fill(lw.w_q, cfg.d_model, cfg.d_model);
            fill(lw.w_k, cfg.d_model, cfg.d_model);
            fill(lw.w_v, cfg.d_model, cfg.d_model);
            fill(lw.w_o, cfg.d_model, cfg.d_model);
            lw.ln2_gain = Vec::Ones(cfg.d_model);
            lw.ln2_bias = Vec::Zero(cfg.d_model);
            fill(lw.w_fc, cfg.d_mlp, cfg.d_model);
            fill(lw.w_down, cfg.d_model, cfg.d_mlp);
        }
        m.lnf_gain = Vec::Ones(cfg.d_model);
        m.lnf_bias = Vec::Zero(cfg.d_model);
        fill(m.unembed, cfg.vocab_size, cfg.d_model);
        return m;
    }

    MatF get_layer_weight(int layer) const {
        check_layer(layer);
        return layers[layer].w_down.cast<float>();
    }

    void set_layer_weight(int layer, const MatF& w) {
        check_layer(layer);
        if (w.rows() != config.d_model || w.cols() != config.d_mlp)
            throw Error("set_layer_weight: shape mismatch, want (" +
                        std::to_string(config.d_model) + " x " + std::to_string(config.d_mlp) +
                        "), got (" + std::to_string(w.rows()) + " x " + std::to_string(w.cols()) + ")");
        layers[layer].w_down = w.cast<double>();
    }

    ForwardResult forward(const std::vector<int>& tokens,
                          const std::vector<CaptureSpec>& captures = {}) const {
        ForwardTrace tr = run_forward(tokens, nullptr);
        return {tr.logits, extract_captures(tr, captures, static_cast<int>(tokens.size()))};
    }

    ForwardResult forward_injected(const std::vector<int>& tokens, const Injection& inj,
                                   const std::vector<CaptureSpec>& captures = {}) const {
        check_injection(inj, static_cast<int>(tokens.size()));
        ForwardTrace tr = run_forward(tokens, &inj);
        return {tr.logits, extract_captures(tr, captures, static_cast<int>(tokens.size()))};
    }

    // Returns (loss, d loss / d injection.delta) evaluated at the given delta.
    std::pair<double, Vec> grad_wrt_injection(const std::vector<int>& tokens,
                                              const Injection& inj, const LossSpec& loss) const {
        const int T = static_cast<int>(tokens.size());
        check_injection(inj, T);
        const int L = loss.logit_layer < 0 ? config.n_layers - 1 : loss.logit_layer;
        if (L < 0 || L >= config.n_layers)
            throw Error("loss layer out of range: " + std::to_string(loss.logit_layer));
        for (const auto& t : loss.nll)
            if (t.position < 0 || t.position >= T)
                throw Error("loss position out of range: " + std::to_string(t.position));
        if (loss.kl && (loss.kl->position < 0 || loss.kl->position >= T))
            throw Error("loss position out of range: " + std::to_string(loss.kl->position));

        ForwardTrace tr = run_forward(tokens, &inj);
        Mat logits = logits_at_layer(tr, L);

        double loss_value = 0.0;
        Mat dlogits = Mat::Zero(T, config.vocab_size);
        for (const auto& t : loss.nll) {
            if (t.token < 0 || t.token >= config.vocab_size)
                throw Error("loss token out of range: " + std::to_string(t.token));
            Vec p = softmax_row(logits.row(t.position));
            loss_value += t.weight * (-std::log(std::max(p[t.token], 1e-300)));
            p[t.token] -= 1.0;
            dlogits.row(t.position) += t.weight * p.transpose();
        }
        if (loss.kl) {
            const Vec& r = loss.kl->ref_probs;
            if (r.size() != config.vocab_size) throw Error("kl reference distribution has wrong size");
            Vec q = softmax_row(logits.row(loss.kl->position));
            double kl = 0.0;
            for (int i = 0; i < config.vocab_size; ++i)
                if (r[i] > 0.0) kl += r[i] * std::log(r[i] / std::max(q[i], 1e-300));
            loss_value += loss.kl->weight * kl;
            dlogits.row(loss.kl->position) += loss.kl->weight * (q - r).transpose();
        }

        Vec grad = Vec::Zero(config.d_model);
        if (L < inj.layer) return {loss_value, grad};  // loss reads below the injection

        // d logits -> d ln_f input (the loss layer's residual output)
        Mat g = dlogits * unembed;  // (T x d)
        g = layernorm_backward(tr.layers[L].x_out, tr.lnf_mean, tr.lnf_istd, lnf_gain, g);
        for (int j = L; j > inj.layer; --j) g = block_backward(j, tr.layers[j], g);
        grad = g.row(inj.token_position).transpose();
        return {loss_value, grad};
    }

    // Prefill once with the full forward, then decode against cached per-layer
    // keys/values so each step costs O(T·d) instead of a fresh O(T²) pass.
    std::vector<int> generate(const std::vector<int>& prompt_tokens, const GenParams& p) const {
        if (prompt_tokens.empty()) throw Error("generate: empty prompt");
        if (static_cast<int>(prompt_tokens.size()) > config.max_seq)
            throw Error("generate: prompt exceeds max_seq");
        std::vector<int> out;
        if (p.max_new <= 0) return out;
        std::mt19937 eng(p.seed);
        const int d = config.d_model;
        const int nh = config.n_heads;
        const int dh = d / nh;
        const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

        ForwardTrace tr = run_forward(prompt_tokens, nullptr);
        int T = static_cast<int>(prompt_tokens.size());
        std::vector<Mat> kcache(config.n_layers), vcache(config.n_layers);
        for (int l = 0; l < config.n_layers; ++l) {
            kcache[l] = Mat(config.max_seq, d);
            vcache[l] = Mat(config.max_seq, d);
            kcache[l].topRows(T) = tr.layers[l].k;
            vcache[l].topRows(T) = tr.layers[l].v;
        }
        Vec logits = tr.logits.row(T - 1).transpose();

        auto pick = [&](Vec& lg) -> int {
            if (p.mask_specials)
                for (int s = 256; s < config.vocab_size; ++s)
                    lg[s] = -std::numeric_limits<double>::infinity();
            if (p.greedy) {
                Eigen::Index arg;
                lg.maxCoeff(&arg);
                return static_cast<int>(arg);
            }
            const double temp = p.temperature > 0 ? p.temperature : 1.0;
            Vec probs = softmax_row((lg / temp).transpose());
            const double u = (static_cast<double>(eng()) + 0.5) * (1.0 / 4294967296.0);
            double acc = 0.0;
            for (int i = 0; i < config.vocab_size; ++i) {
                acc += probs[i];
                if (u <= acc) return i;
            }
            return config.vocab_size - 1;
        };

        for (int step = 0; step < p.max_new; ++step) {
            if (T >= config.max_seq) break;
            const int next = pick(logits);
            if (p.stop_at_eos && next == Tokenizer::kEos) break;
            out.push_back(next);
            if (step + 1 == p.max_new) break;

            Vec x = (tok_embed.row(next) + pos_embed.row(T)).transpose();
            for (int l = 0; l < config.n_layers; ++l) {
                const LayerWeights& w = layers[l];
                const Vec ln1 = layernorm_vec(x, w.ln1_gain, w.ln1_bias);
                const Vec q = w.w_q * ln1;
                kcache[l].row(T) = (w.w_k * ln1).transpose();
                vcache[l].row(T) = (w.w_v * ln1).transpose();
                Vec att_concat(d);
                for (int h = 0; h < nh; ++h) {
                    auto kh = kcache[l].topRows(T + 1).middleCols(h * dh, dh);
                    auto vh = vcache[l].topRows(T + 1).middleCols(h * dh, dh);
                    Vec scores = (kh * q.segment(h * dh, dh)) * scale;
                    const double mx = scores.maxCoeff();
                    Vec probs = (scores.array() - mx).exp().matrix();
                    probs /= probs.sum();
                    att_concat.segment(h * dh, dh) = vh.transpose() * probs;
                }
                const Vec x_mid = x + w.w_o * att_concat;
                const Vec ln2 = layernorm_vec(x_mid, w.ln2_gain, w.ln2_bias);
                const Vec act =
                    (w.w_fc * ln2).unaryExpr([](double v) { return detail::gelu(v); });
                x = x_mid + w.w_down * act;
            }
            logits = unembed * layernorm_vec(x, lnf_gain, lnf_bias);
            ++T;
        }
        return out;
    }

    // Logit-lens: ln_f + unembedding applied to an intermediate layer's output.
    Mat logits_at_layer(const ForwardTrace& tr, int layer) const {
        check_layer(layer);
        if (layer == config.n_layers - 1) return tr.logits;
        Vec mean, istd;
        Mat normed = layernorm(tr.layers[layer].x_out, lnf_gain, lnf_bias, mean, istd);
        return normed * unembed.transpose();
    }

    ForwardTrace run_forward(const std::vector<int>& tokens, const Injection* inj) const {
        const int T = static_cast<int>(tokens.size());
        if (T == 0) throw Error("forward: empty token sequence");
        if (T > config.max_seq)
            throw Error("forward: sequence length " + std::to_string(T) + " exceeds max_seq " +
                        std::to_string(config.max_seq));
        for (int t : tokens)
            if (t < 0 || t >= config.vocab_size)
                throw Error("forward: token id out of range: " + std::to_string(t));

        const int d = config.d_model;
        const int nh = config.n_heads;
        const int dh = d / nh;
        const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

        ForwardTrace tr;
        tr.embed.resize(T, d);
        for (int t = 0; t < T; ++t)
            tr.embed.row(t) = tok_embed.row(tokens[t]) + pos_embed.row(t);

        tr.layers.resize(config.n_layers);
        Mat x = tr.embed;
        for (int l = 0; l < config.n_layers; ++l) {
            const LayerWeights& w = layers[l];
            LayerCache& c = tr.layers[l];
            c.x_in = x;
            c.ln1_out = layernorm(c.x_in, w.ln1_gain, w.ln1_bias, c.ln1_mean, c.ln1_istd);
            c.q = c.ln1_out * w.w_q.transpose();
            c.k = c.ln1_out * w.w_k.transpose();
            c.v = c.ln1_out * w.w_v.transpose();
            c.att.resize(nh);
            c.att_concat.resize(T, d);
            for (int h = 0; h < nh; ++h) {
                auto qh = c.q.middleCols(h * dh, dh);
                auto kh = c.k.middleCols(h * dh, dh);
                auto vh = c.v.middleCols(h * dh, dh);
                Mat scores = (qh * kh.transpose()) * scale;
                Mat& probs = c.att[h];
                probs = Mat::Zero(T, T);
                for (int i = 0; i < T; ++i) {
                    double mx = scores(i, 0);
                    for (int j = 1; j <= i; ++j) mx = std::max(mx, scores(i, j));
                    double sum = 0.0;
                    for (int j = 0; j <= i; ++j) {
                        probs(i, j) = std::exp(scores(i, j) - mx);
                        sum += probs(i, j);
                    }
                    for (int j = 0; j <= i; ++j) probs(i, j) /= sum;
                }
                c.att_concat.middleCols(h * dh, dh) = probs * vh;
            }
            Mat att_out = c.att_concat * w.w_o.transpose();
            c.x_mid = c.x_in + att_out;
            c.ln2_out = layernorm(c.x_mid, w.ln2_gain, w.ln2_bias, c.ln2_mean, c.ln2_istd);
            c.fc_pre = c.ln2_out * w.w_fc.transpose();
            c.mlp_in = c.fc_pre.unaryExpr([](double v) { return detail::gelu(v); });
            c.mlp_out = c.mlp_in * w.w_down.transpose();
            if (inj && inj->layer == l) c.mlp_out.row(inj->token_position) += inj->delta.transpose();
            c.x_out = c.x_mid + c.mlp_out;
            x = c.x_out;
        }
        Mat normed = layernorm(x, lnf_gain, lnf_bias, tr.lnf_mean, tr.lnf_istd);
        tr.logits = normed * unembed.transpose();
        return tr;
    }

    static Vec softmax_row(const Eigen::RowVectorXd& row) {
        const double mx = row.maxCoeff();
        Vec p = (row.transpose().array() - mx).exp().matrix();
        return p / p.sum();
    }

private:
    void check_layer(int layer) const {
        if (layer < 0 || layer >= config.n_layers)
            throw Error("layer out of range: " + std::to_string(layer));
    }

    void check_injection(const Injection& inj, int T) const {
        check_layer(inj.layer);
        if (inj.token_position < 0 || inj.token_position >= T)
            throw Error("injection position out of range: " + std::to_string(inj.token_position));
        if (inj.delta.size() != config.d_model) throw Error("injection delta has wrong length");
    }

    static Vec layernorm_vec(const Vec& x, const Vec& gain, const Vec& bias) {
        const double mu = x.mean();
        const double var = (x.array() - mu).square().sum() / static_cast<double>(x.size());
        const double istd = 1.0 / std::sqrt(var + detail::kLnEps);
        return (((x.array() - mu) * istd) * gain.array() + bias.array()).matrix();
    }

    static Mat layernorm(const Mat& x, const Vec& gain, const Vec& bias, Vec& mean_out,
                         Vec& istd_out) {
        const int T = static_cast<int>(x.rows());
        const int d = static_cast<int>(x.cols());
        Mat y(T, d);
        mean_out.resize(T);
        istd_out.resize(T);
        for (int i = 0; i < T; ++i) {
            const double mu = x.row(i).mean();
            const double var = (x.row(i).array() - mu).square().sum() / d;
            const double istd = 1.0 / std::sqrt(var + detail::kLnEps);
            mean_out[i] = mu;
            istd_out[i] = istd;
            Eigen::ArrayXd xhat = (x.row(i).transpose().array() - mu) * istd;
            y.row(i) = (xhat * gain.array() + bias.array()).matrix().transpose();
        }
        return y;
    }

    static Mat layernorm_backward(const Mat& x, const Vec& mean, const Vec& istd, const Vec& gain,
                                  const Mat& dy) {
        const int T = static_cast<int>(x.rows());
        const int d = static_cast<int>(x.cols());
        Mat dx(T, d);
        for (int i = 0; i < T; ++i) {
            Eigen::ArrayXd xhat = (x.row(i).transpose().array() - mean[i]) * istd[i];
            Eigen::ArrayXd dxhat = dy.row(i).transpose().array() * gain.array();
            const double m1 = dxhat.mean();
            const double m2 = (dxhat * xhat).mean();
            dx.row(i) = (istd[i] * (dxhat - m1 - xhat * m2)).matrix().transpose();
        }
        return dx;
    }

    // Given d loss / d x_out of block l, returns d loss / d x_in of block l.
    Mat block_backward(int l, const LayerCache& c, const Mat& g) const {
        const LayerWeights& w = layers[l];
        const int T = static_cast<int>(c.x_in.rows());
        const int d = config.d_model;
        const int nh = config.n_heads;
        const int dh = d / nh;
        const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

        Mat d_x_mid = g;
        Mat d_mlp_in = g * w.w_down;  // d mlp_out = g
        Mat d_fc_pre = (d_mlp_in.array() *
                        c.fc_pre.unaryExpr([](double v) { return detail::gelu_grad(v); }).array())
                           .matrix();
        Mat d_ln2_out = d_fc_pre * w.w_fc;
        d_x_mid += layernorm_backward(c.x_mid, c.ln2_mean, c.ln2_istd, w.ln2_gain, d_ln2_out);

        Mat d_x_in = d_x_mid;
        Mat d_att_concat = d_x_mid * w.w_o;
        Mat dq = Mat::Zero(T, d), dk = Mat::Zero(T, d), dv = Mat::Zero(T, d);
        for (int h = 0; h < nh; ++h) {
            auto qh = c.q.middleCols(h * dh, dh);
            auto kh = c.k.middleCols(h * dh, dh);
            auto vh = c.v.middleCols(h * dh, dh);
            const Mat& probs = c.att[h];
            Mat d_ch = d_att_concat.middleCols(h * dh, dh);
            Mat d_probs = d_ch * vh.transpose();
            dv.middleCols(h * dh, dh) = probs.transpose() * d_ch;
            Mat d_scores(T, T);
            for (int i = 0; i < T; ++i) {
                const double dot = d_probs.row(i).cwiseProduct(probs.row(i)).sum();
                d_scores.row(i) =
                    probs.row(i).cwiseProduct(d_probs.row(i) - Eigen::RowVectorXd::Constant(T, dot));
            }
            dq.middleCols(h * dh, dh) = (d_scores * kh) * scale;
            dk.middleCols(h * dh, dh) = (d_scores.transpose() * qh) * scale;
        }
        Mat d_ln1_out = dq * w.w_q + dk * w.w_k + dv * w.w_v;
        d_x_in += layernorm_backward(c.x_in, c.ln1_mean, c.ln1_istd, w.ln1_gain, d_ln1_out);
        return d_x_in;
    }

    std::vector<Captured> extract_captures(const ForwardTrace& tr,
                                           const std::vector<CaptureSpec>& specs, int T) const {
        std::vector<Captured> out;
        for (const auto& s : specs) {
            check_layer(s.layer);
            const LayerCache& c = tr.layers[s.layer];
            const Mat& src = s.site == Site::mlp_input    ? c.mlp_in
                             : s.site == Site::mlp_output ? c.mlp_out
                                                          : c.x_out;
            std::vector<int> positions = s.positions;
            if (positions.empty())
                for (int i = 0; i < T; ++i) positions.push_back(i);
            for (int pos : positions) {
                if (pos < 0 || pos >= T)
                    throw Error("capture position out of range: " + std::to_string(pos));
                out.push_back({s.layer, s.site, pos, src.row(pos).transpose()});
            }
        }
        return out;
    }
};

}  // namespace palette
