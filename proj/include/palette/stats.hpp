#pragma once

// Second-moment estimation over key-site activations and SPD solves against
// it. The moment is uncentered: (1/n) * sum of k k^T over every token
// position of the contributing sequences.

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include "palette/common.hpp"
#include "palette/model.hpp"

namespace palette {

struct SecondMoment {
    Mat matrix;                 // (d_mlp x d_mlp)
    std::int64_t n_samples = 0; // contributing token activations
    int layer = 0;
    double epsilon = 0.0;       // ridge added before solves
};

// Identity stand-in used when mom2_adjustment is off (plain-key update).
inline SecondMoment identity_moment(int d_mlp, int layer) {
    SecondMoment sm;
    sm.matrix = Mat::Identity(d_mlp, d_mlp);
    sm.layer = layer;
    sm.epsilon = 0.0;
    return sm;
}

inline SecondMoment estimate_second_moment(const EditableModel& model,
                                           const std::vector<std::vector<int>>& corpus, int layer,
                                           int max_samples) {
    if (corpus.empty()) throw Error("estimate_second_moment: empty corpus");
    if (layer < 0 || layer >= model.config.n_layers)
        throw Error("estimate_second_moment: layer out of range");
    const int d = model.config.d_mlp;
    SecondMoment sm;
    sm.matrix = Mat::Zero(d, d);
    sm.layer = layer;
    const std::size_t use = std::min<std::size_t>(corpus.size(), std::max(0, max_samples));
    if (use == 0) throw Error("estimate_second_moment: max_samples must be positive");
    for (std::size_t s = 0; s < use; ++s) {
        const auto& seq = corpus[s];
        if (seq.empty()) continue;
        ForwardTrace tr = model.run_forward(seq, nullptr);
        const Mat& keys = tr.layers[layer].mlp_in;  // (T x d_mlp)
        sm.matrix.noalias() += keys.transpose() * keys;
        sm.n_samples += static_cast<std::int64_t>(seq.size());
    }
    if (sm.n_samples == 0) throw Error("estimate_second_moment: corpus contains no tokens");
    sm.matrix /= static_cast<double>(sm.n_samples);
    sm.matrix = 0.5 * (sm.matrix + sm.matrix.transpose());  // kill accumulation asymmetry
    sm.epsilon = 1e-4 * sm.matrix.diagonal().mean();
    return sm;
}

// Returns (C0 + epsilon*I)^-1 k via Cholesky, with a residual check.
inline Vec solve_second_moment(const SecondMoment& sm, const Vec& k) {
    if (k.size() != sm.matrix.rows())
        throw Error("solve: key length " + std::to_string(k.size()) + " does not match moment dim " +
                    std::to_string(sm.matrix.rows()));
    Mat a = sm.matrix;
    a.diagonal().array() += sm.epsilon;
    Eigen::LLT<Mat> llt(a);
    if (llt.info() != Eigen::Success) {
        Eigen::SelfAdjointEigenSolver<Mat> es(a, Eigen::EigenvaluesOnly);
        const double smallest = es.eigenvalues().minCoeff();
        throw Error("solve: SPD factorization failed, smallest eigenvalue ~= " +
                    std::to_string(smallest));
    }
    Vec x = llt.solve(k);
    const double resid = (a * x - k).norm();
    if (resid > 1e-6 * std::max(k.norm(), 1e-300))
        throw Error("solve: residual " + std::to_string(resid) + " exceeds tolerance");
    return x;
}

// On-disk cache. The key triple (checkpoint hash, layer, corpus hash) must
// match exactly on load; anything else is treated as stale.
namespace detail {
constexpr char kMomentMagic[9] = "PLTMOM01";
}

inline void save_second_moment(const SecondMoment& sm, const std::string& path,
                               std::uint64_t ckpt_hash, std::uint64_t corpus_hash) {
    std::string out(detail::kMomentMagic, 8);
    detail::append_u64(out, ckpt_hash);
    detail::append_u64(out, corpus_hash);
    detail::append_u32(out, static_cast<std::uint32_t>(sm.layer));
    detail::append_u64(out, static_cast<std::uint64_t>(sm.n_samples));
    const std::uint32_t d = static_cast<std::uint32_t>(sm.matrix.rows());
    detail::append_u32(out, d);
    auto append_f64 = [&out](double v) {
        char buf[8];
        std::memcpy(buf, &v, 8);
        out.append(buf, 8);
    };
    append_f64(sm.epsilon);
    for (std::uint32_t i = 0; i < d; ++i)
        for (std::uint32_t j = 0; j < d; ++j) append_f64(sm.matrix(i, j));
    write_file(path, out);
}

inline SecondMoment load_second_moment(const std::string& path, std::uint64_t ckpt_hash,
                                       std::uint64_t corpus_hash) {
    const std::string bytes = read_file(path);
    if (bytes.size() < 8 || bytes.compare(0, 8, detail::kMomentMagic, 8) != 0)
        throw Error("moment cache: bad magic");
    std::size_t off = 8;
    const std::uint64_t ck = detail::read_u64(bytes, off);
    const std::uint64_t co = detail::read_u64(bytes, off);
    SecondMoment sm;
    sm.layer = static_cast<int>(detail::read_u32(bytes, off));
    sm.n_samples = static_cast<std::int64_t>(detail::read_u64(bytes, off));
    const std::uint32_t d = detail::read_u32(bytes, off);
    if (ck != ckpt_hash || co != corpus_hash)
        throw Error("moment cache: stale key (checkpoint or corpus changed), refusing to load");
    auto read_f64 = [&bytes, &off]() {
        if (off + 8 > bytes.size()) throw Error("moment cache: truncated");
        double v;
        std::memcpy(&v, bytes.data() + off, 8);
        off += 8;
        return v;
    };
    sm.epsilon = read_f64();
    sm.matrix.resize(d, d);
    for (std::uint32_t i = 0; i < d; ++i)
        for (std::uint32_t j = 0; j < d; ++j) sm.matrix(i, j) = read_f64();
    if (off != bytes.size()) throw Error("moment cache: trailing bytes");
    return sm;
}

}  // namespace palette
