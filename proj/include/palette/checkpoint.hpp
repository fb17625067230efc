#pragma once

// Checkpoint container: magic "PLTCKPT1", little-endian u32 format version,
// u64 header length, a JSON header (config + tokenizer + tensor manifest),
// then the tensors as row-major little-endian float32 in manifest order:
//   tok_embed, pos_embed,
//   per layer: ln1_gain, ln1_bias, w_q, w_k, w_v, w_o,
//              ln2_gain, ln2_bias, w_fc, w_down,
//   lnf_gain, lnf_bias, unembed.

#include <cstring>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "palette/common.hpp"
#include "palette/model.hpp"

namespace palette {

constexpr char kCheckpointMagic[9] = "PLTCKPT1";
constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

struct TensorRef {
    std::string name;
    Mat* mat = nullptr;
    Vec* vec = nullptr;

    Eigen::Index rows() const { return mat ? mat->rows() : vec->size(); }
    Eigen::Index cols() const { return mat ? mat->cols() : 1; }

    double get(Eigen::Index i, Eigen::Index j) const { return mat ? (*mat)(i, j) : (*vec)[i]; }
    void set(Eigen::Index i, Eigen::Index j, double v) {
        if (mat)
            (*mat)(i, j) = v;
        else
            (*vec)[i] = v;
    }
};

inline std::vector<TensorRef> tensor_list(EditableModel& m) {
    std::vector<TensorRef> ts;
    ts.push_back({"tok_embed", &m.tok_embed, nullptr});
    ts.push_back({"pos_embed", &m.pos_embed, nullptr});
    for (int l = 0; l < m.config.n_layers; ++l) {
        LayerWeights& w = m.layers[l];
        const std::string p = "layers." + std::to_string(l) + ".";
        ts.push_back({p + "ln1_gain", nullptr, &w.ln1_gain});
        ts.push_back({p + "ln1_bias", nullptr, &w.ln1_bias});
        ts.push_back({p + "w_q", &w.w_q, nullptr});
        ts.push_back({p + "w_k", &w.w_k, nullptr});
        ts.push_back({p + "w_v", &w.w_v, nullptr});
        ts.push_back({p + "w_o", &w.w_o, nullptr});
        ts.push_back({p + "ln2_gain", nullptr, &w.ln2_gain});
        ts.push_back({p + "ln2_bias", nullptr, &w.ln2_bias});
        ts.push_back({p + "w_fc", &w.w_fc, nullptr});
        ts.push_back({p + "w_down", &w.w_down, nullptr});
    }
    ts.push_back({"lnf_gain", nullptr, &m.lnf_gain});
    ts.push_back({"lnf_bias", nullptr, &m.lnf_bias});
    ts.push_back({"unembed", &m.unembed, nullptr});
    return ts;
}

}  // namespace detail

inline std::string save_checkpoint_bytes(const EditableModel& m) {
    auto tensors = detail::tensor_list(const_cast<EditableModel&>(m));  // read-only use
    nlohmann::json header;
    header["config"] = {{"n_layers", m.config.n_layers}, {"d_model", m.config.d_model},
                        {"n_heads", m.config.n_heads},   {"d_mlp", m.config.d_mlp},
                        {"vocab_size", m.config.vocab_size}, {"max_seq", m.config.max_seq},
                        {"seed", m.config.seed}};
    if (m.config.vocab_size == Tokenizer::kVocab)
        header["tokenizer"] = {{"type", "byte"},
                               {"vocab_size", Tokenizer::kVocab},
                               {"bos", Tokenizer::kBos},
                               {"eos", Tokenizer::kEos},
                               {"pad", Tokenizer::kPad}};
    else
        header["tokenizer"] = {{"type", "raw"}, {"vocab_size", m.config.vocab_size}};
    header["tensors"] = nlohmann::json::array();
    for (const auto& t : tensors)
        header["tensors"].push_back({{"name", t.name}, {"rows", t.rows()}, {"cols", t.cols()}});
    const std::string header_str = header.dump();

    std::string out(kCheckpointMagic, 8);
    detail::append_u32(out, kCheckpointVersion);
    detail::append_u64(out, header_str.size());
    out += header_str;
    for (const auto& t : tensors)
        for (Eigen::Index i = 0; i < t.rows(); ++i)
            for (Eigen::Index j = 0; j < t.cols(); ++j) {
                const float f = static_cast<float>(t.get(i, j));
                char buf[4];
                std::memcpy(buf, &f, 4);
                out.append(buf, 4);
            }
    return out;
}

inline EditableModel load_checkpoint_bytes(const std::string& bytes) {
    if (bytes.size() < 8 || bytes.compare(0, 8, kCheckpointMagic, 8) != 0)
        throw Error("checkpoint: bad magic (not a PLTCKPT1 file)");
    std::size_t off = 8;
    const std::uint32_t version = detail::read_u32(bytes, off);
    if (version != kCheckpointVersion)
        throw Error("checkpoint: unsupported format version " + std::to_string(version));
    const std::uint64_t header_len = detail::read_u64(bytes, off);
    if (off + header_len > bytes.size()) throw Error("checkpoint: header length exceeds payload");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.substr(off, header_len));
    } catch (const std::exception& e) {
        throw Error(std::string("checkpoint: malformed header: ") + e.what());
    }
    off += header_len;

    ModelConfig cfg;
    try {
        const auto& c = header.at("config");
        cfg.n_layers = c.at("n_layers").get<int>();
        cfg.d_model = c.at("d_model").get<int>();
        cfg.n_heads = c.at("n_heads").get<int>();
        cfg.d_mlp = c.at("d_mlp").get<int>();
        cfg.vocab_size = c.at("vocab_size").get<int>();
        cfg.max_seq = c.at("max_seq").get<int>();
        cfg.seed = c.at("seed").get<std::uint32_t>();
        if (header.at("tokenizer").at("vocab_size").get<int>() != cfg.vocab_size)
            throw Error("checkpoint: tokenizer/config vocab_size mismatch");
    } catch (const nlohmann::json::exception& e) {
        throw Error(std::string("checkpoint: incomplete header: ") + e.what());
    }
    cfg.validate();

    EditableModel m = EditableModel::init(cfg);  // allocates shapes; weights overwritten below
    auto tensors = detail::tensor_list(m);
    const auto& listed = header.at("tensors");
    if (listed.size() != tensors.size()) throw Error("checkpoint: tensor manifest length mismatch");
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        if (listed[i].at("name").get<std::string>() != tensors[i].name)
            throw Error("checkpoint: tensor order mismatch at " + tensors[i].name);
        if (listed[i].at("rows").get<Eigen::Index>() != tensors[i].rows() ||
            listed[i].at("cols").get<Eigen::Index>() != tensors[i].cols())
            throw Error("checkpoint: shape mismatch for " + tensors[i].name);
    }
    for (auto& t : tensors) {
        const std::size_t need = static_cast<std::size_t>(t.rows()) * t.cols() * 4;
        if (off + need > bytes.size()) throw Error("checkpoint: truncated tensor " + t.name);
        for (Eigen::Index i = 0; i < t.rows(); ++i)
            for (Eigen::Index j = 0; j < t.cols(); ++j) {
                float f;
                std::memcpy(&f, bytes.data() + off, 4);
                off += 4;
                t.set(i, j, static_cast<double>(f));
            }
    }
    if (off != bytes.size()) throw Error("checkpoint: trailing bytes after tensor data");
    return m;
}

inline void save_checkpoint(const EditableModel& m, const std::string& path) {
    write_file(path, save_checkpoint_bytes(m));
}

inline EditableModel load_checkpoint(const std::string& path) {
    return load_checkpoint_bytes(read_file(path));
}

inline std::uint64_t checkpoint_hash(const EditableModel& m) {
    return fnv1a64(save_checkpoint_bytes(m));
}

inline std::uint64_t checkpoint_file_hash(const std::string& path) {
    return fnv1a64(read_file(path));
}

}  // namespace palette
