#pragma once

// Byte-level tokenizer: 256 raw bytes plus BOS/EOS/PAD. Token ids below 256
// are the byte values themselves, so character offsets map 1:1 to token
// positions (shifted by one when a BOS is prepended).

#include <string>
#include <vector>

#include "palette/common.hpp"

namespace palette {

struct Tokenizer {
    static constexpr int kBos = 256;
    static constexpr int kEos = 257;
    static constexpr int kPad = 258;
    static constexpr int kVocab = 259;

    static bool is_special(int id) { return id >= 256; }

    std::vector<int> encode(const std::string& text, bool add_bos = true,
                            bool add_eos = false) const {
        std::vector<int> out;
        out.reserve(text.size() + 2);
        if (add_bos) out.push_back(kBos);
        for (unsigned char c : text) out.push_back(static_cast<int>(c));
        if (add_eos) out.push_back(kEos);
        return out;
    }

    std::string decode(const std::vector<int>& tokens) const {
        std::string out;
        out.reserve(tokens.size());
        for (int t : tokens) {
            if (t < 0 || t >= kVocab) throw Error("token id out of range: " + std::to_string(t));
            if (t < 256) out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
        }
        return out;
    }
};

}  // namespace palette
