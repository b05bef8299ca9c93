#pragma once
// Whitespace tokenizer over a closed vocabulary with four specials. Token ids
// are dense; specials occupy fixed slots 0..3 so serialized datasets and
// checkpoints agree on them without negotiation.

#include "kgfusion/errors.hpp"

#include <cstdint>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace kgf {

class Vocab {
public:
    static constexpr uint32_t kPad = 0;
    static constexpr uint32_t kBos = 1;
    static constexpr uint32_t kEos = 2;
    static constexpr uint32_t kSep = 3;
    static constexpr uint32_t kReservedCount = 4;

    Vocab() {
        for (const char* s : {"<pad>", "<bos>", "<eos>", "<sep>"}) add(s);
    }

    static Vocab build(const std::vector<std::string>& words) {
        Vocab v;
        for (const auto& w : words) v.add(w);
        return v;
    }

    // Idempotent; returns the id either way.
    uint32_t add(std::string_view word) {
        auto it = index_.find(std::string(word));
        if (it != index_.end()) return it->second;
        const auto id = static_cast<uint32_t>(words_.size());
        words_.emplace_back(word);
        index_.emplace(words_.back(), id);
        return id;
    }

    uint32_t id(std::string_view word) const {
        auto it = index_.find(std::string(word));
        if (it == index_.end())
            throw UnknownToken("token not in vocabulary: '" + std::string(word) + "'");
        return it->second;
    }

    const std::string& word(uint32_t id) const {
        if (id >= words_.size())
            throw UnknownToken("token id out of range: " + std::to_string(id));
        return words_[id];
    }

    uint32_t size() const { return static_cast<uint32_t>(words_.size()); }
    const std::vector<std::string>& words() const { return words_; }

    std::vector<uint32_t> encode(std::string_view text) const {
        std::vector<uint32_t> out;
        std::istringstream ss{std::string(text)};
        std::string w;
        while (ss >> w) out.push_back(id(w));
        return out;
    }

    std::string decode(std::span<const uint32_t> ids) const {
        std::string out;
        for (size_t i = 0; i < ids.size(); ++i) {
            if (i) out += ' ';
            out += word(ids[i]);
        }
        return out;
    }

private:
    std::vector<std::string> words_;
    std::unordered_map<std::string, uint32_t> index_;
};

} // namespace kgf
