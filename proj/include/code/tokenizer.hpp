#pragma once

// Subword tokenizer over a frozen bundled vocabulary.
//
// Words are lower-cased and split on whitespace; punctuation characters are
// words of their own. A word found in the vocabulary is a single token,
// otherwise it is segmented by greedy longest match into a head piece and
// "##"-prefixed continuation pieces, falling back to single characters and
// finally <unk>. Every sequence is [<sot>, pieces..., <eot>, <pad>...].

#include "code/lexicon.hpp"
#include "code/tensor.hpp"

#include <cctype>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace code {

struct TokenSpan {
    std::size_t start = 0;  // first token index
    std::size_t end = 0;    // one past the last token index
    bool operator==(const TokenSpan&) const = default;
};

struct TextSample {
    std::vector<int> tokens;  // padded to max_text_len
    std::string raw_text;
    std::vector<std::string> words;
    std::vector<TokenSpan> word_spans;  // one per entry of `words`

    std::size_t length() const { return tokens.size(); }
    // Number of non-pad positions (including <sot>/<eot>).
    std::size_t valid_length() const;
    std::vector<bool> valid_mask() const;
};

class Tokenizer {
public:
    static constexpr int kPad = 0;
    static constexpr int kSot = 1;
    static constexpr int kEot = 2;
    static constexpr int kUnk = 3;

    Tokenizer() {
        for (const char* s : {"<pad>", "<sot>", "<eot>", "<unk>"}) add(s);
        for (char c = 'a'; c <= 'z'; ++c) {
            add(std::string(1, c));
            add("##" + std::string(1, c));
        }
        for (char c = '0'; c <= '9'; ++c) {
            add(std::string(1, c));
            add("##" + std::string(1, c));
        }
        for (char c : std::string(".,;:!?'\"-()&/")) add(std::string(1, c));
        for (auto w : lexicon::kNouns) add(std::string(w));
        for (auto w : lexicon::kAdjectives) add(std::string(w));
        for (auto w : lexicon::kVerbs) add(std::string(w));
        for (auto w : lexicon::kFunctionWords) add(std::string(w));
        for (const char* s : {"##s", "##es", "##ed", "##ing", "##ly", "##er", "##est", "##ion", "##ness"})
            add(s);
    }

    std::size_t vocab_size() const { return pieces_.size(); }
    const std::string& piece(int id) const { return pieces_.at(static_cast<std::size_t>(id)); }

    static std::vector<std::string> split_words(const std::string& text) {
        std::vector<std::string> words;
        std::string cur;
        auto flush = [&] {
            if (!cur.empty()) words.push_back(std::move(cur));
            cur.clear();
        };
        for (unsigned char ch : text) {
            if (std::isspace(ch)) {
                flush();
            } else if (std::ispunct(ch)) {
                flush();
                words.emplace_back(1, static_cast<char>(ch));
            } else {
                cur.push_back(static_cast<char>(std::tolower(ch)));
            }
        }
        flush();
        return words;
    }

    std::vector<int> encode_word(const std::string& word) const {
        if (auto it = ids_.find(word); it != ids_.end()) return {it->second};
        std::vector<int> out;
        std::size_t pos = 0;
        while (pos < word.size()) {
            int found = -1;
            std::size_t len = word.size() - pos;
            for (; len > 0; --len) {
                std::string cand = (pos == 0 ? "" : "##") + word.substr(pos, len);
                if (auto it = ids_.find(cand); it != ids_.end()) {
                    found = it->second;
                    break;
                }
            }
            if (found < 0) {
                out.push_back(kUnk);
                ++pos;
            } else {
                out.push_back(found);
                pos += len;
            }
        }
        return out;
    }

    // Words that do not fit before <eot> are dropped (and absent from word_spans).
    TextSample encode(const std::string& text, std::size_t max_len) const {
        if (max_len < 3) throw Error("max_text_len must be at least 3");
        TextSample s;
        s.raw_text = text;
        s.tokens.push_back(kSot);
        for (auto& w : split_words(text)) {
            auto ids = encode_word(w);
            if (s.tokens.size() + ids.size() + 1 > max_len) break;
            TokenSpan span{s.tokens.size(), s.tokens.size() + ids.size()};
            s.tokens.insert(s.tokens.end(), ids.begin(), ids.end());
            s.words.push_back(w);
            s.word_spans.push_back(span);
        }
        s.tokens.push_back(kEot);
        s.tokens.resize(max_len, kPad);
        return s;
    }

    std::string decode(const std::vector<int>& ids, TokenSpan span) const {
        std::string out;
        for (std::size_t i = span.start; i < span.end && i < ids.size(); ++i) {
            const std::string& p = piece(ids[i]);
            if (p.rfind("##", 0) == 0)
                out += p.substr(2);
            else {
                if (!out.empty()) out += ' ';
                out += p;
            }
        }
        return out;
    }

private:
    void add(const std::string& p) {
        if (ids_.count(p)) return;
        ids_[p] = static_cast<int>(pieces_.size());
        pieces_.push_back(p);
    }

    std::vector<std::string> pieces_;
    std::unordered_map<std::string, int> ids_;
};

inline std::size_t TextSample::valid_length() const {
    std::size_t n = 0;
    while (n < tokens.size() && tokens[n] != Tokenizer::kPad) ++n;
    return n;
}

inline std::vector<bool> TextSample::valid_mask() const {
    std::vector<bool> m(tokens.size());
    const std::size_t n = valid_length();
    for (std::size_t i = 0; i < tokens.size(); ++i) m[i] = i < n;
    return m;
}

}  // namespace code
