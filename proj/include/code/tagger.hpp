#pragma once

#include "code/lexicon.hpp"

#include <cctype>
#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

namespace code {

enum class PosTag { Noun, Adjective, Verb, Function, Punct, Other };

// Adapter point for external part-of-speech taggers.
class Tagger {
public:
    virtual ~Tagger() = default;
    virtual std::vector<PosTag> tag(const std::vector<std::string>& words) const = 0;
};

// Deterministic lexicon tagger with a few contextual rules for ambiguous and
// out-of-lexicon words.
class LexiconTagger : public Tagger {
public:
    LexiconTagger() {
        for (auto w : lexicon::kNouns) nouns_.emplace(w);
        for (auto w : lexicon::kAdjectives) adjectives_.emplace(w);
        for (auto w : lexicon::kVerbs) verbs_.emplace(w);
        for (auto w : lexicon::kFunctionWords) function_.emplace(w);
    }

    std::vector<PosTag> tag(const std::vector<std::string>& words) const override {
        std::vector<PosTag> tags(words.size(), PosTag::Other);
        // First pass: unambiguous lexicon hits.
        for (std::size_t i = 0; i < words.size(); ++i) tags[i] = lookup(words[i]);
        for (std::size_t i = 0; i < words.size(); ++i) {
            const std::string& w = words[i];
            const bool n = is_noun(w), a = adjectives_.count(w) != 0, v = verbs_.count(w) != 0;
            const PosTag prev = i > 0 ? tags[i - 1] : PosTag::Punct;
            const bool next_nominal = i + 1 < words.size() && could_be_noun(words[i + 1]);
            if (function_.count(w) || is_punct(w)) continue;
            if (n && a) {
                tags[i] = next_nominal ? PosTag::Adjective : PosTag::Noun;
            } else if (n && v) {
                tags[i] = (prev == PosTag::Function && is_determiner(words[i - 1])) || prev == PosTag::Adjective
                              ? PosTag::Noun
                              : PosTag::Verb;
            } else if (!n && !a && !v) {
                tags[i] = guess_unknown(words, i, tags);
            }
        }
        return tags;
    }

private:
    static bool is_punct(const std::string& w) {
        return w.size() == 1 && !std::isalnum(static_cast<unsigned char>(w[0]));
    }
    static bool ends_with(const std::string& w, const std::string& suf) {
        return w.size() > suf.size() && w.compare(w.size() - suf.size(), suf.size(), suf) == 0;
    }
    static bool is_determiner(const std::string& w) {
        static const std::unordered_set<std::string> d{"a", "an", "the", "this", "that", "these",
                                                       "those", "some", "any", "each", "every",
                                                       "his", "her", "their", "our", "my", "your", "its"};
        return d.count(w) != 0;
    }

    bool is_noun(const std::string& w) const {
        if (nouns_.count(w)) return true;
        if (ends_with(w, "s") && nouns_.count(w.substr(0, w.size() - 1))) return true;
        return ends_with(w, "es") && nouns_.count(w.substr(0, w.size() - 2));
    }
    bool could_be_noun(const std::string& w) const {
        if (function_.count(w) || is_punct(w)) return false;
        if (is_noun(w)) return true;
        return !adjectives_.count(w) && !verbs_.count(w) && !ends_with(w, "ly");
    }

    PosTag lookup(const std::string& w) const {
        if (is_punct(w)) return PosTag::Punct;
        if (function_.count(w)) return PosTag::Function;
        const bool n = is_noun(w), a = adjectives_.count(w) != 0, v = verbs_.count(w) != 0;
        if (n && !a && !v) return PosTag::Noun;
        if (a && !n) return PosTag::Adjective;
        if (v && !n) return PosTag::Verb;
        return PosTag::Other;
    }

    PosTag guess_unknown(const std::vector<std::string>& words, std::size_t i,
                         const std::vector<PosTag>& tags) const {
        const std::string& w = words[i];
        if (std::isdigit(static_cast<unsigned char>(w[0]))) return PosTag::Other;
        if (ends_with(w, "ly")) return PosTag::Other;
        if (ends_with(w, "ing") || ends_with(w, "ed")) return PosTag::Verb;
        if (ends_with(w, "ful") || ends_with(w, "ous") || ends_with(w, "ive")) return PosTag::Adjective;
        const bool after_modifier =
            i > 0 && (tags[i - 1] == PosTag::Adjective ||
                      (tags[i - 1] == PosTag::Function && is_determiner(words[i - 1])));
        const bool next_is_nominal = i + 1 < words.size() && is_noun(words[i + 1]);
        if (after_modifier && !next_is_nominal) return PosTag::Noun;
        if (after_modifier) return PosTag::Adjective;
        return PosTag::Other;
    }

    std::unordered_set<std::string> nouns_, adjectives_, verbs_, function_;
};

}  // namespace code
