#pragma once

#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

namespace babelminer::corpus {

struct ImageDoc {
    std::string image_id;
    std::string landmark_id;
    std::string caption;  // may be empty
    std::vector<std::string> category_path;  // root..leaf, never empty
    bool registered = false;
    std::optional<std::string> reconstruction_id;

    const std::string& leaf_category() const { return category_path.back(); }
};

struct Corpus {
    std::vector<ImageDoc> docs;

    // Must be called after mutating docs; loaders call it automatically.
    void reindex();
    const ImageDoc* find(const std::string& image_id) const;

private:
    std::unordered_map<std::string, std::size_t> index_;
};

// Lexicon-backed noun tagger. The noun list plays the role of an external
// POS/NER stack; the blocklist holds word forms tagged as named entities.
struct NounLexicon {
    std::set<std::string> nouns;
    std::set<std::string> entity_blocklist;
    // When set, a token ending in 's' also matches the singular lexicon entry.
    bool fold_plural_s = false;

    bool is_noun(const std::string& token) const;
    // Canonical lexicon form for a matching token (strips plural 's' when folded).
    std::string canonical(const std::string& token) const;
};

// Line-delimited JSON records, one ImageDoc per line.
Corpus load_corpus(const std::string& path);
Corpus parse_corpus(const std::string& text);
std::string serialize_corpus(const Corpus& corpus);

// Plain-text word lists, one word per line, '#' comments allowed.
NounLexicon load_lexicon(const std::string& nouns_path, const std::string& blocklist_path);
std::set<std::string> parse_word_list(const std::string& text);

// Lowercases and splits on any non-alphanumeric byte; drops empties.
std::vector<std::string> tokenize(const std::string& text);

struct NounMention {
    std::string noun;  // canonical lexicon form
    std::size_t token_index;
};

std::vector<NounMention> extract_nouns(const std::string& text, const NounLexicon& lexicon);

}  // namespace babelminer::corpus
