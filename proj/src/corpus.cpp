#include "babelminer/corpus.hpp"

#include <cctype>
#include <sstream>
#include <unordered_set>

#include <json.hpp>

#include "babelminer/common.hpp"

namespace babelminer::corpus {

using nlohmann::json;

void Corpus::reindex() {
    index_.clear();
    index_.reserve(docs.size());
    for (std::size_t i = 0; i < docs.size(); ++i) index_.emplace(docs[i].image_id, i);
}

const ImageDoc* Corpus::find(const std::string& image_id) const {
    if (index_.size() == docs.size()) {
        auto it = index_.find(image_id);
        return it == index_.end() ? nullptr : &docs[it->second];
    }
    for (const ImageDoc& doc : docs)
        if (doc.image_id == image_id) return &doc;
    return nullptr;
}

bool NounLexicon::is_noun(const std::string& token) const {
    if (entity_blocklist.count(token)) return false;
    if (nouns.count(token)) return true;
    if (fold_plural_s && token.size() > 1 && token.back() == 's')
        return nouns.count(token.substr(0, token.size() - 1)) != 0;
    return false;
}

std::string NounLexicon::canonical(const std::string& token) const {
    if (nouns.count(token)) return token;
    if (fold_plural_s && token.size() > 1 && token.back() == 's') {
        std::string stem = token.substr(0, token.size() - 1);
        if (nouns.count(stem)) return stem;
    }
    return token;
}

Corpus parse_corpus(const std::string& text) {
    Corpus corpus;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    std::unordered_set<std::string> seen_ids;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        json rec;
        try {
            rec = json::parse(line);
        } catch (const json::exception& e) {
            throw ParseError("corpus line " + std::to_string(line_no) + ": " + e.what());
        }
        auto fail = [&](const std::string& msg) -> ParseError {
            return ParseError("corpus line " + std::to_string(line_no) + ": " + msg);
        };
        ImageDoc doc;
        try {
            doc.image_id = rec.at("image_id").get<std::string>();
            doc.landmark_id = rec.at("landmark_id").get<std::string>();
            doc.caption = rec.value("caption", std::string());
            doc.category_path = rec.at("category_path").get<std::vector<std::string>>();
            doc.registered = rec.at("registered").get<bool>();
            if (rec.contains("reconstruction_id") && !rec["reconstruction_id"].is_null())
                doc.reconstruction_id = rec["reconstruction_id"].get<std::string>();
        } catch (const json::exception& e) {
            throw fail(e.what());
        }
        if (doc.category_path.empty()) throw fail("category_path must be non-empty");
        if (doc.registered && !doc.reconstruction_id)
            throw fail("registered image lacks reconstruction_id");
        if (!seen_ids.insert(doc.image_id).second)
            throw fail("duplicate image_id '" + doc.image_id + "'");
        corpus.docs.push_back(std::move(doc));
    }
    corpus.reindex();
    return corpus;
}

Corpus load_corpus(const std::string& path) {
    return parse_corpus(read_file(path));
}

std::string serialize_corpus(const Corpus& corpus) {
    std::ostringstream out;
    for (const ImageDoc& doc : corpus.docs) {
        json rec;
        rec["image_id"] = doc.image_id;
        rec["landmark_id"] = doc.landmark_id;
        rec["caption"] = doc.caption;
        rec["category_path"] = doc.category_path;
        rec["registered"] = doc.registered;
        rec["reconstruction_id"] = doc.reconstruction_id ? json(*doc.reconstruction_id) : json(nullptr);
        out << rec.dump() << "\n";
    }
    return out.str();
}

std::set<std::string> parse_word_list(const std::string& text) {
    std::set<std::string> words;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        for (const std::string& tok : tokenize(line)) words.insert(tok);
    }
    return words;
}

NounLexicon load_lexicon(const std::string& nouns_path, const std::string& blocklist_path) {
    NounLexicon lex;
    lex.nouns = parse_word_list(read_file(nouns_path));
    if (!blocklist_path.empty())
        lex.entity_blocklist = parse_word_list(read_file(blocklist_path));
    return lex;
}

std::vector<std::string> tokenize(const std::string& text) {
    std::vector<std::string> tokens;
    std::string current;
    for (unsigned char c : text) {
        if (std::isalnum(c)) {
            current.push_back(static_cast<char>(std::tolower(c)));
        } else if (!current.empty()) {
            tokens.push_back(std::move(current));
            current.clear();
        }
    }
    if (!current.empty()) tokens.push_back(std::move(current));
    return tokens;
}

std::vector<NounMention> extract_nouns(const std::string& text, const NounLexicon& lexicon) {
    std::vector<NounMention> out;
    auto tokens = tokenize(text);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (lexicon.is_noun(tokens[i])) out.push_back({lexicon.canonical(tokens[i]), i});
    }
    return out;
}

}  // namespace babelminer::corpus
