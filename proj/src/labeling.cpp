#include "babelminer/labeling.hpp"

#include <algorithm>
#include <iostream>
#include <sstream>

#include <json.hpp>

#include "babelminer/common.hpp"

namespace babelminer::labeling {

using nlohmann::json;

std::string split_name(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::WsK: return "WS-K";
        case Split::WsU: return "WS-U";
    }
    throw Error("invalid split");
}

Split split_from_name(const std::string& name) {
    if (name == "train") return Split::Train;
    if (name == "WS-K") return Split::WsK;
    if (name == "WS-U") return Split::WsU;
    throw ParseError("unknown split name '" + name + "'");
}

ConnectorList ConnectorList::defaults() {
    return ConnectorList{{"above", "over", "below", "under", "beside", "behind", "from",
                          "towards", "left", "right", "east", "west"}};
}

ConnectorList ConnectorList::from_file(const std::string& path) {
    ConnectorList list;
    std::istringstream in(read_file(path));
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        for (const std::string& tok : corpus::tokenize(line)) list.words.push_back(tok);
    }
    return list;
}

bool ConnectorList::contains(const std::string& token) const {
    return std::find(words.begin(), words.end(), token) != words.end();
}

std::size_t unsuppressed_mentions(const std::string& text,
                                  const std::string& concept_name,
                                  const corpus::NounLexicon& lexicon,
                                  const ConnectorList& connectors) {
    auto tokens = corpus::tokenize(text);
    // Everything after the first connector is suppressed.
    std::size_t cutoff = tokens.size();
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (connectors.contains(tokens[i])) {
            cutoff = i;
            break;
        }
    }
    std::size_t count = 0;
    for (std::size_t i = 0; i < cutoff; ++i) {
        if (lexicon.is_noun(tokens[i]) && lexicon.canonical(tokens[i]) == concept_name) ++count;
    }
    return count;
}

std::set<std::string> associate(const corpus::ImageDoc& doc,
                                const mining::ConceptSet& concept_set,
                                const corpus::NounLexicon& lexicon,
                                const ConnectorList& connectors) {
    std::vector<std::string> sources;
    sources.push_back(doc.caption);
    sources.push_back(doc.leaf_category());

    std::set<std::string> out;
    for (const auto& concept_name : concept_set.concepts) {
        for (const std::string& source : sources) {
            if (unsuppressed_mentions(source, concept_name.noun, lexicon, connectors) >= 1) {
                out.insert(concept_name.noun);
                break;
            }
        }
    }
    return out;
}

std::map<std::string, Split> make_splits(const corpus::Corpus& corpus,
                                         const std::vector<std::string>& labeled_image_ids,
                                         std::uint64_t seed) {
    std::map<std::string, std::vector<std::string>> by_landmark;
    for (const std::string& image_id : labeled_image_ids) {
        const corpus::ImageDoc* doc = corpus.find(image_id);
        if (!doc) throw Error("make_splits: image '" + image_id + "' not in corpus");
        by_landmark[doc->landmark_id].push_back(image_id);
    }
    if (by_landmark.size() < 2) throw Error("make_splits: need labeled images from >= 2 landmarks");

    std::vector<std::string> landmarks;
    for (const auto& [landmark, images] : by_landmark) landmarks.push_back(landmark);

    Rng rng = Rng(seed).child("splits");
    Rng lm_rng = rng.child("landmarks");
    std::vector<std::string> shuffled = landmarks;
    lm_rng.shuffle(shuffled);

    std::size_t n_wsu = shuffled.size() / 10;
    if (n_wsu == 0) {
        std::cerr << "[babelminer] warning: fewer than 10 landmarks; allocating 1 to WS-U\n";
        n_wsu = 1;
    }
    std::set<std::string> wsu_landmarks(shuffled.begin(), shuffled.begin() + n_wsu);

    std::map<std::string, Split> assignment;
    std::vector<std::string> retained_images;
    for (const auto& [landmark, images] : by_landmark) {
        if (wsu_landmarks.count(landmark)) {
            for (const std::string& id : images) assignment[id] = Split::WsU;
        } else {
            for (const std::string& id : images) retained_images.push_back(id);
        }
    }
    std::sort(retained_images.begin(), retained_images.end());
    Rng img_rng = rng.child("images");
    img_rng.shuffle(retained_images);
    std::size_t n_wsk = retained_images.size() / 10;
    for (std::size_t i = 0; i < retained_images.size(); ++i)
        assignment[retained_images[i]] = (i < n_wsk) ? Split::WsK : Split::Train;
    return assignment;
}

LabelSet label_corpus(const corpus::Corpus& corpus,
                      const mining::ConceptSet& concept_set,
                      const corpus::NounLexicon& lexicon,
                      const ConnectorList& connectors,
                      std::uint64_t seed) {
    LabelSet out;
    std::vector<std::string> labeled_ids;
    std::map<std::string, std::set<std::string>> concepts_by_image;
    for (const auto& doc : corpus.docs) {
        std::set<std::string> concepts = associate(doc, concept_set, lexicon, connectors);
        if (concepts.empty()) continue;
        labeled_ids.push_back(doc.image_id);
        concepts_by_image.emplace(doc.image_id, std::move(concepts));
    }
    auto splits = make_splits(corpus, labeled_ids, seed);
    for (const std::string& id : labeled_ids) {
        LabeledImage img;
        img.image_id = id;
        img.concepts = concepts_by_image[id];
        img.split = splits.at(id);
        out.images.push_back(std::move(img));
    }
    return out;
}

std::vector<std::string> balance_classes(const LabelSet& labels,
                                         std::size_t target_per_class,
                                         std::uint64_t seed) {
    std::map<std::string, std::vector<std::string>> by_class;
    for (const auto& img : labels.images) {
        if (img.split != Split::Train) continue;
        auto label = img.single_label();
        if (label) by_class[*label].push_back(img.image_id);
    }
    Rng rng = Rng(seed).child("balance");
    std::vector<std::string> out;
    for (auto& [cls, ids] : by_class) {
        if (ids.empty()) throw Error("balance_classes: class '" + cls + "' is empty");
        std::sort(ids.begin(), ids.end());
        Rng cls_rng = rng.child(cls);
        if (ids.size() >= target_per_class) {
            cls_rng.shuffle(ids);
            out.insert(out.end(), ids.begin(), ids.begin() + target_per_class);
        } else {
            out.insert(out.end(), ids.begin(), ids.end());
            for (std::size_t i = ids.size(); i < target_per_class; ++i)
                out.push_back(ids[cls_rng.uniform(ids.size())]);
        }
    }
    Rng order_rng = rng.child("order");
    order_rng.shuffle(out);
    return out;
}

std::string serialize_labels(const LabelSet& labels) {
    std::ostringstream out;
    for (const auto& img : labels.images) {
        json rec;
        rec["image_id"] = img.image_id;
        rec["concepts"] = std::vector<std::string>(img.concepts.begin(), img.concepts.end());
        rec["split"] = split_name(img.split);
        out << rec.dump() << "\n";
    }
    return out.str();
}

LabelSet parse_labels(const std::string& text) {
    LabelSet out;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json rec;
        try {
            rec = json::parse(line);
        } catch (const json::exception& e) {
            throw ParseError("labels line " + std::to_string(line_no) + ": " + e.what());
        }
        LabeledImage img;
        img.image_id = rec.at("image_id").get<std::string>();
        for (const auto& c : rec.at("concepts")) img.concepts.insert(c.get<std::string>());
        img.split = split_from_name(rec.at("split").get<std::string>());
        out.images.push_back(std::move(img));
    }
    return out;
}

}  // namespace babelminer::labeling
