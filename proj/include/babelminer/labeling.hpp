#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "babelminer/corpus.hpp"
#include "babelminer/mining.hpp"

namespace babelminer::labeling {

enum class Split { Train, WsK, WsU };

std::string split_name(Split s);
Split split_from_name(const std::string& name);

struct LabeledImage {
    std::string image_id;
    std::set<std::string> concepts;
    Split split = Split::Train;

    // Defined exactly when |concepts| == 1.
    std::optional<std::string> single_label() const {
        if (concepts.size() == 1) return *concepts.begin();
        return std::nullopt;
    }
};

struct ConnectorList {
    std::vector<std::string> words;

    static ConnectorList defaults();
    static ConnectorList from_file(const std::string& path);
    bool contains(const std::string& token) const;
};

// Number of mentions of `concept_name` in `text` that are not preceded by any
// spatial connector anywhere earlier in the token stream.
std::size_t unsuppressed_mentions(const std::string& text,
                                  const std::string& concept_name,
                                  const corpus::NounLexicon& lexicon,
                                  const ConnectorList& connectors);

// Concepts with an unsuppressed mention in the caption or any leaf-category
// name (suppression evaluated per source).
std::set<std::string> associate(const corpus::ImageDoc& doc,
                                const mining::ConceptSet& concept_set,
                                const corpus::NounLexicon& lexicon,
                                const ConnectorList& connectors);

// 9:1 landmark-level split (held-out 10% -> WS-U), then 9:1 image-level
// split inside retained landmarks (held-out 10% -> WS-K).
std::map<std::string, Split> make_splits(const corpus::Corpus& corpus,
                                         const std::vector<std::string>& labeled_image_ids,
                                         std::uint64_t seed);

struct LabelSet {
    std::vector<LabeledImage> images;
};

LabelSet label_corpus(const corpus::Corpus& corpus,
                      const mining::ConceptSet& concept_set,
                      const corpus::NounLexicon& lexicon,
                      const ConnectorList& connectors,
                      std::uint64_t seed);

// Resamples single-label training images so each class holds ~target items.
// Oversamples with replacement, undersamples without; deterministic.
std::vector<std::string> balance_classes(const LabelSet& labels,
                                         std::size_t target_per_class,
                                         std::uint64_t seed);

std::string serialize_labels(const LabelSet& labels);
LabelSet parse_labels(const std::string& text);

}  // namespace babelminer::labeling
