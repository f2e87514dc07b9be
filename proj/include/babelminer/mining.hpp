#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "babelminer/corpus.hpp"
#include "babelminer/sfm.hpp"

namespace babelminer::mining {

struct CandidateConcept {
    std::string noun;
    // Images whose leaf category contains the noun, grouped by landmark.
    std::map<std::string, std::set<std::string>> per_landmark_images;

    std::set<std::string> supporting_landmarks() const;
};

struct AdjacencyGraph {
    std::vector<std::string> nodes;  // image keys, sorted
    std::vector<std::pair<std::size_t, std::size_t>> edges;  // index pairs, a < b
};

struct LandmarkGraphStats {
    std::size_t num_nodes = 0;
    std::size_t num_edges = 0;
    std::optional<double> density;  // absent when num_nodes < 2
};

struct CoherenceReport {
    std::string noun;
    std::map<std::string, LandmarkGraphStats> graphs;
    std::optional<double> mean_density;  // over graphs with >= min_nodes nodes
    std::size_t num_qualifying_graphs = 0;
};

struct DistillThresholds {
    std::size_t shared_keypoints_k = 10;  // edge criterion
    std::size_t min_landmarks = 25;      // support test
    double min_rho = 0.08;               // coherence test
    std::size_t min_nodes = 10;          // graph qualification
};

struct DistilledConcept {
    std::string noun;
    std::size_t support = 0;
    CoherenceReport coherence;
};

struct ConceptSet {
    std::vector<DistilledConcept> concepts;  // descending support, then noun
    DistillThresholds thresholds;

    bool contains(const std::string& noun) const;
    std::vector<std::string> nouns() const;
};

// One candidate per distinct noun found in any leaf category.
std::vector<CandidateConcept> candidate_concepts(const corpus::Corpus& corpus,
                                                 const corpus::NounLexicon& lexicon);

// Visual adjacency graph of a candidate's registered images within one
// landmark. Edge iff the pair shares at least k keypoints.
AdjacencyGraph build_adjacency_graph(const CandidateConcept& candidate,
                                     const std::string& landmark_id,
                                     const corpus::Corpus& corpus,
                                     const sfm::TrackIndex& index,
                                     std::size_t k);

// rho = 2|E| / (|V| (|V|-1)); requires |V| >= 2.
double graph_density(const AdjacencyGraph& graph);

CoherenceReport coherence(const CandidateConcept& candidate,
                          const corpus::Corpus& corpus,
                          const sfm::TrackIndex& index,
                          std::size_t k,
                          std::size_t min_nodes);

ConceptSet distill(const std::vector<CandidateConcept>& candidates,
                   const corpus::Corpus& corpus,
                   const sfm::TrackIndex& index,
                   const DistillThresholds& thresholds = {});

// Structured ConceptSet report consumed by labeling and the CLI.
std::string serialize_concept_set(const ConceptSet& set);
ConceptSet parse_concept_set(const std::string& text);

}  // namespace babelminer::mining
