#include "babelminer/mining.hpp"

#include <algorithm>
#include <sstream>

#include <json.hpp>

#include "babelminer/common.hpp"

namespace babelminer::mining {

using nlohmann::json;

std::set<std::string> CandidateConcept::supporting_landmarks() const {
    std::set<std::string> out;
    for (const auto& [landmark, images] : per_landmark_images)
        if (!images.empty()) out.insert(landmark);
    return out;
}

bool ConceptSet::contains(const std::string& noun) const {
    return std::any_of(concepts.begin(), concepts.end(),
                       [&](const DistilledConcept& c) { return c.noun == noun; });
}

std::vector<std::string> ConceptSet::nouns() const {
    std::vector<std::string> out;
    out.reserve(concepts.size());
    for (const auto& c : concepts) out.push_back(c.noun);
    return out;
}

std::vector<CandidateConcept> candidate_concepts(const corpus::Corpus& corpus,
                                                 const corpus::NounLexicon& lexicon) {
    std::map<std::string, CandidateConcept> by_noun;
    for (const auto& doc : corpus.docs) {
        std::set<std::string> nouns_here;
        for (const auto& mention : corpus::extract_nouns(doc.leaf_category(), lexicon))
            nouns_here.insert(mention.noun);
        for (const std::string& noun : nouns_here) {
            CandidateConcept& cand = by_noun[noun];
            cand.noun = noun;
            cand.per_landmark_images[doc.landmark_id].insert(doc.image_id);
        }
    }
    std::vector<CandidateConcept> out;
    out.reserve(by_noun.size());
    for (auto& [noun, cand] : by_noun) out.push_back(std::move(cand));
    return out;
}

AdjacencyGraph build_adjacency_graph(const CandidateConcept& candidate,
                                     const std::string& landmark_id,
                                     const corpus::Corpus& corpus,
                                     const sfm::TrackIndex& index,
                                     std::size_t k) {
    if (k < 1) throw Error("build_adjacency_graph: k must be >= 1");
    auto it = candidate.per_landmark_images.find(landmark_id);
    if (it == candidate.per_landmark_images.end())
        throw Error("candidate '" + candidate.noun + "' has no images for landmark " + landmark_id);

    AdjacencyGraph graph;
    for (const std::string& image_id : it->second) {
        const corpus::ImageDoc* doc = corpus.find(image_id);
        if (!doc || !doc->registered || !doc->reconstruction_id) continue;
        sfm::ImageKey key = index.find_image(*doc->reconstruction_id, image_id);
        if (!key.empty()) graph.nodes.push_back(key);
    }
    std::sort(graph.nodes.begin(), graph.nodes.end());
    for (std::size_t a = 0; a < graph.nodes.size(); ++a)
        for (std::size_t b = a + 1; b < graph.nodes.size(); ++b)
            if (index.shared_keypoints(graph.nodes[a], graph.nodes[b]) >= k)
                graph.edges.emplace_back(a, b);
    return graph;
}

double graph_density(const AdjacencyGraph& graph) {
    std::size_t v = graph.nodes.size();
    if (v < 2) throw Error("graph_density undefined for |V| < 2");
    return 2.0 * static_cast<double>(graph.edges.size()) /
           (static_cast<double>(v) * static_cast<double>(v - 1));
}

CoherenceReport coherence(const CandidateConcept& candidate,
                          const corpus::Corpus& corpus,
                          const sfm::TrackIndex& index,
                          std::size_t k,
                          std::size_t min_nodes) {
    CoherenceReport report;
    report.noun = candidate.noun;
    double sum = 0.0;
    for (const auto& [landmark, images] : candidate.per_landmark_images) {
        AdjacencyGraph graph = build_adjacency_graph(candidate, landmark, corpus, index, k);
        LandmarkGraphStats stats;
        stats.num_nodes = graph.nodes.size();
        stats.num_edges = graph.edges.size();
        if (stats.num_nodes >= 2) stats.density = graph_density(graph);
        if (stats.num_nodes >= min_nodes && stats.density) {
            sum += *stats.density;
            ++report.num_qualifying_graphs;
        }
        report.graphs.emplace(landmark, stats);
    }
    if (report.num_qualifying_graphs > 0)
        report.mean_density = sum / static_cast<double>(report.num_qualifying_graphs);
    return report;
}

ConceptSet distill(const std::vector<CandidateConcept>& candidates,
                   const corpus::Corpus& corpus,
                   const sfm::TrackIndex& index,
                   const DistillThresholds& thresholds) {
    if (thresholds.shared_keypoints_k < 1 || thresholds.min_landmarks < 1 ||
        thresholds.min_rho < 0.0 || thresholds.min_nodes < 2)
        throw ConfigError("distill: invalid thresholds");

    ConceptSet set;
    set.thresholds = thresholds;
    std::vector<std::optional<DistilledConcept>> results(candidates.size());
    parallel_for(candidates.size(), [&](std::size_t i) {
        const CandidateConcept& cand = candidates[i];
        std::size_t support = cand.supporting_landmarks().size();
        if (support < thresholds.min_landmarks) return;
        CoherenceReport report =
            coherence(cand, corpus, index, thresholds.shared_keypoints_k, thresholds.min_nodes);
        if (!report.mean_density || *report.mean_density < thresholds.min_rho) return;
        results[i] = DistilledConcept{cand.noun, support, std::move(report)};
    });
    for (auto& r : results)
        if (r) set.concepts.push_back(std::move(*r));
    std::sort(set.concepts.begin(), set.concepts.end(),
              [](const DistilledConcept& a, const DistilledConcept& b) {
                  if (a.support != b.support) return a.support > b.support;
                  return a.noun < b.noun;
              });
    return set;
}

std::string serialize_concept_set(const ConceptSet& set) {
    std::ostringstream out;
    json header;
    header["record"] = "thresholds";
    header["k"] = set.thresholds.shared_keypoints_k;
    header["min_landmarks"] = set.thresholds.min_landmarks;
    header["min_rho"] = set.thresholds.min_rho;
    header["min_nodes"] = set.thresholds.min_nodes;
    out << header.dump() << "\n";
    for (const auto& c : set.concepts) {
        json rec;
        rec["record"] = "concept";
        rec["noun"] = c.noun;
        rec["support"] = c.support;
        rec["rho"] = c.coherence.mean_density ? json(*c.coherence.mean_density) : json(nullptr);
        rec["num_qualifying_graphs"] = c.coherence.num_qualifying_graphs;
        json graphs = json::object();
        for (const auto& [landmark, stats] : c.coherence.graphs) {
            json g;
            g["nodes"] = stats.num_nodes;
            g["edges"] = stats.num_edges;
            g["density"] = stats.density ? json(*stats.density) : json(nullptr);
            graphs[landmark] = g;
        }
        rec["graphs"] = graphs;
        out << rec.dump() << "\n";
    }
    return out.str();
}

ConceptSet parse_concept_set(const std::string& text) {
    ConceptSet set;
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
            throw ParseError("concept set line " + std::to_string(line_no) + ": " + e.what());
        }
        std::string kind = rec.value("record", "");
        if (kind == "thresholds") {
            set.thresholds.shared_keypoints_k = rec.at("k").get<std::size_t>();
            set.thresholds.min_landmarks = rec.at("min_landmarks").get<std::size_t>();
            set.thresholds.min_rho = rec.at("min_rho").get<double>();
            set.thresholds.min_nodes = rec.at("min_nodes").get<std::size_t>();
        } else if (kind == "concept") {
            DistilledConcept c;
            c.noun = rec.at("noun").get<std::string>();
            c.support = rec.at("support").get<std::size_t>();
            c.coherence.noun = c.noun;
            if (!rec.at("rho").is_null()) c.coherence.mean_density = rec["rho"].get<double>();
            c.coherence.num_qualifying_graphs = rec.value("num_qualifying_graphs", std::size_t(0));
            if (rec.contains("graphs")) {
                for (auto it = rec["graphs"].begin(); it != rec["graphs"].end(); ++it) {
                    LandmarkGraphStats stats;
                    stats.num_nodes = it.value().at("nodes").get<std::size_t>();
                    stats.num_edges = it.value().at("edges").get<std::size_t>();
                    if (!it.value().at("density").is_null())
                        stats.density = it.value()["density"].get<double>();
                    c.coherence.graphs.emplace(it.key(), stats);
                }
            }
            set.concepts.push_back(std::move(c));
        } else {
            throw ParseError("concept set line " + std::to_string(line_no) + ": unknown record kind");
        }
    }
    return set;
}

}  // namespace babelminer::mining
