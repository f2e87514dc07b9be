#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace babelminer::evaluation {

struct ScoredItem {
    std::string id;
    double score = 0.0;
    bool positive = false;
};

// Interpolation-free AP: mean over positives of precision at each positive's
// rank. Ties in score break by ascending id.
double average_precision(std::vector<ScoredItem> items);

struct ApReport {
    std::map<std::string, double> per_class_ap;
    double mean_ap = 0.0;    // mAP: mean over classes
    double pooled_ap = 0.0;  // mAP*: AP over all (image, class) score pairs pooled
};

// items_per_class: class name -> scored items for that class.
ApReport ap_report(const std::map<std::string, std::vector<ScoredItem>>& items_per_class);

struct SegMetrics {
    double iou = 0.0;
    double precision = 0.0;
    double recall = 0.0;
};

// Masks are row-major uint8 (0/1). Empty-union IoU is 1 (both masks empty);
// precision/recall degenerate cases follow the same convention.
SegMetrics seg_metrics(const std::vector<std::uint8_t>& pred,
                       const std::vector<std::uint8_t>& gt,
                       int width, int height);

// Row-normalized confusion matrix; rows with no examples stay zero.
std::vector<std::vector<double>> confusion_matrix(const std::vector<int>& preds,
                                                  const std::vector<int>& labels,
                                                  int num_classes);

struct RankedRetrieval {
    std::string query_id;
    std::vector<std::string> ranked_image_ids;  // best first
    std::string target_image_id;
    std::optional<std::string> target_label;
};

// Percentage (0..100) of queries whose target lands in the top K.
double recall_at_k(const std::vector<RankedRetrieval>& retrievals, std::size_t k);

struct SemanticScore {
    std::map<std::string, double> per_class;  // percentage per class
    double s = 0.0;   // mean over classes
    double s_star = 0.0;  // mean over all queries
};

// A query succeeds when any of its top-K images carries the target's label;
// unlabeled retrieved images count as failures for the containment test.
SemanticScore semantic_s(const std::vector<RankedRetrieval>& retrievals,
                         const std::map<std::string, std::string>& image_labels,
                         std::size_t k);

std::vector<RankedRetrieval> parse_retrievals(const std::string& text);
std::string serialize_retrievals(const std::vector<RankedRetrieval>& retrievals);

// Fixed-point percentage with one decimal, the reporting scale of the tables.
std::string format_percent(double fraction);

}  // namespace babelminer::evaluation
