#include "babelminer/evaluation.hpp"

#include <algorithm>
#include <cstdio>
#include <set>
#include <sstream>

#include <json.hpp>

#include "babelminer/common.hpp"

namespace babelminer::evaluation {

using nlohmann::json;

double average_precision(std::vector<ScoredItem> items) {
    std::size_t n_pos = std::count_if(items.begin(), items.end(),
                                      [](const ScoredItem& it) { return it.positive; });
    if (n_pos == 0) throw Error("average_precision: no positive items");
    std::sort(items.begin(), items.end(), [](const ScoredItem& a, const ScoredItem& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.id < b.id;
    });
    double sum = 0.0;
    std::size_t hits = 0;
    for (std::size_t rank = 0; rank < items.size(); ++rank) {
        if (!items[rank].positive) continue;
        ++hits;
        sum += static_cast<double>(hits) / static_cast<double>(rank + 1);
    }
    return sum / static_cast<double>(n_pos);
}

ApReport ap_report(const std::map<std::string, std::vector<ScoredItem>>& items_per_class) {
    ApReport report;
    std::vector<ScoredItem> pooled;
    double sum = 0.0;
    for (const auto& [cls, items] : items_per_class) {
        double ap = average_precision(items);
        report.per_class_ap[cls] = ap;
        sum += ap;
        for (const ScoredItem& it : items) {
            ScoredItem copy = it;
            copy.id = cls + "/" + it.id;  // keep tie-breaking stable across classes
            pooled.push_back(copy);
        }
    }
    if (items_per_class.empty()) throw Error("ap_report: no classes");
    report.mean_ap = sum / static_cast<double>(items_per_class.size());
    report.pooled_ap = average_precision(std::move(pooled));
    return report;
}

SegMetrics seg_metrics(const std::vector<std::uint8_t>& pred,
                       const std::vector<std::uint8_t>& gt,
                       int width, int height) {
    std::size_t n = static_cast<std::size_t>(width) * height;
    if (pred.size() != n || gt.size() != n)
        throw Error("seg_metrics: mask dimensions mismatch");
    std::size_t inter = 0, p_count = 0, g_count = 0;
    for (std::size_t i = 0; i < n; ++i) {
        bool p = pred[i] != 0, g = gt[i] != 0;
        inter += (p && g);
        p_count += p;
        g_count += g;
    }
    std::size_t uni = p_count + g_count - inter;
    SegMetrics out;
    out.iou = (uni == 0) ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
    out.precision = (p_count == 0) ? (g_count == 0 ? 1.0 : 0.0)
                                   : static_cast<double>(inter) / static_cast<double>(p_count);
    out.recall = (g_count == 0) ? (p_count == 0 ? 1.0 : 0.0)
                                : static_cast<double>(inter) / static_cast<double>(g_count);
    return out;
}

std::vector<std::vector<double>> confusion_matrix(const std::vector<int>& preds,
                                                  const std::vector<int>& labels,
                                                  int num_classes) {
    if (preds.size() != labels.size()) throw Error("confusion_matrix: length mismatch");
    std::vector<std::vector<double>> m(static_cast<std::size_t>(num_classes),
                                       std::vector<double>(static_cast<std::size_t>(num_classes), 0.0));
    std::vector<std::size_t> row_counts(static_cast<std::size_t>(num_classes), 0);
    for (std::size_t i = 0; i < preds.size(); ++i) {
        int l = labels[i], p = preds[i];
        if (l < 0 || l >= num_classes || p < 0 || p >= num_classes)
            throw Error("confusion_matrix: class index out of range");
        m[l][p] += 1.0;
        ++row_counts[l];
    }
    for (int r = 0; r < num_classes; ++r) {
        if (row_counts[r] == 0) continue;
        for (int c = 0; c < num_classes; ++c) m[r][c] /= static_cast<double>(row_counts[r]);
    }
    return m;
}

double recall_at_k(const std::vector<RankedRetrieval>& retrievals, std::size_t k) {
    if (k < 1) throw Error("recall_at_k: k must be >= 1");
    if (retrievals.empty()) return 0.0;
    std::size_t hits = 0;
    for (const auto& r : retrievals) {
        std::size_t top = std::min(k, r.ranked_image_ids.size());
        for (std::size_t i = 0; i < top; ++i) {
            if (r.ranked_image_ids[i] == r.target_image_id) {
                ++hits;
                break;
            }
        }
    }
    return 100.0 * static_cast<double>(hits) / static_cast<double>(retrievals.size());
}

SemanticScore semantic_s(const std::vector<RankedRetrieval>& retrievals,
                         const std::map<std::string, std::string>& image_labels,
                         std::size_t k) {
    std::map<std::string, std::pair<std::size_t, std::size_t>> per_class;  // hits, totals
    std::size_t hits = 0, total = 0;
    for (const auto& r : retrievals) {
        if (!r.target_label) continue;
        const std::string& label = *r.target_label;
        bool success = false;
        std::size_t top = std::min(k, r.ranked_image_ids.size());
        for (std::size_t i = 0; i < top && !success; ++i) {
            auto it = image_labels.find(r.ranked_image_ids[i]);
            if (it != image_labels.end() && it->second == label) success = true;
        }
        auto& [c_hits, c_total] = per_class[label];
        c_hits += success;
        ++c_total;
        hits += success;
        ++total;
    }
    if (total == 0) throw Error("semantic_s: no labeled queries");
    SemanticScore out;
    double class_sum = 0.0;
    for (const auto& [cls, counts] : per_class) {
        double v = 100.0 * static_cast<double>(counts.first) / static_cast<double>(counts.second);
        out.per_class[cls] = v;
        class_sum += v;
    }
    out.s = class_sum / static_cast<double>(per_class.size());
    out.s_star = 100.0 * static_cast<double>(hits) / static_cast<double>(total);
    return out;
}

std::vector<RankedRetrieval> parse_retrievals(const std::string& text) {
    std::vector<RankedRetrieval> out;
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
            throw ParseError("retrievals line " + std::to_string(line_no) + ": " + e.what());
        }
        RankedRetrieval r;
        r.query_id = rec.at("query_id").get<std::string>();
        r.ranked_image_ids = rec.at("ranked").get<std::vector<std::string>>();
        r.target_image_id = rec.at("target").get<std::string>();
        if (rec.contains("target_label") && !rec["target_label"].is_null())
            r.target_label = rec["target_label"].get<std::string>();
        std::set<std::string> pool(r.ranked_image_ids.begin(), r.ranked_image_ids.end());
        if (pool.size() != r.ranked_image_ids.size())
            throw ConsistencyError("retrievals line " + std::to_string(line_no) +
                                   ": ranking contains duplicates");
        if (!pool.count(r.target_image_id))
            throw ConsistencyError("retrievals line " + std::to_string(line_no) +
                                   ": target not in ranked pool");
        out.push_back(std::move(r));
    }
    return out;
}

std::string serialize_retrievals(const std::vector<RankedRetrieval>& retrievals) {
    std::ostringstream out;
    for (const auto& r : retrievals) {
        json rec;
        rec["query_id"] = r.query_id;
        rec["ranked"] = r.ranked_image_ids;
        rec["target"] = r.target_image_id;
        rec["target_label"] = r.target_label ? json(*r.target_label) : json(nullptr);
        out << rec.dump() << "\n";
    }
    return out.str();
}

std::string format_percent(double fraction) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.1f", fraction * 100.0);
    return std::string(buf);
}

}  // namespace babelminer::evaluation
