#include "babelminer/fusion3d.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <json.hpp>

#include "babelminer/common.hpp"
#include "babelminer/pair_engine.hpp"

namespace babelminer::fusion3d {

using nlohmann::json;
using numerics::Vec;

namespace {

bool is_ambiguous(const ScoredPoint& pt, double phi) {
    return !pt.assigned_concept.has_value() || pt.confidence <= phi;
}

// Assignment recomputed at an arbitrary phi from the stored probabilities.
std::optional<int> assignment_at(const ScoredPoint& pt, double phi) {
    int bg = static_cast<int>(pt.probabilities.size()) - 1;
    int best = 0;
    for (int c = 1; c < static_cast<int>(pt.probabilities.size()); ++c)
        if (pt.probabilities[c] > pt.probabilities[best]) best = c;
    if (best == bg) return std::nullopt;
    if (pt.probabilities[best] <= phi) return std::nullopt;
    return best;
}

std::string fmt_double(double v) {
    std::ostringstream ss;
    ss.precision(17);
    ss << v;
    return ss.str();
}

}  // namespace

Vec fuse_point(const trainer::ToyModel& model,
               const std::vector<std::pair<const numerics::FeatureMap*, sfm::Pixel>>& projections,
               int image_w, int image_h) {
    if (projections.empty()) throw Error("fuse_point: point has no processable projections");

    const int kf = model.feature_channels;
    Vec mean(static_cast<std::size_t>(kf), 0.0);
    for (const auto& [features, pixel] : projections) {
        int gx = pair_engine::to_grid(pixel.x, image_w, features->width);
        int gy = pair_engine::to_grid(pixel.y, image_h, features->height);
        for (int k = 0; k < kf; ++k) mean[k] += features->at(k, gy, gx);
    }
    for (double& v : mean) v /= static_cast<double>(projections.size());

    // Linear head, then softmax over C+1 channels.
    const int channels = model.num_concepts + 1;
    Vec scores(static_cast<std::size_t>(channels), 0.0);
    for (int c = 0; c < channels; ++c) {
        double acc = model.head_bias[c];
        for (int k = 0; k < kf; ++k) acc += model.head_weight[c * kf + k] * mean[k];
        scores[c] = acc;
    }
    double shift = *std::max_element(scores.begin(), scores.end());
    double denom = 0.0;
    for (double s : scores) denom += std::exp(s - shift);
    for (double& s : scores) s = std::exp(s - shift) / denom;
    return scores;
}

std::vector<ScoredCloud> score_clouds(const trainer::ToyModel& model,
                                      const std::vector<sfm::Reconstruction>& recs,
                                      const images::ImageStore& store,
                                      const std::map<sfm::ImageKey, std::string>& image_of,
                                      const std::vector<std::string>& concept_names,
                                      double phi) {
    if (static_cast<int>(concept_names.size()) != model.num_concepts)
        throw Error("score_clouds: concept name count does not match the model");

    std::vector<ScoredCloud> clouds;
    for (const auto& rec : recs) {
        ScoredCloud cloud;
        cloud.reconstruction_id = rec.reconstruction_id;
        cloud.landmark_id = rec.landmark_id;
        cloud.concept_names = concept_names;
        cloud.confidence_threshold = phi;

        // Forward every processable view once.
        std::map<int, numerics::FeatureMap> features_by_image;
        std::map<int, std::pair<int, int>> dims_by_image;
        for (const auto& [iid, img] : rec.images) {
            auto it = image_of.find(sfm::make_image_key(rec.reconstruction_id, iid));
            if (it == image_of.end() || it->second.empty()) continue;
            const auto& pixels = store.get(it->second);
            features_by_image.emplace(iid, trainer::forward(model, pixels).features);
            dims_by_image[iid] = {pixels.width, pixels.height};
        }

        for (const auto& [pid, pt] : rec.points) {
            std::vector<std::pair<const numerics::FeatureMap*, sfm::Pixel>> projections;
            int image_w = 0, image_h = 0;
            for (const auto& el : pt.track) {
                auto it = features_by_image.find(el.image_id);
                if (it == features_by_image.end()) continue;
                projections.emplace_back(&it->second, el.xy);
                image_w = dims_by_image[el.image_id].first;
                image_h = dims_by_image[el.image_id].second;
            }
            if (projections.empty()) continue;

            ScoredPoint sp;
            sp.point = sfm::make_point_key(rec.reconstruction_id, pid);
            for (int i = 0; i < 3; ++i) sp.xyz[i] = pt.xyz[i];
            sp.probabilities = fuse_point(model, projections, image_w, image_h);

            int bg = model.num_concepts;
            int best = 0;
            for (int c = 1; c <= bg; ++c)
                if (sp.probabilities[c] > sp.probabilities[best]) best = c;
            double fg_max = 0.0;
            for (int c = 0; c < bg; ++c) fg_max = std::max(fg_max, sp.probabilities[c]);
            sp.confidence = fg_max;
            // Background-dominated points stay ambiguous no matter how
            // confident the runner-up concept is.
            if (best != bg && sp.probabilities[best] > phi) sp.assigned_concept = best;
            cloud.points.push_back(std::move(sp));
        }
        clouds.push_back(std::move(cloud));
    }
    return clouds;
}

double theta(const std::vector<ScoredCloud>& clouds, double phi) {
    std::map<std::string, std::pair<std::size_t, std::size_t>> per_landmark;  // ambiguous, total
    for (const auto& cloud : clouds) {
        auto& [ambiguous, total] = per_landmark[cloud.landmark_id];
        for (const auto& pt : cloud.points) {
            total += 1;
            if (!assignment_at(pt, phi)) ambiguous += 1;
        }
    }
    double sum = 0.0;
    std::size_t landmarks = 0;
    for (const auto& [landmark, counts] : per_landmark) {
        if (counts.second == 0) continue;
        sum += static_cast<double>(counts.first) / static_cast<double>(counts.second);
        ++landmarks;
    }
    if (landmarks == 0) throw Error("theta: no scored points");
    return sum / static_cast<double>(landmarks);
}

double delta(const std::vector<ScoredCloud>& clouds, const ConceptPolarity& polarity, double phi) {
    for (const std::string& c : polarity.interior)
        if (polarity.exterior.count(c))
            throw Error("delta: interior and exterior sets overlap on '" + c + "'");

    double weighted_sum = 0.0;
    double weight_total = 0.0;
    for (const auto& cloud : clouds) {
        std::size_t n_int = 0, n_ext = 0;
        for (const auto& pt : cloud.points) {
            auto assigned = assignment_at(pt, phi);
            if (!assigned) continue;
            const std::string& name = cloud.concept_names.at(static_cast<std::size_t>(*assigned));
            if (polarity.interior.count(name)) ++n_int;
            else if (polarity.exterior.count(name)) ++n_ext;
        }
        if (n_int + n_ext == 0) continue;
        double p_ext = static_cast<double>(n_ext) / static_cast<double>(n_int + n_ext);
        double d = std::min(p_ext, 1.0 - p_ext);
        double weight = static_cast<double>(cloud.points.size());
        weighted_sum += d * weight;
        weight_total += weight;
    }
    if (weight_total == 0.0)
        throw Error("delta: no reconstruction has polarized assigned points");
    return weighted_sum / weight_total;
}

std::string export_ply(const ScoredCloud& cloud,
                       const std::map<std::string, std::array<std::uint8_t, 3>>& palette,
                       bool include_ambiguous) {
    for (const std::string& name : cloud.concept_names)
        if (!palette.count(name)) throw Error("export_ply: palette missing concept '" + name + "'");

    std::vector<const ScoredPoint*> selected;
    for (const auto& pt : cloud.points) {
        if (is_ambiguous(pt, cloud.confidence_threshold) && !include_ambiguous) continue;
        selected.push_back(&pt);
    }

    std::ostringstream out;
    out << "ply\nformat ascii 1.0\n";
    out << "element vertex " << selected.size() << "\n";
    out << "property float x\nproperty float y\nproperty float z\n";
    out << "property uchar red\nproperty uchar green\nproperty uchar blue\n";
    out << "end_header\n";
    for (const ScoredPoint* pt : selected) {
        std::array<std::uint8_t, 3> color = {128, 128, 128};  // ambiguous: gray
        if (pt->assigned_concept)
            color = palette.at(cloud.concept_names.at(static_cast<std::size_t>(*pt->assigned_concept)));
        out << fmt_double(pt->xyz[0]) << " " << fmt_double(pt->xyz[1]) << " "
            << fmt_double(pt->xyz[2]) << " " << static_cast<int>(color[0]) << " "
            << static_cast<int>(color[1]) << " " << static_cast<int>(color[2]) << "\n";
    }
    return out.str();
}

std::vector<PlyVertex> parse_ply(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    std::size_t expected = 0;
    bool in_header = true;
    std::vector<PlyVertex> out;
    while (std::getline(in, line)) {
        if (in_header) {
            if (line.rfind("element vertex", 0) == 0)
                expected = static_cast<std::size_t>(std::stoull(line.substr(15)));
            if (line == "end_header") in_header = false;
            continue;
        }
        if (line.empty()) continue;
        std::istringstream ls(line);
        PlyVertex v{};
        int r, g, b;
        if (!(ls >> v.x >> v.y >> v.z >> r >> g >> b))
            throw ParseError("bad vertex line in polygon file");
        v.r = static_cast<std::uint8_t>(r);
        v.g = static_cast<std::uint8_t>(g);
        v.b = static_cast<std::uint8_t>(b);
        out.push_back(v);
    }
    if (out.size() != expected) throw ParseError("vertex count mismatch in polygon file");
    return out;
}

std::string serialize_cloud(const ScoredCloud& cloud) {
    std::ostringstream out;
    json header;
    header["record"] = "cloud";
    header["reconstruction_id"] = cloud.reconstruction_id;
    header["landmark_id"] = cloud.landmark_id;
    header["concepts"] = cloud.concept_names;
    header["phi"] = cloud.confidence_threshold;
    out << header.dump() << "\n";
    for (const auto& pt : cloud.points) {
        json rec;
        rec["record"] = "point";
        rec["point"] = pt.point;
        rec["xyz"] = {pt.xyz[0], pt.xyz[1], pt.xyz[2]};
        rec["probabilities"] = pt.probabilities;
        rec["confidence"] = pt.confidence;
        rec["concept"] = pt.assigned_concept
                             ? json(cloud.concept_names.at(static_cast<std::size_t>(*pt.assigned_concept)))
                             : json(nullptr);
        out << rec.dump() << "\n";
    }
    return out.str();
}

}  // namespace babelminer::fusion3d
