#include "babelminer/pair_engine.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include <json.hpp>

#include "babelminer/common.hpp"

namespace babelminer::pair_engine {

using nlohmann::json;

std::vector<ImagePair> enumerate_pairs(const sfm::TrackIndex& index,
                                       const std::vector<sfm::ImageKey>& eligible_images,
                                       std::size_t min_shared) {
    std::vector<sfm::ImageKey> images = eligible_images;
    std::sort(images.begin(), images.end());
    images.erase(std::unique(images.begin(), images.end()), images.end());

    std::vector<ImagePair> out;
    for (std::size_t a = 0; a < images.size(); ++a) {
        for (std::size_t b = a + 1; b < images.size(); ++b) {
            std::size_t shared = index.shared_keypoints(images[a], images[b]);
            if (shared < min_shared) continue;
            ImagePair pair;
            pair.image_a = images[a];
            pair.image_b = images[b];
            const auto& pa = index.points_of(images[a]);
            const auto& pb = index.points_of(images[b]);
            std::set_intersection(pa.begin(), pa.end(), pb.begin(), pb.end(),
                                  std::back_inserter(pair.shared_point_ids));
            out.push_back(std::move(pair));
        }
    }
    return out;
}

int to_grid(double coord, int original_extent, int grid_extent) {
    if (original_extent <= 0 || grid_extent <= 0) throw Error("to_grid: extents must be positive");
    double scaled = coord * static_cast<double>(grid_extent) / static_cast<double>(original_extent);
    // Round half toward zero.
    int g = static_cast<int>(std::ceil(scaled - 0.5));
    return std::clamp(g, 0, grid_extent - 1);
}

namespace {

sfm::Pixel observation_in(const sfm::TrackIndex& index, const sfm::PointKey& point,
                          const sfm::ImageKey& image) {
    for (const auto& obs : index.observations_of(point))
        if (obs.image == image) return obs.xy;
    throw ConsistencyError("point " + point + " not observed in image " + image);
}

}  // namespace

std::vector<GridCorrespondence> sample_correspondences(const ImagePair& pair,
                                                       const sfm::TrackIndex& index,
                                                       std::size_t n,
                                                       int image_w, int image_h,
                                                       int grid_w, int grid_h,
                                                       std::uint64_t seed) {
    if (n < 1) throw Error("sample_correspondences: n must be >= 1");
    if (pair.shared_point_ids.empty())
        throw Error("sample_correspondences: pair has no shared points");
    Rng rng = Rng(seed).child("correspondences");
    std::vector<GridCorrespondence> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const sfm::PointKey& point =
            pair.shared_point_ids[rng.uniform(pair.shared_point_ids.size())];
        sfm::Pixel pa = observation_in(index, point, pair.image_a);
        sfm::Pixel pb = observation_in(index, point, pair.image_b);
        GridCorrespondence c;
        c.a = {to_grid(pa.x, image_w, grid_w), to_grid(pa.y, image_h, grid_h)};
        c.b = {to_grid(pb.x, image_w, grid_w), to_grid(pb.y, image_h, grid_h)};
        c.point = point;
        out.push_back(c);
    }
    return out;
}

std::vector<NegativeSample> sample_negatives_inter(const Batch& batch,
                                                   std::size_t anchor_pair_index,
                                                   std::size_t m,
                                                   int grid_w, int grid_h,
                                                   std::uint64_t seed) {
    if (batch.items.size() < 3)
        throw Error("sample_negatives_inter: batch needs >= 3 images");
    if (anchor_pair_index >= batch.pairs.size())
        throw Error("sample_negatives_inter: bad anchor pair index");
    const BatchPair& anchor = batch.pairs[anchor_pair_index];

    std::vector<std::size_t> candidates;
    for (std::size_t i = 0; i < batch.items.size(); ++i)
        if (i != anchor.item_a && i != anchor.item_b) candidates.push_back(i);

    Rng rng = Rng(seed).child("neg_inter");
    std::vector<NegativeSample> out;
    out.reserve(m);
    for (std::size_t i = 0; i < m; ++i) {
        NegativeSample s;
        s.batch_image_index = candidates[rng.uniform(candidates.size())];
        s.pixel.x = static_cast<int>(rng.uniform(static_cast<std::uint64_t>(grid_w)));
        s.pixel.y = static_cast<int>(rng.uniform(static_cast<std::uint64_t>(grid_h)));
        out.push_back(s);
    }
    return out;
}

std::vector<GridPoint> sample_negatives_intra(GridPoint p_plus,
                                              std::size_t m,
                                              int grid_w, int grid_h,
                                              std::uint64_t seed) {
    // Excluded iff within the centered w/4 x h/4 box, i.e. |dx| <= w/8 AND
    // |dy| <= h/8. Admissible: |dx| > w/8 OR |dy| > h/8.
    double half_w = static_cast<double>(grid_w) / 8.0;
    double half_h = static_cast<double>(grid_h) / 8.0;
    auto admissible = [&](int x, int y) {
        return std::abs(x - p_plus.x) > half_w || std::abs(y - p_plus.y) > half_h;
    };
    std::size_t n_admissible = 0;
    for (int y = 0; y < grid_h; ++y)
        for (int x = 0; x < grid_w; ++x)
            if (admissible(x, y)) ++n_admissible;
    if (n_admissible == 0)
        throw Error("sample_negatives_intra: exclusion box covers the whole image");

    Rng rng = Rng(seed).child("neg_intra");
    std::vector<GridPoint> out;
    out.reserve(m);
    while (out.size() < m) {
        int x = static_cast<int>(rng.uniform(static_cast<std::uint64_t>(grid_w)));
        int y = static_cast<int>(rng.uniform(static_cast<std::uint64_t>(grid_h)));
        if (admissible(x, y)) out.push_back({x, y});
    }
    return out;
}

Batch compose_batch(const std::vector<ImagePair>& real_pairs,
                    const std::vector<std::string>& real_pair_image_ids,
                    const std::vector<std::string>& singles,
                    const sfm::TrackIndex& index,
                    std::size_t correspondences_per_pair,
                    int image_w, int image_h, int grid_w, int grid_h,
                    std::uint64_t seed) {
    constexpr std::size_t kRealPairs = 8;
    constexpr std::size_t kPseudoPairs = 8;
    if (real_pairs.size() < kRealPairs)
        throw Error("compose_batch: need " + std::to_string(kRealPairs) + " real pairs, have " +
                    std::to_string(real_pairs.size()));
    if (real_pair_image_ids.size() < 2 * kRealPairs)
        throw Error("compose_batch: need corpus ids for both images of each real pair");
    if (singles.size() < 2 * kPseudoPairs)
        throw Error("compose_batch: need " + std::to_string(2 * kPseudoPairs) + " singles, have " +
                    std::to_string(singles.size()));

    Rng rng = Rng(seed).child("batch");
    Batch batch;
    for (std::size_t p = 0; p < kRealPairs; ++p) {
        BatchPair bp;
        bp.item_a = batch.items.size();
        batch.items.push_back({real_pair_image_ids[2 * p], real_pairs[p].image_a});
        bp.item_b = batch.items.size();
        batch.items.push_back({real_pair_image_ids[2 * p + 1], real_pairs[p].image_b});
        bp.real = true;
        bp.correspondences =
            sample_correspondences(real_pairs[p], index, correspondences_per_pair, image_w,
                                   image_h, grid_w, grid_h, rng.child("pair" + std::to_string(p)).next_u64());
        batch.pairs.push_back(std::move(bp));
    }
    for (std::size_t p = 0; p < kPseudoPairs; ++p) {
        BatchPair bp;
        bp.item_a = batch.items.size();
        batch.items.push_back({singles[2 * p], sfm::ImageKey()});
        bp.item_b = batch.items.size();
        batch.items.push_back({singles[2 * p + 1], sfm::ImageKey()});
        bp.real = false;
        batch.pairs.push_back(std::move(bp));
    }
    return batch;
}

std::vector<AugmentedCaptionPair> augment_caption_pairs(const corpus::Corpus& corpus,
                                                        const sfm::TrackIndex& index,
                                                        double threshold) {
    std::vector<AugmentedCaptionPair> out;
    std::set<std::pair<std::string, std::string>> seen;  // (image, caption)
    auto emit = [&](AugmentedCaptionPair pair) {
        if (seen.emplace(pair.image_id, pair.caption).second) out.push_back(std::move(pair));
    };

    // Originals first.
    for (const auto& doc : corpus.docs) {
        if (doc.caption.empty()) continue;
        AugmentedCaptionPair pair;
        pair.image_id = doc.image_id;
        pair.caption = doc.caption;
        emit(std::move(pair));
    }

    // Registered image keys with corpus backing.
    struct Entry {
        const corpus::ImageDoc* doc;
        sfm::ImageKey key;
    };
    std::vector<Entry> entries;
    for (const auto& doc : corpus.docs) {
        if (!doc.registered || !doc.reconstruction_id) continue;
        sfm::ImageKey key = index.find_image(*doc.reconstruction_id, doc.image_id);
        if (!key.empty()) entries.push_back({&doc, key});
    }
    for (const Entry& donor : entries) {
        if (donor.doc->caption.empty()) continue;
        for (const Entry& receiver : entries) {
            if (receiver.doc == donor.doc) continue;
            double iou = index.keypoint_iou(donor.key, receiver.key);
            if (iou >= threshold) {
                AugmentedCaptionPair pair;
                pair.image_id = receiver.doc->image_id;
                pair.caption = donor.doc->caption;
                pair.transferred = true;
                pair.donor_image_id = donor.doc->image_id;
                pair.iou = iou;
                emit(std::move(pair));
            }
        }
    }
    return out;
}

std::string serialize_batch(const Batch& batch) {
    json rec;
    rec["record"] = "batch";
    json items = json::array();
    for (const auto& item : batch.items)
        items.push_back({{"image_id", item.image_id}, {"image_key", item.image_key}});
    rec["items"] = items;
    json pairs = json::array();
    for (const auto& pair : batch.pairs) {
        json p;
        p["a"] = pair.item_a;
        p["b"] = pair.item_b;
        p["real"] = pair.real;
        json cs = json::array();
        for (const auto& c : pair.correspondences)
            cs.push_back({{"ax", c.a.x}, {"ay", c.a.y}, {"bx", c.b.x}, {"by", c.b.y}, {"point", c.point}});
        p["correspondences"] = cs;
        pairs.push_back(p);
    }
    rec["pairs"] = pairs;
    return rec.dump() + "\n";
}

std::string serialize_augmented_pairs(const std::vector<AugmentedCaptionPair>& pairs) {
    std::ostringstream out;
    for (const auto& pair : pairs) {
        json rec;
        rec["image_id"] = pair.image_id;
        rec["caption"] = pair.caption;
        if (pair.transferred) {
            rec["provenance"] = {{"kind", "transferred"},
                                 {"from", pair.donor_image_id},
                                 {"iou", pair.iou}};
        } else {
            rec["provenance"] = {{"kind", "original"}};
        }
        out << rec.dump() << "\n";
    }
    return out.str();
}

}  // namespace babelminer::pair_engine
