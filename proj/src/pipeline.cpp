#include "babelminer/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "babelminer/common.hpp"
#include "babelminer/corpus.hpp"
#include "babelminer/evaluation.hpp"
#include "babelminer/fusion3d.hpp"
#include "babelminer/images.hpp"
#include "babelminer/labeling.hpp"
#include "babelminer/mining.hpp"
#include "babelminer/numerics.hpp"
#include "babelminer/pair_engine.hpp"
#include "babelminer/sfm.hpp"
#include "babelminer/synth.hpp"
#include "babelminer/trainer.hpp"

namespace babelminer::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json default_values() {
    return json{
        {"paths", {{"data_dir", "data"}, {"output_dir", "run"}}},
        {"seed", 1},
        {"mining",
         {{"shared_keypoints_k", 10},
          {"min_landmarks", 25},
          {"min_rho", 0.08},
          {"min_nodes", 10}}},
        {"labeling",
         {{"fold_plural_s", false},
          {"balance", false},
          {"balance_target", 900},
          {"connectors_file", ""}}},
        {"pairs",
         {{"correspondences_per_pair", 8}, {"min_shared", 10}, {"num_batches", 8}}},
        {"loss",
         {{"temperature", 0.07},
          {"num_negatives", 16},
          {"lambda", 0.3},
          {"triplet_margin", 3.0},
          {"variant", "nce-inter"},
          {"triplet_form", "standard"},
          {"pixel_confidence_cutoff", 0.6}}},
        {"train",
         {{"epochs", 25},
          {"pretrain_epochs", 5},
          {"decay_epochs", {15, 20}},
          {"decay_factor", 0.1},
          {"weight_decay", 5e-4},
          {"learning_rate", 1e-3},
          {"augment", false},
          {"crop_size", 0},
          {"feature_channels", 32},
          {"aggregator", "ngwp"},
          {"checkpoint", "model.bmt"}}},
        {"fusion", {{"phi", 0.5}, {"phi_high", 0.75}, {"background_power", 4.0}}},
        {"augment", {{"iou_threshold", 0.3}}},
        {"metrics", {{"recall_k", 5}, {"retrievals_file", ""}}},
        {"synth",
         {{"num_landmarks", 30},
          {"concepts", {"facade", "tower", "portal"}},
          {"cameras_per_region", 10},
          {"points_per_region", 12},
          {"outlier_nouns", {"statue", "window"}},
          {"outlier_cameras", 10},
          {"outlier_pair_points", 4},
          {"unregistered_rate", 0.0},
          {"outlier_caption_rate", 0.0},
          {"image_size", 32},
          {"texture_contrast", 1.0},
          {"texture_noise", 0.04},
          {"pattern_amplitude", 0.25},
          {"view_jitter", 0.15},
          {"region_color_jitter", 0.0},
          {"color_swap_rate", 0.0},
          {"color_group_size", 1},
          {"group_by_polarity", false}}},
    };
}

// Deep merge: values from `over` replace or extend `base` key by key.
void merge(json& base, const json& over) {
    if (!over.is_object() || !base.is_object()) {
        base = over;
        return;
    }
    for (auto it = over.begin(); it != over.end(); ++it) {
        if (base.contains(it.key()))
            merge(base[it.key()], it.value());
        else
            base[it.key()] = it.value();
    }
}

const json& lookup(const json& values, const std::string& dotted) {
    const json* node = &values;
    std::size_t start = 0;
    while (true) {
        std::size_t dot = dotted.find('.', start);
        std::string key = dotted.substr(start, dot == std::string::npos ? dot : dot - start);
        if (!node->is_object() || !node->contains(key))
            throw ConfigError("config: unknown key '" + dotted + "'");
        node = &(*node)[key];
        if (dot == std::string::npos) return *node;
        start = dot + 1;
    }
}

template <typename T>
T get(const json& values, const std::string& dotted) {
    try {
        return lookup(values, dotted).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError("config: bad value for '" + dotted + "': " + e.what());
    }
}

numerics::LossVariant variant_from_name(const std::string& name) {
    if (name == "nce-inter") return numerics::LossVariant::NceInter;
    if (name == "nce-intra") return numerics::LossVariant::NceIntra;
    if (name == "mse") return numerics::LossVariant::Mse;
    if (name == "triplet") return numerics::LossVariant::Triplet;
    throw ConfigError("config: unknown loss variant '" + name + "'");
}

numerics::TripletForm triplet_form_from_name(const std::string& name) {
    if (name == "standard") return numerics::TripletForm::Standard;
    if (name == "as-printed") return numerics::TripletForm::AsPrinted;
    throw ConfigError("config: unknown triplet form '" + name + "'");
}

numerics::LossConfig loss_config_of(const json& v) {
    numerics::LossConfig lc;
    lc.temperature = get<double>(v, "loss.temperature");
    lc.num_negatives = get<std::size_t>(v, "loss.num_negatives");
    lc.lambda = get<double>(v, "loss.lambda");
    lc.triplet_margin = get<double>(v, "loss.triplet_margin");
    lc.variant = variant_from_name(get<std::string>(v, "loss.variant"));
    lc.triplet_form = triplet_form_from_name(get<std::string>(v, "loss.triplet_form"));
    lc.pixel_confidence_cutoff = get<double>(v, "loss.pixel_confidence_cutoff");
    return lc;
}

trainer::TrainSchedule schedule_of(const json& v) {
    trainer::TrainSchedule s;
    s.epochs = get<int>(v, "train.epochs");
    s.pretrain_epochs = get<int>(v, "train.pretrain_epochs");
    auto decay = get<std::vector<int>>(v, "train.decay_epochs");
    s.decay_epochs = std::set<int>(decay.begin(), decay.end());
    s.decay_factor = get<double>(v, "train.decay_factor");
    s.weight_decay = get<double>(v, "train.weight_decay");
    s.learning_rate = get<double>(v, "train.learning_rate");
    s.augment = get<bool>(v, "train.augment");
    s.crop_size = get<int>(v, "train.crop_size");
    return s;
}

mining::DistillThresholds thresholds_of(const json& v) {
    mining::DistillThresholds t;
    t.shared_keypoints_k = get<std::size_t>(v, "mining.shared_keypoints_k");
    t.min_landmarks = get<std::size_t>(v, "mining.min_landmarks");
    t.min_rho = get<double>(v, "mining.min_rho");
    t.min_nodes = get<std::size_t>(v, "mining.min_nodes");
    return t;
}

synth::SceneSpec scene_spec_of(const json& v) {
    synth::SceneSpec spec;
    spec.num_landmarks = get<int>(v, "synth.num_landmarks");
    spec.concepts = get<std::vector<std::string>>(v, "synth.concepts");
    spec.cameras_per_region = get<int>(v, "synth.cameras_per_region");
    spec.points_per_region = get<int>(v, "synth.points_per_region");
    spec.outlier_nouns = get<std::vector<std::string>>(v, "synth.outlier_nouns");
    spec.outlier_cameras = get<int>(v, "synth.outlier_cameras");
    spec.outlier_pair_points = get<int>(v, "synth.outlier_pair_points");
    spec.unregistered_rate = get<double>(v, "synth.unregistered_rate");
    spec.outlier_caption_rate = get<double>(v, "synth.outlier_caption_rate");
    spec.image_size = get<int>(v, "synth.image_size");
    spec.texture_contrast = get<double>(v, "synth.texture_contrast");
    spec.texture_noise = get<double>(v, "synth.texture_noise");
    spec.pattern_amplitude = get<double>(v, "synth.pattern_amplitude");
    spec.view_jitter = get<double>(v, "synth.view_jitter");
    spec.region_color_jitter = get<double>(v, "synth.region_color_jitter");
    spec.color_swap_rate = get<double>(v, "synth.color_swap_rate");
    spec.color_group_size = get<int>(v, "synth.color_group_size");
    spec.group_by_polarity = get<bool>(v, "synth.group_by_polarity");
    spec.seed = get<std::uint64_t>(v, "seed");
    return spec;
}

// Collects every artifact written during a run and finishes with a manifest
// of path -> content checksum, the determinism witness for reruns.
class RunDir {
public:
    explicit RunDir(const std::string& root) : root_(root) { fs::create_directories(root_); }

    void write(const std::string& relative, const std::string& contents) {
        fs::path full = root_ / relative;
        if (full.has_parent_path()) fs::create_directories(full.parent_path());
        write_file(full.string(), contents);
        checksums_[relative] = file_checksum(full.string());
    }

    // Registers a file written outside the run directory (fixture outputs).
    void track(const std::string& label, const std::string& path) {
        checksums_[label] = file_checksum(path);
    }

    void finish(const PipelineConfig& config) {
        write("effective_config.json", config.dump());
        json manifest;
        manifest["artifacts"] = checksums_;
        write_file((root_ / "manifest.json").string(), manifest.dump(2) + "\n");
    }

private:
    fs::path root_;
    std::map<std::string, std::string> checksums_;
};

struct Dataset {
    std::vector<sfm::Reconstruction> reconstructions;
    corpus::Corpus corpus;
    corpus::NounLexicon lexicon;
    images::ImageStore images;
    images::MaskStore masks;
    bool has_images = false;
    bool has_masks = false;
};

Dataset load_dataset(const json& v, bool need_images) {
    fs::path dir = get<std::string>(v, "paths.data_dir");
    Dataset ds;

    json listing;
    try {
        listing = json::parse(read_file((dir / "reconstructions.json").string()));
    } catch (const json::exception& e) {
        throw ParseError(std::string("reconstructions.json: ") + e.what());
    }
    for (const auto& entry : listing.at("reconstructions")) {
        fs::path rec_dir = dir / entry.at("dir").get<std::string>();
        ds.reconstructions.push_back(sfm::parse_reconstruction(
            read_file((rec_dir / "cameras.txt").string()),
            read_file((rec_dir / "images.txt").string()),
            read_file((rec_dir / "points3D.txt").string()),
            entry.at("landmark_id").get<std::string>(),
            entry.at("reconstruction_id").get<std::string>()));
    }

    ds.corpus = corpus::load_corpus((dir / "corpus.jsonl").string());
    ds.lexicon = corpus::load_lexicon((dir / "nouns.txt").string(), (dir / "entities.txt").string());
    ds.lexicon.fold_plural_s = get<bool>(v, "labeling.fold_plural_s");

    if (need_images) {
        fs::path images_path = dir / "images.bin";
        if (!fs::exists(images_path))
            throw IoError("dataset: missing image container " + images_path.string());
        ds.images = images::ImageStore::load(images_path.string());
        ds.has_images = true;
    }
    fs::path masks_path = dir / "masks.bin";
    if (fs::exists(masks_path)) {
        ds.masks = images::MaskStore::load(masks_path.string());
        ds.has_masks = true;
    }
    return ds;
}

labeling::ConnectorList connectors_of(const json& v) {
    std::string path = get<std::string>(v, "labeling.connectors_file");
    return path.empty() ? labeling::ConnectorList::defaults()
                        : labeling::ConnectorList::from_file(path);
}

// Corpus image id of every registered image that resolves in the index.
std::map<sfm::ImageKey, std::string> corpus_id_by_key(const Dataset& ds,
                                                      const sfm::TrackIndex& index) {
    std::map<sfm::ImageKey, std::string> out;
    for (const auto& doc : ds.corpus.docs) {
        if (!doc.registered || !doc.reconstruction_id) continue;
        sfm::ImageKey key = index.find_image(*doc.reconstruction_id, doc.image_id);
        if (!key.empty()) out[key] = doc.image_id;
    }
    return out;
}

struct TrainingInputs {
    std::vector<pair_engine::Batch> batches;
    std::map<std::string, int> class_of_image;  // corpus id -> class index
    std::vector<std::string> class_order;       // index -> concept noun
    int image_size = 0;
    int grid_size = 0;
};

TrainingInputs build_training_inputs(const Dataset& ds, const sfm::TrackIndex& index,
                                     const mining::ConceptSet& concept_set,
                                     const labeling::LabelSet& labels, const json& v,
                                     int grid_stride) {
    TrainingInputs ti;
    ti.class_order = concept_set.nouns();
    std::map<std::string, int> class_index;
    for (std::size_t i = 0; i < ti.class_order.size(); ++i)
        class_index[ti.class_order[i]] = static_cast<int>(i);

    std::map<std::string, labeling::Split> split_of;
    for (const auto& img : labels.images) {
        split_of[img.image_id] = img.split;
        auto single = img.single_label();
        if (single) ti.class_of_image[img.image_id] = class_index.at(*single);
    }

    auto id_by_key = corpus_id_by_key(ds, index);
    std::vector<sfm::ImageKey> eligible;
    std::vector<std::string> singles;
    for (const auto& img : labels.images) {
        if (img.split != labeling::Split::Train || !img.single_label()) continue;
        singles.push_back(img.image_id);
        const corpus::ImageDoc* doc = ds.corpus.find(img.image_id);
        if (doc && doc->registered && doc->reconstruction_id) {
            sfm::ImageKey key = index.find_image(*doc->reconstruction_id, doc->image_id);
            if (!key.empty()) eligible.push_back(key);
        }
    }
    if (singles.empty()) throw Error("training: no single-label training images");

    auto real_pairs = pair_engine::enumerate_pairs(index, eligible,
                                                   get<std::size_t>(v, "pairs.min_shared"));
    std::size_t num_batches = get<std::size_t>(v, "pairs.num_batches");
    if (real_pairs.size() < 8)
        throw Error("training: only " + std::to_string(real_pairs.size()) +
                    " real pairs available, need 8 per batch");

    if (!ds.has_images) throw Error("training: image container required");
    const auto& first = ds.images.get(singles.front());
    ti.image_size = first.width;
    if (first.width != first.height || first.width % grid_stride != 0)
        throw Error("training: images must be square and divisible by the grid stride");
    ti.grid_size = first.width / grid_stride;

    Rng rng = Rng(get<std::uint64_t>(v, "seed")).child("pairs");
    rng.shuffle(real_pairs);
    std::size_t corr = get<std::size_t>(v, "pairs.correspondences_per_pair");
    for (std::size_t b = 0; b < num_batches; ++b) {
        std::vector<pair_engine::ImagePair> batch_pairs;
        std::vector<std::string> pair_ids;
        Rng batch_rng = rng.child("batch" + std::to_string(b));
        for (std::size_t p = 0; p < 8; ++p) {
            const auto& pair = real_pairs[(b * 8 + p) % real_pairs.size()];
            batch_pairs.push_back(pair);
            pair_ids.push_back(id_by_key.at(pair.image_a));
            pair_ids.push_back(id_by_key.at(pair.image_b));
        }
        std::vector<std::string> batch_singles;
        for (std::size_t s = 0; s < 16; ++s)
            batch_singles.push_back(singles[batch_rng.uniform(singles.size())]);
        ti.batches.push_back(pair_engine::compose_batch(
            batch_pairs, pair_ids, batch_singles, index, corr, ti.image_size, ti.image_size,
            ti.grid_size, ti.grid_size, batch_rng.next_u64()));
    }
    return ti;
}

std::vector<fusion3d::ScoredCloud> fuse_clouds(const Dataset& ds, const sfm::TrackIndex& index,
                                               const trainer::ToyModel& model,
                                               const std::vector<std::string>& class_order,
                                               double phi) {
    std::map<sfm::ImageKey, std::string> image_of;
    // score_clouds keys views by (reconstruction, local image id); feed it the
    // corpus image id of every resolvable registered image.
    for (const auto& rec : ds.reconstructions)
        for (const auto& [iid, img] : rec.images) {
            sfm::ImageKey key = sfm::make_image_key(rec.reconstruction_id, iid);
            if (ds.images.images.count(img.name)) image_of[key] = img.name;
        }
    (void)index;
    return fusion3d::score_clouds(model, ds.reconstructions, ds.images, image_of, class_order,
                                  phi);
}

std::map<std::string, std::array<std::uint8_t, 3>> make_palette(
    const std::vector<std::string>& class_order) {
    static const std::array<std::array<std::uint8_t, 3>, 10> colors = {{
        {217, 38, 38},
        {38, 191, 51},
        {38, 64, 230},
        {230, 204, 26},
        {204, 38, 217},
        {26, 204, 204},
        {242, 128, 26},
        {89, 51, 166},
        {140, 191, 38},
        {179, 89, 89},
    }};
    std::map<std::string, std::array<std::uint8_t, 3>> palette;
    for (std::size_t i = 0; i < class_order.size(); ++i)
        palette[class_order[i]] = colors[i % colors.size()];
    return palette;
}

trainer::ToyModel load_checkpoint(const json& v) {
    fs::path path = fs::path(get<std::string>(v, "paths.output_dir")) /
                    get<std::string>(v, "train.checkpoint");
    if (!fs::exists(path))
        throw ConfigError("checkpoint " + path.string() + " not found; run train-toy first");
    return trainer::ToyModel::load(path.string());
}

// --- subcommands ---------------------------------------------------------

void run_ingest(const Dataset& ds, const sfm::TrackIndex& index, RunDir& out) {
    json stats;
    json recs = json::array();
    for (const auto& rec : ds.reconstructions) {
        recs.push_back({{"reconstruction_id", rec.reconstruction_id},
                        {"landmark_id", rec.landmark_id},
                        {"cameras", rec.cameras.size()},
                        {"images", rec.images.size()},
                        {"points", rec.points.size()}});
    }
    stats["reconstructions"] = recs;
    stats["corpus_images"] = ds.corpus.docs.size();
    stats["indexed_images"] = index.by_image().size();
    stats["co_observing_pairs"] = index.pair_counts().size();
    std::size_t max_shared = 0;
    for (const auto& [pair, count] : index.pair_counts()) max_shared = std::max(max_shared, count);
    stats["max_shared_keypoints"] = max_shared;
    out.write("ingest_stats.json", stats.dump(2) + "\n");
}

mining::ConceptSet mine_concepts(const Dataset& ds, const sfm::TrackIndex& index, const json& v) {
    auto candidates = mining::candidate_concepts(ds.corpus, ds.lexicon);
    return mining::distill(candidates, ds.corpus, index, thresholds_of(v));
}

void run_metrics(const Dataset& ds, const sfm::TrackIndex& index, const json& v, RunDir& out) {
    trainer::ToyModel model = load_checkpoint(v);
    auto concept_set = mine_concepts(ds, index, v);
    auto class_order = concept_set.nouns();
    if (static_cast<int>(class_order.size()) != model.num_concepts)
        throw ConsistencyError("metrics: checkpoint classes do not match mined concepts");
    auto labels = labeling::label_corpus(ds.corpus, concept_set, ds.lexicon, connectors_of(v),
                                         get<std::uint64_t>(v, "seed"));
    std::map<std::string, int> class_index;
    for (std::size_t i = 0; i < class_order.size(); ++i)
        class_index[class_order[i]] = static_cast<int>(i);

    const auto& agg = numerics::Aggregator::by_name(model.aggregator);
    double bg_power = get<double>(v, "fusion.background_power");

    // Image scores and 2D segmentations over the held-out splits.
    std::map<std::string, std::vector<evaluation::ScoredItem>> per_class_wsk, per_class_wsu;
    std::vector<int> preds, gts;
    double iou_sum = 0, prec_sum = 0, rec_sum = 0;
    std::size_t seg_count = 0;
    for (const auto& img : labels.images) {
        if (img.split == labeling::Split::Train) continue;
        if (!ds.images.images.count(img.image_id)) continue;
        auto fw = trainer::forward(model, ds.images.get(img.image_id));
        (void)agg;
        auto& bucket =
            img.split == labeling::Split::WsK ? per_class_wsk : per_class_wsu;
        for (std::size_t c = 0; c < class_order.size(); ++c)
            bucket[class_order[c]].push_back({img.image_id, fw.maps.image_scores[c],
                                              img.concepts.count(class_order[c]) != 0});

        auto single = img.single_label();
        if (single && class_index.count(*single)) {
            auto seg = trainer::segment_2d(fw.maps, bg_power);
            preds.push_back(seg.label);
            gts.push_back(class_index.at(*single));
            if (ds.has_masks && ds.masks.masks.count(img.image_id)) {
                // Nearest-pixel downsample of the ground-truth mask onto the
                // feature grid, binarized for the predicted class.
                const auto& gt_full = ds.masks.masks.at(img.image_id);
                int gw = fw.maps.raw.width, gh = fw.maps.raw.height;
                int stride = ds.masks.width / gw;
                std::vector<std::uint8_t> gt_bin(static_cast<std::size_t>(gw) * gh, 0);
                for (int y = 0; y < gh; ++y)
                    for (int x = 0; x < gw; ++x) {
                        int oy = y * stride + stride / 2, ox = x * stride + stride / 2;
                        gt_bin[static_cast<std::size_t>(y) * gw + x] =
                            gt_full[static_cast<std::size_t>(oy) * ds.masks.width + ox] ==
                                    static_cast<std::uint8_t>(seg.label)
                                ? 1
                                : 0;
                    }
                auto sm = evaluation::seg_metrics(seg.mask, gt_bin, gw, gh);
                iou_sum += sm.iou;
                prec_sum += sm.precision;
                rec_sum += sm.recall;
                ++seg_count;
            }
        }
    }

    auto drop_positive_free = [](std::map<std::string, std::vector<evaluation::ScoredItem>>& m) {
        for (auto it = m.begin(); it != m.end();) {
            bool any = false;
            for (const auto& item : it->second) any = any || item.positive;
            it = any ? std::next(it) : m.erase(it);
        }
    };
    drop_positive_free(per_class_wsk);
    drop_positive_free(per_class_wsu);

    json report;
    if (!per_class_wsk.empty()) {
        auto ap = evaluation::ap_report(per_class_wsk);
        report["classification"]["ws_k"] = {{"map", ap.mean_ap},
                                            {"map_pooled", ap.pooled_ap},
                                            {"per_class", ap.per_class_ap}};
    }
    if (!per_class_wsu.empty()) {
        auto ap = evaluation::ap_report(per_class_wsu);
        report["classification"]["ws_u"] = {{"map", ap.mean_ap},
                                            {"map_pooled", ap.pooled_ap},
                                            {"per_class", ap.per_class_ap}};
    }
    if (seg_count > 0) {
        report["segmentation"] = {{"iou", iou_sum / seg_count},
                                  {"precision", prec_sum / seg_count},
                                  {"recall", rec_sum / seg_count},
                                  {"images", seg_count}};
    }
    if (!preds.empty())
        report["confusion_matrix"] =
            evaluation::confusion_matrix(preds, gts, static_cast<int>(class_order.size()));
    report["classes"] = class_order;

    // 3D completeness / mixing at both operating points.
    auto clouds = fuse_clouds(ds, index, model, class_order, get<double>(v, "fusion.phi"));
    fusion3d::ConceptPolarity polarity;
    for (double phi : {get<double>(v, "fusion.phi"), get<double>(v, "fusion.phi_high")}) {
        json entry;
        entry["theta"] = fusion3d::theta(clouds, phi);
        try {
            entry["delta"] = fusion3d::delta(clouds, polarity, phi);
        } catch (const Error&) {
            entry["delta"] = nullptr;  // no polarized assignments at this phi
        }
        std::ostringstream key;
        key << "phi_" << phi;
        report["fusion"][key.str()] = entry;
    }

    // Retrieval tables when a ranked-retrieval file is supplied.
    std::string retrievals_file = get<std::string>(v, "metrics.retrievals_file");
    if (!retrievals_file.empty()) {
        auto retrievals = evaluation::parse_retrievals(read_file(retrievals_file));
        std::size_t k = get<std::size_t>(v, "metrics.recall_k");
        std::map<std::string, std::string> image_labels;
        for (const auto& img : labels.images)
            if (auto single = img.single_label()) image_labels[img.image_id] = *single;
        auto sem = evaluation::semantic_s(retrievals, image_labels, k);
        report["retrieval"] = {{"recall_at_k", evaluation::recall_at_k(retrievals, k)},
                               {"k", k},
                               {"s", sem.s},
                               {"s_star", sem.s_star},
                               {"per_class", sem.per_class}};
    }

    out.write("metrics.json", report.dump(2) + "\n");

    // Aligned plain-text tables for human eyes.
    std::ostringstream table;
    table << "class            ";
    if (report.contains("classification")) {
        table << "AP(ws-k)  AP(ws-u)\n";
        for (const auto& cls : class_order) {
            table << cls;
            for (std::size_t pad = cls.size(); pad < 17; ++pad) table << ' ';
            for (const char* split : {"ws_k", "ws_u"}) {
                if (report["classification"].contains(split) &&
                    report["classification"][split]["per_class"].contains(cls))
                    table << evaluation::format_percent(
                                 report["classification"][split]["per_class"][cls]
                                     .get<double>())
                          << "      ";
                else
                    table << "-         ";
            }
            table << "\n";
        }
    }
    if (seg_count > 0)
        table << "\nsegmentation: IoU " << evaluation::format_percent(iou_sum / seg_count)
              << "  precision " << evaluation::format_percent(prec_sum / seg_count)
              << "  recall " << evaluation::format_percent(rec_sum / seg_count) << "\n";
    out.write("report.txt", table.str());
}

void run_selftest(const json& v, RunDir& out) {
    Rng rng = Rng(get<std::uint64_t>(v, "seed")).child("selftest");
    json report;
    auto record = [&](const std::string& name, double err, double bound) {
        bool ok = err < bound;
        report["checks"].push_back({{"name", name}, {"max_rel_err", err}, {"bound", bound}});
        std::cout << (ok ? "PASS " : "FAIL ") << name << " (err " << err << ")\n";
        if (!ok) throw Error("selftest: " + name + " exceeded bound");
    };

    const int dim = 6;
    const double eps = 1e-4;
    auto rand_unit = [&](Rng& r) {
        numerics::Vec u(dim);
        double sq = 0;
        for (double& x : u) {
            x = r.normal();
            sq += x * x;
        }
        for (double& x : u) x /= std::sqrt(sq);
        return u;
    };

    numerics::LossConfig lc = loss_config_of(v);
    for (int trial = 0; trial < 5; ++trial) {
        Rng tr = rng.child("trial" + std::to_string(trial));
        auto p = rand_unit(tr);
        auto pp = rand_unit(tr);
        std::vector<numerics::Vec> negs;
        for (std::size_t i = 0; i < lc.num_negatives; ++i) negs.push_back(rand_unit(tr));

        // Check d(loss)/d(anchor) for each loss against central differences,
        // renormalizing the perturbed anchor inside the probe.
        auto probe = [&](const char* name, auto loss_fn) {
            numerics::GradFn fn = [&](const numerics::Vec& x, numerics::Vec& g) {
                return loss_fn(x, g);
            };
            record(name, numerics::grad_check(fn, p, eps), 1e-4);
        };
        // The contrastive loss requires unit anchors, so differentiate the
        // composite normalize-then-loss map (tangent projection / ||x||).
        probe("nce_grad", [&](const numerics::Vec& x, numerics::Vec& g) {
            double sq = 0;
            for (double d : x) sq += d * d;
            double n = std::sqrt(sq);
            numerics::Vec u(x.size());
            for (std::size_t d = 0; d < x.size(); ++d) u[d] = x[d] / n;
            auto r = numerics::nce_loss(u, pp, negs, lc.temperature);
            double along = 0;
            for (std::size_t d = 0; d < x.size(); ++d) along += r.grad_p[d] * u[d];
            g.assign(x.size(), 0.0);
            for (std::size_t d = 0; d < x.size(); ++d)
                g[d] = (r.grad_p[d] - along * u[d]) / n;
            return r.loss;
        });
        probe("mse_grad", [&](const numerics::Vec& x, numerics::Vec& g) {
            auto r = numerics::mse_loss(x, pp);
            g = r.grad_p;
            return r.loss;
        });
        probe("triplet_grad", [&](const numerics::Vec& x, numerics::Vec& g) {
            auto r = numerics::triplet_loss(x, pp, negs[0], lc.triplet_margin, lc.triplet_form);
            g = r.grad_p;
            return r.loss;
        });
    }

    // Closed forms: uniform similarities give ln(m+1); a zero-score map gives
    // image cross-entropy ln(C).
    {
        numerics::Vec p(dim, 0.0), pp(dim, 0.0);
        p[0] = 1.0;
        pp[1] = 1.0;
        std::vector<numerics::Vec> negs;
        for (std::size_t i = 0; i < lc.num_negatives; ++i) {
            numerics::Vec n(dim, 0.0);
            n[1] = 1.0;
            negs.push_back(n);
        }
        double loss = numerics::nce_loss(p, pp, negs, lc.temperature).loss;
        record("nce_uniform_closed_form",
               std::abs(loss - std::log(static_cast<double>(lc.num_negatives) + 1.0)), 1e-9);
    }
    {
        const int c = 10;
        auto raw = numerics::make_feature_map(c + 1, 4, 4);
        auto maps = numerics::make_score_maps(raw, c, numerics::Aggregator::mean());
        auto cls = numerics::classification_loss(maps, 0, numerics::TrainPhase::Pretrain, lc,
                                                 numerics::Aggregator::mean());
        record("uniform_ce_closed_form", std::abs(cls.loss_image - std::log(double(c))), 1e-9);
    }

    out.write("selftest.json", report.dump(2) + "\n");
}

}  // namespace

PipelineConfig PipelineConfig::defaults() {
    PipelineConfig c;
    c.values = default_values();
    return c;
}

PipelineConfig PipelineConfig::from_file(const std::string& path) {
    PipelineConfig c = defaults();
    json file;
    try {
        file = json::parse(read_file(path));
    } catch (const json::exception& e) {
        throw ConfigError("config file " + path + ": " + e.what());
    }
    if (!file.is_object()) throw ConfigError("config file " + path + ": expected an object");
    merge(c.values, file);
    return c;
}

void PipelineConfig::set_option(const std::string& dotted_key, const std::string& value) {
    json parsed;
    try {
        parsed = json::parse(value);
    } catch (const json::exception&) {
        parsed = value;  // plain string
    }
    json* node = &values;
    std::size_t start = 0;
    while (true) {
        std::size_t dot = dotted_key.find('.', start);
        std::string key = dotted_key.substr(start, dot == std::string::npos ? dot : dot - start);
        if (key.empty()) throw ConfigError("config: empty key segment in '" + dotted_key + "'");
        if (dot == std::string::npos) {
            (*node)[key] = parsed;
            return;
        }
        node = &(*node)[key];
        if (!node->is_object()) *node = json::object();
        start = dot + 1;
    }
}

void PipelineConfig::validate() const {
    const json& v = values;
    loss_config_of(v).validate();
    schedule_of(v).validate();
    scene_spec_of(v).validate();
    auto t = thresholds_of(v);
    if (t.shared_keypoints_k < 1) throw ConfigError("mining.shared_keypoints_k must be >= 1");
    if (t.min_rho < 0.0) throw ConfigError("mining.min_rho must be >= 0");
    if (t.min_nodes < 2) throw ConfigError("mining.min_nodes must be >= 2");
    for (const char* key : {"fusion.phi", "fusion.phi_high"}) {
        double phi = get<double>(v, key);
        if (phi < 0.0 || phi >= 1.0) throw ConfigError(std::string(key) + " must be in [0,1)");
    }
    if (get<double>(v, "fusion.background_power") <= 0.0)
        throw ConfigError("fusion.background_power must be positive");
    double iou = get<double>(v, "augment.iou_threshold");
    if (iou < 0.0) throw ConfigError("augment.iou_threshold must be >= 0");
    if (get<std::size_t>(v, "labeling.balance_target") < 1)
        throw ConfigError("labeling.balance_target must be >= 1");
    if (get<std::size_t>(v, "pairs.num_batches") < 1)
        throw ConfigError("pairs.num_batches must be >= 1");
    if (get<std::size_t>(v, "pairs.correspondences_per_pair") < 1)
        throw ConfigError("pairs.correspondences_per_pair must be >= 1");
    if (get<std::size_t>(v, "metrics.recall_k") < 1)
        throw ConfigError("metrics.recall_k must be >= 1");
    if (get<std::string>(v, "paths.output_dir").empty())
        throw ConfigError("paths.output_dir must be set");
    variant_from_name(get<std::string>(v, "loss.variant"));
    numerics::Aggregator::by_name(get<std::string>(v, "train.aggregator"));
    if (get<int>(v, "train.feature_channels") < 1)
        throw ConfigError("train.feature_channels must be >= 1");
}

std::string PipelineConfig::dump() const { return values.dump(2) + "\n"; }

const std::vector<std::string>& subcommands() {
    static const std::vector<std::string> list = {"ingest", "mine",    "label",   "pairs",
                                                  "train-toy", "fuse", "metrics", "augment",
                                                  "synth",   "selftest"};
    return list;
}

void run(const std::string& subcommand, const PipelineConfig& config) {
    config.validate();
    const json& v = config.values;
    RunDir out(get<std::string>(v, "paths.output_dir"));
    std::uint64_t seed = get<std::uint64_t>(v, "seed");

    if (subcommand == "synth") {
        auto scene = synth::generate(scene_spec_of(v));
        std::string data_dir = get<std::string>(v, "paths.data_dir");
        synth::write_scene(scene, data_dir);
        for (const auto& entry : fs::recursive_directory_iterator(data_dir))
            if (entry.is_regular_file())
                out.track("data/" + fs::relative(entry.path(), data_dir).generic_string(),
                          entry.path().string());
        out.finish(config);
        return;
    }
    if (subcommand == "selftest") {
        run_selftest(v, out);
        out.finish(config);
        return;
    }

    bool need_images = subcommand == "pairs" || subcommand == "train-toy" ||
                       subcommand == "fuse" || subcommand == "metrics";
    Dataset ds = load_dataset(v, need_images);
    auto index = sfm::TrackIndex::build(ds.reconstructions);

    if (subcommand == "ingest") {
        run_ingest(ds, index, out);
    } else if (subcommand == "mine") {
        out.write("concepts.jsonl", mining::serialize_concept_set(mine_concepts(ds, index, v)));
    } else if (subcommand == "label") {
        auto concept_set = mine_concepts(ds, index, v);
        auto labels =
            labeling::label_corpus(ds.corpus, concept_set, ds.lexicon, connectors_of(v), seed);
        out.write("labels.jsonl", labeling::serialize_labels(labels));
        if (get<bool>(v, "labeling.balance")) {
            auto balanced = labeling::balance_classes(
                labels, get<std::size_t>(v, "labeling.balance_target"), seed);
            json b = {{"images", balanced}};
            out.write("balanced.json", b.dump(2) + "\n");
        }
    } else if (subcommand == "pairs" || subcommand == "train-toy") {
        auto concept_set = mine_concepts(ds, index, v);
        auto labels =
            labeling::label_corpus(ds.corpus, concept_set, ds.lexicon, connectors_of(v), seed);
        auto ti = build_training_inputs(ds, index, concept_set, labels, v, 4);
        if (subcommand == "pairs") {
            std::ostringstream stream;
            for (const auto& batch : ti.batches) stream << pair_engine::serialize_batch(batch);
            out.write("batches.jsonl", stream.str());
        } else {
            auto model = trainer::ToyModel::init(static_cast<int>(ti.class_order.size()),
                                                 get<int>(v, "train.feature_channels"), seed);
            model.aggregator = get<std::string>(v, "train.aggregator");
            auto result = trainer::train(model, ti.batches, ds.images, ti.class_of_image,
                                         schedule_of(v), loss_config_of(v), seed);
            fs::path ckpt = fs::path(get<std::string>(v, "paths.output_dir")) /
                            get<std::string>(v, "train.checkpoint");
            model.save(ckpt.string());
            out.track(get<std::string>(v, "train.checkpoint"), ckpt.string());
            out.write("trace.jsonl", trainer::serialize_trace(result.trace));
            json summary = {{"classes", ti.class_order},
                            {"batches", ti.batches.size()},
                            {"final_loss", result.trace.empty() ? 0.0
                                                                : result.trace.back().total}};
            out.write("train_summary.json", summary.dump(2) + "\n");
        }
    } else if (subcommand == "fuse") {
        trainer::ToyModel model = load_checkpoint(v);
        auto concept_set = mine_concepts(ds, index, v);
        auto class_order = concept_set.nouns();
        if (static_cast<int>(class_order.size()) != model.num_concepts)
            throw ConsistencyError("fuse: checkpoint classes do not match mined concepts");
        double phi = get<double>(v, "fusion.phi");
        auto clouds = fuse_clouds(ds, index, model, class_order, phi);
        std::ostringstream stream;
        auto palette = make_palette(class_order);
        for (const auto& cloud : clouds) {
            stream << fusion3d::serialize_cloud(cloud);
            out.write("clouds/" + cloud.reconstruction_id + ".ply",
                      fusion3d::export_ply(cloud, palette, true));
        }
        out.write("clouds.jsonl", stream.str());
        json summary;
        summary["theta"] = fusion3d::theta(clouds, phi);
        try {
            summary["delta"] = fusion3d::delta(clouds, fusion3d::ConceptPolarity{}, phi);
        } catch (const Error&) {
            summary["delta"] = nullptr;
        }
        out.write("fusion_summary.json", summary.dump(2) + "\n");
    } else if (subcommand == "metrics") {
        run_metrics(ds, index, v, out);
    } else if (subcommand == "augment") {
        auto pairs = pair_engine::augment_caption_pairs(ds.corpus, index,
                                                        get<double>(v, "augment.iou_threshold"));
        out.write("augmented_pairs.jsonl", pair_engine::serialize_augmented_pairs(pairs));
    } else {
        throw ConfigError("unknown subcommand '" + subcommand + "'");
    }
    out.finish(config);
}

}  // namespace babelminer::pipeline
