#include "babelminer/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>
#include <sstream>

#include <json.hpp>

#include "babelminer/common.hpp"

namespace babelminer::synth {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::set<std::string> kInteriorConcepts = {"organ", "nave", "altar", "choir"};
const std::set<std::string> kExteriorConcepts = {"portal", "facade", "tower"};

// Distinct base colors per concept_name, background stays near mid-gray.
std::array<double, 3> concept_color(std::size_t concept_index) {
    static const std::array<std::array<double, 3>, 10> palette = {{
        {0.85, 0.15, 0.15},
        {0.15, 0.75, 0.20},
        {0.15, 0.25, 0.90},
        {0.90, 0.80, 0.10},
        {0.80, 0.15, 0.85},
        {0.10, 0.80, 0.80},
        {0.95, 0.50, 0.10},
        {0.35, 0.20, 0.65},
        {0.55, 0.75, 0.15},
        {0.70, 0.35, 0.35},
    }};
    return palette[concept_index % palette.size()];
}

std::string polarity_of(const std::string& concept_name) {
    if (kInteriorConcepts.count(concept_name)) return "int";
    if (kExteriorConcepts.count(concept_name)) return "ext";
    return "other";
}

struct RegionLayout {
    int window_x0, window_y0, window_w, window_h;  // textured area in the image
    std::array<double, 3> base_color = {0.5, 0.5, 0.5};
};

// Deterministic pixel hash noise in [-amp, amp].
double pixel_noise(std::uint64_t key, int x, int y, double amp) {
    std::uint64_t h = key;
    h = fnv1a(&x, sizeof(x), h);
    h = fnv1a(&y, sizeof(y), h);
    return amp * (2.0 * (static_cast<double>(h >> 11) * 0x1.0p-53) - 1.0);
}

struct Builder {
    const SceneSpec& spec;
    GeneratedScene scene;
    Rng root;

    explicit Builder(const SceneSpec& s) : spec(s), root(Rng(s.seed).child("synth")) {}

    sfm::Reconstruction& reconstruction_for(const std::string& landmark,
                                            const std::string& zone) {
        std::string rec_id = spec.group_by_polarity ? landmark + "_" + zone : landmark;
        for (auto& rec : scene.reconstructions)
            if (rec.reconstruction_id == rec_id) return rec;
        sfm::Reconstruction rec;
        rec.reconstruction_id = rec_id;
        rec.landmark_id = landmark;
        sfm::Camera cam;
        cam.camera_id = 1;
        cam.model = "SIMPLE_PINHOLE";
        cam.width = spec.image_size;
        cam.height = spec.image_size;
        cam.params = {static_cast<double>(spec.image_size), spec.image_size / 2.0,
                      spec.image_size / 2.0};
        rec.cameras.emplace(1, cam);
        scene.reconstructions.push_back(std::move(rec));
        return scene.reconstructions.back();
    }

    numerics::FeatureMap render(const std::string& image_id, const RegionLayout* layout,
                                std::size_t concept_index, std::uint64_t region_key, Rng& rng) {
        const int s = spec.image_size;
        auto img = numerics::make_feature_map(3, s, s);
        std::uint64_t noise_key = fnv1a(image_id);
        // Per-view photometric variation so views of one region differ:
        // an independent gain per color channel.
        double gain[3];
        for (double& g : gain) g = 1.0 + rng.uniform_real(-spec.view_jitter, spec.view_jitter);
        for (int y = 0; y < s; ++y) {
            for (int x = 0; x < s; ++x) {
                std::array<double, 3> base = {0.5, 0.5, 0.5};
                bool inside = layout && x >= layout->window_x0 && y >= layout->window_y0 &&
                              x < layout->window_x0 + layout->window_w &&
                              y < layout->window_y0 + layout->window_h;
                double checker = 0.0;
                if (inside) {
                    // Scene-anchored texture: the pattern is keyed to region
                    // coordinates, so it travels with the 3D content across
                    // views instead of sticking to the pixel lattice.
                    int u = x - layout->window_x0, v = y - layout->window_y0;
                    for (int c = 0; c < 3; ++c)
                        base[c] = layout->base_color[c] +
                                  pixel_noise(region_key + 7 * c, u / 4, v / 4,
                                              spec.pattern_amplitude);
                } else {
                    checker = ((x / 2 + y / 2) % 2 == 0) ? 0.08 : -0.08;
                }
                for (int c = 0; c < 3; ++c) {
                    double v = (base[c] + checker +
                                pixel_noise(noise_key + c, x, y, spec.texture_noise)) *
                               gain[c];
                    // Snap to the 8-bit grid so the image container's
                    // quantized round trip reproduces the pixels exactly.
                    double q = std::lround(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
                    img.at(c, y, x) = q;
                }
            }
        }
        return img;
    }

    void add_region(const std::string& landmark, int landmark_index,
                    const std::string& concept_name, std::size_t concept_index) {
        sfm::Reconstruction& rec = reconstruction_for(landmark, polarity_of(concept_name));
        Rng region_rng =
            root.child(landmark).child("region_" + concept_name);

        const int s = spec.image_size;
        const int margin = s / 8;
        const int window = s - 4 * margin;  // leave room for per-camera offsets

        // Region 3D points on a grid; ids are unique within the reconstruction.
        int grid_cols = static_cast<int>(std::ceil(std::sqrt(spec.points_per_region)));
        std::int64_t base_pid =
            rec.points.empty() ? 1 : rec.points.rbegin()->first + 1;
        double region_x0 = 100.0 * landmark_index + 30.0 * static_cast<double>(concept_index);
        std::vector<std::int64_t> point_ids;
        for (int p = 0; p < spec.points_per_region; ++p) {
            sfm::Point3D pt;
            pt.point3d_id = base_pid + p;
            pt.xyz[0] = region_x0 + static_cast<double>(p % grid_cols);
            pt.xyz[1] = 50.0 * static_cast<double>(concept_index) +
                        static_cast<double>(p / grid_cols);
            pt.xyz[2] = 0.0;
            auto color = concept_color(concept_index);
            for (int c = 0; c < 3; ++c)
                pt.rgb[c] = static_cast<std::uint8_t>(std::lround(color[c] * 255.0));
            rec.points.emplace(pt.point3d_id, pt);
            point_ids.push_back(pt.point3d_id);
            scene.point_concept[sfm::make_point_key(rec.reconstruction_id, pt.point3d_id)] =
                concept_name;
        }

        // One color draw per region: the concept color pulled toward gray by
        // the contrast knob, plus a region-specific wobble that makes raw
        // color an unreliable concept cue when the jitter is nonzero.
        std::array<double, 3> region_color{};
        {
            Rng color_rng = region_rng.child("color");
            std::size_t color_index = concept_index;
            if (color_rng.uniform_real() < spec.color_swap_rate)
                color_index = (concept_index + 1) % spec.concepts.size();
            auto cc = concept_color(color_index / spec.color_group_size);
            for (int c = 0; c < 3; ++c)
                region_color[c] = 0.5 + (cc[c] - 0.5) * spec.texture_contrast +
                                  color_rng.uniform_real(-spec.region_color_jitter,
                                                         spec.region_color_jitter);
        }

        int unregistered =
            static_cast<int>(std::lround(spec.unregistered_rate * spec.cameras_per_region));
        for (int v = 0; v < spec.cameras_per_region + unregistered; ++v) {
            bool is_registered = v < spec.cameras_per_region;
            std::string image_id = landmark + "_" + concept_name + (is_registered ? "_v" : "_u") +
                                   std::to_string(is_registered ? v : v - spec.cameras_per_region);
            Rng cam_rng = region_rng.child(image_id);

            RegionLayout layout;
            layout.window_w = window;
            layout.window_h = window;
            layout.window_x0 = margin + static_cast<int>(cam_rng.uniform(2 * margin + 1));
            layout.window_y0 = margin + static_cast<int>(cam_rng.uniform(2 * margin + 1));
            layout.base_color = region_color;

            if (is_registered) {
                sfm::Image img;
                img.image_id = rec.images.empty() ? 1 : rec.images.rbegin()->first + 1;
                img.name = image_id;
                img.camera_id = 1;
                for (std::size_t p = 0; p < point_ids.size(); ++p) {
                    sfm::Observation obs;
                    obs.point3d_id = point_ids[p];
                    int col = static_cast<int>(p) % grid_cols;
                    int row = static_cast<int>(p) / grid_cols;
                    obs.xy.x = layout.window_x0 +
                               (col + 0.5) * layout.window_w / static_cast<double>(grid_cols);
                    obs.xy.y = layout.window_y0 +
                               (row + 0.5) * layout.window_h / static_cast<double>(grid_cols);
                    img.observed_points.push_back(obs);
                }
                for (std::size_t p = 0; p < point_ids.size(); ++p) {
                    rec.points.at(point_ids[p]).track.push_back(
                        {img.image_id, static_cast<int>(p), img.observed_points[p].xy});
                }
                rec.images.emplace(img.image_id, std::move(img));
            }

            scene.images.images.emplace(image_id,
                                        render(image_id, &layout, concept_index,
                                               fnv1a(landmark + "/" + concept_name), cam_rng));
            std::vector<std::uint8_t> mask(static_cast<std::size_t>(s) * s, 255);
            for (int y = layout.window_y0; y < layout.window_y0 + layout.window_h; ++y)
                for (int x = layout.window_x0; x < layout.window_x0 + layout.window_w; ++x)
                    mask[static_cast<std::size_t>(y) * s + x] =
                        static_cast<std::uint8_t>(concept_index);
            scene.masks.masks.emplace(image_id, std::move(mask));
            scene.image_concept[image_id] = concept_name;

            corpus::ImageDoc doc;
            doc.image_id = image_id;
            doc.landmark_id = landmark;
            doc.category_path = {landmark, concept_name + " of " + landmark};
            doc.registered = is_registered;
            if (is_registered) doc.reconstruction_id = rec.reconstruction_id;
            doc.caption = make_caption(concept_name, landmark, cam_rng);
            scene.corpus.docs.push_back(std::move(doc));
        }
    }

    std::string make_caption(const std::string& concept_name, const std::string& landmark, Rng& rng) {
        if (spec.outlier_caption_rate > 0.0 &&
            rng.uniform_real() < spec.outlier_caption_rate && spec.concepts.size() > 1) {
            std::string wrong = concept_name;
            while (wrong == concept_name)
                wrong = spec.concepts[rng.uniform(spec.concepts.size())];
            return "the " + wrong + " of " + landmark;
        }
        double pick = rng.uniform_real();
        if (pick < 0.2) return "";
        if (pick < 0.5 && spec.concepts.size() > 1) {
            std::string other = concept_name;
            while (other == concept_name)
                other = spec.concepts[rng.uniform(spec.concepts.size())];
            return concept_name + " looking towards " + other;
        }
        return "the " + concept_name + " of " + landmark;
    }

    void add_outliers(const std::string& landmark, const std::string& noun) {
        sfm::Reconstruction& rec =
            reconstruction_for(landmark, spec.group_by_polarity
                                             ? polarity_of(spec.concepts.front())
                                             : "other");
        Rng out_rng = root.child(landmark).child("outlier_" + noun);
        const int s = spec.image_size;
        int pairs = spec.outlier_cameras / 2;
        for (int pr = 0; pr < pairs; ++pr) {
            // Private point set per pair, below the edge threshold.
            std::int64_t base_pid = rec.points.empty() ? 1 : rec.points.rbegin()->first + 1;
            std::vector<std::int64_t> point_ids;
            for (int p = 0; p < spec.outlier_pair_points; ++p) {
                sfm::Point3D pt;
                pt.point3d_id = base_pid + p;
                pt.xyz[0] = -1000.0 - 10.0 * pr - p;
                pt.xyz[1] = static_cast<double>(fnv1a(noun) % 100);
                pt.xyz[2] = -5.0;
                pt.rgb[0] = pt.rgb[1] = pt.rgb[2] = 64;
                rec.points.emplace(pt.point3d_id, pt);
                point_ids.push_back(pt.point3d_id);
            }
            for (int side = 0; side < 2; ++side) {
                std::string image_id =
                    landmark + "_" + noun + "_o" + std::to_string(2 * pr + side);
                Rng cam_rng = out_rng.child(image_id);
                sfm::Image img;
                img.image_id = rec.images.empty() ? 1 : rec.images.rbegin()->first + 1;
                img.name = image_id;
                img.camera_id = 1;
                for (std::size_t p = 0; p < point_ids.size(); ++p) {
                    sfm::Observation obs;
                    obs.point3d_id = point_ids[p];
                    obs.xy.x = 2.0 + 3.0 * static_cast<double>(p) + side;
                    obs.xy.y = 2.0 + side;
                    img.observed_points.push_back(obs);
                }
                for (std::size_t p = 0; p < point_ids.size(); ++p)
                    rec.points.at(point_ids[p])
                        .track.push_back({img.image_id, static_cast<int>(p),
                                          img.observed_points[p].xy});
                rec.images.emplace(img.image_id, std::move(img));

                scene.images.images.emplace(image_id,
                                            render(image_id, nullptr, 0, 0, cam_rng));
                scene.masks.masks.emplace(
                    image_id, std::vector<std::uint8_t>(static_cast<std::size_t>(s) * s, 255));

                corpus::ImageDoc doc;
                doc.image_id = image_id;
                doc.landmark_id = landmark;
                doc.category_path = {landmark, noun + " of " + landmark};
                doc.registered = true;
                doc.reconstruction_id = rec.reconstruction_id;
                doc.caption = "";
                scene.corpus.docs.push_back(std::move(doc));
            }
        }
    }

    // Brute-force density check straight off the generated structures,
    // independent of TrackIndex.
    void self_check() const {
        for (const auto& rec : scene.reconstructions) {
            std::map<int, std::set<std::int64_t>> seen;
            for (const auto& [iid, img] : rec.images)
                for (const auto& obs : img.observed_points) seen[iid].insert(obs.point3d_id);

            // Group this reconstruction's images by the noun in their leaf
            // category, then measure each group's density.
            std::map<std::string, std::vector<int>> groups;
            for (const auto& doc : scene.corpus.docs) {
                if (!doc.registered || doc.reconstruction_id != rec.reconstruction_id) continue;
                for (const auto& [iid, img] : rec.images) {
                    if (img.name != doc.image_id) continue;
                    std::string noun = corpus::tokenize(doc.leaf_category()).front();
                    groups[noun].push_back(iid);
                }
            }
            for (const auto& [noun, ids] : groups) {
                if (ids.size() < 10) continue;
                std::size_t edges = 0;
                for (std::size_t a = 0; a < ids.size(); ++a)
                    for (std::size_t b = a + 1; b < ids.size(); ++b) {
                        std::vector<std::int64_t> inter;
                        std::set_intersection(seen.at(ids[a]).begin(), seen.at(ids[a]).end(),
                                              seen.at(ids[b]).begin(), seen.at(ids[b]).end(),
                                              std::back_inserter(inter));
                        if (inter.size() >= 10) ++edges;
                    }
                double rho = 2.0 * static_cast<double>(edges) /
                             (static_cast<double>(ids.size()) *
                              static_cast<double>(ids.size() - 1));
                bool planted = std::find(spec.concepts.begin(), spec.concepts.end(), noun) !=
                               spec.concepts.end();
                if (planted && rho < 0.16)
                    throw Error("synth self-check: planted concept_name '" + noun +
                                "' density " + std::to_string(rho) + " below 2x threshold");
                if (!planted && rho > 0.04)
                    throw Error("synth self-check: outlier noun '" + noun + "' density " +
                                std::to_string(rho) + " above half threshold");
            }
        }
    }
};

}  // namespace

void SceneSpec::validate() const {
    if (num_landmarks < 1) throw ConfigError("synth: num_landmarks must be >= 1");
    if (concepts.empty()) throw ConfigError("synth: at least one planted concept_name required");
    if (cameras_per_region < 2)
        throw ConfigError("synth: cameras_per_region must be >= 2 (tracks need two views)");
    if (points_per_region < 1) throw ConfigError("synth: points_per_region must be >= 1");
    if (image_size < 8 || image_size % 4 != 0)
        throw ConfigError("synth: image_size must be >= 8 and divisible by 4");
    if (outlier_cameras % 2 != 0)
        throw ConfigError("synth: outlier_cameras must be even (cameras come in pairs)");
    if (unregistered_rate < 0.0 || outlier_caption_rate < 0.0 || outlier_caption_rate > 1.0)
        throw ConfigError("synth: invalid noise rates");
    if (texture_contrast < 0.0 || texture_contrast > 1.0)
        throw ConfigError("synth: texture_contrast must be in [0,1]");
    if (texture_noise < 0.0) throw ConfigError("synth: texture_noise must be >= 0");
    if (pattern_amplitude < 0.0) throw ConfigError("synth: pattern_amplitude must be >= 0");
    if (view_jitter < 0.0 || view_jitter >= 1.0)
        throw ConfigError("synth: view_jitter must be in [0,1)");
    if (region_color_jitter < 0.0)
        throw ConfigError("synth: region_color_jitter must be >= 0");
    if (color_swap_rate < 0.0 || color_swap_rate > 1.0)
        throw ConfigError("synth: color_swap_rate must be in [0,1]");
    if (color_group_size < 1)
        throw ConfigError("synth: color_group_size must be >= 1");
}

GeneratedScene generate(const SceneSpec& spec) {
    spec.validate();
    Builder builder(spec);

    for (int l = 0; l < spec.num_landmarks; ++l) {
        std::string landmark = "landmark" + std::to_string(l);
        for (std::size_t c = 0; c < spec.concepts.size(); ++c)
            builder.add_region(landmark, l, spec.concepts[c], c);
        for (const std::string& noun : spec.outlier_nouns) builder.add_outliers(landmark, noun);
    }

    builder.scene.masks.width = spec.image_size;
    builder.scene.masks.height = spec.image_size;

    // Lexicon: planted concepts, outlier nouns and the full evaluation
    // vocabulary; landmark names are blocked as entities.
    auto& lex = builder.scene.lexicon;
    for (const std::string& c : spec.concepts) lex.nouns.insert(c);
    for (const std::string& n : spec.outlier_nouns) lex.nouns.insert(n);
    for (const char* c : {"facade", "window", "chapel", "organ", "nave", "tower", "choir",
                          "portal", "altar", "statue"})
        lex.nouns.insert(c);
    for (int l = 0; l < spec.num_landmarks; ++l)
        lex.entity_blocklist.insert("landmark" + std::to_string(l));

    builder.scene.corpus.reindex();
    for (const auto& rec : builder.scene.reconstructions) sfm::validate_reconstruction(rec);
    if (spec.enforce_separation && !spec.outlier_nouns.empty()) builder.self_check();
    else if (spec.enforce_separation) builder.self_check();
    return std::move(builder.scene);
}

void write_scene(const GeneratedScene& scene, const std::string& out_dir) {
    fs::create_directories(out_dir);
    fs::create_directories(fs::path(out_dir) / "sfm");
    json manifest;
    json recs = json::array();
    for (const auto& rec : scene.reconstructions) {
        std::string cameras, images_txt, points;
        sfm::serialize_reconstruction(rec, cameras, images_txt, points);
        fs::path dir = fs::path(out_dir) / "sfm" / rec.reconstruction_id;
        fs::create_directories(dir);
        write_file((dir / "cameras.txt").string(), cameras);
        write_file((dir / "images.txt").string(), images_txt);
        write_file((dir / "points3D.txt").string(), points);
        recs.push_back({{"reconstruction_id", rec.reconstruction_id},
                        {"landmark_id", rec.landmark_id},
                        {"dir", (fs::path("sfm") / rec.reconstruction_id).string()}});
    }
    manifest["reconstructions"] = recs;
    write_file((fs::path(out_dir) / "reconstructions.json").string(), manifest.dump(2) + "\n");

    write_file((fs::path(out_dir) / "corpus.jsonl").string(),
               corpus::serialize_corpus(scene.corpus));

    std::ostringstream nouns, blocklist;
    for (const auto& w : scene.lexicon.nouns) nouns << w << "\n";
    for (const auto& w : scene.lexicon.entity_blocklist) blocklist << w << "\n";
    write_file((fs::path(out_dir) / "nouns.txt").string(), nouns.str());
    write_file((fs::path(out_dir) / "entities.txt").string(), blocklist.str());

    scene.images.save((fs::path(out_dir) / "images.bin").string());
    scene.masks.save((fs::path(out_dir) / "masks.bin").string());

    std::ostringstream gt;
    for (const auto& [image_id, concept_name] : scene.image_concept) {
        json rec;
        rec["record"] = "image_concept";
        rec["image_id"] = image_id;
        rec["concept_name"] = concept_name;
        gt << rec.dump() << "\n";
    }
    for (const auto& [point, concept_name] : scene.point_concept) {
        json rec;
        rec["record"] = "point_concept";
        rec["point"] = point;
        rec["concept_name"] = concept_name;
        gt << rec.dump() << "\n";
    }
    write_file((fs::path(out_dir) / "groundtruth.jsonl").string(), gt.str());
}

}  // namespace babelminer::synth
