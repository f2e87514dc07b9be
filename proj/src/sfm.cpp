#include "babelminer/sfm.hpp"

#include <algorithm>
#include <charconv>
#include <sstream>

#include "babelminer/common.hpp"

namespace babelminer::sfm {

namespace {

struct LineReader {
    std::istringstream stream;
    std::string file_label;
    int line_no = 0;

    explicit LineReader(const std::string& text, std::string label)
        : stream(text), file_label(std::move(label)) {}

    // Next non-comment, non-blank line; false at EOF.
    bool next(std::string& out) {
        while (std::getline(stream, out)) {
            ++line_no;
            std::size_t start = out.find_first_not_of(" \t\r");
            if (start == std::string::npos) continue;
            if (out[start] == '#') continue;
            std::size_t end = out.find_last_not_of(" \t\r");
            out = out.substr(start, end - start + 1);
            return true;
        }
        return false;
    }

    // Next non-comment line, blank allowed (observation lists may be empty).
    bool next_raw(std::string& out) {
        while (std::getline(stream, out)) {
            ++line_no;
            std::size_t start = out.find_first_not_of(" \t\r");
            if (start == std::string::npos) {
                out.clear();
                return true;
            }
            if (out[start] == '#') continue;
            std::size_t end = out.find_last_not_of(" \t\r");
            out = out.substr(start, end - start + 1);
            return true;
        }
        return false;
    }

    [[noreturn]] void fail(const std::string& msg) const {
        throw ParseError(file_label + ":" + std::to_string(line_no) + ": " + msg);
    }
};

std::vector<std::string> split_ws(const std::string& line) {
    std::vector<std::string> out;
    std::istringstream ss(line);
    std::string tok;
    while (ss >> tok) out.push_back(std::move(tok));
    return out;
}

template <typename T>
T parse_num(const std::string& tok, LineReader& r) {
    T value{};
    if constexpr (std::is_floating_point_v<T>) {
        try {
            std::size_t pos = 0;
            value = static_cast<T>(std::stod(tok, &pos));
            if (pos != tok.size()) r.fail("trailing characters in number '" + tok + "'");
        } catch (const std::exception&) {
            r.fail("expected a number, got '" + tok + "'");
        }
    } else {
        auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), value);
        if (ec != std::errc() || p != tok.data() + tok.size())
            r.fail("expected an integer, got '" + tok + "'");
    }
    return value;
}

std::string fmt_double(double v) {
    std::ostringstream ss;
    ss.precision(17);
    ss << v;
    return ss.str();
}

}  // namespace

Reconstruction parse_reconstruction(const std::string& cameras_file,
                                    const std::string& images_file,
                                    const std::string& points_file,
                                    const std::string& landmark_id,
                                    const std::string& reconstruction_id) {
    Reconstruction rec;
    rec.landmark_id = landmark_id;
    rec.reconstruction_id = reconstruction_id.empty() ? landmark_id : reconstruction_id;

    {
        LineReader r(cameras_file, "cameras");
        std::string line;
        while (r.next(line)) {
            auto toks = split_ws(line);
            if (toks.size() < 4) r.fail("camera line needs CAMERA_ID MODEL WIDTH HEIGHT PARAMS...");
            Camera cam;
            cam.camera_id = parse_num<int>(toks[0], r);
            cam.model = toks[1];
            cam.width = parse_num<int>(toks[2], r);
            cam.height = parse_num<int>(toks[3], r);
            for (std::size_t i = 4; i < toks.size(); ++i)
                cam.params.push_back(parse_num<double>(toks[i], r));
            if (!rec.cameras.emplace(cam.camera_id, cam).second)
                throw ConsistencyError("duplicate camera_id " + toks[0]);
        }
    }

    {
        LineReader r(images_file, "images");
        std::string line;
        while (r.next(line)) {
            auto toks = split_ws(line);
            if (toks.size() < 10) r.fail("image header needs IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME");
            Image img;
            img.image_id = parse_num<int>(toks[0], r);
            for (int i = 0; i < 4; ++i) img.qvec[i] = parse_num<double>(toks[1 + i], r);
            for (int i = 0; i < 3; ++i) img.tvec[i] = parse_num<double>(toks[5 + i], r);
            img.camera_id = parse_num<int>(toks[8], r);
            // Image names may contain spaces; rejoin the tail.
            img.name = toks[9];
            for (std::size_t i = 10; i < toks.size(); ++i) img.name += " " + toks[i];

            std::string obs_line;
            if (!r.next_raw(obs_line)) r.fail("missing observations line after image header");
            auto obs_toks = split_ws(obs_line);
            if (obs_toks.size() % 3 != 0) r.fail("observations line must be X Y POINT3D_ID triplets");
            for (std::size_t i = 0; i < obs_toks.size(); i += 3) {
                Observation obs;
                obs.xy.x = parse_num<double>(obs_toks[i], r);
                obs.xy.y = parse_num<double>(obs_toks[i + 1], r);
                obs.point3d_id = parse_num<std::int64_t>(obs_toks[i + 2], r);
                if (obs.point3d_id >= 0) img.observed_points.push_back(obs);
            }
            if (!rec.images.emplace(img.image_id, img).second)
                throw ConsistencyError("duplicate image_id " + toks[0]);
        }
    }

    {
        LineReader r(points_file, "points");
        std::string line;
        while (r.next(line)) {
            auto toks = split_ws(line);
            if (toks.size() < 8 || (toks.size() - 8) % 2 != 0)
                r.fail("point line needs POINT3D_ID X Y Z R G B ERROR (IMAGE_ID POINT2D_IDX)...");
            Point3D pt;
            pt.point3d_id = parse_num<std::int64_t>(toks[0], r);
            for (int i = 0; i < 3; ++i) pt.xyz[i] = parse_num<double>(toks[1 + i], r);
            for (int i = 0; i < 3; ++i) {
                int c = parse_num<int>(toks[4 + i], r);
                if (c < 0 || c > 255) r.fail("rgb component out of range");
                pt.rgb[i] = static_cast<std::uint8_t>(c);
            }
            pt.error = parse_num<double>(toks[7], r);
            for (std::size_t i = 8; i < toks.size(); i += 2) {
                TrackElement el;
                el.image_id = parse_num<int>(toks[i], r);
                el.point2d_idx = parse_num<int>(toks[i + 1], r);
                pt.track.push_back(el);
            }
            if (rec.points.count(pt.point3d_id))
                throw ConsistencyError("duplicate point3d_id " + toks[0]);
            rec.points.emplace(pt.point3d_id, std::move(pt));
        }
    }

    // Resolve track pixel coordinates from the owning image's observation list
    // and verify bidirectional consistency.
    for (auto& [pid, pt] : rec.points) {
        for (auto& el : pt.track) {
            auto it = rec.images.find(el.image_id);
            if (it == rec.images.end())
                throw ConsistencyError("point " + std::to_string(pid) + " track references unknown image_id " +
                                       std::to_string(el.image_id));
            const Image& img = it->second;
            bool found = false;
            for (const Observation& obs : img.observed_points) {
                if (obs.point3d_id == pid) {
                    el.xy = obs.xy;
                    found = true;
                    break;
                }
            }
            if (!found)
                throw ConsistencyError("point " + std::to_string(pid) + " tracked in image " +
                                       std::to_string(el.image_id) + " but absent from its observations");
        }
    }
    validate_reconstruction(rec);
    return rec;
}

void validate_reconstruction(const Reconstruction& rec) {
    for (const auto& [pid, pt] : rec.points) {
        if (pt.track.size() < 2)
            throw ConsistencyError("point " + std::to_string(pid) + " has track length " +
                                   std::to_string(pt.track.size()) + " (< 2)");
    }
    for (const auto& [iid, img] : rec.images) {
        for (const Observation& obs : img.observed_points) {
            auto it = rec.points.find(obs.point3d_id);
            if (it == rec.points.end())
                throw ConsistencyError("image " + std::to_string(iid) + " observes unknown point " +
                                       std::to_string(obs.point3d_id));
            const auto& track = it->second.track;
            bool found = std::any_of(track.begin(), track.end(),
                                     [&](const TrackElement& el) { return el.image_id == iid; });
            if (!found)
                throw ConsistencyError("image " + std::to_string(iid) + " observes point " +
                                       std::to_string(obs.point3d_id) + " but is absent from its track");
        }
    }
}

void serialize_reconstruction(const Reconstruction& rec,
                              std::string& cameras_out,
                              std::string& images_out,
                              std::string& points_out) {
    std::ostringstream cams;
    cams << "# Camera list: CAMERA_ID MODEL WIDTH HEIGHT PARAMS[]\n";
    for (const auto& [cid, cam] : rec.cameras) {
        cams << cid << " " << cam.model << " " << cam.width << " " << cam.height;
        for (double p : cam.params) cams << " " << fmt_double(p);
        cams << "\n";
    }
    cameras_out = cams.str();

    std::ostringstream imgs;
    imgs << "# Image list: IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME\n";
    imgs << "#             X Y POINT3D_ID triplets\n";
    for (const auto& [iid, img] : rec.images) {
        imgs << iid;
        for (double q : img.qvec) imgs << " " << fmt_double(q);
        for (double t : img.tvec) imgs << " " << fmt_double(t);
        imgs << " " << img.camera_id << " " << img.name << "\n";
        bool first = true;
        for (const Observation& obs : img.observed_points) {
            if (!first) imgs << " ";
            first = false;
            imgs << fmt_double(obs.xy.x) << " " << fmt_double(obs.xy.y) << " " << obs.point3d_id;
        }
        imgs << "\n";
    }
    images_out = imgs.str();

    std::ostringstream pts;
    pts << "# 3D point list: POINT3D_ID X Y Z R G B ERROR (IMAGE_ID POINT2D_IDX)[]\n";
    for (const auto& [pid, pt] : rec.points) {
        pts << pid;
        for (double v : pt.xyz) pts << " " << fmt_double(v);
        for (std::uint8_t c : pt.rgb) pts << " " << static_cast<int>(c);
        pts << " " << fmt_double(pt.error);
        for (const TrackElement& el : pt.track) pts << " " << el.image_id << " " << el.point2d_idx;
        pts << "\n";
    }
    points_out = pts.str();
}

ImageKey make_image_key(const std::string& reconstruction_id, int image_id) {
    return reconstruction_id + "/" + std::to_string(image_id);
}

PointKey make_point_key(const std::string& reconstruction_id, std::int64_t point3d_id) {
    return reconstruction_id + "/" + std::to_string(point3d_id);
}

TrackIndex TrackIndex::build(const std::vector<Reconstruction>& recs) {
    TrackIndex idx;
    std::set<std::string> rec_ids;
    for (const Reconstruction& rec : recs) {
        if (!rec_ids.insert(rec.reconstruction_id).second)
            throw ConsistencyError("duplicate reconstruction_id " + rec.reconstruction_id);
        idx.reconstruction_ids_.push_back(rec.reconstruction_id);
        for (const auto& [iid, img] : rec.images) {
            ImageKey key = make_image_key(rec.reconstruction_id, iid);
            idx.landmark_by_image_[key] = rec.landmark_id;
            idx.image_by_name_[rec.reconstruction_id + "\n" + img.name] = key;
            auto& pts = idx.by_image_[key];
            for (const Observation& obs : img.observed_points)
                pts.insert(make_point_key(rec.reconstruction_id, obs.point3d_id));
        }
        for (const auto& [pid, pt] : rec.points) {
            PointKey key = make_point_key(rec.reconstruction_id, pid);
            idx.rec_by_point_[key] = rec.reconstruction_id;
            auto& obs_list = idx.by_point_[key];
            for (const TrackElement& el : pt.track)
                obs_list.push_back({make_image_key(rec.reconstruction_id, el.image_id), el.xy});
            // Materialize shared counts from the track itself.
            for (std::size_t a = 0; a < pt.track.size(); ++a) {
                for (std::size_t b = a + 1; b < pt.track.size(); ++b) {
                    ImageKey ka = make_image_key(rec.reconstruction_id, pt.track[a].image_id);
                    ImageKey kb = make_image_key(rec.reconstruction_id, pt.track[b].image_id);
                    if (ka == kb) continue;
                    if (kb < ka) std::swap(ka, kb);
                    ++idx.pair_counts_[{ka, kb}];
                }
            }
        }
    }
    return idx;
}

const std::set<PointKey>& TrackIndex::points_of(const ImageKey& image) const {
    auto it = by_image_.find(image);
    if (it == by_image_.end()) throw Error("unknown image key: " + image);
    return it->second;
}

const std::vector<PointObservation>& TrackIndex::observations_of(const PointKey& point) const {
    auto it = by_point_.find(point);
    if (it == by_point_.end()) throw Error("unknown point key: " + point);
    return it->second;
}

std::size_t TrackIndex::shared_keypoints(const ImageKey& a, const ImageKey& b) const {
    if (!has_image(a)) throw Error("unknown image key: " + a);
    if (!has_image(b)) throw Error("unknown image key: " + b);
    if (a == b) return points_of(a).size();
    ImageKey lo = std::min(a, b), hi = std::max(a, b);
    auto it = pair_counts_.find({lo, hi});
    return it == pair_counts_.end() ? 0 : it->second;
}

double TrackIndex::keypoint_iou(const ImageKey& a, const ImageKey& b) const {
    std::size_t inter = shared_keypoints(a, b);
    std::size_t na = points_of(a).size();
    std::size_t nb = points_of(b).size();
    std::size_t uni = (a == b) ? na : na + nb - inter;
    if (uni == 0) return 0.0;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

const std::string& TrackIndex::landmark_of(const ImageKey& image) const {
    auto it = landmark_by_image_.find(image);
    if (it == landmark_by_image_.end()) throw Error("unknown image key: " + image);
    return it->second;
}

ImageKey TrackIndex::find_image(const std::string& reconstruction_id, const std::string& name) const {
    auto it = image_by_name_.find(reconstruction_id + "\n" + name);
    return it == image_by_name_.end() ? ImageKey() : it->second;
}

const std::string& TrackIndex::reconstruction_of(const PointKey& point) const {
    auto it = rec_by_point_.find(point);
    if (it == rec_by_point_.end()) throw Error("unknown point key: " + point);
    return it->second;
}

}  // namespace babelminer::sfm
