#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

namespace babelminer::sfm {

struct Pixel {
    double x = 0.0;
    double y = 0.0;
};

struct Camera {
    int camera_id = 0;
    std::string model;
    int width = 0;
    int height = 0;
    std::vector<double> params;
};

struct Observation {
    std::int64_t point3d_id = -1;
    Pixel xy;
};

struct Image {
    int image_id = 0;
    std::string name;
    int camera_id = 0;
    double qvec[4] = {1, 0, 0, 0};
    double tvec[3] = {0, 0, 0};
    // Only observations with a triangulated point (point3d_id >= 0).
    std::vector<Observation> observed_points;
};

struct TrackElement {
    int image_id = 0;
    int point2d_idx = 0;
    Pixel xy;
};

struct Point3D {
    std::int64_t point3d_id = 0;
    double xyz[3] = {0, 0, 0};
    std::uint8_t rgb[3] = {0, 0, 0};
    double error = 0.0;
    std::vector<TrackElement> track;
};

struct Reconstruction {
    std::string reconstruction_id;
    std::string landmark_id;
    std::map<int, Camera> cameras;
    std::map<int, Image> images;
    std::map<std::int64_t, Point3D> points;
};

// Parses the sparse text export (cameras/images/points files, '#' comments).
// Observations with point3d_id == -1 are dropped. Throws ParseError with a
// line number on malformed input and ConsistencyError when invariants fail.
Reconstruction parse_reconstruction(const std::string& cameras_file,
                                    const std::string& images_file,
                                    const std::string& points_file,
                                    const std::string& landmark_id,
                                    const std::string& reconstruction_id = "");

// Inverse of parse_reconstruction: parse(serialize(r)) == r field for field.
void serialize_reconstruction(const Reconstruction& rec,
                              std::string& cameras_out,
                              std::string& images_out,
                              std::string& points_out);

// Checks the bidirectional track/observation invariants and track length >= 2.
void validate_reconstruction(const Reconstruction& rec);

// Image and point keys namespaced by reconstruction: "<rec_id>/<local id>".
using ImageKey = std::string;
using PointKey = std::string;

ImageKey make_image_key(const std::string& reconstruction_id, int image_id);
PointKey make_point_key(const std::string& reconstruction_id, std::int64_t point3d_id);

struct PointObservation {
    ImageKey image;
    Pixel xy;
};

// Immutable multi-reconstruction observation index. Built once, shared
// read-only afterwards.
class TrackIndex {
public:
    static TrackIndex build(const std::vector<Reconstruction>& recs);

    bool has_image(const ImageKey& image) const { return by_image_.count(image) != 0; }

    const std::set<PointKey>& points_of(const ImageKey& image) const;
    const std::vector<PointObservation>& observations_of(const PointKey& point) const;

    // |points_of(a) ∩ points_of(b)|; symmetric, 0 for unindexed pairs.
    std::size_t shared_keypoints(const ImageKey& a, const ImageKey& b) const;

    // |A∩B| / |A∪B| over observed point sets; 0 when the union is empty.
    double keypoint_iou(const ImageKey& a, const ImageKey& b) const;

    const std::map<std::pair<ImageKey, ImageKey>, std::size_t>& pair_counts() const {
        return pair_counts_;
    }
    const std::map<ImageKey, std::set<PointKey>>& by_image() const { return by_image_; }

    // Landmark and image-name lookup, resolved at build time from the
    // reconstructions' metadata.
    const std::string& landmark_of(const ImageKey& image) const;
    // Maps (reconstruction_id, image name) to the image key, or empty string.
    ImageKey find_image(const std::string& reconstruction_id, const std::string& name) const;

    const std::vector<std::string>& reconstruction_ids() const { return reconstruction_ids_; }
    const std::string& reconstruction_of(const PointKey& point) const;

private:
    std::map<ImageKey, std::set<PointKey>> by_image_;
    std::map<PointKey, std::vector<PointObservation>> by_point_;
    std::map<std::pair<ImageKey, ImageKey>, std::size_t> pair_counts_;
    std::map<ImageKey, std::string> landmark_by_image_;
    std::map<std::string, ImageKey> image_by_name_;
    std::map<PointKey, std::string> rec_by_point_;
    std::vector<std::string> reconstruction_ids_;
};

}  // namespace babelminer::sfm
