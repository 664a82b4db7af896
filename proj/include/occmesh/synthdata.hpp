#pragma once

#include <Eigen/Core>
#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "occmesh/tensor.hpp"

// Deterministic occluded articulated-motion scenes: a 14-joint stick body
// with 32 surface stations, optional distractor body, moving rectangular
// occluders, and a weak-perspective camera. Units are millimetres in 3D and
// pixels in 2D.
namespace occmesh::synth {

struct SceneSpec {
    Index joints = 14;
    Index vertices = 32;
    Index frames = 8;
    Index image_size = 64;
    double occlusion_level = 0.5;  // in [0, 1]
    bool distractor = true;
    double fps = 30.0;
    // Scales every joint-angle amplitude.
    double motion_scale = 1.0;
    // Sinusoid frequency range, Hz.
    double freq_min = 0.5;
    double freq_max = 2.5;
    std::uint64_t seed = 0;

    void validate() const;
};

struct Camera {
    double s = 1.0;
    double tx = 0.0;
    double ty = 0.0;
};

// Fixed kinematic tree. Joint order: r_ankle, r_knee, r_hip, l_hip, l_knee,
// l_ankle, r_wrist, r_elbow, r_shoulder, l_shoulder, l_elbow, l_wrist, neck,
// head_top. The neck is the root.
struct Skeleton {
    std::vector<int> parent;                // -1 for the root
    std::vector<Eigen::Vector3d> offsets;   // rest offset from the parent, mm
    std::vector<std::array<int, 2>> bones;  // (parent, child)

    static const Skeleton& standard();
    double bone_length(std::size_t bone) const;
};

struct BodySequence {
    Index frames = 0;
    Index joints = 0;
    Index vertices = 0;
    std::vector<double> joints3d;    // [T, K, 3]
    std::vector<double> vertices3d;  // [T, V, 3]
    std::vector<double> joints2d;    // [T, K, 2]
    std::vector<double> camera;      // [T, 3]
    std::vector<double> visibility;  // [T, K], 1 visible / 0 occluded
};

struct Occluder {
    double cx = 0.0, cy = 0.0;  // centre at t = 0, px
    double vx = 0.0, vy = 0.0;  // px per frame
    double half_w = 0.0, half_h = 0.0;

    // Whether the pixel with integer coordinates (col, row) is covered at t.
    bool covers(Index col, Index row, Index t) const;
};

struct Scene {
    BodySequence target;
    std::optional<BodySequence> distractor;
    std::vector<Occluder> occluders;
    Camera camera;
};

struct FrameImage {
    Index size = 0;
    std::vector<double> pixels;  // [1, size, size], values in [0, 1]
};

// One dataset entry: ground truth plus rendered frames.
struct Sample {
    BodySequence body;
    Index image_size = 0;
    std::vector<double> images;  // [T, 1, Hi, Wi]
};

Camera default_camera(Index image_size);

// Rest pose (all local rotations identity) at the nominal root position:
// (joints + vertices) x 3 values, joints first.
std::vector<double> rest_template(const SceneSpec& spec);

// Keyed by (spec.seed, sequence_index); visibility is filled in from the
// occluders.
Scene sample_scene(const SceneSpec& spec, Index sequence_index);

// (u, v) = s * (x, y) + (tx, ty) for each joint; joints3d holds K x 3.
std::vector<double> project_joints(std::span<const double> joints3d, const Camera& camera);

// Bodies drawn as anti-aliased thick bones (target 0.8 over distractor 0.6)
// on a zero background, occluders filled with 1.0 last.
FrameImage rasterize_frame(const Scene& scene, Index t, const SceneSpec& spec);

Sample generate_sample(const SceneSpec& spec, Index sequence_index);
std::vector<Sample> generate_dataset(const SceneSpec& spec, Index count, Index first_index = 0);

// Dataset container: "RMCD", u32 version, u32 count, then per sequence
// u32 T, K, V, Hi, Wi followed by f64 images, joints3d, vertices3d, joints2d,
// camera and visibility. Little-endian.
inline constexpr std::uint32_t kDatasetVersion = 1;

class DatasetError : public std::runtime_error {
public:
    enum class Kind { Io, BadMagic, VersionMismatch, Truncated, Invalid };
    DatasetError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    Kind kind() const { return kind_; }

private:
    Kind kind_;
};

void write_dataset(const std::string& path, std::span<const Sample> samples);
std::vector<Sample> read_dataset(const std::string& path);

}  // namespace occmesh::synth
