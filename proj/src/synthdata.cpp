#include "occmesh/synthdata.hpp"

#include <Eigen/Geometry>
#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include "occmesh/rng.hpp"

namespace occmesh::synth {

namespace {

enum : std::uint64_t { kStreamTarget = 1, kStreamDistractor = 2, kStreamPlacement = 3, kStreamOccluders = 4 };

constexpr double kTargetIntensity = 0.8;
constexpr double kDistractorIntensity = 0.6;
constexpr double kLimbRadius = 55.0;  // mm
constexpr double kNominalRootY = -590.0;

// Joints in parent-before-child order.
constexpr int kFkOrder[] = {12, 13, 8, 7, 6, 9, 10, 11, 2, 1, 0, 3, 4, 5};

// Per-joint amplitude limits (rad) for the three local Euler angles.
constexpr double kAmplitude[14][3] = {
    {0.0, 0.0, 0.0},    // r_ankle
    {0.7, 0.0, 0.0},    // r_knee
    {0.5, 0.2, 0.25},   // r_hip
    {0.5, 0.2, 0.25},   // l_hip
    {0.7, 0.0, 0.0},    // l_knee
    {0.0, 0.0, 0.0},    // l_ankle
    {0.0, 0.0, 0.0},    // r_wrist
    {0.9, 0.3, 0.3},    // r_elbow
    {0.8, 0.5, 0.8},    // r_shoulder
    {0.8, 0.5, 0.8},    // l_shoulder
    {0.9, 0.3, 0.3},    // l_elbow
    {0.0, 0.0, 0.0},    // l_wrist
    {0.15, 0.35, 0.1},  // neck (global orientation)
    {0.0, 0.0, 0.0},    // head_top
};

struct Sinusoid {
    double amplitude, omega, phase;
};

struct MotionParams {
    // [joint][axis] -> up to three terms
    std::vector<std::array<std::vector<Sinusoid>, 3>> angles;
    Eigen::Vector3d root0;
    Eigen::Vector3d drift;  // mm per frame
};

MotionParams sample_motion(const SceneSpec& spec, KeyedRng& rng, const Eigen::Vector3d& root0) {
    MotionParams m;
    m.angles.resize(14);
    for (int j = 0; j < 14; ++j) {
        for (int a = 0; a < 3; ++a) {
            const double limit = kAmplitude[j][a] * spec.motion_scale;
            if (limit == 0.0) continue;
            const int terms = 1 + static_cast<int>(rng.below(3));
            for (int k = 0; k < terms; ++k) {
                Sinusoid s;
                s.amplitude = rng.uniform(0.3, 1.0) * limit / terms;
                s.omega = 2.0 * std::numbers::pi * rng.uniform(spec.freq_min, spec.freq_max);
                s.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
                m.angles[j][a].push_back(s);
            }
        }
    }
    m.root0 = root0;
    m.drift = Eigen::Vector3d(rng.uniform(-12.0, 12.0), rng.uniform(-3.0, 3.0), rng.uniform(-8.0, 8.0));
    return m;
}

Eigen::Matrix3d local_rotation(const MotionParams& m, int joint, double seconds) {
    double e[3] = {0.0, 0.0, 0.0};
    for (int a = 0; a < 3; ++a) {
        for (const auto& s : m.angles[joint][a]) e[a] += s.amplitude * std::sin(s.omega * seconds + s.phase);
    }
    return (Eigen::AngleAxisd(e[0], Eigen::Vector3d::UnitX()) * Eigen::AngleAxisd(e[1], Eigen::Vector3d::UnitY()) *
            Eigen::AngleAxisd(e[2], Eigen::Vector3d::UnitZ()))
        .toRotationMatrix();
}

struct Station {
    int bone;
    double alpha;
    Eigen::Vector3d radial;  // rest-frame offset perpendicular to the bone
};

std::vector<Station> surface_stations(Index vertices) {
    const auto& sk = Skeleton::standard();
    const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
    constexpr double alphas[] = {0.25, 0.75, 0.5};
    const int bones = static_cast<int>(sk.bones.size());
    std::vector<Station> out;
    for (Index v = 0; v < vertices; ++v) {
        Station st;
        st.bone = static_cast<int>(v % bones);
        st.alpha = alphas[(v / bones) % 3];
        const Eigen::Vector3d d = sk.offsets[sk.bones[st.bone][1]].normalized();
        Eigen::Vector3d e1 = d.cross(Eigen::Vector3d::UnitZ());
        if (e1.norm() < 1e-6) e1 = d.cross(Eigen::Vector3d::UnitX());
        e1.normalize();
        const Eigen::Vector3d e2 = d.cross(e1);
        const double phi = golden * static_cast<double>(v);
        st.radial = kLimbRadius * (std::cos(phi) * e1 + std::sin(phi) * e2);
        out.push_back(st);
    }
    return out;
}

// Forward kinematics for frame t; writes K x 3 joints and V x 3 vertices.
void pose_frame(const MotionParams& m, Index t, double fps, const std::vector<Station>& stations, double* joints,
                double* verts) {
    const auto& sk = Skeleton::standard();
    const double seconds = static_cast<double>(t) / fps;
    std::array<Eigen::Matrix3d, 14> global;
    std::array<Eigen::Vector3d, 14> pos;
    for (int j : kFkOrder) {
        const int p = sk.parent[j];
        const Eigen::Matrix3d local = local_rotation(m, j, seconds);
        if (p < 0) {
            pos[j] = m.root0 + m.drift * static_cast<double>(t);
            global[j] = local;
        } else {
            pos[j] = pos[p] + global[p] * sk.offsets[j];
            global[j] = global[p] * local;
        }
    }
    for (int j = 0; j < 14; ++j) {
        for (int a = 0; a < 3; ++a) joints[j * 3 + a] = pos[j](a);
    }
    for (std::size_t v = 0; v < stations.size(); ++v) {
        const auto& st = stations[v];
        const int p = sk.bones[st.bone][0];
        const int c = sk.bones[st.bone][1];
        const Eigen::Vector3d x = pos[p] + global[p] * (st.alpha * sk.offsets[c] + st.radial);
        for (int a = 0; a < 3; ++a) verts[v * 3 + a] = x(a);
    }
}

BodySequence make_body(const SceneSpec& spec, const MotionParams& m, const Camera& cam) {
    BodySequence b;
    b.frames = spec.frames;
    b.joints = spec.joints;
    b.vertices = spec.vertices;
    const auto stations = surface_stations(spec.vertices);
    const auto T = static_cast<std::size_t>(spec.frames);
    const auto K = static_cast<std::size_t>(spec.joints);
    const auto V = static_cast<std::size_t>(spec.vertices);
    b.joints3d.resize(T * K * 3);
    b.vertices3d.resize(T * V * 3);
    b.joints2d.resize(T * K * 2);
    b.camera.resize(T * 3);
    b.visibility.assign(T * K, 1.0);
    for (std::size_t t = 0; t < T; ++t) {
        double* j = b.joints3d.data() + t * K * 3;
        pose_frame(m, static_cast<Index>(t), spec.fps, stations, j, b.vertices3d.data() + t * V * 3);
        const auto uv = project_joints({j, K * 3}, cam);
        std::copy(uv.begin(), uv.end(), b.joints2d.begin() + static_cast<std::ptrdiff_t>(t * K * 2));
        b.camera[t * 3 + 0] = cam.s;
        b.camera[t * 3 + 1] = cam.tx;
        b.camera[t * 3 + 2] = cam.ty;
    }
    return b;
}

void mark_visibility(BodySequence& b, const std::vector<Occluder>& occluders) {
    const auto K = static_cast<std::size_t>(b.joints);
    for (Index t = 0; t < b.frames; ++t) {
        for (std::size_t k = 0; k < K; ++k) {
            const std::size_t i = static_cast<std::size_t>(t) * K + k;
            const auto col = static_cast<Index>(std::floor(b.joints2d[i * 2]));
            const auto row = static_cast<Index>(std::floor(b.joints2d[i * 2 + 1]));
            bool hidden = false;
            for (const auto& o : occluders) hidden = hidden || o.covers(col, row, t);
            b.visibility[i] = hidden ? 0.0 : 1.0;
        }
    }
}

double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
    const double dx = bx - ax, dy = by - ay;
    const double len2 = dx * dx + dy * dy;
    double u = len2 > 0.0 ? ((px - ax) * dx + (py - ay) * dy) / len2 : 0.0;
    u = std::clamp(u, 0.0, 1.0);
    return std::hypot(px - (ax + u * dx), py - (ay + u * dy));
}

void draw_body(std::vector<double>& img, Index size, const BodySequence& b, Index t, double scale, double intensity) {
    const auto& sk = Skeleton::standard();
    const double half = std::max(0.5, kLimbRadius * scale);
    const double* uv = b.joints2d.data() + static_cast<std::size_t>(t * b.joints * 2);
    for (const auto& bone : sk.bones) {
        const double ax = uv[bone[0] * 2], ay = uv[bone[0] * 2 + 1];
        const double bx = uv[bone[1] * 2], by = uv[bone[1] * 2 + 1];
        const double reach = half + 1.0;
        const auto c0 = std::max<Index>(0, static_cast<Index>(std::floor(std::min(ax, bx) - reach)));
        const auto c1 = std::min<Index>(size - 1, static_cast<Index>(std::ceil(std::max(ax, bx) + reach)));
        const auto r0 = std::max<Index>(0, static_cast<Index>(std::floor(std::min(ay, by) - reach)));
        const auto r1 = std::min<Index>(size - 1, static_cast<Index>(std::ceil(std::max(ay, by) + reach)));
        for (Index r = r0; r <= r1; ++r) {
            for (Index c = c0; c <= c1; ++c) {
                const double d = segment_distance(c + 0.5, r + 0.5, ax, ay, bx, by);
                const double cover = std::clamp(half + 0.5 - d, 0.0, 1.0);
                if (cover <= 0.0) continue;
                double& px = img[static_cast<std::size_t>(r * size + c)];
                px = px * (1.0 - cover) + intensity * cover;
            }
        }
    }
}

}  // namespace

void SceneSpec::validate() const {
    if (joints != 14) throw std::invalid_argument("SceneSpec: the skeleton has 14 joints, got " + std::to_string(joints));
    if (vertices < 1) throw std::invalid_argument("SceneSpec: vertices must be positive");
    if (frames < 1) throw std::invalid_argument("SceneSpec: frames must be positive");
    if (image_size < 4) throw std::invalid_argument("SceneSpec: image_size must be at least 4");
    if (!(occlusion_level >= 0.0 && occlusion_level <= 1.0)) {
        throw std::invalid_argument("SceneSpec: occlusion_level must lie in [0, 1]");
    }
    if (!(fps > 0.0)) throw std::invalid_argument("SceneSpec: fps must be positive");
    if (!(motion_scale >= 0.0)) throw std::invalid_argument("SceneSpec: motion_scale must be non-negative");
    if (!(freq_min > 0.0 && freq_max >= freq_min)) throw std::invalid_argument("SceneSpec: bad frequency range");
}

const Skeleton& Skeleton::standard() {
    static const Skeleton sk = [] {
        Skeleton s;
        s.parent = {1, 2, 12, 12, 3, 4, 7, 8, 12, 12, 9, 10, -1, 12};
        s.offsets = {
            {0, 420, 0},   {0, 430, 0},   {-100, 560, 0}, {100, 560, 0}, {0, 430, 0},
            {0, 420, 0},   {0, 260, 0},   {0, 290, 0},    {-190, 20, 0}, {190, 20, 0},
            {0, 290, 0},   {0, 260, 0},   {0, 0, 0},      {0, -230, 0},
        };
        for (int j : kFkOrder) {
            if (s.parent[j] >= 0) s.bones.push_back({s.parent[j], j});
        }
        return s;
    }();
    return sk;
}

double Skeleton::bone_length(std::size_t bone) const { return offsets[bones.at(bone)[1]].norm(); }

bool Occluder::covers(Index col, Index row, Index t) const {
    const double x = static_cast<double>(col) + 0.5 - (cx + vx * static_cast<double>(t));
    const double y = static_cast<double>(row) + 0.5 - (cy + vy * static_cast<double>(t));
    return std::abs(x) <= half_w && std::abs(y) <= half_h;
}

Camera default_camera(Index image_size) {
    const double size = static_cast<double>(image_size);
    return {size / 2200.0, size / 2.0, size / 2.0};
}

std::vector<double> rest_template(const SceneSpec& spec) {
    spec.validate();
    MotionParams rest;
    rest.angles.resize(14);
    rest.root0 = Eigen::Vector3d(0.0, kNominalRootY, 0.0);
    rest.drift.setZero();
    const auto stations = surface_stations(spec.vertices);
    std::vector<double> out(static_cast<std::size_t>((spec.joints + spec.vertices) * 3));
    pose_frame(rest, 0, spec.fps, stations, out.data(), out.data() + spec.joints * 3);
    return out;
}

std::vector<double> project_joints(std::span<const double> joints3d, const Camera& camera) {
    if (joints3d.size() % 3 != 0) throw std::invalid_argument("project_joints: expected K x 3 values");
    const std::size_t K = joints3d.size() / 3;
    std::vector<double> uv(K * 2);
    for (std::size_t k = 0; k < K; ++k) {
        uv[k * 2] = camera.s * joints3d[k * 3] + camera.tx;
        uv[k * 2 + 1] = camera.s * joints3d[k * 3 + 1] + camera.ty;
    }
    return uv;
}

Scene sample_scene(const SceneSpec& spec, Index sequence_index) {
    spec.validate();
    const auto idx = static_cast<std::uint64_t>(sequence_index);
    Scene scene;
    scene.camera = default_camera(spec.image_size);

    KeyedRng place({spec.seed, idx, kStreamPlacement});
    const Eigen::Vector3d root(place.uniform(-250.0, 250.0), kNominalRootY + place.uniform(-60.0, 60.0),
                               place.uniform(-100.0, 100.0));
    KeyedRng target_rng({spec.seed, idx, kStreamTarget});
    scene.target = make_body(spec, sample_motion(spec, target_rng, root), scene.camera);

    if (spec.distractor) {
        const double side = place.uniform() < 0.5 ? -1.0 : 1.0;
        const Eigen::Vector3d droot = root + Eigen::Vector3d(side * place.uniform(350.0, 700.0),
                                                             place.uniform(-80.0, 80.0), place.uniform(200.0, 500.0));
        KeyedRng distractor_rng({spec.seed, idx, kStreamDistractor});
        scene.distractor = make_body(spec, sample_motion(spec, distractor_rng, droot), scene.camera);
    }

    const auto count = static_cast<Index>(std::ceil(3.0 * spec.occlusion_level - 1e-12));
    KeyedRng occ({spec.seed, idx, kStreamOccluders});
    const double size = static_cast<double>(spec.image_size);
    for (Index i = 0; i < count; ++i) {
        Occluder o;
        const auto anchor = static_cast<std::size_t>(occ.below(static_cast<std::uint64_t>(spec.joints)));
        o.cx = scene.target.joints2d[anchor * 2] + occ.uniform(-0.12, 0.12) * size;
        o.cy = scene.target.joints2d[anchor * 2 + 1] + occ.uniform(-0.12, 0.12) * size;
        o.vx = occ.uniform(-1.5, 1.5) * size / 64.0;
        o.vy = occ.uniform(-1.0, 1.0) * size / 64.0;
        const double extent = size * (0.04 + 0.10 * spec.occlusion_level);
        o.half_w = extent * occ.uniform(0.6, 1.4);
        o.half_h = extent * occ.uniform(0.6, 1.4);
        scene.occluders.push_back(o);
    }
    mark_visibility(scene.target, scene.occluders);
    if (scene.distractor) mark_visibility(*scene.distractor, scene.occluders);
    return scene;
}

FrameImage rasterize_frame(const Scene& scene, Index t, const SceneSpec& spec) {
    const Index size = spec.image_size;
    FrameImage img;
    img.size = size;
    img.pixels.assign(static_cast<std::size_t>(size * size), 0.0);
    if (scene.distractor && t < scene.distractor->frames) {
        draw_body(img.pixels, size, *scene.distractor, t, scene.camera.s, kDistractorIntensity);
    }
    if (t < scene.target.frames) draw_body(img.pixels, size, scene.target, t, scene.camera.s, kTargetIntensity);
    for (const auto& o : scene.occluders) {
        for (Index r = 0; r < size; ++r) {
            for (Index c = 0; c < size; ++c) {
                if (o.covers(c, r, t)) img.pixels[static_cast<std::size_t>(r * size + c)] = 1.0;
            }
        }
    }
    for (auto& p : img.pixels) p = std::clamp(p, 0.0, 1.0);
    return img;
}

Sample generate_sample(const SceneSpec& spec, Index sequence_index) {
    const Scene scene = sample_scene(spec, sequence_index);
    Sample s;
    s.body = scene.target;
    s.image_size = spec.image_size;
    const auto frame = static_cast<std::size_t>(spec.image_size * spec.image_size);
    s.images.resize(static_cast<std::size_t>(spec.frames) * frame);
    for (Index t = 0; t < spec.frames; ++t) {
        const auto img = rasterize_frame(scene, t, spec);
        std::copy(img.pixels.begin(), img.pixels.end(), s.images.begin() + static_cast<std::ptrdiff_t>(t * frame));
    }
    return s;
}

std::vector<Sample> generate_dataset(const SceneSpec& spec, Index count, Index first_index) {
    std::vector<Sample> out;
    out.reserve(static_cast<std::size_t>(std::max<Index>(count, 0)));
    for (Index i = 0; i < count; ++i) out.push_back(generate_sample(spec, first_index + i));
    return out;
}

// ---- dataset container ----

static_assert(std::endian::native == std::endian::little, "dataset I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'R', 'M', 'C', 'D'};

void put_u32(std::ofstream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), sizeof v); }

void put_f64(std::ofstream& out, const std::vector<double>& v, std::size_t expected, const char* name) {
    if (v.size() != expected) {
        throw DatasetError(DatasetError::Kind::Invalid, std::string("write_dataset: ") + name + " has " +
                                                            std::to_string(v.size()) + " values, expected " +
                                                            std::to_string(expected));
    }
    out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
}

class Reader {
public:
    explicit Reader(const std::string& path) : in_(path, std::ios::binary), path_(path) {
        if (!in_) throw DatasetError(DatasetError::Kind::Io, "read_dataset: cannot open " + path);
    }

    void bytes(void* dst, std::size_t n, const char* what) {
        in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in_.gcount()) != n) {
            throw DatasetError(DatasetError::Kind::Truncated,
                               "read_dataset: " + path_ + " truncated while reading " + what);
        }
    }
    std::uint32_t u32(const char* what) {
        std::uint32_t v = 0;
        bytes(&v, sizeof v, what);
        return v;
    }
    std::vector<double> f64(std::size_t n, const char* what) {
        std::vector<double> v(n);
        bytes(v.data(), n * sizeof(double), what);
        return v;
    }
    bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }

private:
    std::ifstream in_;
    std::string path_;
};

}  // namespace

void write_dataset(const std::string& path, std::span<const Sample> samples) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DatasetError(DatasetError::Kind::Io, "write_dataset: cannot open " + path);
    out.write(kMagic, 4);
    put_u32(out, kDatasetVersion);
    put_u32(out, static_cast<std::uint32_t>(samples.size()));
    for (const auto& s : samples) {
        const auto T = static_cast<std::size_t>(s.body.frames);
        const auto K = static_cast<std::size_t>(s.body.joints);
        const auto V = static_cast<std::size_t>(s.body.vertices);
        const auto H = static_cast<std::size_t>(s.image_size);
        for (std::size_t d : {T, K, V, H, H}) put_u32(out, static_cast<std::uint32_t>(d));
        put_f64(out, s.images, T * H * H, "images");
        put_f64(out, s.body.joints3d, T * K * 3, "joints3d");
        put_f64(out, s.body.vertices3d, T * V * 3, "vertices3d");
        put_f64(out, s.body.joints2d, T * K * 2, "joints2d");
        put_f64(out, s.body.camera, T * 3, "camera");
        put_f64(out, s.body.visibility, T * K, "visibility");
    }
    out.flush();
    if (!out) throw DatasetError(DatasetError::Kind::Io, "write_dataset: write failed for " + path);
}

std::vector<Sample> read_dataset(const std::string& path) {
    Reader in(path);
    char magic[4];
    in.bytes(magic, 4, "magic");
    if (std::memcmp(magic, kMagic, 4) != 0) {
        throw DatasetError(DatasetError::Kind::BadMagic, "read_dataset: bad magic in " + path);
    }
    const std::uint32_t version = in.u32("version");
    if (version != kDatasetVersion) {
        throw DatasetError(DatasetError::Kind::VersionMismatch,
                           "read_dataset: version mismatch in " + path + ": file " + std::to_string(version) +
                               ", supported " + std::to_string(kDatasetVersion));
    }
    const std::uint32_t count = in.u32("sequence count");
    std::vector<Sample> out;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::size_t T = in.u32("header"), K = in.u32("header"), V = in.u32("header");
        const std::size_t H = in.u32("header"), W = in.u32("header");
        if (H != W) throw DatasetError(DatasetError::Kind::Invalid, "read_dataset: non-square images in " + path);
        Sample s;
        s.image_size = static_cast<Index>(H);
        s.body.frames = static_cast<Index>(T);
        s.body.joints = static_cast<Index>(K);
        s.body.vertices = static_cast<Index>(V);
        s.images = in.f64(T * H * W, "images");
        s.body.joints3d = in.f64(T * K * 3, "joints3d");
        s.body.vertices3d = in.f64(T * V * 3, "vertices3d");
        s.body.joints2d = in.f64(T * K * 2, "joints2d");
        s.body.camera = in.f64(T * 3, "camera");
        s.body.visibility = in.f64(T * K, "visibility");
        out.push_back(std::move(s));
    }
    if (!in.at_end()) throw DatasetError(DatasetError::Kind::Invalid, "read_dataset: trailing bytes in " + path);
    return out;
}

}  // namespace occmesh::synth
