#include "gsq/scenelab.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

namespace gsq {

namespace {

using Rng = std::mt19937_64;

double uniform(Rng& rng, double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

Vec3 random_unit(Rng& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    Vec3 v;
    do {
        v = Vec3(n(rng), n(rng), n(rng));
    } while (v.norm() < 1e-6);
    return v.normalized();
}

Mat3 random_rotation(Rng& rng) {
    const Vec3 axis = random_unit(rng);
    const double angle = uniform(rng, 0.0, 2.0 * M_PI);
    return Eigen::AngleAxisd(angle, axis).toRotationMatrix();
}

Vec4 rotmat_to_quat(const Mat3& r) {
    Eigen::Quaterniond q(r);
    return quat_normalize(Vec4(q.w(), q.x(), q.y(), q.z()));
}

struct SurfaceSample {
    Vec3 point;
    Vec3 normal;
};

enum class PrimitiveKind { Ellipsoid, Box, Torus };

struct Primitive {
    PrimitiveKind kind;
    Vec3 center;
    Vec3 half_extent; // for torus: x = major radius, y = minor radius
    Mat3 orient;
    Vec3 base_color;
    int count = 0;
};

SurfaceSample sample_surface(const Primitive& prim, Rng& rng) {
    SurfaceSample s;
    switch (prim.kind) {
        case PrimitiveKind::Ellipsoid: {
            const Vec3 d = random_unit(rng);
            s.point = prim.center + prim.orient * d.cwiseProduct(prim.half_extent);
            // Gradient of the implicit ellipsoid at the surface point.
            s.normal = (prim.orient * d.cwiseQuotient(prim.half_extent)).normalized();
            break;
        }
        case PrimitiveKind::Box: {
            const Vec3& h = prim.half_extent;
            const double areas[3] = {h.y() * h.z(), h.x() * h.z(), h.x() * h.y()};
            const double total = areas[0] + areas[1] + areas[2];
            double pick = uniform(rng, 0.0, total);
            int axis = 0;
            for (; axis < 2; ++axis) {
                if (pick < areas[axis]) break;
                pick -= areas[axis];
            }
            const double sign = uniform(rng, 0.0, 1.0) < 0.5 ? -1.0 : 1.0;
            Vec3 local;
            local[axis] = sign * h[axis];
            const int u = (axis + 1) % 3, v = (axis + 2) % 3;
            local[u] = uniform(rng, -h[u], h[u]);
            local[v] = uniform(rng, -h[v], h[v]);
            s.point = prim.center + prim.orient * local;
            Vec3 n = Vec3::Zero();
            n[axis] = sign;
            s.normal = prim.orient * n;
            break;
        }
        case PrimitiveKind::Torus: {
            const double major = prim.half_extent.x();
            const double minor = prim.half_extent.y();
            const double u = uniform(rng, 0.0, 2.0 * M_PI);
            double v;
            // Rejection sampling for uniform area on the torus.
            for (;;) {
                v = uniform(rng, 0.0, 2.0 * M_PI);
                const double accept = (major + minor * std::cos(v)) / (major + minor);
                if (uniform(rng, 0.0, 1.0) <= accept) break;
            }
            Vec3 local((major + minor * std::cos(v)) * std::cos(u),
                       (major + minor * std::cos(v)) * std::sin(u), minor * std::sin(v));
            Vec3 n(std::cos(v) * std::cos(u), std::cos(v) * std::sin(u), std::sin(v));
            s.point = prim.center + prim.orient * local;
            s.normal = prim.orient * n;
            break;
        }
    }
    return s;
}

// Rotation taking +z to `normal` with a roll about it.
Mat3 frame_from_normal(const Vec3& normal, double roll) {
    Vec3 helper = std::abs(normal.z()) < 0.9 ? Vec3(0, 0, 1) : Vec3(1, 0, 0);
    const Vec3 t1 = helper.cross(normal).normalized();
    const Vec3 t2 = normal.cross(t1);
    const Vec3 a = std::cos(roll) * t1 + std::sin(roll) * t2;
    const Vec3 b = normal.cross(a);
    Mat3 r;
    r.col(0) = a;
    r.col(1) = b;
    r.col(2) = normal;
    return r;
}

} // namespace

Scene gen_scene(uint64_t seed, Complexity complexity) {
    Rng rng(seed);
    const bool tiny = complexity == Complexity::Tiny;
    const int budget = tiny ? static_cast<int>(uniform(rng, 50, 200))
                            : static_cast<int>(uniform(rng, 150, 500));
    const int n_prims =
        std::clamp(static_cast<int>(uniform(rng, 3, tiny ? 6 : 10)), 3, 10);

    std::vector<Primitive> prims;
    int remaining = budget;
    for (int i = 0; i < n_prims; ++i) {
        Primitive p;
        const double r = uniform(rng, 0.0, 1.0);
        p.kind = r < 0.4 ? PrimitiveKind::Ellipsoid
                         : (r < 0.75 ? PrimitiveKind::Box : PrimitiveKind::Torus);
        p.center = Vec3(uniform(rng, 0.2, 0.8), uniform(rng, 0.2, 0.8), uniform(rng, 0.2, 0.8));
        if (p.kind == PrimitiveKind::Torus) {
            const double major = uniform(rng, 0.06, 0.15);
            p.half_extent = Vec3(major, uniform(rng, 0.25, 0.5) * major, 0.0);
        } else {
            p.half_extent = Vec3(uniform(rng, 0.05, 0.18), uniform(rng, 0.05, 0.18),
                                 uniform(rng, 0.05, 0.18));
        }
        p.orient = random_rotation(rng);
        p.base_color =
            Vec3(uniform(rng, 0.15, 0.85), uniform(rng, 0.15, 0.85), uniform(rng, 0.15, 0.85));
        p.count = std::max(8, remaining / (n_prims - i));
        p.count = std::min(p.count, remaining);
        remaining -= p.count;
        prims.push_back(p);
        if (remaining <= 0) break;
    }

    Scene scene;
    scene.bounds.lo = Vec3::Zero();
    scene.bounds.hi = Vec3::Ones();
    for (const Primitive& prim : prims) {
        // Tangential footprint sized so the shell is roughly covered.
        const double span = prim.kind == PrimitiveKind::Torus
                                ? prim.half_extent.x() + prim.half_extent.y()
                                : prim.half_extent.maxCoeff();
        const double s_t =
            std::clamp(2.2 * span / std::sqrt(static_cast<double>(prim.count)), 0.004, 0.03);
        for (int i = 0; i < prim.count; ++i) {
            const SurfaceSample ss = sample_surface(prim, rng);
            Gaussian g;
            const double jitter_t = uniform(rng, 0.8, 1.25);
            const double s_n = 0.25 * s_t;
            g.scale = Vec3(s_t * jitter_t, s_t * uniform(rng, 0.8, 1.25), s_n);
            g.mu = (ss.point + ss.normal * uniform(rng, -0.2, 0.2) * s_n)
                       .cwiseMax(0.01)
                       .cwiseMin(0.99);
            g.rot = rotmat_to_quat(frame_from_normal(ss.normal, uniform(rng, 0.0, 2.0 * M_PI)));
            Vec3 color = prim.base_color + Vec3(uniform(rng, -0.08, 0.08),
                                                uniform(rng, -0.08, 0.08),
                                                uniform(rng, -0.08, 0.08));
            color = color.cwiseMax(0.05).cwiseMin(0.95);
            g.sh = color_to_sh_dc(color);
            g.opacity_logit = uniform(rng, 0.7, 2.5);
            scene.gaussians.push_back(std::move(g));
        }
    }
    return scene;
}

Vec3 normal_proxy(const Gaussian& g) {
    int axis = 0;
    for (int a = 1; a < 3; ++a)
        if (g.scale[a] < g.scale[axis]) axis = a;
    const Mat3 r = quat_to_rotmat(quat_normalize(g.rot));
    return r.col(axis);
}

namespace {

Vec3 rodrigues(const Vec3& v, const Vec3& axis, double angle) {
    const double c = std::cos(angle), s = std::sin(angle);
    return v * c + axis.cross(v) * s + axis * axis.dot(v) * (1.0 - c);
}

} // namespace

Scene simulate_change(const Scene& scene, const ChangeSpec& spec) {
    if (std::abs(spec.color_axis.norm() - 1.0) > 1e-9)
        throw PreconditionError("simulate_change: color_axis must be unit length");
    if (!(spec.light_color.minCoeff() > 0.0))
        throw PreconditionError("simulate_change: light gains must be positive");
    Scene out = scene;
    for (Gaussian& g : out.gaussians) {
        const Vec3 c0 = g.sh.head<3>() * kShC0 + Vec3::Constant(0.5);
        const Vec3 rotated = rodrigues(c0, spec.color_axis, spec.color_angle);
        const Vec3 n = normal_proxy(g);
        const double lambert =
            std::min(1.0, std::max(0.0, n.dot(spec.light_dir)) + spec.ambient);
        const Vec3 lit = rotated.cwiseProduct(spec.light_color * lambert);
        g.sh = color_to_sh_dc(lit.cwiseMax(0.0).cwiseMin(1.0));
    }
    return out;
}

std::vector<Camera> sample_cameras(int n, double radius, const Vec3& target, double elevation_deg,
                                   double fov_y_deg, int width, int height) {
    if (n < 1) throw PreconditionError("sample_cameras: n must be >= 1");
    std::vector<Camera> cams;
    cams.reserve(n);
    const double el = elevation_deg * M_PI / 180.0;
    for (int i = 0; i < n; ++i) {
        const double az = 2.0 * M_PI * static_cast<double>(i) / n;
        const Vec3 eye = target + radius * Vec3(std::cos(az) * std::cos(el),
                                                std::sin(az) * std::cos(el), std::sin(el));
        cams.push_back(Camera::look_at(eye, target, Vec3(0, 0, 1), fov_y_deg, width, height));
    }
    return cams;
}

namespace {

ChangeSpec random_change(Rng& rng) {
    ChangeSpec spec;
    spec.color_axis = random_unit(rng);
    const double mag = uniform(rng, 10.0, 75.0) * M_PI / 180.0;
    spec.color_angle = uniform(rng, 0.0, 1.0) < 0.5 ? -mag : mag;
    spec.light_dir = random_unit(rng);
    spec.light_color = Vec3(uniform(rng, 0.6, 1.3), uniform(rng, 0.6, 1.3), uniform(rng, 0.6, 1.3));
    return spec;
}

} // namespace

DatasetSplit build_dataset(int n_train, int n_test, uint64_t master_seed, Complexity complexity) {
    if (n_train < 1 || n_test < 1)
        throw PreconditionError("build_dataset: split sizes must be >= 1");
    DatasetSplit split;
    split.master_seed = master_seed;
    Rng rng(master_seed);
    std::set<uint64_t> used;
    auto fresh_seed = [&]() {
        for (;;) {
            const uint64_t s = rng();
            if (used.insert(s).second) return s;
        }
    };
    std::uniform_int_distribution<int> img_count(1, 6);
    for (int i = 0; i < n_train + n_test; ++i) {
        SceneSpec spec;
        const bool is_train = i < n_train;
        spec.id = (is_train ? "train" : "test") + std::to_string(is_train ? i : i - n_train);
        spec.seed = fresh_seed();
        spec.complexity = complexity;
        spec.change = random_change(rng);
        spec.n_condition_images = img_count(rng);
        (is_train ? split.train : split.test).push_back(std::move(spec));
    }
    return split;
}

namespace {

void write_scene_line(std::ostream& os, const std::string& role, const SceneSpec& s) {
    os << role << ' ' << s.id << ' ' << s.seed << ' '
       << (s.complexity == Complexity::Tiny ? "tiny" : "small") << ' '
       << s.change.color_axis.x() << ' ' << s.change.color_axis.y() << ' '
       << s.change.color_axis.z() << ' ' << s.change.color_angle << ' '
       << s.change.light_dir.x() << ' ' << s.change.light_dir.y() << ' '
       << s.change.light_dir.z() << ' ' << s.change.light_color.x() << ' '
       << s.change.light_color.y() << ' ' << s.change.light_color.z() << ' '
       << s.n_condition_images << '\n';
}

} // namespace

void write_manifest(const DatasetSplit& split, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw FormatError("write_manifest: cannot open " + path);
    os << "# gsq dataset manifest v1\n";
    os << "master_seed " << split.master_seed << "\n";
    os.precision(17);
    for (const SceneSpec& s : split.train) write_scene_line(os, "train", s);
    for (const SceneSpec& s : split.test) write_scene_line(os, "test", s);
}

DatasetSplit read_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw FormatError("read_manifest: cannot open " + path);
    DatasetSplit split;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        std::string tok;
        ls >> tok;
        if (tok == "master_seed") {
            ls >> split.master_seed;
            continue;
        }
        SceneSpec s;
        std::string complexity;
        ls >> s.id >> s.seed >> complexity >> s.change.color_axis.x() >>
            s.change.color_axis.y() >> s.change.color_axis.z() >> s.change.color_angle >>
            s.change.light_dir.x() >> s.change.light_dir.y() >> s.change.light_dir.z() >>
            s.change.light_color.x() >> s.change.light_color.y() >> s.change.light_color.z() >>
            s.n_condition_images;
        if (!ls) throw FormatError("read_manifest: malformed line: " + line);
        s.complexity = complexity == "small" ? Complexity::Small : Complexity::Tiny;
        if (tok == "train")
            split.train.push_back(std::move(s));
        else if (tok == "test")
            split.test.push_back(std::move(s));
        else
            throw FormatError("read_manifest: unknown role " + tok);
    }
    return split;
}

Scene archived_scene(const SceneSpec& spec) { return gen_scene(spec.seed, spec.complexity); }

Scene changed_scene(const SceneSpec& spec) {
    return simulate_change(archived_scene(spec), spec.change);
}

} // namespace gsq
