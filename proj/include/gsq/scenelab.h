#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gsq/gauss.h"

namespace gsq {

// Parameters of one simulated appearance change: a rotation of RGB colors
// about `color_axis` plus a directional relighting with per-channel gains.
struct ChangeSpec {
    Vec3 color_axis{0.0, 0.0, 1.0}; // unit
    double color_angle = 0.0;       // radians
    Vec3 light_dir{0.0, 0.0, 1.0};  // unit
    Vec3 light_color{1.0, 1.0, 1.0}; // gains > 0
    double ambient = 0.3;
};

enum class Complexity { Tiny, Small };

// Deterministic procedural scene: 3-10 primitive shells (ellipsoid, box,
// torus) sampled into surface-aligned Gaussians inside the unit cube.
// Tiny stays within 200 Gaussians, Small within 500.
Scene gen_scene(uint64_t seed, Complexity complexity);

// Appearance-only change: colors are rotated about the axis, then scaled by
// light_color * min(1, max(0, n . light_dir) + ambient) using the Gaussian's
// shortest-scale principal axis as the normal proxy. Geometry attributes are
// untouched.
Scene simulate_change(const Scene& scene, const ChangeSpec& spec);

// Normal proxy used by the relighting term (also exposed for tests).
Vec3 normal_proxy(const Gaussian& g);

// Ring of cameras: azimuths i*360/n at fixed elevation, looking at `target`.
std::vector<Camera> sample_cameras(int n, double radius, const Vec3& target,
                                   double elevation_deg = 20.0, double fov_y_deg = 45.0,
                                   int width = 64, int height = 64);

struct SceneSpec {
    std::string id;
    uint64_t seed = 0;
    Complexity complexity = Complexity::Tiny;
    ChangeSpec change;
    int n_condition_images = 1;
};

struct DatasetSplit {
    uint64_t master_seed = 0;
    std::vector<SceneSpec> train;
    std::vector<SceneSpec> test;
};

// Seeded dataset assembly: disjoint train/test seeds, random change specs,
// conditioning-image counts drawn uniformly from {1..6}.
DatasetSplit build_dataset(int n_train, int n_test, uint64_t master_seed,
                           Complexity complexity = Complexity::Tiny);

// Line-oriented manifest (one scene per line), human-diffable.
void write_manifest(const DatasetSplit& split, const std::string& path);
DatasetSplit read_manifest(const std::string& path);

// Materializes the two states of one scene.
Scene archived_scene(const SceneSpec& spec);
Scene changed_scene(const SceneSpec& spec);

} // namespace gsq
