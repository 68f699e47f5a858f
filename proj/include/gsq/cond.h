#pragma once

#include <optional>
#include <vector>

#include "gsq/grid.h"
#include "gsq/nn.h"
#include "gsq/render.h"

namespace gsq {

// Fixed (non-trainable) per-level features: RGB, x/y central-difference
// gradients per channel, and a 3x3 local mean. 12 channels per pixel.
inline constexpr int kFixedFeatureDim = 12;
inline constexpr int kPyramidLevels = 3;

struct FeatureLevel {
    int width = 0;
    int height = 0;
    Eigen::MatrixXd fixed; // [H*W, 12], row-major pixels
};

struct FeaturePyramid {
    Camera cam;
    std::vector<FeatureLevel> levels; // level 0 at input resolution, halving
};

// Builds the fixed multi-scale features (level l+1 is a 2x2 box downsample of
// level l's image).
FeaturePyramid extract_feature_pyramid(const Image& img, const Camera& cam);

// The trainable pointwise stage: projects each level's fixed features to
// d_img channels on the tape. Returns one node per level.
std::vector<int> project_pyramid(nn::Graph& g, const FeaturePyramid& pyr, nn::Param& w,
                                 nn::Param& b);

struct ProjectedPoint {
    Vec2 pixel; // continuous pixel coordinates
    double depth;
};

// Pinhole projection; nullopt when behind the camera or outside the image
// rectangle.
std::optional<ProjectedPoint> project_point(const Vec3& p, const Camera& cam);

// Bilinear taps over texel centers with clamp-to-edge; returns up to 4
// (row-major index, weight) pairs for a [H*W, d] feature matrix.
std::vector<std::pair<int, double>> bilinear_taps(const Vec2& pixel, int width, int height);

// Per-(occupied cell, view) transmittance toward a spherical proxy of the
// cell, occluded by the proxies of strictly nearer occupied cells, then
// propagated inside each block: when any cell of a block clears `theta` the
// whole block adopts the block maximum for that view.
struct Visibility {
    Eigen::MatrixXd cell_view;  // [n_cells, n_views] in cell iteration order
    Eigen::MatrixXd block_view; // [n_blocks, n_views] max over the block's cells
};

Visibility estimate_visibility(const GridScene& gs, const std::vector<Camera>& cams,
                               int block_size = 4, double theta = 0.5);

// Visibility-weighted mean of bilinearly sampled per-view features for a set
// of world points. `feats[v]` is view v's [H*W, d] map at the given level
// dims. Out-of-view samples get weight 0; rows with no observation are zero
// with flag 1. Returns [n_points, d+1] (features + flag channel).
Eigen::MatrixXd aggregate_point_features(const std::vector<Vec3>& points,
                                         const std::vector<Camera>& cams,
                                         const std::vector<Eigen::MatrixXd>& feats,
                                         const std::vector<std::pair<int, int>>& level_dims,
                                         const Eigen::MatrixXd& weights);

// Same weighting expressed as a gather plan over vertically stacked per-view
// feature matrices (for tape use). `row_offsets[v]` is view v's first row in
// the stack. Rows left empty mean "no observation" (flag 1).
struct SamplePlan {
    std::vector<std::vector<std::pair<int, double>>> rows;
    std::vector<double> flags;
};
SamplePlan build_sample_plan(const std::vector<Vec3>& points, const std::vector<Camera>& cams,
                             const std::vector<std::pair<int, int>>& level_dims,
                             const std::vector<int>& row_offsets,
                             const Eigen::MatrixXd& weights);

// Convenience wrappers matching the grid layout.
Eigen::MatrixXd aggregate_grid_image_features(const GridScene& gs,
                                              const std::vector<Camera>& cams,
                                              const std::vector<Eigen::MatrixXd>& level0_feats,
                                              const std::vector<std::pair<int, int>>& level0_dims,
                                              const Visibility& vis);

// Mean over each block's unflagged cells; all-flagged blocks give zero with
// flag 1. `cell_feats` is [n_cells, d+1] with the flag in the last column.
Eigen::MatrixXd pool_block_image_features(const Eigen::MatrixXd& cell_feats,
                                          const std::vector<Block>& blocks,
                                          const GridScene& gs);
// Plan form of the pooling: weights over occupied-cell rows plus per-block
// flags.
SamplePlan build_block_pool_plan(const std::vector<double>& cell_flags,
                                 const std::vector<Block>& blocks, const GridScene& gs);

} // namespace gsq
