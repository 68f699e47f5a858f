#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "gsq/gauss.h"

namespace gsq {

// Opacity-logit threshold below which Gaussians are dropped at encode time
// and decoded cells are dropped at export time.
inline constexpr double kOpacityLogitThreshold = 0.0;

// Per-cell Gaussian attributes; the center is implied by the cell.
struct GridCell {
    Eigen::VectorXd sh{Eigen::VectorXd::Zero(3)};
    Vec4 rot{1.0, 0.0, 0.0, 0.0};
    Vec3 scale{Vec3::Ones()};
    double opacity_logit = 0.0;
};

using CellCoord = Eigen::Vector3i;

// Sparse voxelized scene: at most one Gaussian per cell, centers implied.
// Cells are keyed by their x-fastest linear index for deterministic order.
struct GridScene {
    int resolution = 0; // G, cells per axis
    Aabb bounds;
    std::map<int64_t, GridCell> cells;

    int64_t cell_index(const CellCoord& c) const {
        return c.x() + static_cast<int64_t>(resolution) * (c.y() + static_cast<int64_t>(resolution) * c.z());
    }
    CellCoord cell_coord(int64_t index) const {
        const int64_t g = resolution;
        return CellCoord(static_cast<int>(index % g), static_cast<int>((index / g) % g),
                         static_cast<int>(index / (g * g)));
    }
};

struct Block {
    CellCoord coord;                 // in [0, B)^3
    int block_size = 4;              // K
    std::vector<uint8_t> occupancy;  // K^3 flags, x-fastest cell-offset order
    // (in-block cell offset, attributes) for every occupied cell, ascending offset.
    std::vector<std::pair<int, GridCell>> cells;
};

// Snaps Gaussians to grid cells. Gaussians with opacity logit below the
// threshold are excluded; cell collisions keep the record with the larger
// opacity logit (ties: larger scale product, then lexicographically smaller mu).
GridScene voxelize(const Scene& scene, int resolution);

// World-space center of a cell.
Vec3 grid_center(const CellCoord& cell, int resolution, const Aabb& bounds);
// Normalized-coordinate center, in [0,1]^3.
Vec3 grid_center_normalized(const CellCoord& cell, int resolution);

// All blocks with at least one occupied cell, ordered by ascending linear
// block index. Requires G divisible by K.
std::vector<Block> partition_blocks(const GridScene& gs, int block_size = 4);

// Inverse of partition_blocks: reassembles the grid from its blocks.
GridScene scatter_blocks(const std::vector<Block>& blocks, int resolution, int block_size,
                         const Aabb& bounds);

// x-fastest linearization: index = x + B*(y + B*z).
int64_t linearize_block_index(const CellCoord& coord, int blocks_per_axis);
CellCoord delinearize_block_index(int64_t index, int blocks_per_axis);
// ceil(3*log2(B)): width of a block index in the bitstream.
int block_index_bits(int blocks_per_axis);

// Converts decoded cells back to a splat list with centers at cell centers.
Scene grid_to_scene(const GridScene& gs);

} // namespace gsq
