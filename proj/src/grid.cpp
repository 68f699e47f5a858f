#include "gsq/grid.h"

#include <algorithm>
#include <cmath>

namespace gsq {

namespace {

// Collision rule: keep the record that dominates visually.
bool collision_prefer(const Gaussian& a, const Gaussian& b) {
    if (a.opacity_logit != b.opacity_logit) return a.opacity_logit > b.opacity_logit;
    const double pa = a.scale.prod(), pb = b.scale.prod();
    if (pa != pb) return pa > pb;
    if (a.mu.x() != b.mu.x()) return a.mu.x() < b.mu.x();
    if (a.mu.y() != b.mu.y()) return a.mu.y() < b.mu.y();
    return a.mu.z() < b.mu.z();
}

} // namespace

GridScene voxelize(const Scene& scene, int resolution) {
    if (resolution < 1) throw PreconditionError("voxelize: resolution must be >= 1");
    GridScene gs;
    gs.resolution = resolution;
    gs.bounds = scene.bounds;
    const Vec3 extent = scene.bounds.extent();
    if (!(extent.minCoeff() > 0.0)) throw PreconditionError("voxelize: degenerate scene bounds");

    std::map<int64_t, const Gaussian*> winners;
    for (const Gaussian& g : scene.gaussians) {
        if (g.opacity_logit < kOpacityLogitThreshold) continue;
        const Vec3 norm = (g.mu - scene.bounds.lo).cwiseQuotient(extent);
        CellCoord c;
        for (int a = 0; a < 3; ++a) {
            const int v = static_cast<int>(std::floor(norm[a] * resolution));
            c[a] = std::clamp(v, 0, resolution - 1);
        }
        const int64_t key = gs.cell_index(c);
        auto it = winners.find(key);
        if (it == winners.end() || collision_prefer(g, *it->second)) winners[key] = &g;
    }
    if (winners.empty()) throw EmptySceneError("voxelize: no Gaussians above the opacity threshold");

    for (const auto& [key, g] : winners) {
        GridCell cell;
        cell.sh = g->sh;
        cell.rot = quat_normalize(g->rot);
        cell.scale = g->scale;
        cell.opacity_logit = g->opacity_logit;
        gs.cells.emplace(key, std::move(cell));
    }
    return gs;
}

Vec3 grid_center_normalized(const CellCoord& cell, int resolution) {
    for (int a = 0; a < 3; ++a)
        if (cell[a] < 0 || cell[a] >= resolution)
            throw PreconditionError("grid_center: cell out of range");
    return (cell.cast<double>() + Vec3::Constant(0.5)) / resolution;
}

Vec3 grid_center(const CellCoord& cell, int resolution, const Aabb& bounds) {
    const Vec3 n = grid_center_normalized(cell, resolution);
    return bounds.lo + n.cwiseProduct(bounds.extent());
}

std::vector<Block> partition_blocks(const GridScene& gs, int block_size) {
    if (block_size < 1 || gs.resolution % block_size != 0)
        throw PreconditionError("partition_blocks: grid resolution must be divisible by K");
    const int b_axis = gs.resolution / block_size;
    const int k3 = block_size * block_size * block_size;

    std::map<int64_t, Block> by_index;
    for (const auto& [key, cell] : gs.cells) {
        const CellCoord c = gs.cell_coord(key);
        const CellCoord bc = c / block_size;
        const CellCoord local = c - bc * block_size;
        const int offset =
            local.x() + block_size * (local.y() + block_size * local.z());
        const int64_t bi = linearize_block_index(bc, b_axis);
        Block& blk = by_index[bi];
        if (blk.occupancy.empty()) {
            blk.coord = bc;
            blk.block_size = block_size;
            blk.occupancy.assign(k3, 0);
        }
        blk.occupancy[offset] = 1;
        blk.cells.emplace_back(offset, cell);
    }
    std::vector<Block> blocks;
    blocks.reserve(by_index.size());
    for (auto& [bi, blk] : by_index) blocks.push_back(std::move(blk));
    return blocks;
}

GridScene scatter_blocks(const std::vector<Block>& blocks, int resolution, int block_size,
                         const Aabb& bounds) {
    GridScene gs;
    gs.resolution = resolution;
    gs.bounds = bounds;
    for (const Block& blk : blocks) {
        for (const auto& [offset, cell] : blk.cells) {
            CellCoord local(offset % block_size, (offset / block_size) % block_size,
                            offset / (block_size * block_size));
            const CellCoord c = blk.coord * block_size + local;
            gs.cells[gs.cell_index(c)] = cell;
        }
    }
    return gs;
}

int64_t linearize_block_index(const CellCoord& coord, int blocks_per_axis) {
    for (int a = 0; a < 3; ++a)
        if (coord[a] < 0 || coord[a] >= blocks_per_axis)
            throw PreconditionError("linearize_block_index: coordinate out of range");
    return coord.x() +
           static_cast<int64_t>(blocks_per_axis) *
               (coord.y() + static_cast<int64_t>(blocks_per_axis) * coord.z());
}

CellCoord delinearize_block_index(int64_t index, int blocks_per_axis) {
    const int64_t b = blocks_per_axis;
    if (index < 0 || index >= b * b * b)
        throw PreconditionError("delinearize_block_index: index out of range");
    return CellCoord(static_cast<int>(index % b), static_cast<int>((index / b) % b),
                     static_cast<int>(index / (b * b)));
}

int block_index_bits(int blocks_per_axis) {
    if (blocks_per_axis < 1) throw PreconditionError("block_index_bits: B must be >= 1");
    return static_cast<int>(std::ceil(3.0 * std::log2(static_cast<double>(blocks_per_axis))));
}

Scene grid_to_scene(const GridScene& gs) {
    Scene scene;
    scene.bounds = gs.bounds;
    scene.gaussians.reserve(gs.cells.size());
    for (const auto& [key, cell] : gs.cells) {
        Gaussian g;
        g.mu = grid_center(gs.cell_coord(key), gs.resolution, gs.bounds);
        g.sh = cell.sh;
        g.rot = cell.rot;
        g.scale = cell.scale;
        g.opacity_logit = cell.opacity_logit;
        scene.gaussians.push_back(std::move(g));
    }
    return scene;
}

} // namespace gsq
