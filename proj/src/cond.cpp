#include "gsq/cond.h"

#include <algorithm>
#include <cmath>

namespace gsq {

namespace {

Image downsample2(const Image& img) {
    const int w = std::max(1, img.width / 2);
    const int h = std::max(1, img.height / 2);
    Image out(w, h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) {
                double acc = 0.0;
                int n = 0;
                for (int dy = 0; dy < 2; ++dy)
                    for (int dx = 0; dx < 2; ++dx) {
                        const int sx = 2 * x + dx, sy = 2 * y + dy;
                        if (sx < img.width && sy < img.height) {
                            acc += img.at(sx, sy, c);
                            ++n;
                        }
                    }
                out.at(x, y, c) = acc / n;
            }
    return out;
}

FeatureLevel fixed_features(const Image& img) {
    FeatureLevel level;
    level.width = img.width;
    level.height = img.height;
    level.fixed = Eigen::MatrixXd(static_cast<Eigen::Index>(img.width) * img.height,
                                  kFixedFeatureDim);
    auto clampx = [&](int x) { return std::clamp(x, 0, img.width - 1); };
    auto clampy = [&](int y) { return std::clamp(y, 0, img.height - 1); };
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            const Eigen::Index row = static_cast<Eigen::Index>(y) * img.width + x;
            for (int c = 0; c < 3; ++c) {
                level.fixed(row, c) = img.at(x, y, c);
                level.fixed(row, 3 + c) =
                    0.5 * (img.at(clampx(x + 1), y, c) - img.at(clampx(x - 1), y, c));
                level.fixed(row, 6 + c) =
                    0.5 * (img.at(x, clampy(y + 1), c) - img.at(x, clampy(y - 1), c));
                double mean = 0.0;
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx)
                        mean += img.at(clampx(x + dx), clampy(y + dy), c);
                level.fixed(row, 9 + c) = mean / 9.0;
            }
        }
    return level;
}

} // namespace

FeaturePyramid extract_feature_pyramid(const Image& img, const Camera& cam) {
    if (img.width < 1 || img.height < 1)
        throw PreconditionError("extract_feature_pyramid: empty image");
    FeaturePyramid pyr;
    pyr.cam = cam;
    Image current = img;
    for (int l = 0; l < kPyramidLevels; ++l) {
        pyr.levels.push_back(fixed_features(current));
        if (l + 1 < kPyramidLevels) current = downsample2(current);
    }
    return pyr;
}

std::vector<int> project_pyramid(nn::Graph& g, const FeaturePyramid& pyr, nn::Param& w,
                                 nn::Param& b) {
    std::vector<int> nodes;
    nodes.reserve(pyr.levels.size());
    const int wid = g.param(w);
    const int bid = g.param(b);
    for (const FeatureLevel& level : pyr.levels)
        nodes.push_back(g.add_rowvec(g.matmul(g.constant(level.fixed), wid), bid));
    return nodes;
}

std::optional<ProjectedPoint> project_point(const Vec3& p, const Camera& cam) {
    const Vec3 t = cam.to_camera(p);
    if (t.z() <= 1e-4) return std::nullopt;
    const Vec2 px(cam.fx * t.x() / t.z() + cam.cx, cam.fy * t.y() / t.z() + cam.cy);
    if (px.x() < 0.0 || px.x() > cam.width || px.y() < 0.0 || px.y() > cam.height)
        return std::nullopt;
    return ProjectedPoint{px, t.z()};
}

std::vector<std::pair<int, double>> bilinear_taps(const Vec2& pixel, int width, int height) {
    // Texel centers at integer+0.5; clamp to edge.
    const double fx = std::clamp(pixel.x() - 0.5, 0.0, static_cast<double>(width - 1));
    const double fy = std::clamp(pixel.y() - 0.5, 0.0, static_cast<double>(height - 1));
    const int x0 = static_cast<int>(std::floor(fx));
    const int y0 = static_cast<int>(std::floor(fy));
    const int x1 = std::min(x0 + 1, width - 1);
    const int y1 = std::min(y0 + 1, height - 1);
    const double ax = fx - x0, ay = fy - y0;
    std::vector<std::pair<int, double>> taps;
    auto add = [&](int x, int y, double w) {
        if (w <= 0.0) return;
        taps.emplace_back(y * width + x, w);
    };
    add(x0, y0, (1 - ax) * (1 - ay));
    add(x1, y0, ax * (1 - ay));
    add(x0, y1, (1 - ax) * ay);
    add(x1, y1, ax * ay);
    return taps;
}

Visibility estimate_visibility(const GridScene& gs, const std::vector<Camera>& cams,
                               int block_size, double theta) {
    if (gs.cells.empty()) throw PreconditionError("estimate_visibility: empty grid");
    const int n_cells = static_cast<int>(gs.cells.size());
    const int n_views = static_cast<int>(cams.size());

    std::vector<Vec3> centers;
    std::vector<double> opacities;
    std::vector<int64_t> keys;
    centers.reserve(n_cells);
    for (const auto& [key, cell] : gs.cells) {
        centers.push_back(grid_center(gs.cell_coord(key), gs.resolution, gs.bounds));
        opacities.push_back(logistic(cell.opacity_logit));
        keys.push_back(key);
    }
    const double radius = gs.bounds.extent().mean() / gs.resolution; // diameter = 2 cell sizes

    Visibility vis;
    vis.cell_view = Eigen::MatrixXd::Ones(n_cells, std::max(1, n_views));
    for (int v = 0; v < n_views; ++v) {
        const Vec3 origin = cams[v].position();
        for (int i = 0; i < n_cells; ++i) {
            const Vec3 to = centers[i] - origin;
            const double t_i = to.norm();
            if (t_i < 1e-9) continue;
            const Vec3 dir = to / t_i;
            double transmittance = 1.0;
            for (int j = 0; j < n_cells; ++j) {
                if (j == i) continue;
                const Vec3 rel = centers[j] - origin;
                const double t_j = rel.dot(dir);
                if (t_j <= 0.0 || t_j >= t_i) continue;
                const double perp2 = rel.squaredNorm() - t_j * t_j;
                if (perp2 < radius * radius) transmittance *= 1.0 - opacities[j];
            }
            vis.cell_view(i, v) = transmittance;
        }
    }

    // Block propagation: any cell above theta promotes the whole block to the
    // block maximum for that view.
    const std::vector<Block> blocks = partition_blocks(gs, block_size);
    std::map<int64_t, int> cell_row;
    for (int i = 0; i < n_cells; ++i) cell_row[keys[i]] = i;
    vis.block_view = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(blocks.size()),
                                           std::max(1, n_views));
    for (size_t b = 0; b < blocks.size(); ++b) {
        std::vector<int> rows;
        for (const auto& [offset, cell] : blocks[b].cells) {
            CellCoord local(offset % block_size, (offset / block_size) % block_size,
                            offset / (block_size * block_size));
            const CellCoord c = blocks[b].coord * block_size + local;
            rows.push_back(cell_row.at(gs.cell_index(c)));
        }
        for (int v = 0; v < n_views; ++v) {
            double vmax = 0.0;
            for (int r : rows) vmax = std::max(vmax, vis.cell_view(r, v));
            vis.block_view(b, v) = vmax;
            if (vmax > theta)
                for (int r : rows) vis.cell_view(r, v) = vmax;
        }
    }
    return vis;
}

SamplePlan build_sample_plan(const std::vector<Vec3>& points, const std::vector<Camera>& cams,
                             const std::vector<std::pair<int, int>>& level_dims,
                             const std::vector<int>& row_offsets,
                             const Eigen::MatrixXd& weights) {
    if (cams.size() != level_dims.size() || cams.size() != row_offsets.size())
        throw PreconditionError("build_sample_plan: per-view argument size mismatch");
    SamplePlan plan;
    plan.rows.resize(points.size());
    plan.flags.assign(points.size(), 0.0);
    for (size_t i = 0; i < points.size(); ++i) {
        std::vector<std::pair<int, std::vector<std::pair<int, double>>>> views;
        double total = 0.0;
        for (size_t v = 0; v < cams.size(); ++v) {
            const double w = weights(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(v));
            if (w <= 0.0) continue;
            const auto proj = project_point(points[i], cams[v]);
            if (!proj) continue;
            // Map to the level's pixel grid.
            const double sx = static_cast<double>(level_dims[v].first) / cams[v].width;
            const double sy = static_cast<double>(level_dims[v].second) / cams[v].height;
            const Vec2 px(proj->pixel.x() * sx, proj->pixel.y() * sy);
            views.emplace_back(static_cast<int>(v),
                               bilinear_taps(px, level_dims[v].first, level_dims[v].second));
            total += w;
        }
        if (views.empty() || total <= 0.0) {
            plan.flags[i] = 1.0;
            continue;
        }
        for (const auto& [v, taps] : views) {
            const double w = weights(static_cast<Eigen::Index>(i), v) / total;
            for (const auto& [idx, tw] : taps)
                plan.rows[i].emplace_back(row_offsets[v] + idx, w * tw);
        }
    }
    return plan;
}

Eigen::MatrixXd aggregate_point_features(const std::vector<Vec3>& points,
                                         const std::vector<Camera>& cams,
                                         const std::vector<Eigen::MatrixXd>& feats,
                                         const std::vector<std::pair<int, int>>& level_dims,
                                         const Eigen::MatrixXd& weights) {
    if (feats.size() != cams.size())
        throw PreconditionError("aggregate_point_features: one feature map per view required");
    const int d = feats.empty() ? 0 : static_cast<int>(feats.front().cols());
    std::vector<int> offsets(cams.size(), 0);
    int total_rows = 0;
    for (size_t v = 0; v < feats.size(); ++v) {
        offsets[v] = total_rows;
        total_rows += static_cast<int>(feats[v].rows());
    }
    Eigen::MatrixXd stacked(total_rows, d);
    for (size_t v = 0; v < feats.size(); ++v)
        stacked.middleRows(offsets[v], feats[v].rows()) = feats[v];

    const SamplePlan plan = build_sample_plan(points, cams, level_dims, offsets, weights);
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(points.size()), d + 1);
    for (size_t i = 0; i < points.size(); ++i) {
        for (const auto& [row, w] : plan.rows[i]) out.row(i).head(d) += w * stacked.row(row);
        out(static_cast<Eigen::Index>(i), d) = plan.flags[i];
    }
    return out;
}

Eigen::MatrixXd aggregate_grid_image_features(const GridScene& gs,
                                              const std::vector<Camera>& cams,
                                              const std::vector<Eigen::MatrixXd>& level0_feats,
                                              const std::vector<std::pair<int, int>>& level0_dims,
                                              const Visibility& vis) {
    std::vector<Vec3> points;
    points.reserve(gs.cells.size());
    for (const auto& [key, cell] : gs.cells)
        points.push_back(grid_center(gs.cell_coord(key), gs.resolution, gs.bounds));
    return aggregate_point_features(points, cams, level0_feats, level0_dims, vis.cell_view);
}

SamplePlan build_block_pool_plan(const std::vector<double>& cell_flags,
                                 const std::vector<Block>& blocks, const GridScene& gs) {
    std::map<int64_t, int> cell_row;
    int row = 0;
    for (const auto& [key, cell] : gs.cells) cell_row[key] = row++;

    SamplePlan plan;
    plan.rows.resize(blocks.size());
    plan.flags.assign(blocks.size(), 0.0);
    const int k = blocks.empty() ? 4 : blocks.front().block_size;
    for (size_t b = 0; b < blocks.size(); ++b) {
        std::vector<int> rows;
        for (const auto& [offset, cell] : blocks[b].cells) {
            CellCoord local(offset % k, (offset / k) % k, offset / (k * k));
            const CellCoord c = blocks[b].coord * k + local;
            const int r = cell_row.at(gs.cell_index(c));
            if (cell_flags[r] == 0.0) rows.push_back(r);
        }
        if (rows.empty()) {
            plan.flags[b] = 1.0;
            continue;
        }
        const double w = 1.0 / static_cast<double>(rows.size());
        for (int r : rows) plan.rows[b].emplace_back(r, w);
    }
    return plan;
}

Eigen::MatrixXd pool_block_image_features(const Eigen::MatrixXd& cell_feats,
                                          const std::vector<Block>& blocks,
                                          const GridScene& gs) {
    const int d = static_cast<int>(cell_feats.cols()) - 1;
    std::vector<double> flags(cell_feats.rows());
    for (Eigen::Index i = 0; i < cell_feats.rows(); ++i) flags[i] = cell_feats(i, d);
    const SamplePlan plan = build_block_pool_plan(flags, blocks, gs);
    Eigen::MatrixXd out =
        Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(blocks.size()), d + 1);
    for (size_t b = 0; b < blocks.size(); ++b) {
        for (const auto& [r, w] : plan.rows[b]) out.row(b).head(d) += w * cell_feats.row(r).head(d);
        out(static_cast<Eigen::Index>(b), d) = plan.flags[b];
    }
    return out;
}

} // namespace gsq
