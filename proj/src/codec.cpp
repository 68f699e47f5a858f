#include "gsq/codec.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

namespace gsq {

namespace {

constexpr double kLogScaleMin = -9.210340371976182; // ln(1e-4)
constexpr double kLogScaleMax = 0.0;                // ln(1)

} // namespace

void save_model_config(const ModelConfig& cfg, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw FormatError("save_model_config: cannot open " + path);
    os << "grid_resolution = " << cfg.grid_resolution << "\n";
    os << "block_size = " << cfg.block_size << "\n";
    os << "sh_dim = " << cfg.sh_dim << "\n";
    os << "d_g = " << cfg.d_g << "\n";
    os << "conv_hidden = " << cfg.conv_hidden << "\n";
    os << "d_b = " << cfg.d_b << "\n";
    os << "d_q = " << cfg.d_q << "\n";
    os << "d_cell = " << cfg.d_cell << "\n";
    os << "d_img = " << cfg.d_img << "\n";
    os << "d_pos = " << cfg.d_pos << "\n";
    os << "aux_hidden = " << cfg.aux_hidden << "\n";
    os << "head_hidden = " << cfg.head_hidden << "\n";
    os << "unet_depth = " << cfg.unet_depth << "\n";
    os << "cond_depth = " << cfg.cond_depth << "\n";
    os << "rvq_depth = " << cfg.rvq_depth << "\n";
    os << "codebook_size = " << cfg.codebook_size << "\n";
    os << "init_seed = " << cfg.init_seed << "\n";
}

ModelConfig load_model_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw FormatError("load_model_config: cannot open " + path);
    ModelConfig cfg;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        std::string key, eq;
        ls >> key >> eq;
        if (eq != "=") throw FormatError("load_model_config: malformed line: " + line);
        auto read_int = [&](int& out) { ls >> out; };
        if (key == "grid_resolution") read_int(cfg.grid_resolution);
        else if (key == "block_size") read_int(cfg.block_size);
        else if (key == "sh_dim") read_int(cfg.sh_dim);
        else if (key == "d_g") read_int(cfg.d_g);
        else if (key == "conv_hidden") read_int(cfg.conv_hidden);
        else if (key == "d_b") read_int(cfg.d_b);
        else if (key == "d_q") read_int(cfg.d_q);
        else if (key == "d_cell") read_int(cfg.d_cell);
        else if (key == "d_img") read_int(cfg.d_img);
        else if (key == "d_pos") read_int(cfg.d_pos);
        else if (key == "aux_hidden") read_int(cfg.aux_hidden);
        else if (key == "head_hidden") read_int(cfg.head_hidden);
        else if (key == "unet_depth") read_int(cfg.unet_depth);
        else if (key == "cond_depth") read_int(cfg.cond_depth);
        else if (key == "rvq_depth") read_int(cfg.rvq_depth);
        else if (key == "codebook_size") read_int(cfg.codebook_size);
        else if (key == "init_seed") ls >> cfg.init_seed;
        else throw FormatError("load_model_config: unknown key " + key);
    }
    return cfg;
}

namespace {

void init_param(nn::Param& p, std::mt19937_64& rng, double gain = 1.0) {
    nn::init_xavier(p.value, rng, gain);
}

} // namespace

CodecModel::CodecModel(const ModelConfig& c) : cfg(c) {
    if (cfg.grid_resolution % cfg.block_size != 0)
        throw ConfigError("CodecModel: grid resolution must be divisible by the block size");
    std::mt19937_64 rng(cfg.init_seed);
    auto make = [&](const std::string& name, int rows, int cols, double gain) -> nn::Param& {
        nn::Param& p = params.create(name, rows, cols);
        if (gain > 0.0) init_param(p, rng, gain);
        return p;
    };
    const int k3 = cfg.cells_per_block();

    make("img/proj_w", kFixedFeatureDim, cfg.d_img, 1.0);
    make("img/proj_b", 1, cfg.d_img, 0.0);

    make("enc/sh_w", cfg.sh_dim, cfg.d_g, 1.0);
    make("enc/sh_b", 1, cfg.d_g, 0.0);
    make("enc/rot_w", 4, cfg.d_g, 1.0);
    make("enc/rot_b", 1, cfg.d_g, 0.0);
    make("enc/scale_w", 3, cfg.d_g, 1.0);
    make("enc/scale_b", 1, cfg.d_g, 0.0);
    make("enc/op_w", 1, cfg.d_g, 1.0);
    make("enc/op_b", 1, cfg.d_g, 0.0);
    make("enc/grid_w", 4 * cfg.d_g, cfg.d_g, 1.0);
    make("enc/grid_b", 1, cfg.d_g, 0.0);
    make("enc/conv_pad", 1, cfg.d_g, 0.3);
    make("enc/conv_w1", 8 * cfg.d_g, cfg.conv_hidden, 1.0);
    make("enc/conv_b1", 1, cfg.conv_hidden, 0.0);
    make("enc/conv_w2", 8 * cfg.conv_hidden, cfg.d_b, 1.0);
    make("enc/conv_b2", 1, cfg.d_b, 0.0);
    for (int i = 0; i < cfg.unet_depth; ++i) {
        const std::string base = "enc/mix" + std::to_string(i);
        make(base + "_w", 27 * cfg.d_b, cfg.d_b, 0.5);
        make(base + "_b", 1, cfg.d_b, 0.0);
        make(base + "_pad", 1, cfg.d_b, 0.3);
    }
    make("enc/geo_w", cfg.d_b, cfg.d_q, 1.0);
    make("enc/geo_b", 1, cfg.d_q, 0.0);
    make("enc/tex_w", cfg.d_b, cfg.d_q, 1.0);
    make("enc/tex_b", 1, cfg.d_q, 0.0);

    make("dec/fuse_w", 2 * cfg.d_q, cfg.d_b, 1.0);
    make("dec/fuse_b", 1, cfg.d_b, 0.0);

    // Identity-initialized fusion: with null image features the coarse path
    // passes the scene latent through unchanged at initialization.
    nn::Param& coarse_w = make("cond/coarse_w", cfg.d_b + cfg.block_image_dim(), cfg.d_b, -1.0);
    coarse_w.value.setZero();
    coarse_w.value.topLeftCorner(cfg.d_b, cfg.d_b).setIdentity();
    make("cond/coarse_b", 1, cfg.d_b, 0.0);
    for (int i = 0; i < cfg.cond_depth; ++i) {
        const std::string base = "cond/mix" + std::to_string(i);
        make(base + "_w", 27 * cfg.d_b, cfg.d_b, 0.5);
        make(base + "_b", 1, cfg.d_b, 0.0);
        make(base + "_pad", 1, cfg.d_b, 0.3);
    }
    make("cond/pos", k3, cfg.d_pos, 0.5);
    make("cond/fine_w1", cfg.d_b + cfg.d_pos + cfg.cell_image_dim(), cfg.aux_hidden, 1.0);
    make("cond/fine_b1", 1, cfg.aux_hidden, 0.0);
    make("cond/fine_w2", cfg.aux_hidden, cfg.d_cell, 1.0);
    make("cond/fine_b2", 1, cfg.d_cell, 0.0);

    for (const char* stage : {"auxs", "auxc"}) {
        const std::string base(stage);
        make(base + "/w1", cfg.d_b + cfg.d_pos, cfg.aux_hidden, 1.0);
        make(base + "/b1", 1, cfg.aux_hidden, 0.0);
        make(base + "/w2", cfg.aux_hidden, cfg.d_cell, 1.0);
        make(base + "/b2", 1, cfg.d_cell, 0.0);
    }
    for (const char* stage : {"scene", "coarse", "fine"}) {
        const std::string base = std::string("head/") + stage;
        make(base + "_geo_w1", cfg.d_cell, cfg.head_hidden, 1.0);
        make(base + "_geo_b1", 1, cfg.head_hidden, 0.0);
        make(base + "_geo_w2", cfg.head_hidden, 8, 1.0);
        make(base + "_geo_b2", 1, 8, 0.0);
        make(base + "_tex_w1", cfg.d_cell, cfg.head_hidden, 1.0);
        make(base + "_tex_b1", 1, cfg.head_hidden, 0.0);
        make(base + "_tex_w2", cfg.head_hidden, cfg.sh_dim, 1.0);
        make(base + "_tex_b2", 1, cfg.sh_dim, 0.0);
    }
    // A decoded quaternion of zeros would be degenerate; bias toward the
    // identity rotation. Log-scale biases start at a typical splat size,
    // keeping the clamp inactive at initialization.
    for (const char* stage : {"scene", "coarse", "fine"}) {
        nn::Param& b2 = params.at(std::string("head/") + stage + "_geo_b2");
        b2.value(0, 0) = 1.0;
        b2.value(0, 4) = b2.value(0, 5) = b2.value(0, 6) = -4.0;
    }
}

bool CodecModel::codebooks_ready() const {
    return geometry_codec.depth() == cfg.rvq_depth && texture_codec.depth() == cfg.rvq_depth;
}

void CodecModel::init_random_codebooks(uint64_t seed, double scale) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, scale);
    auto build = [&](const std::string& head) {
        RvqCodec codec;
        for (int d = 0; d < cfg.rvq_depth; ++d) {
            Codebook cb;
            cb.id = head + "/" + std::to_string(d);
            cb.entries = Eigen::MatrixXd(cfg.codebook_size, cfg.d_q);
            for (int n = 0; n < cfg.codebook_size; ++n)
                for (int c = 0; c < cfg.d_q; ++c) cb.entries(n, c) = dist(rng) / (d + 1);
            pin_zero_entry(cb);
            codec.stages.push_back(std::move(cb));
        }
        return codec;
    };
    geometry_codec = build("geo");
    texture_codec = build("tex");
}

void CodecModel::freeze_codebooks() {
    for (RvqCodec* codec : {&geometry_codec, &texture_codec})
        for (Codebook& cb : codec->stages) {
            for (Eigen::Index i = 0; i < cb.entries.size(); ++i)
                cb.entries(i) = static_cast<double>(static_cast<float>(cb.entries(i)));
            cb.frozen = true;
        }
}

CodebookPack CodecModel::pack() const {
    if (!codebooks_ready()) throw ConfigError("CodecModel: codebooks not initialized");
    return CodebookPack{geometry_codec, texture_codec};
}

void CodecModel::adopt_pack(const CodebookPack& p) {
    if (p.geometry.depth() != cfg.rvq_depth || p.geometry.dim() != cfg.d_q)
        throw ConfigError("adopt_pack: pack does not match the model configuration");
    geometry_codec = p.geometry;
    texture_codec = p.texture;
}

uint64_t CodecModel::pack_hash() const { return codebook_pack_hash(pack()); }

EncodeInputs build_block_inputs(const std::vector<int64_t>& block_indices,
                                const ModelConfig& cfg) {
    EncodeInputs in;
    const int b_axis = cfg.grid_resolution / cfg.block_size;
    const int k = cfg.block_size;
    const int k3 = cfg.cells_per_block();
    in.block_indices = block_indices;
    std::map<int64_t, int> row_of;
    for (size_t i = 0; i < block_indices.size(); ++i) {
        if (i > 0 && block_indices[i] <= block_indices[i - 1])
            throw PreconditionError("build_block_inputs: indices must be strictly increasing");
        in.block_coords.push_back(delinearize_block_index(block_indices[i], b_axis));
        row_of[block_indices[i]] = static_cast<int>(i);
    }
    const auto offsets = nn::neighbor_offsets27();
    for (const CellCoord& bc : in.block_coords) {
        std::array<int, 27> nb{};
        for (int o = 0; o < 27; ++o) {
            const CellCoord q(bc.x() + offsets[o][0], bc.y() + offsets[o][1],
                              bc.z() + offsets[o][2]);
            if (q.minCoeff() < 0 || q.maxCoeff() >= b_axis) {
                nb[o] = -1;
                continue;
            }
            auto it = row_of.find(linearize_block_index(q, b_axis));
            nb[o] = it == row_of.end() ? -1 : it->second;
        }
        in.neighbors.push_back(nb);
    }
    for (size_t b = 0; b < in.block_coords.size(); ++b) {
        for (int o = 0; o < k3; ++o) {
            const CellCoord local(o % k, (o / k) % k, o / (k * k));
            in.cand_coord.push_back(in.block_coords[b] * k + local);
            in.cand_block.push_back(static_cast<int>(b));
            in.cand_offset.push_back(o);
            in.cand_cell_row.push_back(-1);
        }
    }
    return in;
}

EncodeInputs build_encode_inputs(const GridScene& gs, const ModelConfig& cfg) {
    if (gs.resolution != cfg.grid_resolution)
        throw PreconditionError("build_encode_inputs: grid resolution does not match the model");
    if (gs.cells.empty()) throw EmptySceneError("build_encode_inputs: empty grid");
    const int k = cfg.block_size;
    const int k3 = cfg.cells_per_block();
    const int b_axis = gs.resolution / k;

    std::map<int64_t, int> cell_row;
    int row = 0;
    for (const auto& [key, cell] : gs.cells) cell_row[key] = row++;

    const std::vector<Block> blocks = partition_blocks(gs, k);
    std::vector<int64_t> indices;
    for (const Block& blk : blocks) indices.push_back(linearize_block_index(blk.coord, b_axis));
    EncodeInputs in = build_block_inputs(indices, cfg);

    in.slot_source.assign(blocks.size(), std::vector<int>(k3, -1));
    for (size_t b = 0; b < blocks.size(); ++b) {
        for (const auto& [offset, cell] : blocks[b].cells) {
            const CellCoord local(offset % k, (offset / k) % k, offset / (k * k));
            const CellCoord c = blocks[b].coord * k + local;
            in.slot_source[b][offset] = cell_row.at(gs.cell_index(c));
        }
    }
    for (int i = 0; i < in.n_candidates(); ++i) {
        const int src = in.slot_source[in.cand_block[i]][in.cand_offset[i]];
        in.cand_cell_row[i] = src;
    }

    const int n_cells = static_cast<int>(gs.cells.size());
    in.attr_sh = Eigen::MatrixXd(n_cells, cfg.sh_dim);
    in.attr_rot = Eigen::MatrixXd(n_cells, 4);
    in.attr_logscale = Eigen::MatrixXd(n_cells, 3);
    in.attr_logit = Eigen::MatrixXd(n_cells, 1);
    row = 0;
    for (const auto& [key, cell] : gs.cells) {
        in.attr_sh.row(row) = cell.sh.transpose();
        in.attr_rot.row(row) = quat_normalize(cell.rot).transpose();
        in.attr_logscale.row(row) = cell.scale.array().log().matrix().transpose();
        in.attr_logit(row, 0) = cell.opacity_logit;
        ++row;
    }
    return in;
}

namespace {

struct CondNodes {
    int block_img = -1; // [M, 2*d_img + 1]
    int cand_img = -1;  // [n_cand, d_img + 1]
};

int null_features(nn::Graph& g, int rows, int dim) {
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(rows, dim);
    m.col(dim - 1).setOnes(); // no-observation flag
    return g.constant(std::move(m));
}

int apply_plan(nn::Graph& g, int stacked, const SamplePlan& plan) {
    int feats = g.gather_weighted(stacked, plan.rows);
    Eigen::MatrixXd flags(static_cast<Eigen::Index>(plan.flags.size()), 1);
    for (size_t i = 0; i < plan.flags.size(); ++i)
        flags(static_cast<Eigen::Index>(i), 0) = plan.flags[i];
    return g.concat_cols({feats, g.constant(std::move(flags))});
}

CondNodes build_cond_nodes(nn::Graph& g, CodecModel& model, const EncodeInputs& in, int resolution,
                           const Aabb& bounds, const CondContext& ctx) {
    CondNodes out;
    const ModelConfig& cfg = model.cfg;
    const int m = in.n_blocks();
    const int n_cand = in.n_candidates();
    const bool have_images = ctx.pyramids != nullptr && !ctx.pyramids->empty() &&
                             ctx.vis_grid != nullptr && !ctx.vis_grid->cells.empty();
    const bool want_any = ctx.coarse_features || ctx.fine_features;
    if (!have_images || !want_any) {
        out.block_img = null_features(g, m, cfg.block_image_dim());
        out.cand_img = null_features(g, n_cand, cfg.cell_image_dim());
        return out;
    }

    const std::vector<FeaturePyramid>& pyrs = *ctx.pyramids;
    const GridScene& vg = *ctx.vis_grid;
    const int n_views = static_cast<int>(pyrs.size());
    std::vector<Camera> cams;
    for (const FeaturePyramid& p : pyrs) cams.push_back(p.cam);

    const Visibility vis = estimate_visibility(vg, cams, cfg.block_size);

    // Trainable projection of every view's level-0 and level-2 maps, stacked.
    nn::Param& pw = model.params.at("img/proj_w");
    nn::Param& pb = model.params.at("img/proj_b");
    const int pw_id = g.param(pw);
    const int pb_id = g.param(pb);
    std::vector<int> lvl0_nodes, lvl2_nodes;
    std::vector<std::pair<int, int>> dims0, dims2;
    std::vector<int> off0(n_views), off2(n_views);
    int rows0 = 0, rows2 = 0;
    for (int v = 0; v < n_views; ++v) {
        const FeatureLevel& l0 = pyrs[v].levels[0];
        const FeatureLevel& l2 = pyrs[v].levels[2];
        lvl0_nodes.push_back(g.add_rowvec(g.matmul(g.constant(l0.fixed), pw_id), pb_id));
        lvl2_nodes.push_back(g.add_rowvec(g.matmul(g.constant(l2.fixed), pw_id), pb_id));
        dims0.emplace_back(l0.width, l0.height);
        dims2.emplace_back(l2.width, l2.height);
        off0[v] = rows0;
        off2[v] = rows2;
        rows0 += l0.width * l0.height;
        rows2 += l2.width * l2.height;
    }
    const int stack0 = g.concat_rows(lvl0_nodes);
    const int stack2 = g.concat_rows(lvl2_nodes);

    // Rows of the visibility grid, keyed by cell.
    std::map<int64_t, int> vis_row;
    std::vector<Vec3> vis_centers;
    int row = 0;
    for (const auto& [key, cell] : vg.cells) {
        vis_row[key] = row++;
        vis_centers.push_back(grid_center(vg.cell_coord(key), vg.resolution, vg.bounds));
    }

    // Per input block: visibility grid rows inside that block region, and the
    // block-level visibility (max over those rows).
    std::vector<std::vector<int>> block_rows(m);
    Eigen::MatrixXd block_vis = Eigen::MatrixXd::Zero(m, n_views);
    for (const auto& [key, r] : vis_row) {
        const CellCoord c = vg.cell_coord(key);
        const CellCoord bc = c / cfg.block_size;
        const int64_t bi = linearize_block_index(bc, resolution / cfg.block_size);
        const auto it = std::lower_bound(in.block_indices.begin(), in.block_indices.end(), bi);
        if (it == in.block_indices.end() || *it != bi) continue;
        const int b = static_cast<int>(it - in.block_indices.begin());
        block_rows[b].push_back(r);
        for (int v = 0; v < n_views; ++v)
            block_vis(b, v) = std::max(block_vis(b, v), vis.cell_view(r, v));
    }

    // Occupied-cell features at level 0, pooled per block.
    const SamplePlan occ_plan = build_sample_plan(vis_centers, cams, dims0, off0, vis.cell_view);
    const int occ_feats = g.gather_weighted(stack0, occ_plan.rows); // [n_vis, d_img]
    SamplePlan pool;
    pool.rows.resize(m);
    pool.flags.assign(m, 0.0);
    for (int b = 0; b < m; ++b) {
        std::vector<int> usable;
        for (int r : block_rows[b])
            if (occ_plan.flags[r] == 0.0) usable.push_back(r);
        if (usable.empty()) {
            pool.flags[b] = 1.0;
            continue;
        }
        const double w = 1.0 / static_cast<double>(usable.size());
        for (int r : usable) pool.rows[b].emplace_back(r, w);
    }
    const int pooled = g.gather_weighted(occ_feats, pool.rows); // [M, d_img]

    // Level-2 sample at each block center, weighted by block visibility.
    std::vector<Vec3> block_centers;
    for (const CellCoord& bc : in.block_coords) {
        const Vec3 n = (bc.cast<double>() + Vec3::Constant(0.5)) *
                       (static_cast<double>(cfg.block_size) / resolution);
        block_centers.push_back(bounds.lo + n.cwiseProduct(bounds.extent()));
    }
    const SamplePlan blk2_plan = build_sample_plan(block_centers, cams, dims2, off2, block_vis);
    const int blk2 = g.gather_weighted(stack2, blk2_plan.rows); // [M, d_img]

    Eigen::MatrixXd block_flags(m, 1);
    for (int b = 0; b < m; ++b) block_flags(b, 0) = pool.flags[b];

    if (ctx.coarse_features) {
        out.block_img = g.concat_cols({pooled, blk2, g.constant(block_flags)});
    } else {
        out.block_img = null_features(g, m, cfg.block_image_dim());
    }

    if (ctx.fine_features) {
        // Candidate-cell features: occupied candidates reuse the cell's
        // propagated visibility; empty candidates use the block visibility.
        std::vector<Vec3> cand_centers;
        Eigen::MatrixXd cand_w(n_cand, n_views);
        for (int i = 0; i < n_cand; ++i) {
            cand_centers.push_back(grid_center(in.cand_coord[i], resolution, bounds));
            const auto it = vis_row.find(vg.cell_index(in.cand_coord[i]));
            if (it != vis_row.end())
                cand_w.row(i) = vis.cell_view.row(it->second);
            else
                cand_w.row(i) = block_vis.row(in.cand_block[i]);
        }
        const SamplePlan cand_plan = build_sample_plan(cand_centers, cams, dims0, off0, cand_w);
        out.cand_img = apply_plan(g, stack0, cand_plan);
    } else {
        out.cand_img = null_features(g, n_cand, cfg.cell_image_dim());
    }
    return out;
}

struct HeadParams {
    nn::Param *gw1, *gb1, *gw2, *gb2;
    nn::Param *tw1, *tb1, *tw2, *tb2;
};

HeadParams head_params(CodecModel& model, const std::string& stage) {
    const std::string base = "head/" + stage;
    return {&model.params.at(base + "_geo_w1"), &model.params.at(base + "_geo_b1"),
            &model.params.at(base + "_geo_w2"), &model.params.at(base + "_geo_b2"),
            &model.params.at(base + "_tex_w1"), &model.params.at(base + "_tex_b1"),
            &model.params.at(base + "_tex_w2"), &model.params.at(base + "_tex_b2")};
}

StageNodes decode_heads(nn::Graph& g, CodecModel& model, int cell_latent,
                        const std::string& stage) {
    HeadParams hp = head_params(model, stage);
    const int geo = nn::linear(g, g.silu(nn::linear(g, cell_latent, *hp.gw1, *hp.gb1)), *hp.gw2,
                               *hp.gb2); // [n, 8]
    StageNodes out;
    out.quat = g.quat_head(g.slice_cols(geo, 0, 4));
    out.logscale = g.clamp(g.slice_cols(geo, 4, 3), kLogScaleMin, kLogScaleMax);
    out.scale = g.exp(out.logscale);
    out.logit = g.slice_cols(geo, 7, 1);
    out.sh = nn::linear(g, g.silu(nn::linear(g, cell_latent, *hp.tw1, *hp.tb1)), *hp.tw2, *hp.tb2);
    return out;
}

// Broadcast block vectors to candidates and append the positional embedding.
int broadcast_with_pos(nn::Graph& g, CodecModel& model, const EncodeInputs& in, int block_latent) {
    std::vector<std::vector<std::pair<int, double>>> bplan(in.n_candidates());
    std::vector<std::vector<std::pair<int, double>>> pplan(in.n_candidates());
    for (int i = 0; i < in.n_candidates(); ++i) {
        bplan[i].emplace_back(in.cand_block[i], 1.0);
        pplan[i].emplace_back(in.cand_offset[i], 1.0);
    }
    const int bcast = g.gather_weighted(block_latent, std::move(bplan));
    const int pos = g.gather_weighted(g.param(model.params.at("cond/pos")), std::move(pplan));
    return g.concat_cols({bcast, pos});
}

StageNodes aux_stage(nn::Graph& g, CodecModel& model, const EncodeInputs& in, int block_latent,
                     const std::string& aux, const std::string& head) {
    const int x = broadcast_with_pos(g, model, in, block_latent);
    const int h = g.silu(nn::linear(g, x, model.params.at(aux + "/w1"), model.params.at(aux + "/b1")));
    const int cell = nn::linear(g, h, model.params.at(aux + "/w2"), model.params.at(aux + "/b2"));
    return decode_heads(g, model, cell, head);
}

void run_decoder(nn::Graph& g, CodecModel& model, CodecForward& fwd, int resolution,
                 const Aabb& bounds, const CondContext& ctx) {
    const ModelConfig& cfg = model.cfg;
    const EncodeInputs& in = fwd.inputs;

    fwd.stage_scene = aux_stage(g, model, in, fwd.scene_latent, "auxs", "scene");

    const CondNodes cond = build_cond_nodes(g, model, in, resolution, bounds, ctx);

    // Coarse conditioning: inject block-level image features and mix.
    int x = g.concat_cols({fwd.scene_latent, cond.block_img});
    x = nn::linear(g, x, model.params.at("cond/coarse_w"), model.params.at("cond/coarse_b"));
    std::vector<nn::SparseMixLayer> layers;
    for (int i = 0; i < cfg.cond_depth; ++i) {
        const std::string base = "cond/mix" + std::to_string(i);
        layers.push_back({&model.params.at(base + "_w"), &model.params.at(base + "_b"),
                          &model.params.at(base + "_pad")});
    }
    fwd.coarse_latent = nn::sparse_unet_mix(g, x, in.neighbors, layers);
    fwd.stage_coarse = aux_stage(g, model, in, fwd.coarse_latent, "auxc", "coarse");

    // Fine conditioning: upsample to cells, fuse cell-level image features.
    const int fine_in = g.concat_cols({broadcast_with_pos(g, model, in, fwd.coarse_latent),
                                       cond.cand_img});
    const int fh = g.silu(
        nn::linear(g, fine_in, model.params.at("cond/fine_w1"), model.params.at("cond/fine_b1")));
    fwd.fine_latent =
        nn::linear(g, fh, model.params.at("cond/fine_w2"), model.params.at("cond/fine_b2"));
    fwd.stage_fine = decode_heads(g, model, fwd.fine_latent, "fine");
}

} // namespace

CodecForward codec_forward(nn::Graph& g, CodecModel& model, const GridScene& gs,
                           const ForwardOptions& opt) {
    const ModelConfig& cfg = model.cfg;
    CodecForward fwd;
    fwd.inputs = build_encode_inputs(gs, cfg);
    const EncodeInputs& in = fwd.inputs;

    // Per-cell attribute projections -> grid feature.
    const int f_sh = nn::linear(g, g.constant(in.attr_sh), model.params.at("enc/sh_w"),
                                model.params.at("enc/sh_b"));
    const int f_rot = nn::linear(g, g.constant(in.attr_rot), model.params.at("enc/rot_w"),
                                 model.params.at("enc/rot_b"));
    const int f_scale = nn::linear(g, g.constant(in.attr_logscale), model.params.at("enc/scale_w"),
                                   model.params.at("enc/scale_b"));
    const int f_op = nn::linear(g, g.constant(in.attr_logit), model.params.at("enc/op_w"),
                                model.params.at("enc/op_b"));
    const int f_g = nn::linear(g, g.concat_cols({f_sh, f_rot, f_scale, f_op}),
                               model.params.at("enc/grid_w"), model.params.at("enc/grid_b"));

    // Block reduction and sparse mixing.
    nn::Conv3Params conv{&model.params.at("enc/conv_w1"), &model.params.at("enc/conv_b1"),
                         &model.params.at("enc/conv_w2"), &model.params.at("enc/conv_b2"),
                         &model.params.at("enc/conv_pad")};
    int latent = nn::conv3_block_reduce(g, f_g, in.slot_source, conv);
    std::vector<nn::SparseMixLayer> layers;
    for (int i = 0; i < cfg.unet_depth; ++i) {
        const std::string base = "enc/mix" + std::to_string(i);
        layers.push_back({&model.params.at(base + "_w"), &model.params.at(base + "_b"),
                          &model.params.at(base + "_pad")});
    }
    latent = nn::sparse_unet_mix(g, latent, in.neighbors, layers);

    fwd.geo_pre = nn::linear(g, latent, model.params.at("enc/geo_w"), model.params.at("enc/geo_b"));
    fwd.tex_pre = nn::linear(g, latent, model.params.at("enc/tex_w"), model.params.at("enc/tex_b"));

    // Quantization (or pass-through during warmup), straight-through in both
    // cases so gradient routing stays uniform.
    const int m = in.n_blocks();
    if (opt.use_vq) {
        if (!model.codebooks_ready())
            throw ConfigError("codec_forward: quantization requested before codebooks exist");
        const Eigen::MatrixXd& xg = g.value(fwd.geo_pre);
        const Eigen::MatrixXd& xt = g.value(fwd.tex_pre);
        Eigen::MatrixXd hg(m, cfg.d_q), ht(m, cfg.d_q);
        fwd.codes.grid_resolution = gs.resolution;
        fwd.codes.block_size = cfg.block_size;
        fwd.codes.blocks_per_axis = gs.resolution / cfg.block_size;
        fwd.codes.rvq_depth = cfg.rvq_depth;
        fwd.codes.codebook_size = cfg.codebook_size;
        for (int b = 0; b < m; ++b) {
            CodeStream::BlockCodes blk;
            blk.block_index = in.block_indices[b];
            blk.geo = rvq_encode(xg.row(b).transpose(), model.geometry_codec);
            blk.tex = rvq_encode(xt.row(b).transpose(), model.texture_codec);
            hg.row(b) = rvq_decode(blk.geo, model.geometry_codec).transpose();
            ht.row(b) = rvq_decode(blk.tex, model.texture_codec).transpose();
            fwd.codes.blocks.push_back(std::move(blk));
        }
        fwd.geo_q = g.st_replace(fwd.geo_pre, hg, opt.geo_gate);
        fwd.tex_q = g.st_replace(fwd.tex_pre, ht, nullptr);
        fwd.geo_commit = g.mse_loss(fwd.geo_pre, hg);
        fwd.tex_commit = g.mse_loss(fwd.tex_pre, ht);
    } else {
        fwd.geo_q = g.st_replace(fwd.geo_pre, g.value(fwd.geo_pre), opt.geo_gate);
        fwd.tex_q = fwd.tex_pre;
    }

    // Latent recovery: fuse the two heads back into the scene latent.
    fwd.scene_latent = nn::linear(g, g.concat_cols({fwd.geo_q, fwd.tex_q}),
                                  model.params.at("dec/fuse_w"), model.params.at("dec/fuse_b"));

    CondContext ctx = opt.cond;
    if (ctx.vis_grid == nullptr) ctx.vis_grid = &gs;
    run_decoder(g, model, fwd, gs.resolution, gs.bounds, ctx);
    return fwd;
}

CodecForward codec_decode(nn::Graph& g, CodecModel& model, const CodeStream& codes,
                          const Aabb& bounds, const CondContext& cond) {
    const ModelConfig& cfg = model.cfg;
    if (!model.codebooks_ready()) throw ConfigError("codec_decode: codebooks not initialized");
    if (codes.rvq_depth != cfg.rvq_depth || codes.codebook_size != cfg.codebook_size ||
        codes.block_size != cfg.block_size)
        throw ConfigError("codec_decode: stream parameters do not match the model");
    if (codes.codebook_hash != model.pack_hash())
        throw WrongCodebookError("codec_decode: stream was encoded against a different pack");

    CodecForward fwd;
    std::vector<int64_t> indices;
    for (const auto& blk : codes.blocks) indices.push_back(blk.block_index);
    ModelConfig stream_cfg = cfg;
    stream_cfg.grid_resolution = codes.grid_resolution;
    fwd.inputs = build_block_inputs(indices, stream_cfg);
    fwd.codes = codes;

    const int m = fwd.inputs.n_blocks();
    Eigen::MatrixXd hg(m, cfg.d_q), ht(m, cfg.d_q);
    for (int b = 0; b < m; ++b) {
        hg.row(b) = rvq_decode(codes.blocks[b].geo, model.geometry_codec).transpose();
        ht.row(b) = rvq_decode(codes.blocks[b].tex, model.texture_codec).transpose();
    }
    fwd.geo_q = g.constant(std::move(hg));
    fwd.tex_q = g.constant(std::move(ht));
    fwd.scene_latent = nn::linear(g, g.concat_cols({fwd.geo_q, fwd.tex_q}),
                                  model.params.at("dec/fuse_w"), model.params.at("dec/fuse_b"));
    run_decoder(g, model, fwd, codes.grid_resolution, bounds, cond);
    return fwd;
}

GridScene export_stage(const nn::Graph& g, const EncodeInputs& inputs, const StageNodes& stage,
                       int grid_resolution, const Aabb& bounds) {
    GridScene gs;
    gs.resolution = grid_resolution;
    gs.bounds = bounds;
    const Eigen::MatrixXd& quat = g.value(stage.quat);
    const Eigen::MatrixXd& scale = g.value(stage.scale);
    const Eigen::MatrixXd& logit = g.value(stage.logit);
    const Eigen::MatrixXd& sh = g.value(stage.sh);
    for (int i = 0; i < inputs.n_candidates(); ++i) {
        if (logit(i, 0) < kOpacityLogitThreshold) continue;
        GridCell cell;
        cell.rot = quat.row(i).transpose();
        cell.scale = scale.row(i).transpose();
        cell.opacity_logit = logit(i, 0);
        cell.sh = sh.row(i).transpose();
        gs.cells.emplace(gs.cell_index(inputs.cand_coord[i]), std::move(cell));
    }
    return gs;
}

CodeStream compress_scene(CodecModel& model, const Scene& scene) {
    const GridScene gs = voxelize(scene, model.cfg.grid_resolution);
    nn::Graph g;
    ForwardOptions opt;
    opt.use_vq = true;
    CodecForward fwd = codec_forward(g, model, gs, opt);
    fwd.codes.codebook_hash = model.pack_hash();
    return fwd.codes;
}

GridScene decompress_scene(CodecModel& model, const CodeStream& codes, const Aabb& bounds,
                           const std::vector<FeaturePyramid>* pyramids, bool coarse_features,
                           bool fine_features) {
    // Pass 1: unconditioned decode (recovers occupancy for visibility).
    nn::Graph g1;
    CondContext uncond;
    CodecForward pass1 = codec_decode(g1, model, codes, bounds, uncond);
    GridScene decoded = export_stage(g1, pass1.inputs, pass1.stage_fine, codes.grid_resolution,
                                     bounds);
    const bool have_images = pyramids != nullptr && !pyramids->empty();
    if (!have_images || decoded.cells.empty()) return decoded;

    // Pass 2: conditioned decode with visibility from the first pass.
    nn::Graph g2;
    CondContext ctx;
    ctx.pyramids = pyramids;
    ctx.vis_grid = &decoded;
    ctx.coarse_features = coarse_features;
    ctx.fine_features = fine_features;
    CodecForward pass2 = codec_decode(g2, model, codes, bounds, ctx);
    return export_stage(g2, pass2.inputs, pass2.stage_fine, codes.grid_resolution, bounds);
}

} // namespace gsq
