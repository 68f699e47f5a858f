#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "gsq/cond.h"
#include "gsq/container.h"
#include "gsq/grid.h"
#include "gsq/nn.h"
#include "gsq/rvq.h"

namespace gsq {

struct ModelConfig {
    int grid_resolution = 32; // default G used by compression
    int block_size = 4;       // K
    int sh_dim = 3;           // k
    int d_g = 32;             // grid-level feature dim
    int conv_hidden = 64;     // channels between the two block convolutions
    int d_b = 128;            // block feature dim
    int d_q = 64;             // per-head latent dim
    int d_cell = 32;          // fine grid-latent dim
    int d_img = 16;           // projected image feature dim
    int d_pos = 16;           // per-cell positional embedding dim
    int aux_hidden = 64;      // hidden width of the stage decoders
    int head_hidden = 32;     // hidden width of the attribute heads
    int unet_depth = 2;       // encoder-side sparse mix layers
    int cond_depth = 2;       // coarse-conditioning sparse mix layers
    int rvq_depth = 4;        // D
    int codebook_size = 1024; // N
    uint64_t init_seed = 1;

    int cells_per_block() const { return block_size * block_size * block_size; }
    int block_image_dim() const { return 2 * d_img + 1; } // pooled + level-2 + flag
    int cell_image_dim() const { return d_img + 1; }      // sampled + flag
};

void save_model_config(const ModelConfig& cfg, const std::string& path);
ModelConfig load_model_config(const std::string& path);

// All trainable parameters plus the two shared residual codecs.
class CodecModel {
public:
    ModelConfig cfg;
    nn::ParamStore params;
    RvqCodec geometry_codec;
    RvqCodec texture_codec;

    explicit CodecModel(const ModelConfig& cfg);

    bool codebooks_ready() const;
    // Gaussian-random codebooks (tests and pre-clustering warm starts).
    void init_random_codebooks(uint64_t seed, double scale = 0.5);
    // Snaps entries to float32 (the pack precision) and marks them frozen.
    void freeze_codebooks();
    CodebookPack pack() const;
    void adopt_pack(const CodebookPack& pack);
    uint64_t pack_hash() const;
};

// Static structure of one grid: block layout, candidate cells and encoder
// input matrices, derived once per forward pass.
struct EncodeInputs {
    std::vector<int64_t> block_indices;          // ascending
    std::vector<CellCoord> block_coords;
    std::vector<std::vector<int>> slot_source;   // per block: K^3 cell rows or -1
    std::vector<std::array<int, 27>> neighbors;  // per block: neighbor rows or -1
    // Candidate cells: every cell slot of every stored block, block-major,
    // offset-ascending (n_cand = M * K^3 rows).
    std::vector<CellCoord> cand_coord;
    std::vector<int> cand_block;        // block row of each candidate
    std::vector<int> cand_offset;       // in-block offset
    std::vector<int> cand_cell_row;     // occupied-cell row or -1
    // Encoder attribute inputs, one row per occupied cell (cell-map order).
    Eigen::MatrixXd attr_sh;        // [n_cells, k]
    Eigen::MatrixXd attr_rot;       // [n_cells, 4] unit, w >= 0
    Eigen::MatrixXd attr_logscale;  // [n_cells, 3]
    Eigen::MatrixXd attr_logit;     // [n_cells, 1]

    int n_blocks() const { return static_cast<int>(block_indices.size()); }
    int n_candidates() const { return static_cast<int>(cand_coord.size()); }
};

EncodeInputs build_encode_inputs(const GridScene& gs, const ModelConfig& cfg);
// Decode-side variant: block structure only (no per-cell attributes).
EncodeInputs build_block_inputs(const std::vector<int64_t>& block_indices,
                                const ModelConfig& cfg);

// Conditioning context. A null `pyramids` (or empty list) decodes
// unconditioned: feature vectors are zero with the no-observation flag set.
// `vis_grid` supplies the occupied cells used for visibility estimation
// (training: the source grid; decoding: a first-pass decoded grid).
struct CondContext {
    const std::vector<FeaturePyramid>* pyramids = nullptr;
    const GridScene* vis_grid = nullptr;
    bool coarse_features = true; // ablation switch: null features when false
    bool fine_features = true;
};

struct ForwardOptions {
    bool use_vq = true;            // false bypasses quantization (warmup)
    const bool* geo_gate = nullptr; // straight-through gate for the geometry head
    CondContext cond;
};

// Decoded attribute nodes over the candidate cells.
struct StageNodes {
    int quat = -1;     // [n_cand, 4]
    int logscale = -1; // [n_cand, 3], clamped log-scale
    int scale = -1;    // [n_cand, 3] = exp(logscale)
    int logit = -1;    // [n_cand, 1]
    int sh = -1;       // [n_cand, k]
};

struct CodecForward {
    EncodeInputs inputs;
    int geo_pre = -1, tex_pre = -1; // [M, d_q] pre-quantization latents
    int geo_q = -1, tex_q = -1;     // post-quantization (or pass-through)
    int geo_commit = -1, tex_commit = -1; // scalar commitment nodes (when vq on)
    CodeStream codes;               // filled when vq is on
    int scene_latent = -1;          // [M, d_b]
    int coarse_latent = -1;         // [M, d_b]
    int fine_latent = -1;           // [n_cand, d_cell]
    StageNodes stage_scene, stage_coarse, stage_fine;
};

// Full training-path forward: encode, quantize, recover, condition, decode.
CodecForward codec_forward(nn::Graph& g, CodecModel& model, const GridScene& gs,
                           const ForwardOptions& opt);

// Decode-only forward from stored codes.
CodecForward codec_decode(nn::Graph& g, CodecModel& model, const CodeStream& codes,
                          const Aabb& bounds, const CondContext& cond);

// Exports a decode stage to a sparse grid, dropping cells whose decoded
// opacity logit falls below the export threshold.
GridScene export_stage(const nn::Graph& g, const EncodeInputs& inputs, const StageNodes& stage,
                       int grid_resolution, const Aabb& bounds);

// scene -> voxelize -> encode -> quantize (eval path).
CodeStream compress_scene(CodecModel& model, const Scene& scene);

// codes -> conditioned decode -> grid scene. With images this runs a
// first unconditioned pass to recover occupancy for visibility estimation,
// then decodes again conditioned on the images.
GridScene decompress_scene(CodecModel& model, const CodeStream& codes, const Aabb& bounds,
                           const std::vector<FeaturePyramid>* pyramids = nullptr,
                           bool coarse_features = true, bool fine_features = true);

} // namespace gsq
