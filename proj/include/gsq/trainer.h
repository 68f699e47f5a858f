#pragma once

#include <string>
#include <vector>

#include "gsq/codec.h"
#include "gsq/metrics.h"
#include "gsq/scenelab.h"

namespace gsq {

struct TrainConfig {
    int epochs = 100;
    int warmup_epochs = 10; // vq disabled, lr warms up linearly
    int freeze_epochs = 10; // lr and codebooks fixed
    double lr_max = 1e-4;
    double lr_min = 1e-5;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double weight_decay = 1e-4;
    double clip_max_norm = 1.0;
    int batch_size = 8;
    double w_g_start = 0.1;
    double w_g_end = 0.0;
    double w_vq_start = 0.01;
    double w_vq_end = 0.1;
    int kmeans_period = 2; // epochs between clustering refreshes
    int kmeans_iters = 10;
    int reservoir_size = 4096;
    double ema_decay = 0.99;
    double huber_momentum = 0.9;
    double lambda_dssim = 0.2;
    double p_zero_images = 0.125; // per-visit chance of training unconditioned
    double p_fine_drop = 0.25;    // with images: chance of coarse-only conditioning
    bool enable_vq = true;        // master switch (off for ablation/smoke runs)
    uint64_t seed = 0;
    int n_train_scenes = 64;
    int n_test_scenes = 8;
    int image_size = 32;      // conditioning image resolution
    int eval_views = 4;       // validation views for the per-epoch metric
    int eval_image_size = 48;
    double camera_radius = 1.4;

    int decay_start() const { return warmup_epochs + 1; }
    int decay_end() const { return epochs - freeze_epochs; }
};

// Flat `key = value` config file covering every TrainConfig field.
TrainConfig parse_train_config(const std::string& path);
void save_train_config(const TrainConfig& cfg, const std::string& path);

struct Schedule {
    double lr = 0.0;
    double w_g = 0.0;
    double w_vq = 0.0;
    bool vq_enabled = false;
    bool codebooks_frozen = false;
};

// Piecewise schedule: warmup (linear lr ramp, vq off), decay (cosine lr,
// linear loss-weight ramps), freeze (constant lr, frozen codebooks).
// Continuous at the span boundaries.
Schedule schedule_at(int epoch, const TrainConfig& cfg);

// Attribute targets over the candidate cells of one grid. Occupied cells
// carry full targets; empty cells are supervised on opacity only.
struct AttributeTargets {
    Eigen::MatrixXd quat;     // [n_cand, 4]
    Eigen::MatrixXd logscale; // [n_cand, 3]
    Eigen::MatrixXd scale;    // [n_cand, 3]
    Eigen::MatrixXd sigma;    // [n_cand, 1] opacity in (0,1); 0 for empty cells
    Eigen::MatrixXd sh;       // [n_cand, k]
    Eigen::MatrixXd mask1;    // occupied mask replicated per column count
    Eigen::MatrixXd mask3;
    Eigen::MatrixXd mask4;
    Eigen::MatrixXd mask_sh;
    // Class-balanced weights for the opacity term (occupied cells are a
    // small minority of the candidates).
    Eigen::MatrixXd w_sigma;
};

AttributeTargets build_targets(const EncodeInputs& inputs, const GridScene& target_grid,
                               int sh_dim);

// Dynamic Huber thresholds, one per attribute term, shared across stages.
struct HuberBank {
    nn::HuberState quat;
    nn::HuberState scale_log;
    nn::HuberState scale_lin;
    nn::HuberState sh;
};

struct StageLossNodes {
    int l_q = -1;     // Huber on sign-canonicalized quaternions
    int l_s = -1;     // Huber on scales, log-space + linear-space
    int l_sigma = -1; // BCE on opacity logits
    int l_y = -1;     // Huber on SH coefficients (texture objective)
};

// Builds the per-stage loss nodes. The quaternion target sign is flipped
// rowwise to the predicted hemisphere before the Huber residual.
StageLossNodes attribute_loss(nn::Graph& g, const StageNodes& stage,
                              const AttributeTargets& targets, const HuberBank& huber);

// Three-stage supervision plus the gradient-routing split: the scene stage
// targets the archived attributes, both fusion stages target the changed
// attributes. Geometry objectives (and the geometry commitment) back-propagate
// with the straight-through gate open; texture objectives with it closed.
struct LossBundle {
    StageLossNodes scene, coarse, fine;
    int total_attribute = -1; // unweighted sum of all three stages' terms
    int sweep_geometry = -1;  // w_g * geometry terms + w_vq * geometry commitment
    int sweep_texture = -1;   // w_g * texture terms + w_vq * texture commitment
};

LossBundle total_loss(nn::Graph& g, const CodecForward& fwd, const AttributeTargets& archived,
                      const AttributeTargets& changed, const HuberBank& huber, double w_g,
                      double w_vq, double scale = 1.0);

// Collects |residual| samples for the Huber threshold updates.
void collect_huber_residuals(const nn::Graph& g, const StageNodes& stage,
                             const AttributeTargets& targets,
                             std::vector<double>& r_quat, std::vector<double>& r_slog,
                             std::vector<double>& r_slin, std::vector<double>& r_sh);

// Photometric evaluation metric (not a training gradient):
// L_I = lambda*(1-SSIM)/2 + (1-lambda)/2*(L1+L2), plus PSNR/SSIM.
struct ImageMetric {
    double l1 = 0.0;
    double l2 = 0.0;
    double ssim = 0.0;
    double psnr = 0.0;
    double l_i = 0.0;
};
ImageMetric image_metric(const Scene& decoded, const std::vector<Image>& targets,
                         const std::vector<Camera>& cams, double lambda = 0.2,
                         const RenderConfig& rc = {});

// Regularizers used when fitting plain grid baselines:
// mean scale minus mean |opacity logit|.
double grid_regularizers(const Scene& scene);

// Uniform reservoir sample of latent rows for the clustering refreshes.
struct Reservoir {
    std::vector<Eigen::VectorXd> items;
    size_t seen = 0;

    void add(const Eigen::VectorXd& v, size_t cap, std::mt19937_64& rng);
};

// Re-clusters every stage of both heads from buffered pre-quantization
// latents, warm-started from the current entries. No-op on frozen codebooks.
void codebook_refresh(CodecModel& model, const Reservoir& geo, const Reservoir& tex,
                      int kmeans_iters, uint64_t seed);

struct EpochLog {
    int epoch = 0;
    double lr = 0.0, w_g = 0.0, w_vq = 0.0;
    double loss_scene = 0.0, loss_coarse = 0.0, loss_fine = 0.0;
    double loss_commit = 0.0;
    double val_psnr = 0.0, val_ssim = 0.0, val_l_i = 0.0;
    double util_geo = 0.0, util_tex = 0.0; // fraction of entries used
};

void write_train_log_csv(const std::vector<EpochLog>& log, const std::string& path);

struct TrainResult {
    CodecModel model;
    CodebookPack pack;
    std::vector<EpochLog> log;
};

// Full training run: deterministic for a fixed config. Throws NumericError
// on a non-finite loss.
TrainResult train_loop(const DatasetSplit& split, const TrainConfig& tcfg,
                       const ModelConfig& mcfg);

// Renders `count` conditioning views of the scene with seeded poses and
// extracts their feature pyramids.
std::vector<FeaturePyramid> make_condition_pyramids(const Scene& scene, int count,
                                                    uint64_t seed, int image_size,
                                                    double radius);

void save_model(const CodecModel& model, const std::string& dir);
CodecModel load_model(const std::string& dir);

} // namespace gsq
