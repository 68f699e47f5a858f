#include "gsq/trainer.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

namespace gsq {

namespace {

template <typename T>
bool parse_key(const std::string& key, const std::string& want, std::istringstream& ls, T& out) {
    if (key != want) return false;
    ls >> out;
    return true;
}

} // namespace

TrainConfig parse_train_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw FormatError("parse_train_config: cannot open " + path);
    TrainConfig c;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        std::string key, eq;
        ls >> key >> eq;
        if (eq != "=") throw FormatError("parse_train_config: malformed line: " + line);
        const bool known =
            parse_key(key, "epochs", ls, c.epochs) ||
            parse_key(key, "warmup_epochs", ls, c.warmup_epochs) ||
            parse_key(key, "freeze_epochs", ls, c.freeze_epochs) ||
            parse_key(key, "lr_max", ls, c.lr_max) || parse_key(key, "lr_min", ls, c.lr_min) ||
            parse_key(key, "beta1", ls, c.beta1) || parse_key(key, "beta2", ls, c.beta2) ||
            parse_key(key, "weight_decay", ls, c.weight_decay) ||
            parse_key(key, "clip_max_norm", ls, c.clip_max_norm) ||
            parse_key(key, "batch_size", ls, c.batch_size) ||
            parse_key(key, "w_g_start", ls, c.w_g_start) ||
            parse_key(key, "w_g_end", ls, c.w_g_end) ||
            parse_key(key, "w_vq_start", ls, c.w_vq_start) ||
            parse_key(key, "w_vq_end", ls, c.w_vq_end) ||
            parse_key(key, "kmeans_period", ls, c.kmeans_period) ||
            parse_key(key, "kmeans_iters", ls, c.kmeans_iters) ||
            parse_key(key, "reservoir_size", ls, c.reservoir_size) ||
            parse_key(key, "ema_decay", ls, c.ema_decay) ||
            parse_key(key, "huber_momentum", ls, c.huber_momentum) ||
            parse_key(key, "lambda_dssim", ls, c.lambda_dssim) ||
            parse_key(key, "p_zero_images", ls, c.p_zero_images) ||
            parse_key(key, "p_fine_drop", ls, c.p_fine_drop) ||
            parse_key(key, "enable_vq", ls, c.enable_vq) ||
            parse_key(key, "seed", ls, c.seed) ||
            parse_key(key, "n_train_scenes", ls, c.n_train_scenes) ||
            parse_key(key, "n_test_scenes", ls, c.n_test_scenes) ||
            parse_key(key, "image_size", ls, c.image_size) ||
            parse_key(key, "eval_views", ls, c.eval_views) ||
            parse_key(key, "eval_image_size", ls, c.eval_image_size) ||
            parse_key(key, "camera_radius", ls, c.camera_radius);
        if (!known) throw FormatError("parse_train_config: unknown key " + key);
    }
    return c;
}

void save_train_config(const TrainConfig& c, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw FormatError("save_train_config: cannot open " + path);
    os.precision(17);
    os << "epochs = " << c.epochs << "\nwarmup_epochs = " << c.warmup_epochs
       << "\nfreeze_epochs = " << c.freeze_epochs << "\nlr_max = " << c.lr_max
       << "\nlr_min = " << c.lr_min << "\nbeta1 = " << c.beta1 << "\nbeta2 = " << c.beta2
       << "\nweight_decay = " << c.weight_decay << "\nclip_max_norm = " << c.clip_max_norm
       << "\nbatch_size = " << c.batch_size << "\nw_g_start = " << c.w_g_start
       << "\nw_g_end = " << c.w_g_end << "\nw_vq_start = " << c.w_vq_start
       << "\nw_vq_end = " << c.w_vq_end << "\nkmeans_period = " << c.kmeans_period
       << "\nkmeans_iters = " << c.kmeans_iters << "\nreservoir_size = " << c.reservoir_size
       << "\nema_decay = " << c.ema_decay << "\nhuber_momentum = " << c.huber_momentum
       << "\nlambda_dssim = " << c.lambda_dssim << "\np_zero_images = " << c.p_zero_images
       << "\np_fine_drop = " << c.p_fine_drop << "\nenable_vq = " << c.enable_vq
       << "\nseed = " << c.seed << "\nn_train_scenes = " << c.n_train_scenes
       << "\nn_test_scenes = " << c.n_test_scenes << "\nimage_size = " << c.image_size
       << "\neval_views = " << c.eval_views << "\neval_image_size = " << c.eval_image_size
       << "\ncamera_radius = " << c.camera_radius << "\n";
}

Schedule schedule_at(int epoch, const TrainConfig& cfg) {
    if (epoch < 1 || epoch > cfg.epochs)
        throw PreconditionError("schedule_at: epoch out of range");
    Schedule s;
    const int d0 = cfg.decay_start();
    const int d1 = cfg.decay_end();
    if (epoch <= cfg.warmup_epochs) {
        s.lr = cfg.lr_max * static_cast<double>(epoch) / cfg.warmup_epochs;
        s.w_g = cfg.w_g_start;
        s.w_vq = cfg.w_vq_start;
        s.vq_enabled = false;
        s.codebooks_frozen = false;
        return s;
    }
    if (epoch <= d1) {
        const double t = d1 > d0 ? static_cast<double>(epoch - d0) / (d1 - d0) : 1.0;
        s.lr = cfg.lr_min + (cfg.lr_max - cfg.lr_min) * 0.5 * (1.0 + std::cos(M_PI * t));
        s.w_g = cfg.w_g_start + (cfg.w_g_end - cfg.w_g_start) * t;
        s.w_vq = cfg.w_vq_start + (cfg.w_vq_end - cfg.w_vq_start) * t;
        s.vq_enabled = cfg.enable_vq;
        s.codebooks_frozen = false;
        return s;
    }
    s.lr = cfg.lr_min;
    s.w_g = cfg.w_g_end;
    s.w_vq = cfg.w_vq_end;
    s.vq_enabled = cfg.enable_vq;
    s.codebooks_frozen = true;
    return s;
}

AttributeTargets build_targets(const EncodeInputs& inputs, const GridScene& target_grid,
                               int sh_dim) {
    const int n = inputs.n_candidates();
    AttributeTargets t;
    t.quat = Eigen::MatrixXd::Zero(n, 4);
    t.quat.col(0).setOnes();
    t.logscale = Eigen::MatrixXd::Zero(n, 3);
    t.scale = Eigen::MatrixXd::Ones(n, 3);
    t.sigma = Eigen::MatrixXd::Zero(n, 1);
    t.sh = Eigen::MatrixXd::Zero(n, sh_dim);
    t.mask1 = Eigen::MatrixXd::Zero(n, 1);
    t.mask3 = Eigen::MatrixXd::Zero(n, 3);
    t.mask4 = Eigen::MatrixXd::Zero(n, 4);
    t.mask_sh = Eigen::MatrixXd::Zero(n, sh_dim);
    t.w_sigma = Eigen::MatrixXd::Zero(n, 1);
    for (int i = 0; i < n; ++i) {
        const auto it = target_grid.cells.find(target_grid.cell_index(inputs.cand_coord[i]));
        if (it == target_grid.cells.end()) continue;
        const GridCell& cell = it->second;
        t.quat.row(i) = quat_normalize(cell.rot).transpose();
        t.logscale.row(i) = cell.scale.array().log().matrix().transpose();
        t.scale.row(i) = cell.scale.transpose();
        t.sigma(i, 0) = logistic(cell.opacity_logit);
        t.sh.row(i) = cell.sh.transpose();
        t.mask1(i, 0) = 1.0;
        t.mask3.row(i).setOnes();
        t.mask4.row(i).setOnes();
        t.mask_sh.row(i).setOnes();
    }
    const double n_occ = t.mask1.sum();
    const double n_emp = static_cast<double>(n) - n_occ;
    for (int i = 0; i < n; ++i)
        t.w_sigma(i, 0) = t.mask1(i, 0) > 0.0 ? (n_occ > 0 ? 0.5 * n / n_occ : 0.0)
                                              : (n_emp > 0 ? 0.5 * n / n_emp : 0.0);
    return t;
}

namespace {

// Flip target quaternions into each predicted row's hemisphere; the double
// cover makes the raw residual ill-posed.
Eigen::MatrixXd sign_canonical_targets(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& target) {
    Eigen::MatrixXd out = target;
    for (Eigen::Index i = 0; i < pred.rows(); ++i)
        if (pred.row(i).dot(target.row(i)) < 0.0) out.row(i) = -target.row(i);
    return out;
}

} // namespace

namespace {

// Weighted mean entropy of soft binary targets; subtracting it turns the
// BCE into a KL divergence that reaches zero at a perfect prediction while
// leaving the gradient untouched.
double weighted_target_entropy(const Eigen::MatrixXd& t, const Eigen::MatrixXd& w) {
    double h = 0.0;
    double total = 0.0;
    for (Eigen::Index i = 0; i < t.size(); ++i) {
        const double p = t(i);
        double e = 0.0;
        if (p > 0.0) e -= p * std::log(p);
        if (p < 1.0) e -= (1.0 - p) * std::log(1.0 - p);
        h += w(i) * e;
        total += w(i);
    }
    return h / total;
}

} // namespace

StageLossNodes attribute_loss(nn::Graph& g, const StageNodes& stage,
                              const AttributeTargets& targets, const HuberBank& huber) {
    StageLossNodes out;
    const Eigen::MatrixXd quat_t = sign_canonical_targets(g.value(stage.quat), targets.quat);
    out.l_q = g.huber_loss(stage.quat, quat_t, huber.quat.delta, targets.mask4);
    const int l_slog = g.huber_loss(stage.logscale, targets.logscale, huber.scale_log.delta,
                                    targets.mask3);
    const int l_slin = g.huber_loss(stage.scale, targets.scale, huber.scale_lin.delta,
                                    targets.mask3);
    out.l_s = g.wsum({{l_slog, 1.0}, {l_slin, 1.0}});
    const int bce = g.bce_logits_loss(stage.logit, targets.sigma, targets.w_sigma);
    const int floor = g.constant(nn::Mat::Constant(
        1, 1, weighted_target_entropy(targets.sigma, targets.w_sigma)));
    out.l_sigma = g.wsum({{bce, 1.0}, {floor, -1.0}});
    out.l_y = g.huber_loss(stage.sh, targets.sh, huber.sh.delta, targets.mask_sh);
    return out;
}

LossBundle total_loss(nn::Graph& g, const CodecForward& fwd, const AttributeTargets& archived,
                      const AttributeTargets& changed, const HuberBank& huber, double w_g,
                      double w_vq, double scale) {
    LossBundle out;
    out.scene = attribute_loss(g, fwd.stage_scene, archived, huber);
    out.coarse = attribute_loss(g, fwd.stage_coarse, changed, huber);
    out.fine = attribute_loss(g, fwd.stage_fine, changed, huber);

    out.total_attribute = g.wsum({{out.scene.l_q, 1.0},  {out.scene.l_s, 1.0},
                                  {out.scene.l_sigma, 1.0}, {out.scene.l_y, 1.0},
                                  {out.coarse.l_q, 1.0}, {out.coarse.l_s, 1.0},
                                  {out.coarse.l_sigma, 1.0}, {out.coarse.l_y, 1.0},
                                  {out.fine.l_q, 1.0},   {out.fine.l_s, 1.0},
                                  {out.fine.l_sigma, 1.0}, {out.fine.l_y, 1.0}});

    const double wg = w_g * scale;
    std::vector<std::pair<int, double>> geo_terms = {
        {out.scene.l_q, wg},  {out.scene.l_s, wg},  {out.scene.l_sigma, wg},
        {out.coarse.l_q, wg}, {out.coarse.l_s, wg}, {out.coarse.l_sigma, wg},
        {out.fine.l_q, wg},   {out.fine.l_s, wg},   {out.fine.l_sigma, wg}};
    std::vector<std::pair<int, double>> tex_terms = {
        {out.scene.l_y, wg}, {out.coarse.l_y, wg}, {out.fine.l_y, wg}};
    if (fwd.geo_commit >= 0) geo_terms.push_back({fwd.geo_commit, w_vq * scale});
    if (fwd.tex_commit >= 0) tex_terms.push_back({fwd.tex_commit, w_vq * scale});
    out.sweep_geometry = g.wsum(geo_terms);
    out.sweep_texture = g.wsum(tex_terms);
    return out;
}

void collect_huber_residuals(const nn::Graph& g, const StageNodes& stage,
                             const AttributeTargets& targets, std::vector<double>& r_quat,
                             std::vector<double>& r_slog, std::vector<double>& r_slin,
                             std::vector<double>& r_sh) {
    const Eigen::MatrixXd quat_t = sign_canonical_targets(g.value(stage.quat), targets.quat);
    auto collect = [](const Eigen::MatrixXd& pred, const Eigen::MatrixXd& target,
                      const Eigen::MatrixXd& mask, std::vector<double>& out) {
        for (Eigen::Index i = 0; i < pred.size(); ++i)
            if (mask(i) != 0.0) out.push_back(std::abs(pred(i) - target(i)));
    };
    collect(g.value(stage.quat), quat_t, targets.mask4, r_quat);
    collect(g.value(stage.logscale), targets.logscale, targets.mask3, r_slog);
    collect(g.value(stage.scale), targets.scale, targets.mask3, r_slin);
    collect(g.value(stage.sh), targets.sh, targets.mask_sh, r_sh);
}

ImageMetric image_metric(const Scene& decoded, const std::vector<Image>& targets,
                         const std::vector<Camera>& cams, double lambda,
                         const RenderConfig& rc) {
    if (targets.size() != cams.size())
        throw PreconditionError("image_metric: one target image per camera required");
    ImageMetric m;
    double se = 0.0, ae = 0.0, ssim_sum = 0.0;
    size_t count = 0;
    for (size_t v = 0; v < cams.size(); ++v) {
        const Image pred = render(decoded, cams[v], rc);
        for (size_t i = 0; i < pred.pixels.size(); ++i) {
            const double d = pred.pixels[i] - targets[v].pixels[i];
            se += d * d;
            ae += std::abs(d);
        }
        count += pred.pixels.size();
        ssim_sum += ssim(pred, targets[v]);
    }
    m.l1 = ae / static_cast<double>(count);
    m.l2 = se / static_cast<double>(count);
    m.ssim = ssim_sum / static_cast<double>(cams.size());
    m.psnr = m.l2 == 0.0 ? std::numeric_limits<double>::infinity() : 10.0 * std::log10(1.0 / m.l2);
    m.l_i = lambda * (1.0 - m.ssim) / 2.0 + (1.0 - lambda) / 2.0 * (m.l1 + m.l2);
    return m;
}

double grid_regularizers(const Scene& scene) {
    if (scene.gaussians.empty()) throw PreconditionError("grid_regularizers: empty scene");
    double size_term = 0.0, op_term = 0.0;
    for (const Gaussian& g : scene.gaussians) {
        size_term += g.scale.mean();
        op_term += std::abs(g.opacity_logit);
    }
    const double n = static_cast<double>(scene.gaussians.size());
    return size_term / n - op_term / n;
}

void Reservoir::add(const Eigen::VectorXd& v, size_t cap, std::mt19937_64& rng) {
    ++seen;
    if (items.size() < cap) {
        items.push_back(v);
        return;
    }
    std::uniform_int_distribution<size_t> pick(0, seen - 1);
    const size_t j = pick(rng);
    if (j < cap) items[j] = v;
}

namespace {

void refresh_codec(RvqCodec& codec, const std::vector<Eigen::VectorXd>& latents, int iters,
                   uint64_t seed, bool warm_start) {
    if (latents.empty()) return;
    std::vector<Eigen::VectorXd> residuals = latents;
    for (size_t d = 0; d < codec.stages.size(); ++d) {
        Codebook& cb = codec.stages[d];
        if (cb.frozen) return;
        const std::optional<Eigen::MatrixXd> init =
            warm_start ? std::optional<Eigen::MatrixXd>(cb.entries) : std::nullopt;
        Codebook fitted = kmeans_fit(residuals, cb.size(), iters, seed + d, init);
        pin_zero_entry(fitted); // entry 0 stays the reserved skip code
        // Never adopt a codebook that measures worse on the sample.
        if (!warm_start || kmeans_objective(residuals, fitted) <= kmeans_objective(residuals, cb))
            cb.entries = fitted.entries;
        for (Eigen::VectorXd& r : residuals) {
            auto [idx, e] = vq_nearest(r, cb);
            r -= e;
        }
    }
}

} // namespace

void codebook_refresh(CodecModel& model, const Reservoir& geo, const Reservoir& tex,
                      int kmeans_iters, uint64_t seed) {
    refresh_codec(model.geometry_codec, geo.items, kmeans_iters, seed, true);
    refresh_codec(model.texture_codec, tex.items, kmeans_iters, seed + 101, true);
}

void write_train_log_csv(const std::vector<EpochLog>& log, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw FormatError("write_train_log_csv: cannot open " + path);
    os << "epoch,lr,w_g,w_vq,loss_scene,loss_coarse,loss_fine,loss_commit,"
          "val_psnr,val_ssim,val_l_i,util_geo,util_tex\n";
    for (const EpochLog& e : log)
        os << e.epoch << ',' << e.lr << ',' << e.w_g << ',' << e.w_vq << ',' << e.loss_scene
           << ',' << e.loss_coarse << ',' << e.loss_fine << ',' << e.loss_commit << ','
           << e.val_psnr << ',' << e.val_ssim << ',' << e.val_l_i << ',' << e.util_geo << ','
           << e.util_tex << '\n';
}

std::vector<FeaturePyramid> make_condition_pyramids(const Scene& scene, int count, uint64_t seed,
                                                    int image_size, double radius) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> az(0.0, 360.0);
    std::uniform_real_distribution<double> el(10.0, 35.0);
    const Vec3 target = 0.5 * (scene.bounds.lo + scene.bounds.hi);
    std::vector<FeaturePyramid> pyrs;
    for (int i = 0; i < count; ++i) {
        const double a = az(rng) * M_PI / 180.0;
        const double e = el(rng) * M_PI / 180.0;
        const Vec3 eye = target + radius * Vec3(std::cos(a) * std::cos(e),
                                                std::sin(a) * std::cos(e), std::sin(e));
        const Camera cam =
            Camera::look_at(eye, target, Vec3(0, 0, 1), 45.0, image_size, image_size);
        pyrs.push_back(extract_feature_pyramid(render(scene, cam), cam));
    }
    return pyrs;
}

namespace {

struct SceneData {
    SceneSpec spec;
    GridScene grid_archived;
    GridScene grid_changed;
    std::vector<FeaturePyramid> pyramids;
};

struct LossValues {
    double scene = 0.0, coarse = 0.0, fine = 0.0, commit = 0.0;
};

} // namespace

TrainResult train_loop(const DatasetSplit& split, const TrainConfig& tcfg,
                       const ModelConfig& mcfg) {
    if (split.train.empty()) throw PreconditionError("train_loop: empty dataset");
    std::mt19937_64 rng(tcfg.seed ^ 0x9e3779b97f4a7c15ull);

    TrainResult result{CodecModel(mcfg), {}, {}};
    CodecModel& model = result.model;

    // Materialize scenes, grids and conditioning features once.
    std::vector<SceneData> data;
    data.reserve(split.train.size());
    for (const SceneSpec& spec : split.train) {
        SceneData d;
        d.spec = spec;
        const Scene arch = archived_scene(spec);
        const Scene changed = simulate_change(arch, spec.change);
        d.grid_archived = voxelize(arch, mcfg.grid_resolution);
        d.grid_changed = voxelize(changed, mcfg.grid_resolution);
        d.pyramids = make_condition_pyramids(changed, spec.n_condition_images,
                                             spec.seed ^ 0xc0ffee, tcfg.image_size,
                                             tcfg.camera_radius);
        data.push_back(std::move(d));
    }

    // Validation fixtures (first training scene, ring cameras).
    const Scene val_changed = changed_scene(split.train.front());
    const Vec3 val_target = 0.5 * (val_changed.bounds.lo + val_changed.bounds.hi);
    const std::vector<Camera> val_cams =
        sample_cameras(tcfg.eval_views, tcfg.camera_radius, val_target, 20.0, 45.0,
                       tcfg.eval_image_size, tcfg.eval_image_size);
    std::vector<Image> val_images;
    for (const Camera& cam : val_cams) val_images.push_back(render(val_changed, cam));

    nn::AdamWConfig acfg;
    acfg.beta1 = tcfg.beta1;
    acfg.beta2 = tcfg.beta2;
    acfg.weight_decay = tcfg.weight_decay;
    acfg.clip_max_norm = tcfg.clip_max_norm;
    nn::AdamW optimizer(acfg);

    HuberBank huber;
    huber.quat.momentum = huber.scale_log.momentum = huber.scale_lin.momentum =
        huber.sh.momentum = tcfg.huber_momentum;

    Reservoir geo_buf, tex_buf;
    std::vector<EmaState> geo_ema(mcfg.rvq_depth), tex_ema(mcfg.rvq_depth);
    bool geo_gate = true;

    std::vector<int> order(data.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

    for (int epoch = 1; epoch <= tcfg.epochs; ++epoch) {
        const Schedule sched = schedule_at(epoch, tcfg);
        optimizer.config().lr = sched.lr;
        std::shuffle(order.begin(), order.end(), rng);

        LossValues epoch_loss;
        int epoch_scenes = 0;
        std::set<std::pair<int, int>> used_geo, used_tex;
        const bool vq_on = sched.vq_enabled && model.codebooks_ready();

        for (size_t start = 0; start < order.size(); start += tcfg.batch_size) {
            const size_t stop = std::min(order.size(), start + tcfg.batch_size);
            const double inv_batch = 1.0 / static_cast<double>(stop - start);
            model.params.zero_grads();
            std::vector<double> r_quat, r_slog, r_slin, r_sh;
            std::vector<std::vector<Eigen::VectorXd>> geo_stage_in(mcfg.rvq_depth),
                tex_stage_in(mcfg.rvq_depth);
            std::vector<std::vector<int>> geo_stage_idx(mcfg.rvq_depth),
                tex_stage_idx(mcfg.rvq_depth);

            for (size_t s = start; s < stop; ++s) {
                SceneData& d = data[order[s]];
                nn::Graph g;
                ForwardOptions opt;
                opt.use_vq = vq_on;
                opt.geo_gate = &geo_gate;
                const bool drop_images =
                    std::uniform_real_distribution<double>(0.0, 1.0)(rng) < tcfg.p_zero_images;
                const bool drop_fine =
                    std::uniform_real_distribution<double>(0.0, 1.0)(rng) < tcfg.p_fine_drop;
                if (!drop_images) {
                    opt.cond.pyramids = &d.pyramids;
                    opt.cond.vis_grid = &d.grid_archived;
                    // Exposing the coarse-only combination keeps that decode
                    // mode in-distribution.
                    opt.cond.fine_features = !drop_fine;
                }
                CodecForward fwd = codec_forward(g, model, d.grid_archived, opt);

                const AttributeTargets t_arch =
                    build_targets(fwd.inputs, d.grid_archived, mcfg.sh_dim);
                const AttributeTargets t_chg =
                    build_targets(fwd.inputs, d.grid_changed, mcfg.sh_dim);
                // Sweep 1: geometry objectives reach the geometry quantizer
                // output; sweep 2: texture objectives are cut at that edge.
                const LossBundle losses =
                    total_loss(g, fwd, t_arch, t_chg, huber, sched.w_g, sched.w_vq, inv_batch);
                if (!std::isfinite(g.value(losses.sweep_geometry)(0, 0)) ||
                    !std::isfinite(g.value(losses.sweep_texture)(0, 0)))
                    throw NumericError("train_loop: non-finite loss at epoch " +
                                       std::to_string(epoch));
                geo_gate = true;
                g.backward(losses.sweep_geometry);
                geo_gate = false;
                g.backward(losses.sweep_texture);
                geo_gate = true;

                // Bookkeeping: losses, Huber residuals, codebook batches.
                auto stage_total = [&](const StageLossNodes& n) {
                    return g.value(n.l_q)(0, 0) + g.value(n.l_s)(0, 0) +
                           g.value(n.l_sigma)(0, 0) + g.value(n.l_y)(0, 0);
                };
                epoch_loss.scene += stage_total(losses.scene);
                epoch_loss.coarse += stage_total(losses.coarse);
                epoch_loss.fine += stage_total(losses.fine);
                if (vq_on)
                    epoch_loss.commit +=
                        g.value(fwd.geo_commit)(0, 0) + g.value(fwd.tex_commit)(0, 0);
                ++epoch_scenes;
                collect_huber_residuals(g, fwd.stage_scene, t_arch, r_quat, r_slog, r_slin,
                                        r_sh);
                collect_huber_residuals(g, fwd.stage_fine, t_chg, r_quat, r_slog, r_slin, r_sh);

                const Eigen::MatrixXd& xg = g.value(fwd.geo_pre);
                const Eigen::MatrixXd& xt = g.value(fwd.tex_pre);
                for (Eigen::Index b = 0; b < xg.rows(); ++b) {
                    geo_buf.add(xg.row(b).transpose(), tcfg.reservoir_size, rng);
                    tex_buf.add(xt.row(b).transpose(), tcfg.reservoir_size, rng);
                }
                if (vq_on) {
                    for (int b = 0; b < fwd.codes.block_count(); ++b) {
                        Eigen::VectorXd rg = xg.row(b).transpose();
                        Eigen::VectorXd rt = xt.row(b).transpose();
                        for (int dstage = 0; dstage < mcfg.rvq_depth; ++dstage) {
                            const int ig = fwd.codes.blocks[b].geo[dstage];
                            const int it = fwd.codes.blocks[b].tex[dstage];
                            used_geo.insert({dstage, ig});
                            used_tex.insert({dstage, it});
                            if (sched.codebooks_frozen) continue;
                            geo_stage_in[dstage].push_back(rg);
                            geo_stage_idx[dstage].push_back(ig);
                            tex_stage_in[dstage].push_back(rt);
                            tex_stage_idx[dstage].push_back(it);
                            rg -= model.geometry_codec.stages[dstage].entries.row(ig).transpose();
                            rt -= model.texture_codec.stages[dstage].entries.row(it).transpose();
                        }
                    }
                }
            }

            optimizer.step(model.params);
            huber.quat.update(std::move(r_quat));
            huber.scale_log.update(std::move(r_slog));
            huber.scale_lin.update(std::move(r_slin));
            huber.sh.update(std::move(r_sh));
            if (vq_on && !sched.codebooks_frozen) {
                for (int dstage = 0; dstage < mcfg.rvq_depth; ++dstage) {
                    ema_update(model.geometry_codec.stages[dstage], geo_ema[dstage],
                               geo_stage_in[dstage], geo_stage_idx[dstage], tcfg.ema_decay);
                    ema_update(model.texture_codec.stages[dstage], tex_ema[dstage],
                               tex_stage_in[dstage], tex_stage_idx[dstage], tcfg.ema_decay);
                    pin_zero_entry(model.geometry_codec.stages[dstage]);
                    pin_zero_entry(model.texture_codec.stages[dstage]);
                }
            }
        }

        // Codebook lifecycle at epoch boundaries.
        if (epoch == tcfg.warmup_epochs && tcfg.epochs > tcfg.warmup_epochs &&
            tcfg.enable_vq) {
            if (!geo_buf.items.empty()) {
                model.init_random_codebooks(tcfg.seed + 7);
                refresh_codec(model.geometry_codec, geo_buf.items, tcfg.kmeans_iters + 5,
                              tcfg.seed + 11, false);
                refresh_codec(model.texture_codec, tex_buf.items, tcfg.kmeans_iters + 5,
                              tcfg.seed + 13, false);
            }
        } else if (sched.vq_enabled && !sched.codebooks_frozen && model.codebooks_ready() &&
                   (epoch - tcfg.decay_start() + 1) % tcfg.kmeans_period == 0) {
            codebook_refresh(model, geo_buf, tex_buf, tcfg.kmeans_iters, tcfg.seed + epoch);
        }
        if (epoch == tcfg.decay_end() && model.codebooks_ready()) model.freeze_codebooks();

        // Per-epoch metrics on the validation scene.
        EpochLog log;
        log.epoch = epoch;
        log.lr = sched.lr;
        log.w_g = sched.w_g;
        log.w_vq = sched.w_vq;
        log.loss_scene = epoch_loss.scene / std::max(1, epoch_scenes);
        log.loss_coarse = epoch_loss.coarse / std::max(1, epoch_scenes);
        log.loss_fine = epoch_loss.fine / std::max(1, epoch_scenes);
        log.loss_commit = epoch_loss.commit / std::max(1, epoch_scenes);
        const int n_codes = mcfg.rvq_depth * mcfg.codebook_size;
        log.util_geo = static_cast<double>(used_geo.size()) / n_codes;
        log.util_tex = static_cast<double>(used_tex.size()) / n_codes;
        {
            nn::Graph g;
            ForwardOptions opt;
            opt.use_vq = vq_on;
            opt.cond.pyramids = &data.front().pyramids;
            opt.cond.vis_grid = &data.front().grid_archived;
            CodecForward fwd = codec_forward(g, model, data.front().grid_archived, opt);
            const GridScene decoded = export_stage(g, fwd.inputs, fwd.stage_fine,
                                                   mcfg.grid_resolution,
                                                   data.front().grid_archived.bounds);
            if (!decoded.cells.empty()) {
                const ImageMetric m = image_metric(grid_to_scene(decoded), val_images, val_cams,
                                                   tcfg.lambda_dssim);
                log.val_psnr = m.psnr;
                log.val_ssim = m.ssim;
                log.val_l_i = m.l_i;
            }
        }
        result.log.push_back(log);
    }

    if (model.codebooks_ready()) {
        model.freeze_codebooks();
        result.pack = model.pack();
    }
    return result;
}

void save_model(const CodecModel& model, const std::string& dir) {
    std::filesystem::create_directories(dir);
    save_model_config(model.cfg, dir + "/model.cfg");
    nn::save_checkpoint(model.params, dir + "/model.gsqw");
    if (model.codebooks_ready()) write_codebook_pack_file(model.pack(), dir + "/codebooks.gsc");
}

CodecModel load_model(const std::string& dir) {
    CodecModel model(load_model_config(dir + "/model.cfg"));
    nn::load_checkpoint(model.params, dir + "/model.gsqw");
    if (std::filesystem::exists(dir + "/codebooks.gsc"))
        model.adopt_pack(read_codebook_pack_file(dir + "/codebooks.gsc"));
    return model;
}

} // namespace gsq
