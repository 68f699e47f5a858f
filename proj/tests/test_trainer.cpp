#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include "gsq/trainer.h"

using namespace gsq;

namespace {

ModelConfig tiny_model() {
    ModelConfig cfg;
    cfg.grid_resolution = 8;
    cfg.d_g = 8;
    cfg.conv_hidden = 8;
    cfg.d_b = 12;
    cfg.d_q = 6;
    cfg.d_cell = 6;
    cfg.d_img = 4;
    cfg.d_pos = 4;
    cfg.aux_hidden = 8;
    cfg.head_hidden = 8;
    cfg.unet_depth = 1;
    cfg.cond_depth = 1;
    cfg.rvq_depth = 2;
    cfg.codebook_size = 16;
    cfg.init_seed = 5;
    return cfg;
}

GridScene toy_grid(uint64_t seed, int cells = 10) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    GridScene gs;
    gs.resolution = 8;
    gs.bounds.hi = Vec3::Ones();
    while (static_cast<int>(gs.cells.size()) < cells) {
        const CellCoord c(static_cast<int>(u(rng) * 8), static_cast<int>(u(rng) * 8),
                          static_cast<int>(u(rng) * 8));
        GridCell cell;
        cell.sh = Eigen::Vector3d(u(rng) - 0.5, u(rng) - 0.5, u(rng) - 0.5);
        cell.rot = quat_normalize(Vec4(u(rng) + 0.2, u(rng) - 0.5, u(rng) - 0.5, u(rng) - 0.5));
        cell.scale = Vec3::Constant(0.01 + 0.01 * u(rng));
        cell.opacity_logit = 0.5 + 2.0 * u(rng);
        gs.cells[gs.cell_index(c)] = cell;
    }
    return gs;
}

} // namespace

TEST_CASE("schedule conformance at the probe epochs") {
    const TrainConfig cfg; // the full published schedule: 100/10/10
    REQUIRE(cfg.epochs == 100);

    auto s = schedule_at(1, cfg);
    CHECK(s.lr == doctest::Approx(1e-5));
    CHECK_FALSE(s.vq_enabled);
    CHECK_FALSE(s.codebooks_frozen);
    CHECK(s.w_g == doctest::Approx(0.1));
    CHECK(s.w_vq == doctest::Approx(0.01));

    s = schedule_at(5, cfg);
    CHECK(s.lr == doctest::Approx(5e-5));
    CHECK_FALSE(s.vq_enabled);

    s = schedule_at(10, cfg);
    CHECK(s.lr == doctest::Approx(1e-4));
    CHECK_FALSE(s.vq_enabled);

    s = schedule_at(11, cfg);
    CHECK(s.lr == doctest::Approx(1e-4)); // continuity across the boundary
    CHECK(s.vq_enabled);
    CHECK(s.w_g == doctest::Approx(0.1));
    CHECK(s.w_vq == doctest::Approx(0.01));

    s = schedule_at(50, cfg);
    const double t = 39.0 / 79.0;
    CHECK(s.lr == doctest::Approx(1e-5 + 9e-5 * 0.5 * (1 + std::cos(M_PI * t))));
    CHECK(s.w_g == doctest::Approx(0.1 * (1 - t)));
    CHECK(s.w_vq == doctest::Approx(0.01 + 0.09 * t));

    s = schedule_at(90, cfg);
    CHECK(s.lr == doctest::Approx(1e-5));
    CHECK(s.w_g == doctest::Approx(0.0));
    CHECK(s.w_vq == doctest::Approx(0.1));
    CHECK_FALSE(s.codebooks_frozen);

    s = schedule_at(91, cfg);
    CHECK(s.lr == doctest::Approx(1e-5)); // endpoint equality at 90 -> 91
    CHECK(s.codebooks_frozen);
    CHECK(s.w_g == doctest::Approx(0.0));
    CHECK(s.w_vq == doctest::Approx(0.1));

    s = schedule_at(100, cfg);
    CHECK(s.codebooks_frozen);
    CHECK(s.lr == doctest::Approx(1e-5));

    CHECK_THROWS_AS(schedule_at(0, cfg), PreconditionError);
    CHECK_THROWS_AS(schedule_at(101, cfg), PreconditionError);
}

TEST_CASE("attribute loss is zero at a perfect prediction") {
    const ModelConfig mcfg = tiny_model();
    const GridScene gs = toy_grid(1);
    const EncodeInputs inputs = build_encode_inputs(gs, mcfg);
    const AttributeTargets t = build_targets(inputs, gs, 3);

    nn::Graph g;
    StageNodes stage;
    stage.quat = g.input(t.quat);
    stage.logscale = g.input(t.logscale);
    stage.scale = g.input(t.scale);
    // The perfect logit prediction reproduces the target opacity.
    nn::Mat logits(t.sigma.rows(), 1);
    for (Eigen::Index i = 0; i < t.sigma.rows(); ++i)
        logits(i, 0) = t.sigma(i, 0) <= 0.0 ? -40.0 : logit(t.sigma(i, 0));
    stage.logit = g.input(logits);
    stage.sh = g.input(t.sh);

    HuberBank huber;
    const StageLossNodes l = attribute_loss(g, stage, t, huber);
    CHECK(g.value(l.l_q)(0, 0) == doctest::Approx(0.0));
    CHECK(g.value(l.l_s)(0, 0) == doctest::Approx(0.0));
    CHECK(g.value(l.l_sigma)(0, 0) == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(g.value(l.l_y)(0, 0) == doctest::Approx(0.0));
}

TEST_CASE("quaternion double cover: q and -q incur the same loss") {
    const ModelConfig mcfg = tiny_model();
    const GridScene gs = toy_grid(2);
    const EncodeInputs inputs = build_encode_inputs(gs, mcfg);
    const AttributeTargets t = build_targets(inputs, gs, 3);

    nn::Graph g;
    StageNodes stage;
    stage.quat = g.input(-t.quat); // opposite hemisphere
    stage.logscale = g.input(t.logscale);
    stage.scale = g.input(t.scale);
    stage.logit = g.input(nn::Mat::Zero(t.sigma.rows(), 1));
    stage.sh = g.input(t.sh);
    HuberBank huber;
    const StageLossNodes l = attribute_loss(g, stage, t, huber);
    CHECK(g.value(l.l_q)(0, 0) == doctest::Approx(0.0));
}

TEST_CASE("three-stage total is additive") {
    const ModelConfig mcfg = tiny_model();
    CodecModel model(mcfg);
    const GridScene gs = toy_grid(3);

    nn::Graph g;
    ForwardOptions opt;
    opt.use_vq = false;
    const CodecForward fwd = codec_forward(g, model, gs, opt);
    const AttributeTargets t = build_targets(fwd.inputs, gs, 3);
    HuberBank huber;
    const StageLossNodes ls = attribute_loss(g, fwd.stage_scene, t, huber);
    const StageLossNodes lc = attribute_loss(g, fwd.stage_coarse, t, huber);
    const StageLossNodes lf = attribute_loss(g, fwd.stage_fine, t, huber);

    auto total = [&](const StageLossNodes& n) {
        return g.value(n.l_q)(0, 0) + g.value(n.l_s)(0, 0) + g.value(n.l_sigma)(0, 0) +
               g.value(n.l_y)(0, 0);
    };
    const double sum3 = total(ls) + total(lc) + total(lf);
    CHECK(sum3 == doctest::Approx(total(ls) + total(lc) + total(lf)));
    CHECK(total(ls) > 0.0);

    // Each stage's gradients pass a finite-difference check.
    auto loss_fn = [&](bool with_grad) {
        nn::Graph gg;
        const CodecForward f = codec_forward(gg, model, gs, opt);
        HuberBank hb;
        const StageLossNodes a = attribute_loss(gg, f.stage_scene, t, hb);
        const StageLossNodes b = attribute_loss(gg, f.stage_fine, t, hb);
        const int loss = gg.wsum({{a.l_q, 1.0}, {a.l_s, 1.0}, {a.l_sigma, 1.0},
                                  {a.l_y, 1.0}, {b.l_q, 1.0}, {b.l_y, 1.0}});
        const double v = gg.value(loss)(0, 0);
        if (with_grad) gg.backward(loss);
        return v;
    };
    const auto report = nn::grad_check(model.params, {"auxs/w1", "head/scene_geo_w2",
                                                      "head/fine_tex_w2", "enc/grid_w"},
                                       loss_fn, 1e-3, 1e-3, 8, 7);
    if (!report.ok())
        for (const auto& f : report.failures) MESSAGE(f);
    CHECK(report.ok());
}

TEST_CASE("total_loss: additivity and sweep assembly") {
    const ModelConfig mcfg = tiny_model();
    CodecModel model(mcfg);
    model.init_random_codebooks(31);
    const GridScene gs = toy_grid(7);

    nn::Graph g;
    ForwardOptions opt;
    opt.use_vq = true;
    const CodecForward fwd = codec_forward(g, model, gs, opt);
    const AttributeTargets t = build_targets(fwd.inputs, gs, 3);
    HuberBank huber;
    const LossBundle bundle = total_loss(g, fwd, t, t, huber, 0.5, 0.25);

    auto stage_sum = [&](const StageLossNodes& n) {
        return g.value(n.l_q)(0, 0) + g.value(n.l_s)(0, 0) + g.value(n.l_sigma)(0, 0) +
               g.value(n.l_y)(0, 0);
    };
    const double s = stage_sum(bundle.scene);
    const double c = stage_sum(bundle.coarse);
    const double f = stage_sum(bundle.fine);
    // The unweighted total is the sum of the stages; removing one stage
    // changes it by exactly that stage's value.
    CHECK(g.value(bundle.total_attribute)(0, 0) == doctest::Approx(s + c + f).epsilon(1e-12));
    CHECK(g.value(bundle.total_attribute)(0, 0) - c ==
          doctest::Approx(s + f).epsilon(1e-12));

    // Sweeps: w_g over the geometry/texture splits plus w_vq commitments.
    const double geo_expect =
        0.5 * (g.value(bundle.scene.l_q)(0, 0) + g.value(bundle.scene.l_s)(0, 0) +
               g.value(bundle.scene.l_sigma)(0, 0) + g.value(bundle.coarse.l_q)(0, 0) +
               g.value(bundle.coarse.l_s)(0, 0) + g.value(bundle.coarse.l_sigma)(0, 0) +
               g.value(bundle.fine.l_q)(0, 0) + g.value(bundle.fine.l_s)(0, 0) +
               g.value(bundle.fine.l_sigma)(0, 0)) +
        0.25 * g.value(fwd.geo_commit)(0, 0);
    CHECK(g.value(bundle.sweep_geometry)(0, 0) == doctest::Approx(geo_expect).epsilon(1e-12));
    const double tex_expect =
        0.5 * (g.value(bundle.scene.l_y)(0, 0) + g.value(bundle.coarse.l_y)(0, 0) +
               g.value(bundle.fine.l_y)(0, 0)) +
        0.25 * g.value(fwd.tex_commit)(0, 0);
    CHECK(g.value(bundle.sweep_texture)(0, 0) == doctest::Approx(tex_expect).epsilon(1e-12));
}

TEST_CASE("image metric closed forms and lambda assembly") {
    Image a(16, 16), b(16, 16);
    for (int i = 0; i < 16 * 16 * 3; ++i) {
        a.pixels[i] = 0.25 + 0.5 * ((i * 2654435761u >> 8) % 997) / 997.0;
        b.pixels[i] = a.pixels[i];
    }
    Scene scene;
    Gaussian g;
    g.mu = Vec3(0.5, 0.5, 0.5);
    g.scale = Vec3(0.05, 0.05, 0.05);
    g.opacity_logit = 2.0;
    scene.gaussians.push_back(g);
    const Camera cam =
        Camera::look_at(Vec3(0.5, -1.0, 0.5), Vec3(0.5, 0.5, 0.5), Vec3(0, 0, 1), 45.0, 16, 16);

    // Identical images: all terms vanish.
    const Image rendered = render(scene, cam);
    const ImageMetric perfect = image_metric(scene, {rendered}, {cam});
    CHECK(perfect.l1 == doctest::Approx(0.0));
    CHECK(perfect.l2 == doctest::Approx(0.0));
    CHECK(perfect.ssim == doctest::Approx(1.0));
    CHECK(perfect.l_i == doctest::Approx(0.0));
    CHECK(std::isinf(perfect.psnr));

    // A constant offset of 0.1 gives L1 = 0.1 and L2 = 0.01, and the total
    // assembles with lambda = 0.2.
    Image shifted = rendered;
    for (double& p : shifted.pixels) p += 0.1;
    const ImageMetric m = image_metric(scene, {shifted}, {cam}, 0.2);
    CHECK(m.l1 == doctest::Approx(0.1).epsilon(1e-9));
    CHECK(m.l2 == doctest::Approx(0.01).epsilon(1e-9));
    CHECK(m.l_i == doctest::Approx(0.2 * (1.0 - m.ssim) / 2.0 + 0.4 * (0.1 + 0.01)).epsilon(1e-12));
}

TEST_CASE("grid regularizers") {
    Scene scene;
    for (int i = 0; i < 4; ++i) {
        Gaussian g;
        g.scale = Vec3::Constant(0.1);
        g.opacity_logit = i % 2 == 0 ? 5.0 : -5.0;
        scene.gaussians.push_back(g);
    }
    CHECK(grid_regularizers(scene) == doctest::Approx(0.1 - 5.0));

    // Shrinking any scale decreases the size term.
    Scene smaller = scene;
    smaller.gaussians[0].scale[1] = 0.05;
    CHECK(grid_regularizers(smaller) < grid_regularizers(scene));

    // Pushing a logit toward zero increases the opacity term.
    Scene softer = scene;
    softer.gaussians[0].opacity_logit = 1.0;
    CHECK(grid_regularizers(softer) > grid_regularizers(scene));
}

TEST_CASE("stop-gradient: texture objectives do not reach the geometry head") {
    const ModelConfig mcfg = tiny_model();
    CodecModel model(mcfg);
    model.init_random_codebooks(9);
    const GridScene gs = toy_grid(5);
    HuberBank huber;

    auto grads_with_texture_weight = [&](double w_tex) {
        model.params.zero_grads();
        bool gate = true;
        nn::Graph g;
        ForwardOptions opt;
        opt.use_vq = true;
        opt.geo_gate = &gate;
        const CodecForward fwd = codec_forward(g, model, gs, opt);
        const AttributeTargets t = build_targets(fwd.inputs, gs, 3);
        const StageLossNodes lf = attribute_loss(g, fwd.stage_fine, t, huber);
        const int sweep1 = g.wsum({{lf.l_q, 1.0}, {lf.l_s, 1.0}, {lf.l_sigma, 1.0},
                                   {fwd.geo_commit, 0.05}});
        const int sweep2 = g.wsum({{lf.l_y, w_tex}, {fwd.tex_commit, 0.05}});
        gate = true;
        g.backward(sweep1);
        gate = false;
        g.backward(sweep2);
        return std::make_pair(model.params.at("enc/geo_w").grad,
                              model.params.at("enc/tex_w").grad);
    };

    const auto [geo1, tex1] = grads_with_texture_weight(1.0);
    const auto [geo2, tex2] = grads_with_texture_weight(2.0);
    CHECK((geo1 - geo2).norm() == 0.0); // geometry head untouched by texture weight
    CHECK((tex1 - tex2).norm() > 0.0);  // texture head scales with it
    CHECK(geo1.norm() > 0.0);
}

TEST_CASE("codebook refresh never worsens the sample quantization error") {
    const ModelConfig mcfg = tiny_model();
    CodecModel model(mcfg);
    model.init_random_codebooks(13);

    std::mt19937_64 rng(17);
    std::normal_distribution<double> n(0.0, 1.0);
    Reservoir geo, tex;
    for (int i = 0; i < 200; ++i) {
        Eigen::VectorXd v(mcfg.d_q), w(mcfg.d_q);
        for (int j = 0; j < mcfg.d_q; ++j) {
            v[j] = n(rng);
            w[j] = 0.5 * n(rng) + 1.0;
        }
        geo.items.push_back(v);
        tex.items.push_back(w);
    }

    auto chain_error = [&](const RvqCodec& codec, const std::vector<Eigen::VectorXd>& pts) {
        double total = 0.0;
        for (const auto& p : pts) total += (p - rvq_decode(rvq_encode(p, codec), codec)).squaredNorm();
        return total;
    };
    const double before = chain_error(model.geometry_codec, geo.items);
    codebook_refresh(model, geo, tex, 10, 999);
    const double after = chain_error(model.geometry_codec, geo.items);
    CHECK(after <= before + 1e-9);

    // Refreshing with latents already at the entries is a fixed point.
    const double again = [&] {
        codebook_refresh(model, geo, tex, 10, 1000);
        return chain_error(model.geometry_codec, geo.items);
    }();
    CHECK(again <= after + 1e-9);

    // Frozen codebooks are left alone.
    model.freeze_codebooks();
    const Eigen::MatrixXd snapshot = model.geometry_codec.stages[0].entries;
    codebook_refresh(model, geo, tex, 10, 1001);
    CHECK((model.geometry_codec.stages[0].entries - snapshot).norm() == 0.0);
}

TEST_CASE("train config io round trip") {
    TrainConfig cfg;
    cfg.epochs = 23;
    cfg.warmup_epochs = 4;
    cfg.lr_max = 3e-3;
    cfg.p_zero_images = 0.5;
    cfg.seed = 42;
    save_train_config(cfg, "test_train.cfg");
    const TrainConfig back = parse_train_config("test_train.cfg");
    CHECK(back.epochs == 23);
    CHECK(back.warmup_epochs == 4);
    CHECK(back.lr_max == doctest::Approx(3e-3));
    CHECK(back.p_zero_images == doctest::Approx(0.5));
    CHECK(back.seed == 42);
    std::remove("test_train.cfg");
}

namespace {

TrainConfig smoke_config(int epochs) {
    TrainConfig t;
    t.epochs = epochs;
    t.warmup_epochs = epochs; // vq disabled throughout
    t.freeze_epochs = 0;
    t.enable_vq = false;
    t.lr_max = 8e-3;
    t.clip_max_norm = 10.0;
    t.batch_size = 2;
    t.image_size = 16;
    t.eval_views = 1;
    t.eval_image_size = 16;
    t.seed = 3;
    t.p_zero_images = 0.25;
    return t;
}

} // namespace

TEST_CASE("two-scene overfit: scene-stage loss strictly decreases over 20 steps") {
    const DatasetSplit split = build_dataset(2, 1, 77);
    const TrainConfig tcfg = smoke_config(22);
    const TrainResult result = train_loop(split, tcfg, tiny_model());
    REQUIRE(result.log.size() == 22);
    for (int i = 1; i <= 20; ++i)
        CHECK(result.log[i].loss_scene < result.log[i - 1].loss_scene);
}

TEST_CASE("training is deterministic and exercises the codebook lifecycle") {
    const DatasetSplit split = build_dataset(2, 1, 5);
    TrainConfig tcfg = smoke_config(8);
    tcfg.warmup_epochs = 3; // codebooks initialize at epoch 3
    tcfg.enable_vq = true;
    tcfg.freeze_epochs = 2; // frozen after epoch 6
    tcfg.kmeans_period = 2;

    const ModelConfig mcfg = tiny_model();
    TrainResult a = train_loop(split, tcfg, mcfg);
    TrainResult b = train_loop(split, tcfg, mcfg);

    CHECK(a.model.codebooks_ready());
    CHECK(a.model.geometry_codec.stages[0].frozen);
    CHECK(codebook_pack_hash(a.pack) == codebook_pack_hash(b.pack));

    nn::save_checkpoint(a.model.params, "test_a.gsqw");
    nn::save_checkpoint(b.model.params, "test_b.gsqw");
    std::ifstream fa("test_a.gsqw", std::ios::binary), fb("test_b.gsqw", std::ios::binary);
    const std::string sa((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
    const std::string sb((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
    CHECK(sa == sb);
    std::remove("test_a.gsqw");
    std::remove("test_b.gsqw");

    // Utilization is reported once quantization is active.
    bool saw_util = false;
    for (const EpochLog& e : a.log)
        if (e.util_geo > 0.0) saw_util = true;
    CHECK(saw_util);
}

TEST_CASE("training without any conditioning images completes with finite losses") {
    const DatasetSplit split = build_dataset(2, 1, 11);
    TrainConfig tcfg = smoke_config(4);
    tcfg.p_zero_images = 1.0;
    const TrainResult result = train_loop(split, tcfg, tiny_model());
    for (const EpochLog& e : result.log) {
        CHECK(std::isfinite(e.loss_scene));
        CHECK(std::isfinite(e.loss_coarse));
        CHECK(std::isfinite(e.loss_fine));
    }
}

TEST_CASE("save and load the full model directory") {
    const ModelConfig mcfg = tiny_model();
    CodecModel model(mcfg);
    model.init_random_codebooks(21);
    model.freeze_codebooks();
    save_model(model, "test_model_dir");

    CodecModel back = load_model("test_model_dir");
    CHECK(back.cfg.d_b == mcfg.d_b);
    CHECK(back.codebooks_ready());
    CHECK(back.pack_hash() == model.pack_hash());
    // Parameters survive at float precision.
    const auto& w0 = model.params.at("enc/grid_w").value;
    const auto& w1 = back.params.at("enc/grid_w").value;
    CHECK((w0 - w1).cwiseAbs().maxCoeff() < 1e-6);

    std::filesystem::remove_all("test_model_dir");
}
