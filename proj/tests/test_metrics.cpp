#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "gsq/metrics.h"

using namespace gsq;

namespace {

Image constant_image(int w, int h, double v) {
    Image img(w, h);
    for (double& p : img.pixels) p = v;
    return img;
}

// Deterministic structured pair; the expected SSIM below was computed with
// an independent reference implementation (Gaussian-weighted, no
// sample-covariance correction, data range 1).
void structured_pair(Image& a, Image& b) {
    a = Image(32, 32);
    b = Image(32, 32);
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x)
            for (int c = 0; c < 3; ++c) {
                const double av = 0.5 + 0.5 * std::sin(0.3 * x + 0.7 * y + c);
                const double bv =
                    std::min(1.0, std::max(0.0, av + 0.1 * std::cos(0.5 * x - 0.2 * y + 2 * c)));
                a.at(x, y, c) = av;
                b.at(x, y, c) = bv;
            }
}

} // namespace

TEST_CASE("psnr closed forms") {
    const Image a = constant_image(8, 8, 0.5);
    CHECK(std::isinf(psnr(a, a)));

    Image b = a;
    for (double& p : b.pixels) p += 0.1;
    CHECK(psnr(a, b) == doctest::Approx(20.0).epsilon(1e-9)); // MSE = 0.01
    CHECK(psnr(a, b) == psnr(b, a));

    const Image c = constant_image(4, 8, 0.5);
    CHECK_THROWS_AS(psnr(a, c), PreconditionError);
}

TEST_CASE("psnr strictly decreases with uniform noise amplitude") {
    const Image a = constant_image(16, 16, 0.5);
    double prev = std::numeric_limits<double>::infinity();
    for (double amp : {0.01, 0.02, 0.05, 0.1, 0.2}) {
        Image b = a;
        for (double& p : b.pixels) p += amp;
        const double v = psnr(a, b);
        CHECK(v < prev);
        prev = v;
    }
}

TEST_CASE("ssim equals 1 on identical images") {
    Image a, b;
    structured_pair(a, b);
    CHECK(ssim(a, a) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(ssim(b, b) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("ssim matches the independent reference on a structured pair") {
    Image a, b;
    structured_pair(a, b);
    CHECK(ssim(a, b) == doctest::Approx(0.981073215659).epsilon(1e-6));
    CHECK(ssim(a, b) == doctest::Approx(ssim(b, a)).epsilon(1e-12));
}

TEST_CASE("ssim of an image against its negative is negative") {
    Image a, b;
    structured_pair(a, b);
    Image neg = a;
    for (double& p : neg.pixels) p = 1.0 - p;
    CHECK(ssim(a, neg) == doctest::Approx(-0.766105776722).epsilon(1e-6));
    CHECK(ssim(a, neg) < 0.0);
}

TEST_CASE("ssim of constant images matches the closed-form luminance term") {
    const Image a = constant_image(32, 32, 0.4);
    const Image b = constant_image(32, 32, 0.5);
    const double c1 = 0.01 * 0.01;
    const double expect = (2 * 0.4 * 0.5 + c1) / (0.4 * 0.4 + 0.5 * 0.5 + c1);
    CHECK(ssim(a, b) == doctest::Approx(expect).epsilon(1e-9));
    CHECK(expect == doctest::Approx(0.975615703487).epsilon(1e-9));
}

TEST_CASE("evaluate_scene on identical scenes") {
    Scene scene;
    Gaussian g;
    g.mu = Vec3(0.5, 0.5, 0.5);
    g.scale = Vec3(0.08, 0.08, 0.08);
    g.sh = Eigen::Vector3d(0.4, -0.3, 0.8);
    g.opacity_logit = 2.0;
    scene.gaussians.push_back(g);

    std::vector<Camera> cams;
    for (int i = 0; i < 3; ++i)
        cams.push_back(Camera::look_at(Vec3(0.5 + std::cos(i), 0.5 + std::sin(i), 1.2),
                                       Vec3(0.5, 0.5, 0.5), Vec3(0, 0, 1), 45.0, 24, 24));
    const EvalReport report = evaluate_scene(scene, scene, cams);
    REQUIRE(report.views.size() == 3);
    CHECK(std::isinf(report.mean_psnr));
    CHECK(report.mean_ssim == doctest::Approx(1.0));
    for (const auto& v : report.views) CHECK(std::isinf(v.psnr));

    // Report format: one row per view plus the mean, lpips marked unavailable.
    const std::string csv = report.to_csv();
    CHECK(csv.find("view,psnr,ssim,lpips") != std::string::npos);
    CHECK(csv.find("unavailable") != std::string::npos);
}

TEST_CASE("evaluate_scene emits one row per camera") {
    Scene scene;
    Gaussian g;
    g.mu = Vec3(0.5, 0.5, 0.5);
    g.scale = Vec3(0.05, 0.05, 0.05);
    g.opacity_logit = 1.0;
    scene.gaussians.push_back(g);
    std::vector<Camera> cams;
    for (int i = 0; i < 50; ++i)
        cams.push_back(Camera::look_at(Vec3(0.5 + std::cos(i * 0.1257), 0.5 + std::sin(i * 0.1257), 1.0),
                                       Vec3(0.5, 0.5, 0.5), Vec3(0, 0, 1), 45.0, 8, 8));
    const EvalReport report = evaluate_scene(scene, scene, cams);
    CHECK(report.views.size() == 50);
}
