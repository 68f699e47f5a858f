#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cstdio>
#include <random>

#include "gsq/render.h"

using namespace gsq;

namespace {

Scene random_scene(uint64_t seed, int count) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> pos(0.2, 0.8);
    std::uniform_real_distribution<double> sc(0.01, 0.08);
    std::uniform_real_distribution<double> col(-1.2, 1.2);
    std::uniform_real_distribution<double> lg(-1.0, 3.0);
    std::normal_distribution<double> n(0.0, 1.0);
    Scene scene;
    for (int i = 0; i < count; ++i) {
        Gaussian g;
        g.mu = Vec3(pos(rng), pos(rng), pos(rng));
        g.scale = Vec3(sc(rng), sc(rng), sc(rng));
        Vec4 q(n(rng), n(rng), n(rng), n(rng));
        g.rot = quat_normalize(q.norm() < 1e-6 ? Vec4(1, 0, 0, 0) : q);
        g.sh = Eigen::Vector3d(col(rng), col(rng), col(rng));
        g.opacity_logit = lg(rng);
        scene.gaussians.push_back(g);
    }
    return scene;
}

Camera toy_camera(int size) {
    return Camera::look_at(Vec3(0.5, -1.2, 0.7), Vec3(0.5, 0.5, 0.5), Vec3(0, 0, 1), 45.0, size,
                           size);
}

double max_abs_diff(const Image& a, const Image& b) {
    double m = 0.0;
    for (size_t i = 0; i < a.pixels.size(); ++i)
        m = std::max(m, std::abs(a.pixels[i] - b.pixels[i]));
    return m;
}

} // namespace

TEST_CASE("gaussian2d_weight closed forms") {
    const Mat2 eye = Mat2::Identity();
    CHECK(*gaussian2d_weight(Vec2(3, 4), Vec2(3, 4), eye) == doctest::Approx(1.0));
    CHECK(*gaussian2d_weight(Vec2(1, 0), Vec2(0, 0), eye) ==
          doctest::Approx(std::exp(-0.5)).epsilon(1e-12));
    CHECK(*gaussian2d_weight(Vec2(3, 4), Vec2(0, 0), eye) ==
          doctest::Approx(std::exp(-12.5)).epsilon(1e-9));

    Mat2 singular;
    singular << 1e-9, 0, 0, 1e-9;
    CHECK_FALSE(gaussian2d_weight(Vec2(0, 0), Vec2(0, 0), singular).has_value());
}

TEST_CASE("composite_pixel matches the expansion of the blending sum") {
    const Vec3 bg(0.1, 0.2, 0.3);
    CHECK((composite_pixel({}, bg) - bg).norm() == 0.0);

    const Vec3 c1(1, 0, 0), c2(0, 1, 0);
    const double s1 = 0.6, g1 = 0.8, s2 = 0.5, g2 = 0.9;
    const Vec3 one = composite_pixel({{c1, s1, g1}}, bg);
    CHECK((one - (c1 * s1 * g1 + bg * (1 - s1 * g1))).norm() < 1e-15);

    const Vec3 two = composite_pixel({{c1, s1, g1}, {c2, s2, g2}}, bg);
    const Vec3 expect =
        c1 * s1 * g1 + c2 * s2 * g2 * (1 - s1 * g1) + bg * (1 - s1 * g1) * (1 - s2 * g2);
    CHECK((two - expect).norm() < 1e-15);

    // A fully opaque front contribution hides everything behind it.
    const Vec3 front = composite_pixel({{c1, 1.0, 1.0}, {c2, 0.9, 1.0}}, bg);
    CHECK((front - c1).norm() < 1e-15);
}

TEST_CASE("transmittance stays within [0,1]") {
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 200; ++trial) {
        double t = 1.0;
        for (int i = 0; i < 20; ++i) {
            t *= 1.0 - u(rng) * u(rng);
            CHECK(t >= 0.0);
            CHECK(t <= 1.0);
        }
    }
}

TEST_CASE("render: single isotropic gaussian peaks at its projection") {
    Scene scene;
    Gaussian g;
    g.mu = Vec3(0.5, 0.5, 0.5);
    g.scale = Vec3(0.05, 0.05, 0.05);
    g.sh = Eigen::Vector3d::Constant(1.0);
    g.opacity_logit = 3.0;
    scene.gaussians.push_back(g);

    const Camera cam = toy_camera(33);
    const Image img = render(scene, cam);
    int bx = 0, by = 0;
    double best = -1.0;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            if (img.at(x, y, 0) > best) {
                best = img.at(x, y, 0);
                bx = x;
                by = y;
            }
    // The center projects to the middle of the image.
    CHECK(std::abs(bx - 16) <= 1);
    CHECK(std::abs(by - 16) <= 1);
    CHECK(best > 0.5);
}

TEST_CASE("render equals oracle on random toy scenes") {
    for (uint64_t seed = 0; seed < 20; ++seed) {
        const Scene scene = random_scene(1000 + seed, 100);
        const Camera cam = toy_camera(32);
        const Image fast = render(scene, cam);
        const Image slow = render_oracle(scene, cam);
        CHECK(max_abs_diff(fast, slow) <= 1e-5);
    }
}

TEST_CASE("single gaussian: render equals oracle exactly") {
    Scene scene = random_scene(77, 1);
    const Camera cam = toy_camera(16);
    CHECK(max_abs_diff(render(scene, cam), render_oracle(scene, cam)) == 0.0);
}

TEST_CASE("input order invariance") {
    Scene scene = random_scene(42, 60);
    const Camera cam = toy_camera(24);
    const Image base = render(scene, cam);

    std::mt19937_64 rng(9);
    for (int trial = 0; trial < 3; ++trial) {
        std::shuffle(scene.gaussians.begin(), scene.gaussians.end(), rng);
        CHECK(max_abs_diff(render(scene, cam), base) == 0.0);
        CHECK(max_abs_diff(render_oracle(scene, cam), base) <= 1e-5);
    }
}

TEST_CASE("empty-after-culling scene renders the background") {
    Scene scene;
    Gaussian g;
    g.mu = Vec3(0.5, 0.5, 0.5);
    g.opacity_logit = -12.0; // below the 1/255 opacity cutoff
    scene.gaussians.push_back(g);
    RenderConfig cfg;
    cfg.background = Vec3(0.25, 0.5, 0.75);
    const Image img = render(scene, toy_camera(8), cfg);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
            CHECK(img.at(x, y, 0) == doctest::Approx(0.25));
            CHECK(img.at(x, y, 2) == doctest::Approx(0.75));
        }
}

TEST_CASE("render rejects empty scenes and zero-pixel cameras") {
    Scene empty;
    CHECK_THROWS_AS(render(empty, toy_camera(8)), PreconditionError);

    Scene scene = random_scene(5, 3);
    Camera cam = toy_camera(8);
    cam.width = 0;
    CHECK_THROWS_AS(render(scene, cam), PreconditionError);
}

TEST_CASE("png round trip at 8-bit precision") {
    const Scene scene = random_scene(13, 40);
    const Image img = render(scene, toy_camera(16));
    const std::string path = "test_roundtrip.png";
    write_png(img, path);
    const Image back = read_png(path);
    REQUIRE(back.width == img.width);
    REQUIRE(back.height == img.height);
    // Quantization error is at most half a step of 1/255.
    CHECK(max_abs_diff(img, back) <= 0.5 / 255.0 + 1e-12);

    // Writing the decoded image again must be lossless.
    write_png(back, path);
    const Image back2 = read_png(path);
    CHECK(max_abs_diff(back, back2) == 0.0);
    std::remove(path.c_str());
}
