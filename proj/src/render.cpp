#include "gsq/render.h"

#include <algorithm>
#include <cmath>

namespace gsq {

std::optional<double> gaussian2d_weight(const Vec2& p, const Vec2& mu2d, const Mat2& sigma2d) {
    const double det = sigma2d(0, 0) * sigma2d(1, 1) - sigma2d(0, 1) * sigma2d(1, 0);
    if (det <= 1e-12) return std::nullopt;
    const Vec2 d = p - mu2d;
    const double inv_det = 1.0 / det;
    // Explicit 2x2 inverse keeps the evaluation identical between paths.
    const double maha = inv_det * (sigma2d(1, 1) * d.x() * d.x()
                                   - (sigma2d(0, 1) + sigma2d(1, 0)) * d.x() * d.y()
                                   + sigma2d(0, 0) * d.y() * d.y());
    return std::exp(-0.5 * maha);
}

Vec3 composite_pixel(const std::vector<PixelContrib>& contribs, const Vec3& background) {
    Vec3 color = Vec3::Zero();
    double transmittance = 1.0;
    for (const PixelContrib& c : contribs) {
        const double alpha = c.opacity * c.weight;
        color += c.color * alpha * transmittance;
        transmittance *= 1.0 - alpha;
    }
    return color + background * transmittance;
}

namespace {

struct Splat {
    Vec2 mu2d;
    Mat2 sigma2d;
    double depth;
    Vec3 world_mu;
    Vec3 color;
    double opacity;
    // Half-width of the square screen bound outside which the weight is
    // guaranteed below the floor.
    double radius;
};

std::vector<Splat> prepare_splats(const Scene& scene, const Camera& cam, const RenderConfig& cfg) {
    if (scene.gaussians.empty()) throw PreconditionError("render: empty scene");
    std::vector<Splat> splats;
    splats.reserve(scene.gaussians.size());
    for (const Gaussian& g : scene.gaussians) {
        if (g.opacity() < cfg.opacity_cutoff) continue;
        const Vec3 t = cam.to_camera(g.mu);
        Vec2 mu2d;
        if (cfg.projection == ProjectionMode::OrthographicDebug) {
            mu2d = Vec2(t.x(), t.y());
        } else {
            if (t.z() <= 1e-4) continue;
            mu2d = Vec2(cam.fx * t.x() / t.z() + cam.cx, cam.fy * t.y() / t.z() + cam.cy);
        }
        const Mat3 cov = covariance3d(quat_normalize(g.rot), g.scale);
        const auto sigma2d = project_covariance(cov, cam, g.mu, cfg.projection);
        if (!sigma2d) continue;
        const double det =
            (*sigma2d)(0, 0) * (*sigma2d)(1, 1) - (*sigma2d)(0, 1) * (*sigma2d)(1, 0);
        if (det <= 1e-12) continue;
        // Largest eigenvalue of the 2x2 covariance.
        const double half_tr = 0.5 * ((*sigma2d)(0, 0) + (*sigma2d)(1, 1));
        const double lam_max = half_tr + std::sqrt(std::max(0.0, half_tr * half_tr - det));
        // At least 3 sigma, widened so that every contribution above the
        // weight floor lies inside the box.
        const double maha2 = std::max(9.0, -2.0 * std::log(cfg.weight_floor));
        Splat s;
        s.mu2d = mu2d;
        s.sigma2d = *sigma2d;
        s.depth = t.z();
        s.world_mu = g.mu;
        s.color = sh_color(g.sh, (g.mu - cam.position()).normalized());
        s.opacity = g.opacity();
        s.radius = std::sqrt(maha2 * lam_max);
        splats.push_back(s);
    }
    std::sort(splats.begin(), splats.end(), [](const Splat& a, const Splat& b) {
        if (a.depth != b.depth) return a.depth < b.depth;
        if (a.world_mu.x() != b.world_mu.x()) return a.world_mu.x() < b.world_mu.x();
        if (a.world_mu.y() != b.world_mu.y()) return a.world_mu.y() < b.world_mu.y();
        return a.world_mu.z() < b.world_mu.z();
    });
    return splats;
}

Image render_impl(const Scene& scene, const Camera& cam, const RenderConfig& cfg,
                  bool use_bounding_box) {
    if (cam.width <= 0 || cam.height <= 0)
        throw PreconditionError("render: zero-pixel image");
    const std::vector<Splat> splats = prepare_splats(scene, cam, cfg);
    Image img(cam.width, cam.height);
    std::vector<PixelContrib> contribs;
    for (int y = 0; y < cam.height; ++y) {
        for (int x = 0; x < cam.width; ++x) {
            const Vec2 p(x + 0.5, y + 0.5);
            contribs.clear();
            for (const Splat& s : splats) {
                if (use_bounding_box &&
                    (std::abs(p.x() - s.mu2d.x()) > s.radius ||
                     std::abs(p.y() - s.mu2d.y()) > s.radius))
                    continue;
                const auto w = gaussian2d_weight(p, s.mu2d, s.sigma2d);
                if (!w || *w < cfg.weight_floor) continue;
                contribs.push_back({s.color, s.opacity, *w});
            }
            const Vec3 c = composite_pixel(contribs, cfg.background);
            for (int ch = 0; ch < 3; ++ch) img.at(x, y, ch) = c[ch];
        }
    }
    return img;
}

} // namespace

Image render(const Scene& scene, const Camera& cam, const RenderConfig& cfg) {
    return render_impl(scene, cam, cfg, true);
}

Image render_oracle(const Scene& scene, const Camera& cam, const RenderConfig& cfg) {
    return render_impl(scene, cam, cfg, false);
}

} // namespace gsq
