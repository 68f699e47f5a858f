#pragma once

#include <string>
#include <vector>

#include "gsq/gauss.h"

namespace gsq {

struct Image {
    int width = 0;
    int height = 0;
    std::vector<double> pixels; // row-major RGB in [0,1]

    Image() = default;
    Image(int w, int h) : width(w), height(h), pixels(static_cast<size_t>(w) * h * 3, 0.0) {}

    double& at(int x, int y, int c) { return pixels[(static_cast<size_t>(y) * width + x) * 3 + c]; }
    double at(int x, int y, int c) const {
        return pixels[(static_cast<size_t>(y) * width + x) * 3 + c];
    }
};

struct RenderConfig {
    Vec3 background{Vec3::Zero()};
    double opacity_cutoff = 1.0 / 255.0;
    double weight_floor = 1e-4;
    ProjectionMode projection = ProjectionMode::Perspective;
    // Low-pass dilation of the screen-space covariance is common in splatting
    // implementations but is not applied here; the flag records the choice.
    bool lowpass_dilation = false;
};

// exp(-1/2 (p-mu)^T Sigma^-1 (p-mu)). Returns nullopt when the covariance is
// numerically singular (det <= 1e-12); the caller skips that Gaussian.
std::optional<double> gaussian2d_weight(const Vec2& p, const Vec2& mu2d, const Mat2& sigma2d);

struct PixelContrib {
    Vec3 color;
    double opacity; // sigma in (0,1)
    double weight;  // G in (0,1]
};

// Front-to-back alpha compositing over a background color. `contribs` must be
// sorted by increasing camera-space depth.
Vec3 composite_pixel(const std::vector<PixelContrib>& contribs, const Vec3& background);

// Deterministic CPU splatting. Gaussians behind the camera or with opacity
// below the cutoff are culled; contributions below the weight floor are
// skipped; work is limited per Gaussian by a screen-space bounding box wide
// enough that everything outside it is below the weight floor.
Image render(const Scene& scene, const Camera& cam, const RenderConfig& cfg = {});

// Shortcut-free reference: evaluates every surviving Gaussian at every pixel.
// Shares the weight floor (and culling) with `render` so the two agree.
Image render_oracle(const Scene& scene, const Camera& cam, const RenderConfig& cfg = {});

// 8-bit PNG I/O; quantization is linear with round-half-up.
void write_png(const Image& img, const std::string& path);
Image read_png(const std::string& path);

} // namespace gsq
