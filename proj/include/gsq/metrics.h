#pragma once

#include <string>
#include <vector>

#include "gsq/render.h"

namespace gsq {

// 10*log10(1/MSE) over all pixels and channels; +infinity for identical
// images.
double psnr(const Image& a, const Image& b);

// Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5),
// C1=0.01^2, C2=0.03^2 on the [0,1] range, channel-averaged. Windowed
// moments follow the reference formulation (no sample-covariance
// correction); images smaller than the window fall back to one whole-image
// window.
double ssim(const Image& a, const Image& b);

struct ViewMetrics {
    int view = 0;
    double psnr = 0.0;
    double ssim = 0.0;
};

struct EvalReport {
    std::vector<ViewMetrics> views;
    double mean_psnr = 0.0;
    double mean_ssim = 0.0;
    // Payload storage of the compressed scene, when known; -1 otherwise.
    int64_t storage_bits = -1;

    std::string to_csv() const;
    std::string summary() const;
};

// Renders both scenes from every camera and averages the metrics.
EvalReport evaluate_scene(const Scene& decoded, const Scene& truth,
                          const std::vector<Camera>& cams, const RenderConfig& cfg = {});

// Same, against pre-rendered ground-truth images (one per camera).
EvalReport evaluate_scene_against_images(const Scene& decoded, const std::vector<Image>& truth,
                                         const std::vector<Camera>& cams,
                                         const RenderConfig& cfg = {});

} // namespace gsq
