#include "gsq/metrics.h"

#include <cmath>
#include <limits>
#include <sstream>

namespace gsq {

double psnr(const Image& a, const Image& b) {
    if (a.width != b.width || a.height != b.height)
        throw PreconditionError("psnr: image dimensions differ");
    double se = 0.0;
    for (size_t i = 0; i < a.pixels.size(); ++i) {
        const double d = a.pixels[i] - b.pixels[i];
        se += d * d;
    }
    const double mse = se / static_cast<double>(a.pixels.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(1.0 / mse);
}

namespace {

constexpr int kWin = 11;
constexpr double kSigma = 1.5;
constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

std::vector<double> gaussian_kernel() {
    std::vector<double> k(kWin);
    const int r = kWin / 2;
    double sum = 0.0;
    for (int i = 0; i < kWin; ++i) {
        const double d = i - r;
        k[i] = std::exp(-0.5 * d * d / (kSigma * kSigma));
        sum += k[i];
    }
    for (double& v : k) v /= sum;
    return k;
}

struct WindowMoments {
    double mu_a, mu_b, var_a, var_b, cov;
};

// Weighted moments of one window anchored at (x0, y0); the kernel is cropped
// and renormalized when the window does not fit (only used for tiny images).
WindowMoments window_moments(const Image& a, const Image& b, int c, int x0, int y0, int wx,
                             int wy, const std::vector<double>& kx,
                             const std::vector<double>& ky) {
    double wsum = 0.0, ma = 0.0, mb = 0.0;
    for (int j = 0; j < wy; ++j)
        for (int i = 0; i < wx; ++i) {
            const double w = kx[i] * ky[j];
            wsum += w;
            ma += w * a.at(x0 + i, y0 + j, c);
            mb += w * b.at(x0 + i, y0 + j, c);
        }
    ma /= wsum;
    mb /= wsum;
    double va = 0.0, vb = 0.0, cov = 0.0;
    for (int j = 0; j < wy; ++j)
        for (int i = 0; i < wx; ++i) {
            const double w = kx[i] * ky[j] / wsum;
            const double da = a.at(x0 + i, y0 + j, c) - ma;
            const double db = b.at(x0 + i, y0 + j, c) - mb;
            va += w * da * da;
            vb += w * db * db;
            cov += w * da * db;
        }
    return {ma, mb, va, vb, cov};
}

double ssim_from_moments(const WindowMoments& m) {
    const double num = (2.0 * m.mu_a * m.mu_b + kC1) * (2.0 * m.cov + kC2);
    const double den = (m.mu_a * m.mu_a + m.mu_b * m.mu_b + kC1) * (m.var_a + m.var_b + kC2);
    return num / den;
}

} // namespace

double ssim(const Image& a, const Image& b) {
    if (a.width != b.width || a.height != b.height)
        throw PreconditionError("ssim: image dimensions differ");
    const std::vector<double> kernel = gaussian_kernel();

    double total = 0.0;
    if (a.width < kWin || a.height < kWin) {
        // Whole-image fallback with a cropped, renormalized kernel.
        std::vector<double> kx(kernel.begin(), kernel.begin() + std::min(a.width, kWin));
        std::vector<double> ky(kernel.begin(), kernel.begin() + std::min(a.height, kWin));
        for (int c = 0; c < 3; ++c)
            total += ssim_from_moments(window_moments(a, b, c, 0, 0, static_cast<int>(kx.size()),
                                                      static_cast<int>(ky.size()), kx, ky));
        return total / 3.0;
    }

    const int nx = a.width - kWin + 1;
    const int ny = a.height - kWin + 1;
    for (int c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (int y0 = 0; y0 < ny; ++y0)
            for (int x0 = 0; x0 < nx; ++x0)
                acc += ssim_from_moments(
                    window_moments(a, b, c, x0, y0, kWin, kWin, kernel, kernel));
        total += acc / (static_cast<double>(nx) * ny);
    }
    return total / 3.0;
}

std::string EvalReport::to_csv() const {
    std::ostringstream os;
    os << "view,psnr,ssim,lpips\n";
    for (const ViewMetrics& v : views)
        os << v.view << "," << v.psnr << "," << v.ssim << ",unavailable\n";
    os << "mean," << mean_psnr << "," << mean_ssim << ",unavailable\n";
    return os.str();
}

std::string EvalReport::summary() const {
    std::ostringstream os;
    os << "views=" << views.size() << " mean_psnr=" << mean_psnr << " mean_ssim=" << mean_ssim;
    if (storage_bits >= 0) os << " payload_bits=" << storage_bits;
    return os.str();
}

namespace {

EvalReport eval_common(const Scene& decoded, const std::vector<Image>& truth,
                       const std::vector<Camera>& cams, const RenderConfig& cfg) {
    if (cams.empty()) throw PreconditionError("evaluate_scene: needs at least one camera");
    EvalReport report;
    double psum = 0.0, ssum = 0.0;
    for (size_t i = 0; i < cams.size(); ++i) {
        const Image pred = render(decoded, cams[i], cfg);
        ViewMetrics vm;
        vm.view = static_cast<int>(i);
        vm.psnr = psnr(pred, truth[i]);
        vm.ssim = ssim(pred, truth[i]);
        report.views.push_back(vm);
        psum += vm.psnr;
        ssum += vm.ssim;
    }
    report.mean_psnr = psum / static_cast<double>(cams.size());
    report.mean_ssim = ssum / static_cast<double>(cams.size());
    return report;
}

} // namespace

EvalReport evaluate_scene(const Scene& decoded, const Scene& truth,
                          const std::vector<Camera>& cams, const RenderConfig& cfg) {
    std::vector<Image> truth_imgs;
    truth_imgs.reserve(cams.size());
    for (const Camera& cam : cams) truth_imgs.push_back(render(truth, cam, cfg));
    return eval_common(decoded, truth_imgs, cams, cfg);
}

EvalReport evaluate_scene_against_images(const Scene& decoded, const std::vector<Image>& truth,
                                         const std::vector<Camera>& cams,
                                         const RenderConfig& cfg) {
    if (truth.size() != cams.size())
        throw PreconditionError("evaluate_scene: one truth image per camera required");
    return eval_common(decoded, truth, cams, cfg);
}

} // namespace gsq
