#include "gsq/gauss.h"

#include <cmath>

namespace gsq {

Camera Camera::look_at(const Vec3& eye, const Vec3& target, const Vec3& up,
                       double fov_y_deg, int width, int height) {
    if (width <= 0 || height <= 0) throw ConfigError("camera image size must be positive");
    Vec3 fwd = (target - eye).normalized();
    Vec3 right = fwd.cross(up).normalized();
    Vec3 down = fwd.cross(right); // camera y points down the image
    Camera cam;
    cam.rot.row(0) = right.transpose();
    cam.rot.row(1) = down.transpose();
    cam.rot.row(2) = fwd.transpose();
    cam.trans = -cam.rot * eye;
    double fov_y = fov_y_deg * M_PI / 180.0;
    cam.fy = 0.5 * height / std::tan(0.5 * fov_y);
    cam.fx = cam.fy;
    cam.cx = 0.5 * width;
    cam.cy = 0.5 * height;
    cam.width = width;
    cam.height = height;
    return cam;
}

Vec4 quat_normalize(const Vec4& q) {
    double n = q.norm();
    if (n <= 1e-12) throw PreconditionError("degenerate quaternion: near-zero norm");
    Vec4 u = q / n;
    if (u[0] < 0.0) u = -u;
    return u;
}

Mat3 quat_to_rotmat(const Vec4& q) {
    if (std::abs(q.norm() - 1.0) > 1e-6)
        throw PreconditionError("quat_to_rotmat requires a unit quaternion");
    const double w = q[0], x = q[1], y = q[2], z = q[3];
    Mat3 r;
    r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
         2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
         2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
    return r;
}

Mat3 covariance3d(const Vec4& q, const Vec3& s) {
    if (!(s.minCoeff() > 0.0)) throw PreconditionError("covariance3d requires positive scales");
    Mat3 r = quat_to_rotmat(q);
    return r * s.cwiseProduct(s).asDiagonal() * r.transpose();
}

std::optional<Mat2> project_covariance(const Mat3& sigma, const Camera& cam, const Vec3& mu,
                                       ProjectionMode mode) {
    Mat3 cam_cov = cam.rot * sigma * cam.rot.transpose();
    if (mode == ProjectionMode::OrthographicDebug) {
        return Mat2(cam_cov.topLeftCorner<2, 2>());
    }
    Vec3 t = cam.to_camera(mu);
    constexpr double kEpsZ = 1e-4;
    if (t.z() <= kEpsZ) return std::nullopt;
    const double inv_z = 1.0 / t.z();
    Eigen::Matrix<double, 2, 3> jac;
    jac << cam.fx * inv_z, 0.0, -cam.fx * t.x() * inv_z * inv_z,
           0.0, cam.fy * inv_z, -cam.fy * t.y() * inv_z * inv_z;
    Mat2 out = jac * cam_cov * jac.transpose();
    // Symmetrize away round-off.
    out = 0.5 * (out + out.transpose()).eval();
    return out;
}

Vec3 sh_color(const Eigen::VectorXd& sh, const Vec3& /*view_dir*/) {
    if (sh.size() != 3)
        throw ConfigError("sh_color: only the band-0 layout (k = 3) is supported");
    Vec3 c = sh.head<3>() * kShC0 + Vec3::Constant(0.5);
    return c.cwiseMax(0.0).cwiseMin(1.0);
}

} // namespace gsq
