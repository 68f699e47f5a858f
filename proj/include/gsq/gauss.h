#pragma once

#include <Eigen/Dense>
#include <optional>
#include <vector>

#include "gsq/errors.h"

namespace gsq {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;

// Band-0 spherical harmonic basis constant Y_0.
inline constexpr double kShC0 = 0.28209479177387814;

inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double logit(double p) { return std::log(p / (1.0 - p)); }

struct Aabb {
    Vec3 lo{Vec3::Zero()};
    Vec3 hi{Vec3::Ones()};
    Vec3 extent() const { return hi - lo; }
};

// One splat. Quaternion order is (w, x, y, z); scale is a per-axis standard
// deviation in world units; opacity is kept as a logit everywhere internally.
struct Gaussian {
    Vec3 mu{Vec3::Zero()};
    Eigen::VectorXd sh{Eigen::VectorXd::Zero(3)}; // k = 3: one RGB DC triple
    Vec4 rot{1.0, 0.0, 0.0, 0.0};
    Vec3 scale{Vec3::Ones()};
    double opacity_logit = 0.0;

    double opacity() const { return logistic(opacity_logit); }
};

struct Scene {
    std::vector<Gaussian> gaussians;
    Aabb bounds;
};

// Pinhole camera; `rot`/`trans` give the world-to-camera rigid transform.
struct Camera {
    Mat3 rot{Mat3::Identity()};
    Vec3 trans{Vec3::Zero()};
    double fx = 1.0, fy = 1.0;
    double cx = 0.0, cy = 0.0;
    int width = 0, height = 0;

    Vec3 to_camera(const Vec3& p) const { return rot * p + trans; }
    Vec3 position() const { return -rot.transpose() * trans; }

    static Camera look_at(const Vec3& eye, const Vec3& target, const Vec3& up,
                          double fov_y_deg, int width, int height);
};

// Normalizes to unit length and canonicalizes the sign so that w >= 0.
Vec4 quat_normalize(const Vec4& q);

// Rotation matrix of a unit quaternion. Throws if |q| deviates from 1 by
// more than 1e-6.
Mat3 quat_to_rotmat(const Vec4& q);

// Sigma = R diag(s)^2 R^T.
Mat3 covariance3d(const Vec4& q, const Vec3& s);

enum class ProjectionMode {
    Perspective,
    // J = truncated identity; exists so the projection is testable in
    // closed form.
    OrthographicDebug,
};

// Projects a world-space covariance to a 2x2 screen-space covariance using
// the local affine approximation of the perspective map at `mu`. Returns
// nullopt when the center is not strictly in front of the camera
// (camera-space depth <= 1e-4): the caller culls that Gaussian.
std::optional<Mat2> project_covariance(const Mat3& sigma, const Camera& cam, const Vec3& mu,
                                       ProjectionMode mode = ProjectionMode::Perspective);

// View-dependent RGB from SH coefficients, clamped to [0,1]. Only the
// band-0 layout (k = 3) is supported; the result is view-independent.
Vec3 sh_color(const Eigen::VectorXd& sh, const Vec3& view_dir);

// Inverse of the band-0 color map, without clamping.
inline Vec3 color_to_sh_dc(const Vec3& rgb) { return (rgb.array() - 0.5) / kShC0; }

} // namespace gsq
