// Copyright Contributors to the eggs project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "eggs/error.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace eggs {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

constexpr int kMaxShDegree = 3;

/// Number of SH basis functions for a degree: (degree+1)^2.
constexpr int sh_basis_count(int degree) { return (degree + 1) * (degree + 1); }

// Real SH basis constants (3DGS sign convention).
constexpr double kShC0 = 0.28209479177387814;
constexpr double kShC1 = 0.4886025119029199;
constexpr std::array<double, 5> kShC2 = {1.0925484305920792, -1.0925484305920792,
                                         0.31539156525252005, -1.0925484305920792,
                                         0.5462742152960396};
constexpr std::array<double, 7> kShC3 = {-0.5900435899266435, 2.890611442640554,
                                         -0.4570457994644658, 0.3731763325901154,
                                         -0.4570457994644658, 1.445305721320277,
                                         -0.5900435899266435};

/// Per-primitive rasterization branch.
enum class GaussianType : std::uint8_t { Surfel2D = 0, Volume3D = 1 };

inline void check_sh_degree(int degree) {
    if (degree < 0 || degree > kMaxShDegree) {
        throw ConfigError("SH degree must be in [0, 3], got " + std::to_string(degree));
    }
}

/// Logistic function, evaluated without overflow for large |x|.
template <class T>
T logistic(const T& x) {
    using std::exp;
    if (x >= T(0.0)) return T(1.0) / (T(1.0) + exp(-x));
    const T e = exp(x);
    return e / (T(1.0) + e);
}

inline double logit(double p) { return std::log(p / (1.0 - p)); }

// ---------------------------------------------------------------------------
// Quaternions (w, x, y, z), scalar first.
// ---------------------------------------------------------------------------

/// Rotation matrix of q/|q|. Works for any scalar type with +,-,*,/,sqrt.
template <class T>
Eigen::Matrix<T, 3, 3> quat_to_rotation(const T& qw, const T& qx, const T& qy, const T& qz) {
    using std::sqrt;
    const T n = sqrt(qw * qw + qx * qx + qy * qy + qz * qz);
    const T w = qw / n, x = qx / n, y = qy / n, z = qz / n;
    Eigen::Matrix<T, 3, 3> r;
    r(0, 0) = T(1.0) - T(2.0) * (y * y + z * z);
    r(0, 1) = T(2.0) * (x * y - w * z);
    r(0, 2) = T(2.0) * (x * z + w * y);
    r(1, 0) = T(2.0) * (x * y + w * z);
    r(1, 1) = T(1.0) - T(2.0) * (x * x + z * z);
    r(1, 2) = T(2.0) * (y * z - w * x);
    r(2, 0) = T(2.0) * (x * z - w * y);
    r(2, 1) = T(2.0) * (y * z + w * x);
    r(2, 2) = T(1.0) - T(2.0) * (x * x + y * y);
    return r;
}

inline Mat3 quat_to_rotation(const Vec4& q) { return quat_to_rotation(q[0], q[1], q[2], q[3]); }

/// Unit quaternion (w >= 0) of a proper rotation matrix.
inline Vec4 rotation_to_quat(const Mat3& r) {
    Eigen::Quaterniond q(r);
    q.normalize();
    Vec4 out(q.w(), q.x(), q.y(), q.z());
    if (out[0] < 0.0) out = -out;
    return out;
}

/// Renormalizes q; quaternions with norm <= 1e-8 or non-finite entries are rejected.
inline Vec4 normalize_quaternion(const Vec4& q) {
    if (!q.allFinite()) throw InvalidParameter("quaternion has non-finite components");
    const double n = q.norm();
    if (n <= 1e-8) throw InvalidParameter("quaternion norm too small to renormalize");
    return q / n;
}

// ---------------------------------------------------------------------------
// Covariance
// ---------------------------------------------------------------------------

/// Sigma = R diag(s)^2 R^T with s = exp(log_scale). For 2D surfels the z
/// scale does not enter the construction.
template <class T>
Eigen::Matrix<T, 3, 3> build_covariance(const Eigen::Matrix<T, 3, 1>& log_scale,
                                        const Eigen::Matrix<T, 4, 1>& q, GaussianType type) {
    using std::exp;
    const Eigen::Matrix<T, 3, 3> r = quat_to_rotation(q[0], q[1], q[2], q[3]);
    Eigen::Matrix<T, 3, 1> s2;
    s2[0] = exp(T(2.0) * log_scale[0]);
    s2[1] = exp(T(2.0) * log_scale[1]);
    s2[2] = type == GaussianType::Surfel2D ? T(0.0) : exp(T(2.0) * log_scale[2]);
    return r * s2.asDiagonal() * r.transpose();
}

inline Mat3 build_covariance(const Vec3& log_scale, const Vec4& q, GaussianType type) {
    if (!log_scale.allFinite() || !q.allFinite()) {
        throw InvalidParameter("build_covariance: non-finite scale or rotation");
    }
    return build_covariance<double>(log_scale, normalize_quaternion(q), type);
}

// ---------------------------------------------------------------------------
// Spherical harmonics
// ---------------------------------------------------------------------------

/// Writes the (degree+1)^2 real SH basis values at unit direction d into out.
template <class T>
void sh_basis(int degree, const T& x, const T& y, const T& z, std::span<T> out) {
    out[0] = T(kShC0);
    if (degree < 1) return;
    out[1] = T(-kShC1) * y;
    out[2] = T(kShC1) * z;
    out[3] = T(-kShC1) * x;
    if (degree < 2) return;
    const T xx = x * x, yy = y * y, zz = z * z;
    const T xy = x * y, yz = y * z, xz = x * z;
    out[4] = T(kShC2[0]) * xy;
    out[5] = T(kShC2[1]) * yz;
    out[6] = T(kShC2[2]) * (T(2.0) * zz - xx - yy);
    out[7] = T(kShC2[3]) * xz;
    out[8] = T(kShC2[4]) * (xx - yy);
    if (degree < 3) return;
    out[9] = T(kShC3[0]) * y * (T(3.0) * xx - yy);
    out[10] = T(kShC3[1]) * xy * z;
    out[11] = T(kShC3[2]) * y * (T(4.0) * zz - xx - yy);
    out[12] = T(kShC3[3]) * z * (T(2.0) * zz - T(3.0) * xx - T(3.0) * yy);
    out[13] = T(kShC3[4]) * x * (T(4.0) * zz - xx - yy);
    out[14] = T(kShC3[5]) * z * (xx - yy);
    out[15] = T(kShC3[6]) * x * (xx - T(3.0) * yy);
}

/// RGB from SH coefficients laid out coefficient-major ([k][channel]).
/// Band 0 carries a +0.5 offset; channels are clamped at zero.
template <class T>
std::array<T, 3> eval_sh(std::span<const double> coeffs, int degree, const T& x, const T& y,
                         const T& z) {
    std::array<T, 16> basis{};
    sh_basis<T>(degree, x, y, z, std::span<T>(basis));
    std::array<T, 3> rgb{T(0.5), T(0.5), T(0.5)};
    const int k_count = sh_basis_count(degree);
    for (int k = 0; k < k_count; ++k) {
        for (int c = 0; c < 3; ++c) rgb[c] += basis[k] * coeffs[3 * k + c];
    }
    for (auto& v : rgb) {
        if (v < T(0.0)) v = T(0.0);
    }
    return rgb;
}

inline Vec3 eval_sh(std::span<const double> coeffs, int degree, const Vec3& view_dir) {
    check_sh_degree(degree);
    if (coeffs.size() < static_cast<std::size_t>(3 * sh_basis_count(degree))) {
        throw ConfigError("eval_sh: too few coefficients for degree");
    }
    const auto rgb = eval_sh<double>(coeffs, degree, view_dir[0], view_dir[1], view_dir[2]);
    return {rgb[0], rgb[1], rgb[2]};
}

/// Band-0 coefficient that decodes to the given color.
inline double rgb_to_sh0(double v) { return (v - 0.5) / kShC0; }

// ---------------------------------------------------------------------------
// Scene representation
// ---------------------------------------------------------------------------

/// Offsets into the flat per-Gaussian parameter vector.
namespace param {
constexpr int kCenter = 0;
constexpr int kLogScale = 3;
constexpr int kRotation = 6;
constexpr int kOpacity = 10;
constexpr int kSh = 11;
constexpr int kGeometryCount = 11;
constexpr int count(int sh_degree) { return kSh + 3 * sh_basis_count(sh_degree); }
} // namespace param

struct Gaussian {
    Vec3 center = Vec3::Zero();
    Vec3 log_scale = Vec3::Zero();
    Vec4 rotation = Vec4(1.0, 0.0, 0.0, 0.0);
    double opacity_logit = 0.0;
    std::vector<double> sh;
    GaussianType type = GaussianType::Volume3D;

    Vec3 scale() const { return log_scale.array().exp(); }
    double opacity() const { return logistic(opacity_logit); }
};

/// Structure-of-arrays store of all primitives plus densification statistics.
class GaussianSet {
public:
    explicit GaussianSet(int sh_degree = 2) : sh_degree_(sh_degree) { check_sh_degree(sh_degree); }

    int sh_degree() const { return sh_degree_; }
    int sh_stride() const { return 3 * sh_basis_count(sh_degree_); }
    int param_count() const { return param::count(sh_degree_); }
    std::size_t size() const { return center.size(); }
    bool empty() const { return center.empty(); }

    GaussianType type_of(std::size_t i) const { return static_cast<GaussianType>(type[i]); }

    std::span<double> sh_of(std::size_t i) {
        return {sh.data() + i * static_cast<std::size_t>(sh_stride()),
                static_cast<std::size_t>(sh_stride())};
    }
    std::span<const double> sh_of(std::size_t i) const {
        return {sh.data() + i * static_cast<std::size_t>(sh_stride()),
                static_cast<std::size_t>(sh_stride())};
    }

    void push_back(const Gaussian& g) {
        if (static_cast<int>(g.sh.size()) != sh_stride()) {
            throw IntegrityError("GaussianSet::push_back: SH length mismatch");
        }
        center.push_back(g.center);
        log_scale.push_back(g.log_scale);
        rotation.push_back(g.rotation);
        opacity_logit.push_back(g.opacity_logit);
        sh.insert(sh.end(), g.sh.begin(), g.sh.end());
        type.push_back(static_cast<std::uint8_t>(g.type));
        grad_norm_sum.push_back(0.0);
        grad_sum.push_back(Vec3::Zero());
        observe_count.push_back(0);
    }

    Gaussian get(std::size_t i) const {
        Gaussian g;
        g.center = center[i];
        g.log_scale = log_scale[i];
        g.rotation = rotation[i];
        g.opacity_logit = opacity_logit[i];
        auto s = sh_of(i);
        g.sh.assign(s.begin(), s.end());
        g.type = type_of(i);
        return g;
    }

    void set(std::size_t i, const Gaussian& g) {
        center[i] = g.center;
        log_scale[i] = g.log_scale;
        rotation[i] = g.rotation;
        opacity_logit[i] = g.opacity_logit;
        std::copy(g.sh.begin(), g.sh.end(), sh_of(i).begin());
        type[i] = static_cast<std::uint8_t>(g.type);
    }

    /// Keeps the entries with keep[i] == true, preserving order.
    void filter(const std::vector<bool>& keep) {
        if (keep.size() != size()) throw IntegrityError("GaussianSet::filter: mask size");
        std::size_t out = 0;
        const auto stride = static_cast<std::size_t>(sh_stride());
        for (std::size_t i = 0; i < size(); ++i) {
            if (!keep[i]) continue;
            center[out] = center[i];
            log_scale[out] = log_scale[i];
            rotation[out] = rotation[i];
            opacity_logit[out] = opacity_logit[i];
            std::copy_n(sh.begin() + static_cast<std::ptrdiff_t>(i * stride), stride,
                        sh.begin() + static_cast<std::ptrdiff_t>(out * stride));
            type[out] = type[i];
            grad_norm_sum[out] = grad_norm_sum[i];
            grad_sum[out] = grad_sum[i];
            observe_count[out] = observe_count[i];
            ++out;
        }
        resize(out);
    }

    void reset_accumulators() {
        std::fill(grad_norm_sum.begin(), grad_norm_sum.end(), 0.0);
        std::fill(grad_sum.begin(), grad_sum.end(), Vec3::Zero());
        std::fill(observe_count.begin(), observe_count.end(), 0);
    }

    /// Throws IntegrityError unless all arrays have matching lengths.
    void check_consistency() const {
        const auto n = size();
        if (log_scale.size() != n || rotation.size() != n || opacity_logit.size() != n ||
            type.size() != n || sh.size() != n * static_cast<std::size_t>(sh_stride()) ||
            grad_norm_sum.size() != n || grad_sum.size() != n || observe_count.size() != n) {
            throw IntegrityError("GaussianSet arrays have inconsistent lengths");
        }
    }

    std::size_t count_of(GaussianType t) const {
        return static_cast<std::size_t>(
            std::count(type.begin(), type.end(), static_cast<std::uint8_t>(t)));
    }

    std::vector<Vec3> center;
    std::vector<Vec3> log_scale;
    std::vector<Vec4> rotation;
    std::vector<double> opacity_logit;
    std::vector<double> sh;
    std::vector<std::uint8_t> type;

    // Densification statistics, reset after every densification pass.
    std::vector<double> grad_norm_sum;
    std::vector<Vec3> grad_sum;
    std::vector<int> observe_count;

private:
    void resize(std::size_t n) {
        center.resize(n);
        log_scale.resize(n);
        rotation.resize(n);
        opacity_logit.resize(n);
        sh.resize(n * static_cast<std::size_t>(sh_stride()));
        type.resize(n);
        grad_norm_sum.resize(n);
        grad_sum.resize(n);
        observe_count.resize(n);
    }

    int sh_degree_;
};

// ---------------------------------------------------------------------------
// Images and cameras
// ---------------------------------------------------------------------------

/// Row-major interleaved H x W x C image of doubles.
struct ImageBuffer {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<double> data;

    ImageBuffer() = default;
    ImageBuffer(int w, int h, int c, double fill = 0.0)
        : width(w), height(h), channels(c),
          data(static_cast<std::size_t>(w) * static_cast<std::size_t>(h) *
                   static_cast<std::size_t>(c),
               fill) {}

    std::size_t index(int x, int y, int c) const {
        return (static_cast<std::size_t>(y) * static_cast<std::size_t>(width) +
                static_cast<std::size_t>(x)) *
                   static_cast<std::size_t>(channels) +
               static_cast<std::size_t>(c);
    }
    double& at(int x, int y, int c = 0) { return data[index(x, y, c)]; }
    double at(int x, int y, int c = 0) const { return data[index(x, y, c)]; }

    std::size_t pixel_count() const {
        return static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
    }
    bool same_shape(const ImageBuffer& o) const {
        return width == o.width && height == o.height && channels == o.channels;
    }
    bool all_finite() const {
        return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
    }
};

/// Sparse input points with optional per-point color in [0, 1].
struct PointCloud {
    std::vector<Vec3> positions;
    std::vector<Vec3> colors;  ///< empty or one per position

    std::size_t size() const { return positions.size(); }
    bool has_colors() const { return !colors.empty(); }
};

/// Pinhole camera looking down +z (x right, y down). Pixel (px, py) has its
/// center at continuous coordinates (px + 0.5, py + 0.5).
struct CameraView {
    int id = 0;
    double fx = 1.0;
    double fy = 1.0;
    double cx = 0.0;
    double cy = 0.0;
    int width = 1;
    int height = 1;
    Mat4 world_to_camera = Mat4::Identity();
    double near = 0.01;
    double far = 100.0;
    std::optional<ImageBuffer> gt_image;
    std::optional<ImageBuffer> gt_depth;

    Mat3 rotation() const { return world_to_camera.block<3, 3>(0, 0); }
    Vec3 translation() const { return world_to_camera.block<3, 1>(0, 3); }
    Vec3 center_world() const { return -(rotation().transpose() * translation()); }
    Vec3 to_camera(const Vec3& p) const { return rotation() * p + translation(); }

    /// Throws ConfigError if intrinsics, clip planes or pose are invalid.
    void validate(double orthonormal_tol = 1e-6) const {
        if (!(fx > 0.0) || !(fy > 0.0)) throw ConfigError("camera: fx and fy must be positive");
        if (width <= 0 || height <= 0) throw ConfigError("camera: image size must be positive");
        if (!(near > 0.0) || !(near < far)) throw ConfigError("camera: need 0 < near < far");
        if (!world_to_camera.allFinite()) throw ConfigError("camera: non-finite pose");
        const Mat3 r = rotation();
        if ((r * r.transpose() - Mat3::Identity()).cwiseAbs().maxCoeff() > orthonormal_tol ||
            r.determinant() < 0.0) {
            throw ConfigError("camera: world_to_camera rotation is not orthonormal");
        }
        const Eigen::RowVector4d last = world_to_camera.row(3);
        if ((last - Eigen::RowVector4d(0, 0, 0, 1)).cwiseAbs().maxCoeff() > orthonormal_tol) {
            throw ConfigError("camera: world_to_camera last row must be (0, 0, 0, 1)");
        }
    }

    /// Pose looking from eye toward target; up is the approximate world-space
    /// direction that maps to image -y.
    static Mat4 look_at(const Vec3& eye, const Vec3& target, const Vec3& up) {
        const Vec3 z = (target - eye).normalized();
        const Vec3 y = (z * z.dot(up) - up).normalized();
        const Vec3 x = y.cross(z);
        Mat3 r;
        r.row(0) = x.transpose();
        r.row(1) = y.transpose();
        r.row(2) = z.transpose();
        Mat4 w = Mat4::Identity();
        w.block<3, 3>(0, 0) = r;
        w.block<3, 1>(0, 3) = -(r * eye);
        return w;
    }
};

} // namespace eggs
