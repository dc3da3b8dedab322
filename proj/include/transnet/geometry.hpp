#pragma once

// Camera-ray math, pose representation, axis orthogonalization, and oriented
// boxes. Pure functions over immutable values.

#include <array>
#include <cmath>

#include "transnet/common.hpp"

namespace transnet::geom {

inline constexpr double kPi = 3.14159265358979323846;

struct Vec3 {
    double x = 0.0, y = 0.0, z = 0.0;

    Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    Vec3 operator*(double c) const { return {x * c, y * c, z * c}; }
    Vec3 operator-() const { return {-x, -y, -z}; }
    double operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }
};

inline double dot(const Vec3& a, const Vec3& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
inline Vec3 cross(const Vec3& a, const Vec3& b) {
    return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }
inline Vec3 normalized(const Vec3& a) {
    const double n = norm(a);
    if (n == 0.0) throw ContractError("normalize: zero vector");
    return a * (1.0 / n);
}

struct Mat3 {
    // Row-major.
    std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

    static Mat3 identity() { return {}; }

    static Mat3 from_columns(const Vec3& c0, const Vec3& c1, const Vec3& c2) {
        Mat3 r;
        r.m = {c0.x, c1.x, c2.x, c0.y, c1.y, c2.y, c0.z, c1.z, c2.z};
        return r;
    }

    double operator()(int i, int j) const { return m[i * 3 + j]; }
    double& operator()(int i, int j) { return m[i * 3 + j]; }

    Vec3 operator*(const Vec3& v) const {
        return {m[0] * v.x + m[1] * v.y + m[2] * v.z, m[3] * v.x + m[4] * v.y + m[5] * v.z,
                m[6] * v.x + m[7] * v.y + m[8] * v.z};
    }

    Mat3 operator*(const Mat3& o) const {
        Mat3 r;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                double a = 0.0;
                for (int k = 0; k < 3; ++k) a += (*this)(i, k) * o(k, j);
                r(i, j) = a;
            }
        return r;
    }

    Mat3 transposed() const {
        Mat3 r;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) r(i, j) = (*this)(j, i);
        return r;
    }

    double det() const {
        return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
               m[2] * (m[3] * m[7] - m[4] * m[6]);
    }

    Vec3 column(int j) const { return {m[j], m[3 + j], m[6 + j]}; }
};

// Rodrigues rotation of v about unit axis n by angle (radians).
inline Vec3 rotate_about(const Vec3& v, const Vec3& n, double angle) {
    const double c = std::cos(angle), s = std::sin(angle);
    return v * c + cross(n, v) * s + n * (dot(n, v) * (1.0 - c));
}

inline Mat3 axis_angle(const Vec3& unit_axis, double angle) {
    return Mat3::from_columns(rotate_about({1, 0, 0}, unit_axis, angle), rotate_about({0, 1, 0}, unit_axis, angle),
                              rotate_about({0, 0, 1}, unit_axis, angle));
}

struct CameraIntrinsics {
    double fx = 1.0, fy = 1.0, cx = 0.0, cy = 0.0;
    int width = 0, height = 0;
};

struct Pose {
    Mat3 R;
    Vec3 t;
    Vec3 s;  // full box extents, strictly positive
};

struct AxisPair {
    Vec3 a_x{1, 0, 0};
    Vec3 a_z{0, 0, 1};
    double c_x = 1.0;
    double c_z = 1.0;
};

// Unit ray from the camera origin through pixel (u, v).
inline Vec3 ray_direction(const CameraIntrinsics& k, double u, double v) {
    return normalized({(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0});
}

// 3D point at depth d (z-depth, meters) behind pixel (u, v).
inline Vec3 backproject(const CameraIntrinsics& k, double u, double v, double d) {
    if (d <= 0.0) throw InvalidDepthError("backproject: depth " + std::to_string(d));
    return {(u - k.cx) / k.fx * d, (v - k.cy) / k.fy * d, d};
}

struct OrthogonalAxes {
    Vec3 a_x, a_z;
};

// Confidence-weighted in-plane correction making the two decoded axes exactly
// perpendicular: the residual angle theta - pi/2 is split in inverse proportion
// to confidence, so the higher-confidence axis moves less.
inline OrthogonalAxes orthogonalize_axes(const AxisPair& pair) {
    const Vec3 ax = normalized(pair.a_x);
    const Vec3 az = normalized(pair.a_z);
    const double c = dot(ax, az);
    if (std::fabs(c) > 1.0 - 1e-9) throw DegenerateAxesError("axes are parallel");
    const double theta = std::acos(std::clamp(c, -1.0, 1.0));
    const double delta = theta - kPi / 2.0;
    const double theta_x = pair.c_z / (pair.c_x + pair.c_z) * delta;
    const double theta_z = pair.c_x / (pair.c_x + pair.c_z) * delta;
    const Vec3 n = normalized(cross(ax, az));
    // +angle about n moves a_x toward a_z; the pair closes by theta_x + theta_z = delta.
    OrthogonalAxes out;
    out.a_x = normalized(rotate_about(ax, n, theta_x));
    out.a_z = normalized(rotate_about(az, n, -theta_z));
    return out;
}

// Right-handed frame with columns (a_x, a_z x a_x, a_z).
inline Mat3 rotation_from_axes(const Vec3& a_x, const Vec3& a_z) {
    if (std::fabs(norm(a_x) - 1.0) > 1e-6 || std::fabs(norm(a_z) - 1.0) > 1e-6 || std::fabs(dot(a_x, a_z)) > 1e-6)
        throw ContractError("rotation_from_axes: axes not orthonormal");
    return Mat3::from_columns(a_x, cross(a_z, a_x), a_z);
}

// Corners of the oriented box, Gray-code order over the signs of (x, y, z):
// (---) (+--) (++-) (-+-) (-++) (+++) (+-+) (--+) in the box frame.
inline std::array<Vec3, 8> box_corners(const Pose& pose) {
    static constexpr int kSigns[8][3] = {{-1, -1, -1}, {+1, -1, -1}, {+1, +1, -1}, {-1, +1, -1},
                                         {-1, +1, +1}, {+1, +1, +1}, {+1, -1, +1}, {-1, -1, +1}};
    std::array<Vec3, 8> out;
    const Vec3 h = pose.s * 0.5;
    for (int i = 0; i < 8; ++i) {
        const Vec3 local{kSigns[i][0] * h.x, kSigns[i][1] * h.y, kSigns[i][2] * h.z};
        out[i] = pose.R * local + pose.t;
    }
    return out;
}

inline double rotation_geodesic_degrees(const Mat3& r1, const Mat3& r2) {
    const Mat3 rel = r1.transposed() * r2;
    const double tr = rel(0, 0) + rel(1, 1) + rel(2, 2);
    const double c = std::clamp((tr - 1.0) / 2.0, -1.0, 1.0);
    return std::acos(c) * 180.0 / kPi;
}

// For axially symmetric objects only the z-axis direction matters.
inline double symmetric_rotation_error_degrees(const Mat3& r_est, const Mat3& r_gt, bool symmetric) {
    if (!symmetric) return rotation_geodesic_degrees(r_est, r_gt);
    const double c = std::clamp(dot(r_est.column(2), r_gt.column(2)), -1.0, 1.0);
    return std::acos(c) * 180.0 / kPi;
}

}  // namespace transnet::geom
