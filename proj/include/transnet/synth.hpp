#pragma once

// Synthetic transparent-glassware scenes: revolution-surface meshes, ray-cast
// depth/normal/mask patches, sensor-style depth corruption, and weak
// background-dominated RGB.

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "transnet/common.hpp"
#include "transnet/geometry.hpp"
#include "transnet/patch.hpp"
#include "transnet/rng.hpp"

namespace transnet::synth {

using geom::Vec3;

struct ProfilePoint {
    double z;  // normalized height in [0,1]
    double r;  // normalized radius, 0 closes the surface
};

struct CategorySpec {
    std::string name;
    std::vector<ProfilePoint> profile;
    Vec3 scale_min, scale_max;  // per-axis extents, meters
    bool symmetric = true;      // axial symmetry about z
    bool has_handle = false;    // mug only
};

inline const std::vector<CategorySpec>& categories() {
    static const std::vector<CategorySpec> cats = {
        // A deep bowl: height comparable to radius, so the cloud carries an
        // unambiguous up-axis (a near-flat dish reads as a disk and its tilt
        // is unrecoverable at this scale).
        {"bowl",
         {{0.0, 0.0}, {0.02, 0.25}, {0.5, 0.45}, {0.95, 0.5}, {1.0, 0.42}, {1.0, 0.0}},
         {0.10, 0.10, 0.08}, {0.15, 0.15, 0.14}, true, false},
        {"water_cup",
         {{0.0, 0.0}, {0.0, 0.35}, {0.7, 0.38}, {1.0, 0.40}, {1.0, 0.0}},
         {0.06, 0.06, 0.10}, {0.09, 0.09, 0.16}, true, false},
        {"wine_cup",
         {{0.0, 0.0}, {0.0, 0.30}, {0.05, 0.30}, {0.12, 0.06}, {0.45, 0.06}, {0.58, 0.28}, {0.9, 0.33}, {1.0, 0.30}, {1.0, 0.0}},
         {0.06, 0.06, 0.14}, {0.09, 0.09, 0.20}, true, false},
        {"mug",
         {{0.0, 0.0}, {0.0, 0.30}, {0.9, 0.30}, {1.0, 0.28}, {1.0, 0.0}},
         {0.08, 0.08, 0.08}, {0.12, 0.12, 0.12}, false, true},
    };
    return cats;
}

inline int category_index(const std::string& name) {
    const auto& cats = categories();
    for (std::size_t i = 0; i < cats.size(); ++i)
        if (cats[i].name == name) return static_cast<int>(i);
    throw CategoryError("unknown category '" + name + "'");
}

struct Triangle {
    Vec3 v0, v1, v2;
    Vec3 n0, n1, n2;  // unit vertex normals, outward
};

using Mesh = std::vector<Triangle>;

namespace detail {

struct IndexedMesh {
    std::vector<Vec3> verts;
    std::vector<std::array<int, 3>> faces;
};

inline void orient_and_emit(const IndexedMesh& im, const std::vector<Vec3>& interior_refs, Mesh& out) {
    // Vertex normals: area-weighted average of incident face normals.
    std::vector<Vec3> vnorm(im.verts.size(), Vec3{});
    std::vector<std::array<int, 3>> faces = im.faces;
    for (auto& f : faces) {
        const Vec3 a = im.verts[f[0]], b = im.verts[f[1]], c = im.verts[f[2]];
        Vec3 n = geom::cross(b - a, c - a);
        if (geom::norm(n) < 1e-15) continue;
        const Vec3 centroid = (a + b + c) * (1.0 / 3.0);
        if (geom::dot(n, centroid - interior_refs[&f - faces.data()]) < 0.0) std::swap(f[1], f[2]);
    }
    for (const auto& f : faces) {
        const Vec3 a = im.verts[f[0]], b = im.verts[f[1]], c = im.verts[f[2]];
        const Vec3 n = geom::cross(b - a, c - a);  // area-weighted
        for (int k = 0; k < 3; ++k) vnorm[f[k]] = vnorm[f[k]] + n;
    }
    for (auto& n : vnorm)
        if (geom::norm(n) > 1e-15) n = geom::normalized(n);
    for (const auto& f : faces) {
        if (geom::norm(geom::cross(im.verts[f[1]] - im.verts[f[0]], im.verts[f[2]] - im.verts[f[0]])) < 1e-15) continue;
        out.push_back({im.verts[f[0]], im.verts[f[1]], im.verts[f[2]], vnorm[f[0]], vnorm[f[1]], vnorm[f[2]]});
    }
}

}  // namespace detail

// Surface of revolution of the category profile, scaled per axis, with an
// added torus-segment handle for the mug. Output is in the object design
// frame: x, y in [-s.x/2, s.x/2] x [-s.y/2, s.y/2], z in [0, s.z].
inline Mesh build_mesh(const CategorySpec& spec, const Vec3& scale, int segments) {
    if (segments < 8) throw GenerationError("segments must be >= 8");
    if (spec.profile.size() < 2) throw GenerationError("degenerate profile: fewer than 2 points");
    double rmax = 0.0;
    for (const auto& p : spec.profile) {
        if (p.r < 0.0) throw GenerationError("degenerate profile: negative radius");
        rmax = std::max(rmax, p.r);
    }
    if (rmax <= 0.0) throw GenerationError("degenerate profile: all radii zero");

    detail::IndexedMesh im;
    // Ring (or apex) vertex indices per profile point.
    std::vector<std::vector<int>> rings;
    for (const auto& p : spec.profile) {
        std::vector<int> ring;
        if (p.r <= 0.0) {
            ring.push_back(static_cast<int>(im.verts.size()));
            im.verts.push_back({0.0, 0.0, p.z * scale.z});
        } else {
            for (int s = 0; s < segments; ++s) {
                const double phi = 2.0 * geom::kPi * s / segments;
                ring.push_back(static_cast<int>(im.verts.size()));
                im.verts.push_back({p.r * std::cos(phi) * scale.x, p.r * std::sin(phi) * scale.y, p.z * scale.z});
            }
        }
        rings.push_back(std::move(ring));
    }
    std::vector<std::array<int, 3>> faces;
    for (std::size_t k = 0; k + 1 < rings.size(); ++k) {
        const auto& lo = rings[k];
        const auto& hi = rings[k + 1];
        if (lo.size() == 1 && hi.size() == 1) continue;
        if (lo.size() == 1) {
            for (int s = 0; s < segments; ++s) faces.push_back({lo[0], hi[s], hi[(s + 1) % segments]});
        } else if (hi.size() == 1) {
            for (int s = 0; s < segments; ++s) faces.push_back({lo[s], lo[(s + 1) % segments], hi[0]});
        } else {
            for (int s = 0; s < segments; ++s) {
                const int s1 = (s + 1) % segments;
                faces.push_back({lo[s], lo[s1], hi[s]});
                faces.push_back({lo[s1], hi[s1], hi[s]});
            }
        }
    }
    im.faces = faces;
    // Reference point inside the solid; profiles are star-shaped about it.
    std::vector<Vec3> refs(faces.size(), Vec3{0.0, 0.0, 0.5 * scale.z});
    Mesh mesh;
    detail::orient_and_emit(im, refs, mesh);

    if (spec.has_handle) {
        // Torus segment in the x-z plane, ends plunged into the body wall.
        const double major_r = 0.13, minor_r = 0.04;
        const Vec3 ring_center{0.33, 0.0, 0.5};
        const int n_major = std::max(8, segments / 4);
        const int n_minor = std::max(6, segments / 8);
        detail::IndexedMesh him;
        std::vector<Vec3> tube_centers;
        for (int a = 0; a <= n_major; ++a) {
            const double psi = (-2.0 * geom::kPi / 3.0) + (4.0 * geom::kPi / 3.0) * a / n_major;
            const Vec3 u{std::cos(psi), 0.0, std::sin(psi)};
            const Vec3 cr = ring_center + u * major_r;
            tube_centers.push_back(cr);
            for (int b = 0; b < n_minor; ++b) {
                const double phi = 2.0 * geom::kPi * b / n_minor;
                const Vec3 p = cr + (u * std::cos(phi) + Vec3{0.0, 1.0, 0.0} * std::sin(phi)) * minor_r;
                him.verts.push_back({p.x * scale.x, p.y * scale.y, p.z * scale.z});
            }
        }
        std::vector<std::array<int, 3>> hfaces;
        std::vector<Vec3> hrefs;
        for (int a = 0; a < n_major; ++a)
            for (int b = 0; b < n_minor; ++b) {
                const int b1 = (b + 1) % n_minor;
                const int i00 = a * n_minor + b, i01 = a * n_minor + b1;
                const int i10 = (a + 1) * n_minor + b, i11 = (a + 1) * n_minor + b1;
                const Vec3 ref{tube_centers[a].x * scale.x, tube_centers[a].y * scale.y, tube_centers[a].z * scale.z};
                hfaces.push_back({i00, i01, i10});
                hrefs.push_back(ref);
                hfaces.push_back({i01, i11, i10});
                hrefs.push_back(ref);
            }
        him.faces = hfaces;
        detail::orient_and_emit(him, hrefs, mesh);
    }
    return mesh;
}

struct SceneInstance {
    int category = 0;
    geom::Pose pose;  // centered frame: camera point = R * (x_obj - (0,0,s.z/2)) + t
    Mesh mesh;        // object design frame (z in [0, s.z])
    std::uint64_t instance_seed = 0;
};

namespace detail {

struct Hit {
    double t = std::numeric_limits<double>::infinity();
    double b1 = 0.0, b2 = 0.0;
    int tri = -1;
};

// Moeller-Trumbore, origin at the camera.
inline bool ray_triangle(const Vec3& dir, const Vec3& v0, const Vec3& v1, const Vec3& v2, double& t, double& b1,
                         double& b2) {
    const Vec3 e1 = v1 - v0, e2 = v2 - v0;
    const Vec3 pv = geom::cross(dir, e2);
    const double det = geom::dot(e1, pv);
    if (std::fabs(det) < 1e-14) return false;
    const double inv = 1.0 / det;
    const Vec3 tv = Vec3{} - v0;
    b1 = geom::dot(tv, pv) * inv;
    if (b1 < -1e-9 || b1 > 1.0 + 1e-9) return false;
    const Vec3 qv = geom::cross(tv, e1);
    b2 = geom::dot(dir, qv) * inv;
    if (b2 < -1e-9 || b1 + b2 > 1.0 + 1e-9) return false;
    t = geom::dot(e2, qv) * inv;
    return t > 1e-9;
}

}  // namespace detail

// Ray-cast ground-truth depth (z-depth), interpolated camera-facing surface
// normals, and the instance mask over the given patch grid.
inline PatchBundle render_patch(const SceneInstance& instance, const geom::CameraIntrinsics& k, const PatchGrid& grid) {
    PatchBundle out;
    out.grid = grid;
    out.intrinsics = k;
    const int h = grid.height, w = grid.width;
    out.depth_gt = Image(h, w, 1);
    out.normal_gt = Image(h, w, 3);
    out.rgb = Image(h, w, 3);
    out.depth_raw = Image(h, w, 1);
    out.mask.assign(static_cast<std::size_t>(h) * w, 0);

    // Transform mesh to camera space once.
    const Vec3 center_off{0.0, 0.0, instance.pose.s.z * 0.5};
    std::vector<Triangle> tris;
    tris.reserve(instance.mesh.size());
    for (const auto& tr : instance.mesh) {
        Triangle t;
        t.v0 = instance.pose.R * (tr.v0 - center_off) + instance.pose.t;
        t.v1 = instance.pose.R * (tr.v1 - center_off) + instance.pose.t;
        t.v2 = instance.pose.R * (tr.v2 - center_off) + instance.pose.t;
        t.n0 = instance.pose.R * tr.n0;
        t.n1 = instance.pose.R * tr.n1;
        t.n2 = instance.pose.R * tr.n2;
        tris.push_back(t);
    }

    std::size_t hits = 0;
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            const Vec3 dir = geom::ray_direction(k, grid.u(j), grid.v(i));
            detail::Hit best;
            for (std::size_t ti = 0; ti < tris.size(); ++ti) {
                double t, b1, b2;
                if (detail::ray_triangle(dir, tris[ti].v0, tris[ti].v1, tris[ti].v2, t, b1, b2) && t < best.t) {
                    best = {t, b1, b2, static_cast<int>(ti)};
                }
            }
            if (best.tri < 0) continue;
            const auto& tr = tris[best.tri];
            const Vec3 hit = dir * best.t;
            Vec3 n = tr.n0 * (1.0 - best.b1 - best.b2) + tr.n1 * best.b1 + tr.n2 * best.b2;
            if (geom::norm(n) < 1e-12) n = geom::normalized(geom::cross(tr.v1 - tr.v0, tr.v2 - tr.v0));
            n = geom::normalized(n);
            if (geom::dot(n, dir) > 0.0) n = -n;
            out.depth_gt.at(i, j) = hit.z;
            out.normal_gt.at(i, j, 0) = n.x;
            out.normal_gt.at(i, j, 1) = n.y;
            out.normal_gt.at(i, j, 2) = n.z;
            out.mask[static_cast<std::size_t>(i) * w + j] = 1;
            ++hits;
        }
    if (hits == 0) throw EmptyMaskError("render_patch: instance not visible in patch");
    return out;
}

struct CorruptionParams {
    double dropout = 0.6;        // probability of losing a masked pixel
    double noise_sigma = 0.005;  // meters
    double bias_amplitude = 0.015;  // meters
    double bias_period = 24.0;      // patch pixels

    void validate() const {
        if (dropout < 0.0 || dropout > 1.0) throw ConfigError("corruption dropout outside [0,1]");
        if (noise_sigma < 0.0 || bias_amplitude < 0.0) throw ConfigError("negative corruption sigma");
        if (bias_period <= 0.0) throw ConfigError("non-positive bias period");
    }
};

// Transparent-sensor failure model inside the mask: dropout to 0, Gaussian
// noise, and a smooth sinusoidal bias. Pixels outside the mask are untouched.
inline Image corrupt_depth(const Image& depth_gt, const std::vector<std::uint8_t>& mask, const CorruptionParams& params,
                           std::uint64_t seed) {
    params.validate();
    Image out = depth_gt;
    Rng rng(seed);
    const double phase_i = rng.uniform(0.0, 2.0 * geom::kPi);
    const double phase_j = rng.uniform(0.0, 2.0 * geom::kPi);
    for (int i = 0; i < depth_gt.h; ++i)
        for (int j = 0; j < depth_gt.w; ++j) {
            if (!mask[static_cast<std::size_t>(i) * depth_gt.w + j]) continue;
            const double drop = rng.uniform();
            const double noise = rng.normal(0.0, params.noise_sigma);
            if (drop < params.dropout) {
                out.at(i, j) = 0.0;
                continue;
            }
            const double bias = params.bias_amplitude *
                                std::sin(2.0 * geom::kPi * i / params.bias_period + phase_i) *
                                std::sin(2.0 * geom::kPi * j / params.bias_period + phase_j);
            out.at(i, j) = std::max(1e-4, depth_gt.at(i, j) + noise + bias);
        }
    return out;
}

// Background-dominated RGB: a smooth gradient everywhere plus a Fresnel-style
// rim term on mask pixels (brighter where the surface grazes the view ray).
inline Image synth_rgb(const PatchBundle& rendered, std::uint64_t seed) {
    const int h = rendered.depth_gt.h, w = rendered.depth_gt.w;
    Image out(h, w, 3);
    Rng rng(seed);
    double base[3], gx[3], gy[3];
    for (int c = 0; c < 3; ++c) {
        base[c] = rng.uniform(0.2, 0.6);
        gx[c] = rng.uniform(-0.3, 0.3);
        gy[c] = rng.uniform(-0.3, 0.3);
    }
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            const double fu = static_cast<double>(j) / std::max(1, w - 1);
            const double fv = static_cast<double>(i) / std::max(1, h - 1);
            double rim = 0.0;
            if (rendered.masked(i, j)) {
                const geom::Vec3 n{rendered.normal_gt.at(i, j, 0), rendered.normal_gt.at(i, j, 1),
                                   rendered.normal_gt.at(i, j, 2)};
                const double cosang = std::fabs(geom::dot(n, rendered.ray(i, j)));
                const double g = 1.0 - cosang;
                rim = 0.6 * g * g * g;
            }
            for (int c = 0; c < 3; ++c)
                out.at(i, j, c) = std::clamp(base[c] + gx[c] * fu + gy[c] * fv + rim, 0.0, 1.0);
        }
    return out;
}

}  // namespace transnet::synth
