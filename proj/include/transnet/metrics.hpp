#pragma once

// Evaluation suite: exact oriented 3D box IoU via convex-polytope clipping
// (with a Monte Carlo oracle), degree-centimeter pose metrics with symmetry
// handling, depth completion metrics, and surface normal metrics.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "transnet/common.hpp"
#include "transnet/geometry.hpp"
#include "transnet/model.hpp"
#include "transnet/patch.hpp"
#include "transnet/rng.hpp"

namespace transnet::metrics {

using geom::Mat3;
using geom::Pose;
using geom::Vec3;

// ---------------------------------------------------------------------------
// Exact oriented box IoU

namespace detail {

using Polygon = std::vector<Vec3>;
using Polytope = std::vector<Polygon>;  // convex, faces wound outward

inline Polytope box_polytope(const Pose& box) {
    const Vec3 h = box.s * 0.5;
    auto corner = [&](double sx, double sy, double sz) {
        return box.R * Vec3{sx * h.x, sy * h.y, sz * h.z} + box.t;
    };
    // Each face CCW viewed from outside.
    Polytope faces;
    faces.push_back({corner(+1, -1, -1), corner(+1, +1, -1), corner(+1, +1, +1), corner(+1, -1, +1)});  // +x
    faces.push_back({corner(-1, -1, -1), corner(-1, -1, +1), corner(-1, +1, +1), corner(-1, +1, -1)});  // -x
    faces.push_back({corner(-1, +1, -1), corner(-1, +1, +1), corner(+1, +1, +1), corner(+1, +1, -1)});  // +y
    faces.push_back({corner(-1, -1, -1), corner(+1, -1, -1), corner(+1, -1, +1), corner(-1, -1, +1)});  // -y
    faces.push_back({corner(-1, -1, +1), corner(+1, -1, +1), corner(+1, +1, +1), corner(-1, +1, +1)});  // +z
    faces.push_back({corner(-1, -1, -1), corner(-1, +1, -1), corner(+1, +1, -1), corner(+1, -1, -1)});  // -z
    return faces;
}

// Clip polytope by half-space n.x <= d, rebuilding the planar cap face.
inline Polytope clip_polytope(const Polytope& poly, const Vec3& n, double d, double eps = 1e-9) {
    bool any_out = false;
    for (const auto& face : poly)
        for (const auto& v : face)
            if (geom::dot(n, v) > d + eps) {
                any_out = true;
                break;
            }
    if (!any_out) return poly;  // plane does not cut (also covers coplanar faces)

    Polytope out;
    std::vector<Vec3> cap_points;
    for (const auto& face : poly) {
        Polygon kept;
        const std::size_t m = face.size();
        for (std::size_t i = 0; i < m; ++i) {
            const Vec3& a = face[i];
            const Vec3& b = face[(i + 1) % m];
            const double da = geom::dot(n, a) - d;
            const double db = geom::dot(n, b) - d;
            if (da <= eps) kept.push_back(a);
            if ((da < -eps && db > eps) || (da > eps && db < -eps)) {
                const double t = da / (da - db);
                const Vec3 p = a + (b - a) * t;
                kept.push_back(p);
                cap_points.push_back(p);
            }
        }
        if (kept.size() >= 3) {
            for (const auto& v : kept)
                if (std::fabs(geom::dot(n, v) - d) <= eps) cap_points.push_back(v);
            out.push_back(std::move(kept));
        }
    }
    if (out.empty()) return {};

    // Cap: dedup, sort around the centroid in the plane, orient along +n.
    std::vector<Vec3> uniq;
    for (const auto& p : cap_points) {
        bool dup = false;
        for (const auto& q : uniq)
            if (geom::norm(p - q) < 10 * eps) {
                dup = true;
                break;
            }
        if (!dup) uniq.push_back(p);
    }
    if (uniq.size() >= 3) {
        Vec3 centroid{};
        for (const auto& p : uniq) centroid = centroid + p;
        centroid = centroid * (1.0 / uniq.size());
        const Vec3 nz = geom::normalized(n);
        Vec3 bx = std::fabs(nz.x) < 0.9 ? Vec3{1, 0, 0} : Vec3{0, 1, 0};
        bx = geom::normalized(bx - nz * geom::dot(bx, nz));
        const Vec3 by = geom::cross(nz, bx);
        std::sort(uniq.begin(), uniq.end(), [&](const Vec3& a, const Vec3& b) {
            const Vec3 pa = a - centroid, pb = b - centroid;
            return std::atan2(geom::dot(pa, by), geom::dot(pa, bx)) <
                   std::atan2(geom::dot(pb, by), geom::dot(pb, bx));
        });
        out.push_back(std::move(uniq));
    }
    return out;
}

inline double polytope_volume(const Polytope& poly) {
    double six_v = 0.0;
    for (const auto& face : poly)
        for (std::size_t i = 1; i + 1 < face.size(); ++i)
            six_v += geom::dot(geom::cross(face[0], face[i]), face[i + 1]);
    return six_v / 6.0;
}

inline double intersection_volume(const Pose& a, const Pose& b) {
    Polytope poly = box_polytope(a);
    const Vec3 h = b.s * 0.5;
    for (int axis = 0; axis < 3; ++axis) {
        const Vec3 n = b.R.column(axis);
        const double c = geom::dot(n, b.t);
        poly = clip_polytope(poly, n, c + (axis == 0 ? h.x : axis == 1 ? h.y : h.z));
        if (poly.empty()) return 0.0;
        poly = clip_polytope(poly, -n, -(c - (axis == 0 ? h.x : axis == 1 ? h.y : h.z)));
        if (poly.empty()) return 0.0;
    }
    return std::max(0.0, polytope_volume(poly));
}

}  // namespace detail

inline double iou3d(const Pose& a, const Pose& b) {
    const double va = a.s.x * a.s.y * a.s.z;
    const double vb = b.s.x * b.s.y * b.s.z;
    const double vi = std::min({detail::intersection_volume(a, b), va, vb});
    const double vu = va + vb - vi;
    if (vu <= 0.0) return 0.0;
    return std::clamp(vi / vu, 0.0, 1.0);
}

struct MonteCarloIoU {
    double iou = 0.0;
    double standard_error = 0.0;
};

// Test oracle: uniform samples in the axis-aligned hull of both boxes,
// classified by membership in each box; the hull volume cancels in the ratio.
inline MonteCarloIoU iou3d_mc_oracle(const Pose& a, const Pose& b, std::size_t samples, std::uint64_t seed) {
    if (samples < 1) throw ContractError("iou3d_mc_oracle: need at least one sample");
    Vec3 lo{1e30, 1e30, 1e30}, hi{-1e30, -1e30, -1e30};
    for (const Pose* box : {&a, &b})
        for (const auto& c : geom::box_corners(*box)) {
            lo = {std::min(lo.x, c.x), std::min(lo.y, c.y), std::min(lo.z, c.z)};
            hi = {std::max(hi.x, c.x), std::max(hi.y, c.y), std::max(hi.z, c.z)};
        }
    auto inside = [](const Pose& box, const Vec3& p) {
        const Vec3 q = box.R.transposed() * (p - box.t);
        return std::fabs(q.x) <= box.s.x * 0.5 && std::fabs(q.y) <= box.s.y * 0.5 && std::fabs(q.z) <= box.s.z * 0.5;
    };
    Rng rng(seed);
    std::size_t n_both = 0, n_either = 0;
    for (std::size_t i = 0; i < samples; ++i) {
        const Vec3 p{rng.uniform(lo.x, hi.x), rng.uniform(lo.y, hi.y), rng.uniform(lo.z, hi.z)};
        const bool ia = inside(a, p), ib = inside(b, p);
        n_both += ia && ib;
        n_either += ia || ib;
    }
    MonteCarloIoU out;
    if (n_either == 0) return out;
    out.iou = static_cast<double>(n_both) / static_cast<double>(n_either);
    out.standard_error = std::sqrt(std::max(out.iou * (1.0 - out.iou), 1e-12) / static_cast<double>(n_either));
    return out;
}

// ---------------------------------------------------------------------------
// Pose metrics

inline bool degree_cm_hit(const model::PoseEstimate& est, const Pose& gt, double deg_threshold, double cm_threshold,
                          bool symmetric) {
    const double deg = geom::symmetric_rotation_error_degrees(est.R, gt.R, symmetric);
    const double cm = geom::norm(est.t - gt.t) * 100.0;
    return deg < deg_threshold && cm < cm_threshold;  // strict
}

// Axially symmetric objects: spin the estimated box about its own z-axis so
// its x-axis best aligns with the ground-truth x-axis before computing IoU.
inline double iou_for_symmetric(const model::PoseEstimate& est, const Pose& gt) {
    const Vec3 ez = est.R.column(2);
    Vec3 proj = gt.R.column(0) - ez * geom::dot(gt.R.column(0), ez);
    if (geom::norm(proj) < 1e-9) {
        Pose est_pose{est.R, est.t, est.s};
        return iou3d(est_pose, gt);
    }
    const Vec3 ex = geom::normalized(proj);
    Pose aligned{geom::rotation_from_axes(ex, ez), est.t, est.s};
    return iou3d(aligned, gt);
}

// ---------------------------------------------------------------------------
// Depth and normal metrics

struct DepthMetrics {
    double rmse = 0.0, rel = 0.0, mae = 0.0;
    double delta_105 = 0.0, delta_110 = 0.0, delta_125 = 0.0;
    std::size_t pixels = 0;
};

inline DepthMetrics depth_metrics(const Image& pred, const Image& gt, const std::vector<std::uint8_t>& mask) {
    DepthMetrics m;
    double sq = 0.0;
    for (int i = 0; i < gt.h; ++i)
        for (int j = 0; j < gt.w; ++j) {
            if (!mask[static_cast<std::size_t>(i) * gt.w + j]) continue;
            const double d = pred.at(i, j), g = gt.at(i, j);
            if (g <= 0.0) throw InvalidDepthError("depth_metrics: non-positive ground truth inside mask");
            const double e = std::fabs(d - g);
            sq += (d - g) * (d - g);
            m.mae += e;
            m.rel += e / g;
            const double ratio = d > 0.0 ? std::max(d / g, g / d) : 1e30;
            m.delta_105 += ratio < 1.05;
            m.delta_110 += ratio < 1.10;
            m.delta_125 += ratio < 1.25;
            ++m.pixels;
        }
    if (m.pixels == 0) throw EmptyMaskError("depth_metrics");
    const double n = static_cast<double>(m.pixels);
    m.rmse = std::sqrt(sq / n);
    m.mae /= n;
    m.rel /= n;
    m.delta_105 /= n;
    m.delta_110 /= n;
    m.delta_125 /= n;
    return m;
}

struct NormalMetrics {
    double rmse = 0.0, mae = 0.0;
    double mean_deg = 0.0;
    double frac_1125 = 0.0, frac_225 = 0.0, frac_30 = 0.0;
    std::size_t pixels = 0;
};

inline NormalMetrics normal_metrics(const Image& pred, const Image& gt, const std::vector<std::uint8_t>& mask) {
    NormalMetrics m;
    double sq = 0.0, abs_acc = 0.0;
    for (int i = 0; i < gt.h; ++i)
        for (int j = 0; j < gt.w; ++j) {
            if (!mask[static_cast<std::size_t>(i) * gt.w + j]) continue;
            double dotp = 0.0;
            for (int c = 0; c < 3; ++c) {
                const double d = pred.at(i, j, c) - gt.at(i, j, c);
                sq += d * d;
                abs_acc += std::fabs(d);
                dotp += pred.at(i, j, c) * gt.at(i, j, c);
            }
            const double ang = std::acos(std::clamp(dotp, -1.0, 1.0)) * 180.0 / geom::kPi;
            m.mean_deg += ang;
            m.frac_1125 += ang < 11.25;
            m.frac_225 += ang < 22.5;
            m.frac_30 += ang < 30.0;
            ++m.pixels;
        }
    if (m.pixels == 0) throw EmptyMaskError("normal_metrics");
    const double n = static_cast<double>(m.pixels);
    m.rmse = std::sqrt(sq / (3.0 * n));
    m.mae = abs_acc / (3.0 * n);
    m.mean_deg /= n;
    m.frac_1125 /= n;
    m.frac_225 /= n;
    m.frac_30 /= n;
    return m;
}

// ---------------------------------------------------------------------------
// Aggregate report

struct PoseMetrics {
    double iou25 = 0.0, iou50 = 0.0, iou75 = 0.0;
    double deg5cm5 = 0.0, deg10cm5 = 0.0, deg10cm10 = 0.0;
    std::size_t count = 0;
};

struct MetricReport {
    std::map<std::string, PoseMetrics> per_category;  // sorted by name
    PoseMetrics aggregate;
    std::optional<DepthMetrics> depth;
    std::optional<NormalMetrics> normal;
    bool symmetric_iou_alignment = true;
};

struct Prediction {
    std::string id;
    model::PoseEstimate est;
};

struct GroundTruth {
    std::string id;
    Pose pose;
    bool symmetric = true;
    std::string category;
};

inline MetricReport evaluate(const std::vector<Prediction>& predictions, const std::vector<GroundTruth>& truths) {
    std::map<std::string, const GroundTruth*> by_id;
    for (const auto& g : truths) by_id[g.id] = &g;
    std::vector<std::string> unmatched;
    for (const auto& p : predictions)
        if (!by_id.count(p.id)) unmatched.push_back(p.id);
    if (predictions.size() != truths.size() || !unmatched.empty()) {
        std::ostringstream os;
        os << "prediction/ground-truth mismatch (" << predictions.size() << " vs " << truths.size() << ")";
        for (const auto& id : unmatched) os << " unmatched:" << id;
        throw PairingError(os.str());
    }

    // Fixed-order reduction: accumulate per id in sorted order.
    std::map<std::string, const model::PoseEstimate*> est_by_id;
    for (const auto& p : predictions) est_by_id[p.id] = &p.est;

    MetricReport report;
    for (const auto& [id, gt] : by_id) {
        const model::PoseEstimate& est = *est_by_id.at(id);
        const double iou = gt->symmetric ? iou_for_symmetric(est, gt->pose)
                                         : iou3d(Pose{est.R, est.t, est.s}, gt->pose);
        PoseMetrics& cat = report.per_category[gt->category];
        for (PoseMetrics* m : {&cat, &report.aggregate}) {
            m->iou25 += iou > 0.25;
            m->iou50 += iou > 0.50;
            m->iou75 += iou > 0.75;
            m->deg5cm5 += degree_cm_hit(est, gt->pose, 5.0, 5.0, gt->symmetric);
            m->deg10cm5 += degree_cm_hit(est, gt->pose, 10.0, 5.0, gt->symmetric);
            m->deg10cm10 += degree_cm_hit(est, gt->pose, 10.0, 10.0, gt->symmetric);
            m->count += 1;
        }
    }
    auto finish = [](PoseMetrics& m) {
        if (m.count == 0) return;
        const double n = static_cast<double>(m.count);
        m.iou25 /= n;
        m.iou50 /= n;
        m.iou75 /= n;
        m.deg5cm5 /= n;
        m.deg10cm5 /= n;
        m.deg10cm10 /= n;
    };
    for (auto& [name, m] : report.per_category) finish(m);
    finish(report.aggregate);
    return report;
}

// ---------------------------------------------------------------------------
// Serialization

namespace detail {

inline std::string fmt(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

}  // namespace detail

inline std::string report_to_csv(const MetricReport& report) {
    std::ostringstream os;
    os << "# symmetric_iou_alignment=" << (report.symmetric_iou_alignment ? "true" : "false") << "\n";
    os << "category,3D_25,3D_50,3D_75,5deg5cm,10deg5cm,10deg10cm,count\n";
    auto row = [&](const std::string& name, const PoseMetrics& m) {
        os << name << "," << detail::fmt(m.iou25) << "," << detail::fmt(m.iou50) << "," << detail::fmt(m.iou75) << ","
           << detail::fmt(m.deg5cm5) << "," << detail::fmt(m.deg10cm5) << "," << detail::fmt(m.deg10cm10) << ","
           << m.count << "\n";
    };
    for (const auto& [name, m] : report.per_category) row(name, m);
    row("ALL", report.aggregate);
    return os.str();
}

inline nlohmann::ordered_json report_to_json(const MetricReport& report) {
    nlohmann::ordered_json j;
    j["symmetric_iou_alignment"] = report.symmetric_iou_alignment;
    auto pose_json = [](const PoseMetrics& m) {
        return nlohmann::ordered_json{{"3D_25", m.iou25},     {"3D_50", m.iou50},       {"3D_75", m.iou75},
                                      {"5deg5cm", m.deg5cm5}, {"10deg5cm", m.deg10cm5}, {"10deg10cm", m.deg10cm10},
                                      {"count", m.count}};
    };
    j["per_category"] = nlohmann::ordered_json::object();
    for (const auto& [name, m] : report.per_category) j["per_category"][name] = pose_json(m);
    j["aggregate"] = pose_json(report.aggregate);
    if (report.depth) {
        const auto& d = *report.depth;
        j["depth"] = {{"RMSE", d.rmse},          {"REL", d.rel},           {"MAE", d.mae},
                      {"delta_1.05", d.delta_105}, {"delta_1.10", d.delta_110}, {"delta_1.25", d.delta_125},
                      {"pixels", d.pixels}};
    }
    if (report.normal) {
        const auto& s = *report.normal;
        j["normal"] = {{"RMSE", s.rmse},         {"MAE", s.mae},          {"MEAN", s.mean_deg},
                       {"11.25deg", s.frac_1125}, {"22.5deg", s.frac_225}, {"30deg", s.frac_30},
                       {"pixels", s.pixels}};
    }
    return j;
}

}  // namespace transnet::metrics
