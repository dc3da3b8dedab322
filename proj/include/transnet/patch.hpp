#pragma once

#include <cstdint>
#include <vector>

#include "transnet/common.hpp"
#include "transnet/geometry.hpp"

namespace transnet {

// Dense (h x w x c) float image, row-major.
struct Image {
    int h = 0, w = 0, c = 0;
    std::vector<double> v;

    Image() = default;
    Image(int h_, int w_, int c_, double fill = 0.0) : h(h_), w(w_), c(c_), v(static_cast<std::size_t>(h_) * w_ * c_, fill) {}

    double& at(int i, int j, int ch = 0) { return v[(static_cast<std::size_t>(i) * w + j) * c + ch]; }
    double at(int i, int j, int ch = 0) const { return v[(static_cast<std::size_t>(i) * w + j) * c + ch]; }
    std::size_t pixels() const { return static_cast<std::size_t>(h) * w; }
};

// Mapping from patch pixel indices to full-image pixel coordinates. Patch
// pixel (i, j) samples the full image at (u(j), v(i)), pixel centers.
struct PatchGrid {
    double u0 = 0.0, v0 = 0.0;  // top-left corner of the patch in image coords
    double du = 1.0, dv = 1.0;  // image pixels per patch pixel
    int width = 0, height = 0;

    double u(int j) const { return u0 + (j + 0.5) * du; }
    double v(int i) const { return v0 + (i + 0.5) * dv; }
};

// Per-object patch set produced by the renderer.
struct PatchBundle {
    Image rgb;        // h x w x 3, values in [0,1]
    Image depth_raw;  // h x w x 1, corrupted; 0 marks invalid
    Image depth_gt;   // h x w x 1, z-depth in meters; 0 outside mask
    Image normal_gt;  // h x w x 3, unit camera-facing normals inside mask
    std::vector<std::uint8_t> mask;  // h*w, 1 inside the transparent region
    PatchGrid grid;
    geom::CameraIntrinsics intrinsics;

    bool masked(int i, int j) const { return mask[static_cast<std::size_t>(i) * grid.width + j] != 0; }
    geom::Vec3 ray(int i, int j) const { return geom::ray_direction(intrinsics, grid.u(j), grid.v(i)); }
};

}  // namespace transnet
