#pragma once

// Generalized point cloud: N rows of (RGB, ray direction, completed depth,
// surface normal) sampled inside the transparency mask.

#include <array>
#include <cstdint>
#include <vector>

#include "transnet/common.hpp"
#include "transnet/geometry.hpp"
#include "transnet/patch.hpp"
#include "transnet/rng.hpp"

namespace transnet::gpc {

inline constexpr int kNumCategories = 4;
inline constexpr int kFullChannels = 10;

// Channel toggles for the ablation grid; RGB and depth are always present.
struct ChannelConfig {
    bool ray = true;
    bool normal = true;

    int width() const { return 3 + 1 + (ray ? 3 : 0) + (normal ? 3 : 0); }
};

struct GeneralizedPointCloud {
    int n = 0;
    int channels = kFullChannels;
    std::vector<double> features;              // n x channels, row-major
    std::vector<std::array<double, 2>> pixels; // full-image (u, v) per row
    std::vector<double> depths;                // completed depth per row (meters)
    std::array<double, kNumCategories> category_onehot{};
    std::uint64_t sample_seed = 0;
    ChannelConfig layout;  // which optional channels the feature rows carry

    double feature(int row, int ch) const { return features[static_cast<std::size_t>(row) * channels + ch]; }
};

// Sample N rows uniformly inside the mask: without replacement when the mask
// has at least N pixels, with replacement otherwise (shapes stay static).
inline GeneralizedPointCloud build_gpc(const PatchBundle& bundle, const Image& completed_depth,
                                       const Image& normals, int category, int n, std::uint64_t seed,
                                       const ChannelConfig& channels = {}) {
    const int h = bundle.grid.height, w = bundle.grid.width;
    std::vector<std::size_t> mask_pixels;
    for (std::size_t px = 0; px < static_cast<std::size_t>(h) * w; ++px)
        if (bundle.mask[px]) mask_pixels.push_back(px);
    if (mask_pixels.empty()) throw EmptyMaskError("build_gpc");
    if (category < 0 || category >= kNumCategories) throw CategoryError("category index out of range");

    Rng rng(seed);
    std::vector<std::size_t> chosen;
    chosen.reserve(n);
    if (mask_pixels.size() >= static_cast<std::size_t>(n)) {
        for (std::size_t idx : rng.sample_without_replacement(mask_pixels.size(), n)) chosen.push_back(mask_pixels[idx]);
    } else {
        for (int i = 0; i < n; ++i) chosen.push_back(mask_pixels[rng.uniform_index(mask_pixels.size())]);
    }

    GeneralizedPointCloud out;
    out.n = n;
    out.channels = channels.width();
    out.features.resize(static_cast<std::size_t>(n) * out.channels);
    out.pixels.resize(n);
    out.depths.resize(n);
    out.category_onehot[category] = 1.0;
    out.sample_seed = seed;
    out.layout = channels;
    for (int row = 0; row < n; ++row) {
        const std::size_t px = chosen[row];
        const int i = static_cast<int>(px) / w, j = static_cast<int>(px) % w;
        double* f = &out.features[static_cast<std::size_t>(row) * out.channels];
        int ch = 0;
        f[ch++] = bundle.rgb.at(i, j, 0);
        f[ch++] = bundle.rgb.at(i, j, 1);
        f[ch++] = bundle.rgb.at(i, j, 2);
        if (channels.ray) {
            const geom::Vec3 r = bundle.ray(i, j);
            f[ch++] = r.x;
            f[ch++] = r.y;
            f[ch++] = r.z;
        }
        f[ch++] = completed_depth.at(i, j);
        if (channels.normal) {
            f[ch++] = normals.at(i, j, 0);
            f[ch++] = normals.at(i, j, 1);
            f[ch++] = normals.at(i, j, 2);
        }
        out.pixels[row] = {bundle.grid.u(j), bundle.grid.v(i)};
        out.depths[row] = completed_depth.at(i, j);
    }
    return out;
}

// Back-projected centroid of the sampled pixels, used as the translation prior.
inline geom::Vec3 translation_prior(const GeneralizedPointCloud& cloud, const geom::CameraIntrinsics& k) {
    if (cloud.n < 1) throw ContractError("translation_prior: empty cloud");
    geom::Vec3 acc{};
    for (int row = 0; row < cloud.n; ++row)
        acc = acc + geom::backproject(k, cloud.pixels[row][0], cloud.pixels[row][1], cloud.depths[row]);
    return acc * (1.0 / cloud.n);
}

}  // namespace transnet::gpc
