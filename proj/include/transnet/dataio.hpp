#pragma once

// On-disk formats: TNSR tensor files, scene annotation JSON, scene loading,
// and checkpoint manifests. All binary payloads are little-endian row-major.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "transnet/common.hpp"
#include "transnet/geometry.hpp"
#include "transnet/patch.hpp"
#include "transnet/tensor.hpp"

namespace transnet::dataio {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

enum class Dtype : std::uint32_t { f64 = 0, f32 = 1, u8 = 2 };

inline std::size_t dtype_size(Dtype d) {
    switch (d) {
        case Dtype::f64: return 8;
        case Dtype::f32: return 4;
        case Dtype::u8: return 1;
    }
    throw FormatError("unknown dtype code");
}

namespace detail {

inline void put_u32(std::string& buf, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& buf, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint32_t get_u32(const std::string& buf, std::size_t off) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[off + i])) << (8 * i);
    return v;
}

inline std::uint64_t get_u64(const std::string& buf, std::size_t off) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[off + i])) << (8 * i);
    return v;
}

}  // namespace detail

inline std::string serialize_tensor(const ad::Tensor& t, Dtype dtype = Dtype::f64) {
    std::string buf;
    buf += "TNSR";
    detail::put_u32(buf, 1);  // version
    detail::put_u32(buf, static_cast<std::uint32_t>(dtype));
    detail::put_u32(buf, static_cast<std::uint32_t>(t.shape().size()));
    for (int d : t.shape()) detail::put_u64(buf, static_cast<std::uint64_t>(d));
    for (double x : t.data()) {
        switch (dtype) {
            case Dtype::f64: {
                std::uint64_t bits;
                std::memcpy(&bits, &x, 8);
                detail::put_u64(buf, bits);
                break;
            }
            case Dtype::f32: {
                const float f = static_cast<float>(x);
                std::uint32_t bits;
                std::memcpy(&bits, &f, 4);
                detail::put_u32(buf, bits);
                break;
            }
            case Dtype::u8:
                buf.push_back(static_cast<char>(static_cast<std::uint8_t>(x)));
                break;
        }
    }
    return buf;
}

inline void write_tensor(const fs::path& path, const ad::Tensor& t, Dtype dtype = Dtype::f64) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open for write: " + path.string());
    const std::string buf = serialize_tensor(t, dtype);
    f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!f) throw FormatError("write failed: " + path.string());
}

inline ad::Tensor parse_tensor(const std::string& buf, const std::string& origin, Dtype* out_dtype = nullptr) {
    auto fail = [&](std::size_t off, const std::string& what) {
        throw FormatError(origin + ": " + what + " at byte offset " + std::to_string(off));
    };
    if (buf.size() < 4 || buf.compare(0, 4, "TNSR") != 0) fail(0, "bad magic");
    if (buf.size() < 16) fail(buf.size(), "truncated header");
    const std::uint32_t version = detail::get_u32(buf, 4);
    if (version != 1) fail(4, "unsupported version " + std::to_string(version));
    const std::uint32_t dcode = detail::get_u32(buf, 8);
    if (dcode > 2) fail(8, "unknown dtype code " + std::to_string(dcode));
    const Dtype dtype = static_cast<Dtype>(dcode);
    const std::uint32_t rank = detail::get_u32(buf, 12);
    std::size_t off = 16;
    if (buf.size() < off + 8ull * rank) fail(buf.size(), "truncated dims");
    ad::Shape shape;
    std::size_t n = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
        const std::uint64_t d = detail::get_u64(buf, off);
        off += 8;
        shape.push_back(static_cast<int>(d));
        n *= static_cast<std::size_t>(d);
    }
    const std::size_t need = off + n * dtype_size(dtype);
    if (buf.size() != need) fail(std::min(buf.size(), need), "payload length mismatch");
    std::vector<double> data(n);
    for (std::size_t i = 0; i < n; ++i) {
        switch (dtype) {
            case Dtype::f64: {
                const std::uint64_t bits = detail::get_u64(buf, off + 8 * i);
                double x;
                std::memcpy(&x, &bits, 8);
                data[i] = x;
                break;
            }
            case Dtype::f32: {
                const std::uint32_t bits = detail::get_u32(buf, off + 4 * i);
                float f;
                std::memcpy(&f, &bits, 4);
                data[i] = f;
                break;
            }
            case Dtype::u8:
                data[i] = static_cast<unsigned char>(buf[off + i]);
                break;
        }
    }
    if (out_dtype) *out_dtype = dtype;
    return ad::Tensor::from(shape, std::move(data));
}

inline ad::Tensor read_tensor(const fs::path& path, Dtype* out_dtype = nullptr) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open: " + path.string());
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return parse_tensor(buf, path.string(), out_dtype);
}

// ---------------------------------------------------------------------------
// Image <-> tensor bridges. Images are stored (H x W x C).

inline ad::Tensor image_to_tensor(const Image& img) {
    return ad::Tensor::from({img.h, img.w, img.c}, img.v);
}

inline Image tensor_to_image(const ad::Tensor& t) {
    if (t.shape().size() != 3) throw FormatError("image tensor must be rank 3");
    Image img(t.shape()[0], t.shape()[1], t.shape()[2]);
    img.v = t.data();
    return img;
}

// ---------------------------------------------------------------------------
// Scene annotations

struct ObjectAnnotation {
    std::string category;
    geom::Mat3 R;
    geom::Vec3 t;
    geom::Vec3 s;
    bool symmetric = true;
};

struct SceneAnnotation {
    geom::CameraIntrinsics intrinsics;
    std::vector<ObjectAnnotation> objects;
    PatchGrid grid;
    std::uint64_t global_seed = 0;
    std::uint64_t scene_index = 0;
    std::uint64_t instance_seed = 0;
    std::string generator_version = "1";
};

inline void validate_rotation(const geom::Mat3& R, const std::string& where, double tol = 1e-6) {
    const geom::Mat3 e = R.transposed() * R;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            if (std::fabs(e(i, j) - (i == j ? 1.0 : 0.0)) > tol)
                throw LoadError(where + ": R is not orthonormal");
    if (std::fabs(R.det() - 1.0) > tol) throw LoadError(where + ": det(R) != 1");
}

inline json annotation_to_json(const SceneAnnotation& ann) {
    json j;
    j["K"] = {{"fx", ann.intrinsics.fx}, {"fy", ann.intrinsics.fy}, {"cx", ann.intrinsics.cx},
              {"cy", ann.intrinsics.cy}, {"width", ann.intrinsics.width}, {"height", ann.intrinsics.height}};
    j["patch"] = {{"u0", ann.grid.u0}, {"v0", ann.grid.v0}, {"du", ann.grid.du}, {"dv", ann.grid.dv},
                  {"width", ann.grid.width}, {"height", ann.grid.height}};
    j["objects"] = json::array();
    for (const auto& o : ann.objects) {
        json oj;
        oj["category"] = o.category;
        oj["R"] = std::vector<double>(o.R.m.begin(), o.R.m.end());
        oj["t"] = {o.t.x, o.t.y, o.t.z};
        oj["s"] = {o.s.x, o.s.y, o.s.z};
        oj["symmetric"] = o.symmetric;
        j["objects"].push_back(oj);
    }
    j["seeds"] = {{"global", ann.global_seed}, {"scene", ann.scene_index}, {"instance", ann.instance_seed}};
    j["generator_version"] = ann.generator_version;
    return j;
}

inline SceneAnnotation annotation_from_json(const json& j, const std::string& where) {
    SceneAnnotation ann;
    try {
        const auto& k = j.at("K");
        ann.intrinsics = {k.at("fx"), k.at("fy"), k.at("cx"), k.at("cy"), k.at("width"), k.at("height")};
        const auto& p = j.at("patch");
        ann.grid = {p.at("u0"), p.at("v0"), p.at("du"), p.at("dv"), p.at("width"), p.at("height")};
        for (const auto& oj : j.at("objects")) {
            ObjectAnnotation o;
            o.category = oj.at("category");
            const auto rv = oj.at("R").get<std::vector<double>>();
            if (rv.size() != 9) throw LoadError(where + ": field R must have 9 entries");
            std::copy(rv.begin(), rv.end(), o.R.m.begin());
            validate_rotation(o.R, where + ": field R");
            o.t = {oj.at("t")[0], oj.at("t")[1], oj.at("t")[2]};
            o.s = {oj.at("s")[0], oj.at("s")[1], oj.at("s")[2]};
            if (o.s.x <= 0.0 || o.s.y <= 0.0 || o.s.z <= 0.0) throw LoadError(where + ": field s must be positive");
            o.symmetric = oj.at("symmetric");
            ann.objects.push_back(o);
        }
        const auto& seeds = j.at("seeds");
        ann.global_seed = seeds.at("global");
        ann.scene_index = seeds.at("scene");
        ann.instance_seed = seeds.at("instance");
        ann.generator_version = j.at("generator_version");
    } catch (const json::exception& e) {
        throw LoadError(where + ": " + e.what());
    }
    return ann;
}

inline void save_scene(const fs::path& dir, const PatchBundle& bundle, const SceneAnnotation& ann) {
    fs::create_directories(dir);
    write_tensor(dir / "rgb.tnsr", image_to_tensor(bundle.rgb));
    write_tensor(dir / "depth_gt.tnsr", image_to_tensor(bundle.depth_gt));
    write_tensor(dir / "depth_raw.tnsr", image_to_tensor(bundle.depth_raw));
    write_tensor(dir / "normal_gt.tnsr", image_to_tensor(bundle.normal_gt));
    std::vector<double> m(bundle.mask.begin(), bundle.mask.end());
    write_tensor(dir / "mask.tnsr", ad::Tensor::from({bundle.grid.height, bundle.grid.width}, std::move(m)), Dtype::u8);
    std::ofstream f(dir / "meta.json");
    f << annotation_to_json(ann).dump(2) << "\n";
}

inline std::pair<PatchBundle, SceneAnnotation> load_scene(const fs::path& dir) {
    for (const char* name : {"rgb.tnsr", "depth_gt.tnsr", "depth_raw.tnsr", "normal_gt.tnsr", "mask.tnsr", "meta.json"})
        if (!fs::exists(dir / name)) throw LoadError(dir.string() + ": missing file " + name);
    std::ifstream mf(dir / "meta.json");
    json j;
    try {
        mf >> j;
    } catch (const json::exception& e) {
        throw LoadError(dir.string() + "/meta.json: " + e.what());
    }
    SceneAnnotation ann = annotation_from_json(j, dir.string() + "/meta.json");

    PatchBundle b;
    b.grid = ann.grid;
    b.intrinsics = ann.intrinsics;
    b.rgb = tensor_to_image(read_tensor(dir / "rgb.tnsr"));
    b.depth_gt = tensor_to_image(read_tensor(dir / "depth_gt.tnsr"));
    b.depth_raw = tensor_to_image(read_tensor(dir / "depth_raw.tnsr"));
    b.normal_gt = tensor_to_image(read_tensor(dir / "normal_gt.tnsr"));
    const ad::Tensor mt = read_tensor(dir / "mask.tnsr");
    if (mt.shape() != ad::Shape{ann.grid.height, ann.grid.width})
        throw LoadError(dir.string() + ": field mask shape mismatch");
    b.mask.resize(mt.size());
    for (std::size_t i = 0; i < mt.size(); ++i) b.mask[i] = static_cast<std::uint8_t>(mt.at(i));

    auto check_img = [&](const Image& img, int c, const char* name) {
        if (img.h != ann.grid.height || img.w != ann.grid.width || img.c != c)
            throw LoadError(dir.string() + ": field " + name + " shape mismatch");
    };
    check_img(b.rgb, 3, "rgb");
    check_img(b.depth_gt, 1, "depth_gt");
    check_img(b.depth_raw, 1, "depth_raw");
    check_img(b.normal_gt, 3, "normal_gt");
    return {std::move(b), std::move(ann)};
}

// ---------------------------------------------------------------------------
// Checkpoints: one directory with a JSON manifest plus one TNSR per parameter.

struct Checkpoint {
    std::map<std::string, ad::Tensor> tensors;  // parameters and optimizer state
    json meta;                                  // shapes, seeds, config hash, step
};

inline void save_checkpoint(const fs::path& dir, const Checkpoint& ckpt) {
    fs::create_directories(dir);
    json manifest;
    manifest["meta"] = ckpt.meta;
    manifest["tensors"] = json::array();
    for (const auto& [name, t] : ckpt.tensors) {
        write_tensor(dir / (name + ".tnsr"), t);
        manifest["tensors"].push_back({{"name", name}, {"shape", t.shape()}});
    }
    std::ofstream f(dir / "manifest.json");
    f << manifest.dump(2) << "\n";
}

inline Checkpoint load_checkpoint(const fs::path& dir) {
    std::ifstream f(dir / "manifest.json");
    if (!f) throw LoadError("missing checkpoint manifest: " + (dir / "manifest.json").string());
    json manifest;
    try {
        f >> manifest;
    } catch (const json::exception& e) {
        throw LoadError(dir.string() + "/manifest.json: " + e.what());
    }
    Checkpoint ckpt;
    ckpt.meta = manifest.at("meta");
    for (const auto& entry : manifest.at("tensors")) {
        const std::string name = entry.at("name");
        ad::Tensor t = read_tensor(dir / (name + ".tnsr"));
        if (t.shape() != entry.at("shape").get<ad::Shape>())
            throw LoadError(dir.string() + ": tensor " + name + " shape mismatch vs manifest");
        ckpt.tensors.emplace(name, std::move(t));
    }
    return ckpt;
}

}  // namespace transnet::dataio
