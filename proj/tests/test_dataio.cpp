#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "transnet/dataio.hpp"
#include "transnet/rng.hpp"

using namespace transnet;
using ad::Tensor;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const char* tag) {
    const fs::path p = fs::temp_directory_path() / (std::string("transnet_dataio_") + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

}  // namespace

TEST_CASE("f64 tensors round-trip bit-exactly") {
    Rng rng(1);
    std::vector<double> v(24);
    for (auto& x : v) x = rng.normal() * 1e3;
    v[0] = 0.0;
    v[1] = -0.0;
    v[2] = 1e-300;
    v[3] = -1e300;
    const Tensor t = Tensor::from({2, 3, 4}, std::vector<double>(v));

    const std::string buf = dataio::serialize_tensor(t);
    // Header: magic, version, dtype, rank, then 3 u64 dims.
    CHECK(buf.compare(0, 4, "TNSR") == 0);
    CHECK(buf.size() == 16 + 3 * 8 + 24 * 8);
    dataio::Dtype dt;
    const Tensor back = dataio::parse_tensor(buf, "test", &dt);
    CHECK(dt == dataio::Dtype::f64);
    CHECK(back.shape() == ad::Shape{2, 3, 4});
    for (std::size_t i = 0; i < 24; ++i) {
        std::uint64_t a, b;
        std::memcpy(&a, &v[i], 8);
        std::memcpy(&b, &back.data()[i], 8);
        CHECK(a == b);
    }

    const fs::path dir = temp_dir("roundtrip");
    dataio::write_tensor(dir / "t.tnsr", t);
    const Tensor fromdisk = dataio::read_tensor(dir / "t.tnsr");
    CHECK(fromdisk.data() == back.data());
}

TEST_CASE("f32 and u8 round trips") {
    const Tensor t = Tensor::from({4}, {0.5, -2.25, 1e-3, 300.0});
    const Tensor f32 = dataio::parse_tensor(dataio::serialize_tensor(t, dataio::Dtype::f32), "t");
    for (int i = 0; i < 4; ++i) CHECK(f32.at(i) == static_cast<double>(static_cast<float>(t.at(i))));

    const Tensor bytes = Tensor::from({3}, {0.0, 7.0, 255.0});
    dataio::Dtype dt;
    const Tensor u8 = dataio::parse_tensor(dataio::serialize_tensor(bytes, dataio::Dtype::u8), "t", &dt);
    CHECK(dt == dataio::Dtype::u8);
    CHECK(u8.data() == std::vector<double>{0.0, 7.0, 255.0});

    // Rank 1 with zero length is legal and empty.
    const Tensor empty = Tensor::from({0}, {});
    const Tensor e2 = dataio::parse_tensor(dataio::serialize_tensor(empty), "t");
    CHECK(e2.size() == 0);
    CHECK(e2.shape() == ad::Shape{0});
}

TEST_CASE("malformed tensor files report the byte offset") {
    const Tensor t = Tensor::from({2, 2}, {1.0, 2.0, 3.0, 4.0});
    std::string good = dataio::serialize_tensor(t);

    std::string bad_magic = good;
    bad_magic[0] = 'X';
    CHECK_THROWS_MATCHES(dataio::parse_tensor(bad_magic, "f"), FormatError,
                         Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("bad magic")));

    std::string bad_version = good;
    bad_version[4] = 9;
    CHECK_THROWS_MATCHES(dataio::parse_tensor(bad_version, "f"), FormatError,
                         Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("offset 4")));

    std::string bad_dtype = good;
    bad_dtype[8] = 77;
    CHECK_THROWS_MATCHES(dataio::parse_tensor(bad_dtype, "f"), FormatError,
                         Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("offset 8")));

    // Truncations at every boundary.
    for (std::size_t cut : {std::size_t{3}, std::size_t{10}, std::size_t{20}, good.size() - 1}) {
        CHECK_THROWS_AS(dataio::parse_tensor(good.substr(0, cut), "f"), FormatError);
    }
    // Trailing garbage is also a payload length mismatch.
    CHECK_THROWS_AS(dataio::parse_tensor(good + "x", "f"), FormatError);

    CHECK_THROWS_AS(dataio::read_tensor("/nonexistent/path.tnsr"), FormatError);
}

TEST_CASE("scene save/load round trip") {
    const fs::path dir = temp_dir("scene");
    PatchBundle b;
    b.grid = {100.0, 80.0, 2.0, 2.0, 6, 5};
    b.intrinsics = {600.0, 600.0, 320.0, 240.0, 640, 480};
    Rng rng(7);
    b.rgb = Image(5, 6, 3);
    b.depth_gt = Image(5, 6, 1);
    b.depth_raw = Image(5, 6, 1);
    b.normal_gt = Image(5, 6, 3);
    for (auto* img : {&b.rgb, &b.depth_gt, &b.depth_raw, &b.normal_gt})
        for (auto& v : img->v) v = rng.uniform();
    b.mask.assign(30, 0);
    for (std::size_t i = 0; i < 30; i += 3) b.mask[i] = 1;

    dataio::SceneAnnotation ann;
    ann.intrinsics = b.intrinsics;
    ann.grid = b.grid;
    ann.global_seed = 42;
    ann.scene_index = 3;
    ann.instance_seed = 99;
    dataio::ObjectAnnotation obj;
    obj.category = "wine_cup";
    obj.R = geom::axis_angle({0, 1, 0}, 0.3);
    obj.t = {0.01, -0.02, 0.6};
    obj.s = {0.08, 0.08, 0.17};
    obj.symmetric = true;
    ann.objects.push_back(obj);

    dataio::save_scene(dir / "s0", b, ann);
    const auto [b2, ann2] = dataio::load_scene(dir / "s0");
    CHECK(b2.rgb.v == b.rgb.v);
    CHECK(b2.depth_gt.v == b.depth_gt.v);
    CHECK(b2.depth_raw.v == b.depth_raw.v);
    CHECK(b2.normal_gt.v == b.normal_gt.v);
    CHECK(b2.mask == b.mask);
    CHECK(b2.grid.u0 == b.grid.u0);
    CHECK(b2.grid.width == 6);
    REQUIRE(ann2.objects.size() == 1);
    CHECK(ann2.objects[0].category == "wine_cup");
    CHECK(ann2.objects[0].R.m == obj.R.m);
    CHECK(ann2.objects[0].t.z == 0.6);
    CHECK(ann2.objects[0].symmetric);
    CHECK(ann2.global_seed == 42);
    CHECK(ann2.instance_seed == 99);
}

TEST_CASE("scene loading validates shapes and annotations") {
    const fs::path dir = temp_dir("badscene");
    PatchBundle b;
    b.grid = {0.0, 0.0, 1.0, 1.0, 3, 3};
    b.intrinsics = {600.0, 600.0, 320.0, 240.0, 640, 480};
    b.rgb = Image(3, 3, 3);
    b.depth_gt = Image(3, 3, 1);
    b.depth_raw = Image(3, 3, 1);
    b.normal_gt = Image(3, 3, 3);
    b.mask.assign(9, 1);
    dataio::SceneAnnotation ann;
    ann.intrinsics = b.intrinsics;
    ann.grid = b.grid;
    dataio::ObjectAnnotation obj;
    obj.category = "bowl";
    obj.t = {0, 0, 0.5};
    obj.s = {0.1, 0.1, 0.1};
    ann.objects.push_back(obj);

    dataio::save_scene(dir / "ok", b, ann);
    CHECK_NOTHROW(dataio::load_scene(dir / "ok"));

    // Missing file.
    dataio::save_scene(dir / "missing", b, ann);
    fs::remove(dir / "missing" / "depth_raw.tnsr");
    CHECK_THROWS_MATCHES(dataio::load_scene(dir / "missing"), LoadError,
                         Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("depth_raw.tnsr")));

    // Mask shape disagrees with the annotation grid.
    dataio::save_scene(dir / "badmask", b, ann);
    dataio::write_tensor(dir / "badmask" / "mask.tnsr", Tensor::zeros({2, 3}), dataio::Dtype::u8);
    CHECK_THROWS_MATCHES(dataio::load_scene(dir / "badmask"), LoadError,
                         Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("mask")));

    // Non-orthonormal rotation in the annotation.
    auto bad_ann = ann;
    bad_ann.objects[0].R.m = {2, 0, 0, 0, 1, 0, 0, 0, 1};
    const fs::path br = dir / "badrot";
    fs::create_directories(br);
    std::ofstream(br / "meta.json") << dataio::annotation_to_json(bad_ann).dump(2);
    for (const char* n : {"rgb.tnsr", "depth_gt.tnsr", "depth_raw.tnsr", "normal_gt.tnsr", "mask.tnsr"})
        fs::copy_file(dir / "ok" / n, br / n);
    CHECK_THROWS_MATCHES(dataio::load_scene(br), LoadError,
                         Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("orthonormal")));

    // Negative scale.
    bad_ann = ann;
    bad_ann.objects[0].s.x = -0.1;
    std::ofstream(br / "meta.json") << dataio::annotation_to_json(bad_ann).dump(2);
    CHECK_THROWS_MATCHES(dataio::load_scene(br), LoadError,
                         Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("positive")));

    // Corrupt JSON.
    std::ofstream(br / "meta.json") << "{not json";
    CHECK_THROWS_AS(dataio::load_scene(br), LoadError);
}

TEST_CASE("checkpoint round trip and manifest validation") {
    const fs::path dir = temp_dir("ckpt");
    dataio::Checkpoint ck;
    Rng rng(13);
    std::vector<double> w(12);
    for (auto& x : w) x = rng.normal();
    ck.tensors.emplace("layer_w", Tensor::from({3, 4}, std::vector<double>(w)));
    ck.tensors.emplace("layer_b", Tensor::from({1, 4}, {0.0, -1.5, 2.0, 1e-9}));
    ck.meta["step"] = 17;
    ck.meta["seed"] = 5;
    ck.meta["kind"] = "stage2";

    dataio::save_checkpoint(dir / "c", ck);
    const auto back = dataio::load_checkpoint(dir / "c");
    REQUIRE(back.tensors.size() == 2);
    CHECK(back.tensors.at("layer_w").data() == w);
    CHECK(back.tensors.at("layer_w").shape() == ad::Shape{3, 4});
    CHECK(back.tensors.at("layer_b").at(3) == 1e-9);
    CHECK(back.meta.at("step") == 17);
    CHECK(back.meta.at("kind") == "stage2");

    CHECK_THROWS_AS(dataio::load_checkpoint(dir / "nope"), LoadError);

    // Tensor on disk disagreeing with the manifest shape.
    dataio::write_tensor(dir / "c" / "layer_b.tnsr", Tensor::zeros({2, 2}));
    CHECK_THROWS_MATCHES(dataio::load_checkpoint(dir / "c"), LoadError,
                         Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("layer_b")));
}
