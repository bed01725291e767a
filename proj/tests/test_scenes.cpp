#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <vector>

#include "hitm/ppm.hpp"
#include "hitm/rng.hpp"
#include "hitm/scenes.hpp"
#include "hitm/serialize.hpp"
#include "hitm/tensor.hpp"
#include "helpers.hpp"

using hitm::Rng;
using hitm::Tensor;
namespace fs = std::filesystem;
namespace scn = hitm::scenes;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name)
        : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("scene generation is deterministic in the seed") {
    const auto& fam = scn::family_by_id("f1");
    const auto a = scn::generate(fam, 3, 1234);
    const auto b = scn::generate(fam, 3, 1234);
    REQUIRE(a.size() == 3);
    for (std::size_t i = 0; i < a.size(); ++i) {
        REQUIRE(a[i].image.data == b[i].image.data);
        REQUIRE(a[i].truth.size() == b[i].truth.size());
        REQUIRE(a[i].family == "f1");
    }
    const auto c = scn::generate(fam, 3, 1235);
    REQUIRE(a[0].image.data != c[0].image.data);
}

TEST_CASE("generated scenes satisfy the documented invariants") {
    for (const auto& fam : scn::builtin_families()) {
        const auto scenes = scn::generate(fam, 6, 99);
        for (const auto& scene : scenes) {
            REQUIRE(scene.image.shape == std::vector<std::size_t>{3, 64, 64});
            for (double v : scene.image.data) {
                REQUIRE(v >= 0.0);
                REQUIRE(v <= 1.0);
            }
            REQUIRE(scene.truth.size() >= 1);
            REQUIRE(scene.truth.size() <= 4);
            for (std::size_t i = 0; i < scene.truth.size(); ++i) {
                const auto& tb = scene.truth[i];
                REQUIRE(tb.cls >= 0);
                REQUIRE(tb.cls <= 2);
                REQUIRE(tb.box.x_min() >= 0.0);
                REQUIRE(tb.box.x_max() <= 1.0);
                REQUIRE(tb.box.y_min() >= 0.0);
                REQUIRE(tb.box.y_max() <= 1.0);
                REQUIRE(tb.box.w >= fam.min_size);
                REQUIRE(tb.box.w <= fam.max_size);
                if (tb.cls == scn::kClassDisc) REQUIRE(tb.box.w == tb.box.h);
                for (std::size_t j = i + 1; j < scene.truth.size(); ++j)
                    REQUIRE(hitm::iou(tb.box, scene.truth[j].box) <= 0.05);
            }
        }
    }
}

TEST_CASE("families differing only in background share object geometry") {
    // f1 and f2 have identical jitter, noise and size ranges.
    const auto dark = scn::generate(scn::family_by_id("f1"), 5, 777);
    const auto light = scn::generate(scn::family_by_id("f2"), 5, 777);
    for (std::size_t i = 0; i < dark.size(); ++i) {
        REQUIRE(dark[i].truth.size() == light[i].truth.size());
        for (std::size_t t = 0; t < dark[i].truth.size(); ++t) {
            REQUIRE(dark[i].truth[t].cls == light[i].truth[t].cls);
            REQUIRE(dark[i].truth[t].box.cx == light[i].truth[t].box.cx);
            REQUIRE(dark[i].truth[t].box.cy == light[i].truth[t].box.cy);
            REQUIRE(dark[i].truth[t].box.w == light[i].truth[t].box.w);
            REQUIRE(dark[i].truth[t].box.h == light[i].truth[t].box.h);
        }
        REQUIRE(dark[i].image.data != light[i].image.data);
    }
}

TEST_CASE("noise-free scenes paint objects only inside their truth boxes") {
    scn::FamilyConfig fam;
    fam.id = "clean";
    fam.background_mean = {0.5, 0.5, 0.5};
    fam.background_jitter = 0.0;
    fam.noise = 0.0;
    const auto scenes = scn::generate(fam, 4, 4242);
    for (const auto& scene : scenes) {
        int object_pixels = 0;
        for (int y = 0; y < 64; ++y)
            for (int x = 0; x < 64; ++x) {
                const bool is_bg = scene.image.at3(0, y, x) == 0.5 &&
                                   scene.image.at3(1, y, x) == 0.5 &&
                                   scene.image.at3(2, y, x) == 0.5;
                if (is_bg) continue;
                ++object_pixels;
                const double px = (x + 0.5) / 64.0;
                const double py = (y + 0.5) / 64.0;
                bool inside_some_box = false;
                for (const auto& tb : scene.truth)
                    inside_some_box =
                        inside_some_box ||
                        (px >= tb.box.x_min() - 1e-9 && px <= tb.box.x_max() + 1e-9 &&
                         py >= tb.box.y_min() - 1e-9 && py <= tb.box.y_max() + 1e-9);
                REQUIRE(inside_some_box);
            }
        REQUIRE(object_pixels > 0);

        // Each truth box really contains painted pixels.
        for (const auto& tb : scene.truth) {
            int inside = 0;
            for (int y = 0; y < 64; ++y)
                for (int x = 0; x < 64; ++x) {
                    const double px = (x + 0.5) / 64.0;
                    const double py = (y + 0.5) / 64.0;
                    if (px < tb.box.x_min() || px > tb.box.x_max() ||
                        py < tb.box.y_min() || py > tb.box.y_max())
                        continue;
                    if (scene.image.at3(0, y, x) != 0.5 ||
                        scene.image.at3(1, y, x) != 0.5 ||
                        scene.image.at3(2, y, x) != 0.5)
                        ++inside;
                }
            REQUIRE(inside > 0);
        }
    }
}

TEST_CASE("family lookup and validation") {
    REQUIRE(scn::builtin_families().size() == 7);
    std::set<std::string> ids;
    for (const auto& f : scn::builtin_families()) ids.insert(f.id);
    REQUIRE(ids.size() == 7);
    REQUIRE(scn::family_by_id("f4").id == "f4");
    REQUIRE_THROWS_AS(scn::family_by_id("f9"), std::invalid_argument);

    scn::FamilyConfig bad;
    bad.id = "";
    REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);
    bad.id = "x";
    bad.min_size = 0.0;
    REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);
    bad.min_size = 0.5;
    bad.max_size = 0.3;
    REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);
    bad.max_size = 0.95;
    REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = scn::family_by_id("f1");
    bad.noise = -0.1;
    REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);

    REQUIRE_THROWS_AS(scn::generate(scn::family_by_id("f1"), 0, 1),
                      std::invalid_argument);
}

TEST_CASE("rgb24 byte conversion is an exact inverse on byte data") {
    std::vector<unsigned char> bytes(3 * 4 * 4);
    for (std::size_t i = 0; i < bytes.size(); ++i)
        bytes[i] = static_cast<unsigned char>((i * 37 + 5) % 256);
    const Tensor img = hitm::from_rgb24(bytes.data(), 4, 4);
    REQUIRE(hitm::to_rgb24(img) == bytes);
}

TEST_CASE("ppm round trip quantizes by at most half a step") {
    Rng rng(31337);
    const Tensor img = testutil::random_tensor({3, 64, 64}, rng, 0.0, 1.0);
    std::stringstream buf;
    hitm::save_ppm(buf, img);
    const Tensor back = hitm::load_ppm(buf);
    REQUIRE(back.shape == img.shape);
    double worst = 0.0;
    for (std::size_t i = 0; i < img.size(); ++i)
        worst = std::max(worst, std::abs(img.data[i] - back.data[i]));
    REQUIRE(worst <= 1.0 / 510.0 + 1e-12);
}

TEST_CASE("ppm black and white survive exactly and the payload is dense") {
    Tensor img({3, 64, 64});
    for (int x = 0; x < 64; ++x) img.at3(0, 0, x) = 1.0;
    std::stringstream buf;
    hitm::save_ppm(buf, img);
    REQUIRE(buf.str().size() == 13 + 3 * 64 * 64);  // "P6\n64 64\n255\n"
    const Tensor back = hitm::load_ppm(buf);
    REQUIRE(back.at3(0, 0, 5) == 1.0);
    REQUIRE(back.at3(1, 0, 5) == 0.0);
    REQUIRE(back.at3(2, 63, 63) == 0.0);
}

TEST_CASE("ppm header parsing accepts comments") {
    std::stringstream buf;
    buf << "P6\n# made by hand\n2 # width\n1\n255\n";
    buf.write("\x00\x01\x02\x03\x04\x05", 6);
    const Tensor img = hitm::load_ppm(buf);
    REQUIRE(img.shape == std::vector<std::size_t>{3, 1, 2});
    REQUIRE(img.at3(0, 0, 0) == 0.0);
    REQUIRE(img.at3(2, 0, 1) == 5.0 / 255.0);
}

TEST_CASE("ppm loader rejects malformed input") {
    const auto load_str = [](const std::string& s) {
        std::stringstream buf(s);
        return hitm::load_ppm(buf);
    };
    REQUIRE_THROWS_AS(load_str("P5\n2 2\n255\n"), std::runtime_error);
    REQUIRE_THROWS_AS(load_str("P6\n2 2\n128\n????????????"), std::runtime_error);
    REQUIRE_THROWS_AS(load_str("P6\n0 2\n255\n"), std::runtime_error);
    REQUIRE_THROWS_AS(load_str("P6\n2 -2\n255\n"), std::runtime_error);
    REQUIRE_THROWS_AS(load_str("P6\n2097152 2\n255\n"), std::runtime_error);
    REQUIRE_THROWS_AS(load_str("P6\n2 2\n255\nxx"), std::runtime_error);  // short
    REQUIRE_THROWS_AS(load_str("P6\n2"), std::runtime_error);
    REQUIRE_THROWS_AS(hitm::to_rgb24(Tensor({1, 4, 4})), std::invalid_argument);
}

TEST_CASE("ppm file path helpers") {
    TempDir tmp("hitm_test_ppm");
    Rng rng(5);
    const Tensor img = testutil::random_tensor({3, 8, 8}, rng, 0.0, 1.0);
    const std::string path = (tmp.path / "img.ppm").string();
    hitm::save_ppm(path, img);
    const Tensor back = hitm::load_ppm(path);
    REQUIRE(back.shape == img.shape);
    REQUIRE_THROWS_AS(hitm::load_ppm((tmp.path / "missing.ppm").string()),
                      std::runtime_error);
}

TEST_CASE("scene directories round trip through ppm plus truth json") {
    TempDir tmp("hitm_test_scenedir");
    const auto scenes = scn::generate(scn::family_by_id("f3"), 3, 64);
    hitm::io::save_scenes(tmp.path.string(), scenes);
    REQUIRE(fs::exists(tmp.path / "truth.json"));
    REQUIRE(fs::exists(tmp.path / "frame_000000.ppm"));
    REQUIRE(fs::exists(tmp.path / "frame_000002.ppm"));

    const auto back = hitm::io::load_scenes(tmp.path.string());
    REQUIRE(back.size() == scenes.size());
    for (std::size_t i = 0; i < back.size(); ++i) {
        REQUIRE(back[i].family == "f3");
        REQUIRE(back[i].truth.size() == scenes[i].truth.size());
        for (std::size_t t = 0; t < back[i].truth.size(); ++t) {
            REQUIRE(back[i].truth[t].cls == scenes[i].truth[t].cls);
            // json round-trips doubles exactly at 17 significant digits
            REQUIRE(back[i].truth[t].box.cx == scenes[i].truth[t].box.cx);
            REQUIRE(back[i].truth[t].box.w == scenes[i].truth[t].box.w);
        }
        double worst = 0.0;
        for (std::size_t p = 0; p < back[i].image.size(); ++p)
            worst = std::max(worst,
                             std::abs(back[i].image.data[p] - scenes[i].image.data[p]));
        REQUIRE(worst <= 1.0 / 510.0 + 1e-12);
    }
}

TEST_CASE("scene directory error handling") {
    TempDir tmp("hitm_test_scenedir_err");
    REQUIRE_THROWS_AS(hitm::io::save_scenes(tmp.path.string(), {}),
                      std::invalid_argument);
    REQUIRE_THROWS_AS(hitm::io::load_scenes((tmp.path / "nope").string()),
                      std::runtime_error);
    std::ofstream((tmp.path / "truth.json").string()) << "{ not json";
    REQUIRE_THROWS_AS(hitm::io::load_scenes(tmp.path.string()), std::runtime_error);
}

TEST_CASE("family config json parsing is strict") {
    using hitm::io::family_config_from_json;
    nlohmann::json good = {{"id", "custom"},
                           {"background_mean", {0.2, 0.3, 0.4}},
                           {"background_jitter", 0.01},
                           {"noise", 0.0},
                           {"min_size", 0.2},
                           {"max_size", 0.5}};
    const auto fam = family_config_from_json(good);
    REQUIRE(fam.id == "custom");
    REQUIRE(fam.background_mean[2] == 0.4);
    REQUIRE(fam.noise == 0.0);

    nlohmann::json typo = good;
    typo["nois"] = 0.5;
    REQUIRE_THROWS_AS(family_config_from_json(typo), std::runtime_error);

    nlohmann::json missing_id = good;
    missing_id.erase("id");
    REQUIRE_THROWS_AS(family_config_from_json(missing_id), std::invalid_argument);
}
