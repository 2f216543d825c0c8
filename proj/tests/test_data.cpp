#include <catch2/catch_amalgamated.hpp>
#include <filesystem>

#include "rcsl/data.hpp"

using namespace rcsl;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
    fs::path p = fs::temp_directory_path() / ("rcsl_test_" + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

} // namespace

TEST_CASE("ppm round trip within 8-bit quantization") {
    Rng rng(1);
    Image img = Image::filled(6, 5);
    for (auto& v : img.rgb) v = rng.uniform();
    const auto dir = temp_dir("ppm");
    const std::string path = (dir / "img.ppm").string();
    write_ppm(path, img);
    Image back = read_ppm(path);
    REQUIRE(back.h == 6);
    REQUIRE(back.w == 5);
    for (size_t i = 0; i < img.rgb.size(); ++i)
        REQUIRE(std::fabs(back.rgb[i] - img.rgb[i]) <= 0.5 / 255.0 + 1e-12);
}

TEST_CASE("raw tensor file round trip is exact") {
    Rng rng(2);
    Image img = Image::filled(4, 7);
    for (auto& v : img.rgb) v = rng.uniform();
    const auto dir = temp_dir("rten");
    const std::string path = (dir / "img.rten").string();
    write_raw_tensor(path, {img.h, img.w, 3}, img.rgb);
    Image back = read_raw_tensor_image(path);
    REQUIRE(back.rgb == img.rgb);
}

TEST_CASE("synthetic dataset: deterministic, balanced, in range") {
    SyntheticSpec spec;
    spec.classes = 4;
    spec.count = 32;
    spec.size = 16;
    spec.seed = 9;
    Dataset a = Dataset::synthetic(spec);
    Dataset b = Dataset::synthetic(spec);
    REQUIRE(a.size() == 32);
    REQUIRE(a.num_classes() == 4);
    std::vector<int64_t> counts(4, 0);
    for (size_t i = 0; i < a.size(); ++i) {
        REQUIRE(a.at(i).image.rgb == b.at(i).image.rgb);
        REQUIRE(a.at(i).label == static_cast<int64_t>(i % 4));
        ++counts[static_cast<size_t>(a.at(i).label)];
        for (double v : a.at(i).image.rgb) {
            REQUIRE(v >= 0.0);
            REQUIRE(v <= 1.0);
        }
    }
    for (int64_t c : counts) REQUIRE(c == 8);

    // different shape classes produce different images
    REQUIRE(a.at(0).image.rgb != a.at(1).image.rgb);
}

TEST_CASE("dataset spec parser") {
    Dataset ds = Dataset::from_spec("synthetic:classes=2,count=6,size=16,seed=3");
    REQUIRE(ds.size() == 6);
    REQUIRE(ds.num_classes() == 2);
    REQUIRE_THROWS_AS(Dataset::from_spec("synthetic:bogus=1"), Error);
    REQUIRE_THROWS_AS(Dataset::from_spec("/nonexistent/path/xyz"), Error);
}

TEST_CASE("directory dataset: classes from sorted subdirectories") {
    const auto dir = temp_dir("dirset");
    fs::create_directories(dir / "b_class");
    fs::create_directories(dir / "a_class");
    Image dark = Image::filled(8, 8, 0.2);
    Image bright = Image::filled(8, 8, 0.8);
    write_ppm((dir / "a_class" / "x.ppm").string(), dark);
    write_ppm((dir / "a_class" / "y.ppm").string(), dark);
    write_raw_tensor((dir / "b_class" / "z.rten").string(), {8, 8, 3}, bright.rgb);
    Dataset ds = Dataset::from_directory(dir.string());
    REQUIRE(ds.size() == 3);
    REQUIRE(ds.num_classes() == 2);
    REQUIRE(ds.at(0).label == 0); // a_class sorts first
    REQUIRE(ds.at(2).label == 1);
    REQUIRE(ds.at(2).image.rgb == bright.rgb);
}

TEST_CASE("identity augmentation policy returns the input bit-exactly") {
    AugmentationPolicy policy;
    policy.crop_scale_min = 1.0;
    policy.crop_scale_max = 1.0;
    policy.hflip_prob = 0.0;
    policy.jitter_brightness = 0.0;
    policy.jitter_contrast = 0.0;
    policy.jitter_saturation = 0.0;
    Rng rng(4);
    Image img = Image::filled(12, 12);
    for (auto& v : img.rgb) v = rng.uniform();
    Rng aug_rng(77);
    TwoViews views = augment_two_views(img, policy, aug_rng);
    REQUIRE(views.v1_raw.rgb == img.rgb);

    // normalization definition: (raw - mean) / std channel-wise
    for (int64_t r = 0; r < 12; ++r)
        for (int64_t c = 0; c < 12; ++c)
            for (int64_t k = 0; k < 3; ++k)
                REQUIRE(views.v1_norm.at(r, c, k) ==
                        Catch::Approx((views.v1_raw.at(r, c, k) - policy.norm_mean[k]) /
                                      policy.norm_std[k])
                            .margin(1e-15));
}

TEST_CASE("augmentation is deterministic given the rng state") {
    AugmentationPolicy policy; // defaults exercise crop, flip, and jitter
    Rng rng(5);
    Image img = Image::filled(16, 16);
    for (auto& v : img.rgb) v = rng.uniform();
    Rng r1(123), r2(123);
    TwoViews a = augment_two_views(img, policy, r1);
    TwoViews b = augment_two_views(img, policy, r2);
    REQUIRE(a.v1_raw.rgb == b.v1_raw.rgb);
    REQUIRE(a.v2_norm.rgb == b.v2_norm.rgb);

    // the two views are drawn independently and generally differ
    REQUIRE(a.v1_norm.rgb != a.v2_norm.rgb);

    // raw view stays in [0, 1]
    for (double v : a.v1_raw.rgb) {
        REQUIRE(v >= 0.0);
        REQUIRE(v <= 1.0);
    }
    REQUIRE_THROWS_AS(augment_two_views(Image::filled(4, 4, 1.5), policy, r1), Error);
}

TEST_CASE("image/tensor conversions and psnr") {
    Rng rng(6);
    Image a = Image::filled(5, 4);
    for (auto& v : a.rgb) v = rng.uniform();
    Image b = a;
    Tensor t = images_to_tensor({&a, &b});
    REQUIRE(t.shape() == Shape{2, 5, 4, 3});
    Image back = tensor_to_image(t, 1);
    REQUIRE(back.rgb == a.rgb);

    REQUIRE(psnr(a, a) == Catch::Approx(120.0)); // mse floored at 1e-12
    Image off = a;
    for (auto& v : off.rgb) v += 0.1;
    REQUIRE(psnr(a, off) == Catch::Approx(20.0).margin(1e-9));
}

TEST_CASE("pgm writes the expected header and payload size") {
    const auto dir = temp_dir("pgm");
    std::vector<double> values(8 * 8);
    for (size_t i = 0; i < values.size(); ++i) values[i] = static_cast<double>(i) / 63.0;
    const std::string path = (dir / "map.pgm").string();
    write_pgm(path, 8, 8, values);
    std::ifstream f(path, std::ios::binary);
    std::string magic;
    int64_t w, h, maxval;
    f >> magic >> w >> h >> maxval;
    REQUIRE(magic == "P5");
    REQUIRE(w == 8);
    REQUIRE(h == 8);
    f.get();
    std::vector<char> payload(64);
    f.read(payload.data(), 64);
    REQUIRE(f.gcount() == 64);
}
