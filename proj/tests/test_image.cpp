#include "refsra/image.hpp"

#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "refsra/rng.hpp"

using namespace refsra;

namespace {

std::string tmp_path(const std::string& name) {
    return (std::filesystem::path(testing::TempDir()) / name).string();
}

void write_bytes(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

TEST(PpmCodec, DecodesKnownPixels) {
    const std::string path = tmp_path("three_px.ppm");
    std::string payload = "P6\n3 1\n255\n";
    const unsigned char px[9] = {0, 0, 0, 128, 128, 128, 255, 255, 255};
    payload.append(reinterpret_cast<const char*>(px), 9);
    write_bytes(path, payload);

    ImagePlane img = load_image(path);
    EXPECT_EQ(img.width, 3);
    EXPECT_EQ(img.height, 1);
    EXPECT_DOUBLE_EQ(img.at(0, 0, 0), 0.0);
    EXPECT_DOUBLE_EQ(img.at(0, 1, 1), 128.0 / 255.0);
    EXPECT_DOUBLE_EQ(img.at(0, 2, 2), 1.0);
}

TEST(PpmCodec, HandlesCommentsAndWhitespace) {
    const std::string path = tmp_path("comments.ppm");
    std::string payload = "P6 # format\n# a comment line\n  2\t1 # dims\n255\n";
    const unsigned char px[6] = {10, 20, 30, 40, 50, 60};
    payload.append(reinterpret_cast<const char*>(px), 6);
    write_bytes(path, payload);
    ImagePlane img = load_image(path);
    EXPECT_EQ(img.width, 2);
    EXPECT_DOUBLE_EQ(img.at(0, 1, 2), 60.0 / 255.0);
}

TEST(PpmCodec, RoundTripOfQuantizedImageIsBitIdentical) {
    Rng rng(21);
    ImagePlane img(5, 7);
    for (auto& v : img.values) v = rng.uniform();
    const std::string p1 = tmp_path("rt1.ppm");
    const std::string p2 = tmp_path("rt2.ppm");
    save_image(img, p1);
    ImagePlane quantized = load_image(p1);
    save_image(quantized, p2);
    ImagePlane again = load_image(p2);
    EXPECT_EQ(quantized.values, again.values);

    // and quantization error per value is at most 1/510
    for (size_t i = 0; i < img.values.size(); ++i)
        EXPECT_LE(std::abs(img.values[i] - quantized.values[i]), 1.0 / 510.0 + 1e-15);
}

TEST(PpmCodec, HalfGrayRoundsUpTo128) {
    ImagePlane img(2, 2, 0.5);
    const std::string path = tmp_path("half.ppm");
    save_image(img, path);
    std::ifstream in(path, std::ios::binary);
    std::string all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const std::string header = "P6\n2 2\n255\n";
    ASSERT_EQ(all.size(), header.size() + 12);
    for (size_t i = header.size(); i < all.size(); ++i)
        EXPECT_EQ(static_cast<unsigned char>(all[i]), 128);
}

TEST(PpmCodec, RejectsMalformedInputs) {
    const std::string bad_magic = tmp_path("bad_magic.ppm");
    write_bytes(bad_magic, "P5\n1 1\n255\n\0\0\0");
    EXPECT_THROW(load_image(bad_magic), DataError);

    const std::string bad_depth = tmp_path("bad_depth.ppm");
    write_bytes(bad_depth, "P6\n1 1\n65535\n\0\0");
    EXPECT_THROW(load_image(bad_depth), DataError);

    const std::string truncated = tmp_path("trunc.ppm");
    write_bytes(truncated, "P6\n2 2\n255\nxx");
    EXPECT_THROW(load_image(truncated), DataError);

    const std::string junk_dims = tmp_path("junk.ppm");
    write_bytes(junk_dims, "P6\nab 2\n255\n");
    EXPECT_THROW(load_image(junk_dims), DataError);

    EXPECT_THROW(load_image(tmp_path("no_such_file.ppm")), DataError);
}

TEST(CenterCrop, FullSizeIsIdentity) {
    Rng rng(3);
    ImagePlane img(600, 600);
    for (auto& v : img.values) v = rng.uniform();
    ImagePlane out = center_crop(img, 600);
    EXPECT_EQ(out.values, img.values);
}

TEST(CenterCrop, PicksInteriorRowsAndCols) {
    ImagePlane img(4, 4);
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x)
            for (int c = 0; c < 3; ++c) img.at(y, x, c) = (y * 4 + x) / 16.0;
    ImagePlane out = center_crop(img, 2);
    EXPECT_DOUBLE_EQ(out.at(0, 0, 0), (1 * 4 + 1) / 16.0);
    EXPECT_DOUBLE_EQ(out.at(1, 1, 0), (2 * 4 + 2) / 16.0);
}

TEST(CenterCrop, FloorOffsetsOnOddSlack) {
    ImagePlane img(800, 601);
    img.at(100, 0, 0) = 1.0;  // the expected top-left corner of the crop
    ImagePlane out = center_crop(img, 600);
    EXPECT_DOUBLE_EQ(out.at(0, 0, 0), 1.0);
    EXPECT_THROW(center_crop(out, 601), ShapeError);
}

TEST(BicubicResize, ConstantImageAnyFactor) {
    ImagePlane img(32, 48, 0.37);
    for (double f : {0.25, 0.5, 1.0, 1.7}) {
        ImagePlane out = bicubic_resize(img, f);
        for (double v : out.values) ASSERT_NEAR(v, 0.37, 1e-12);
    }
}

TEST(BicubicResize, QuarterScaleShape) {
    ImagePlane img(64, 64, 0.2);
    ImagePlane out = bicubic_resize(img, 0.25);
    EXPECT_EQ(out.height, 16);
    EXPECT_EQ(out.width, 16);
    EXPECT_THROW(bicubic_resize(img, 0.001), ShapeError);
}

TEST(BicubicResize, ReproducesLinearRampInInterior) {
    // Catmull-Rom interpolation is exact on linear signals away from edges.
    const int w = 64, h = 16;
    ImagePlane img(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) img.at(y, x, c) = 0.1 + 0.8 * x / (w - 1.0);
    ImagePlane out = bicubic_resize(img, 0.5);
    for (int y = 0; y < out.height; ++y) {
        for (int x = 2; x < out.width - 2; ++x) {
            const double src_x = (x + 0.5) * 2.0 - 0.5;
            const double expect = 0.1 + 0.8 * src_x / (w - 1.0);
            ASSERT_NEAR(out.at(y, x, 0), expect, 1e-6);
        }
    }
}

}  // namespace
