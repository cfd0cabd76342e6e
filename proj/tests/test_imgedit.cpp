#include <gtest/gtest.h>

#include <cmath>

#include "rdlab/imgedit.hpp"
#include "rdlab/png_io.hpp"

using namespace rdlab;

namespace {

Image constant_image(float v)
{
    Image img;
    img.data.fill(v);
    return img;
}

Image rgb_image(float r, float g, float b)
{
    Image img;
    for (int i = 0; i < Image::kPixels; ++i) {
        img.data[i * 3] = r;
        img.data[i * 3 + 1] = g;
        img.data[i * 3 + 2] = b;
    }
    return img;
}

} // namespace

TEST(SynthImage, DeterministicPerSeed)
{
    EXPECT_TRUE(bit_identical(synth_image(42), synth_image(42)));
    EXPECT_FALSE(bit_identical(synth_image(1), synth_image(2)));
}

TEST(SynthImage, RangeAndVariance)
{
    for (std::uint64_t seed = 0; seed < 300; ++seed) {
        const Image img = synth_image(seed);
        for (float v : img.data) {
            ASSERT_GE(v, 0.0f);
            ASSERT_LE(v, 1.0f);
        }
        for (double var : channel_variance(img)) {
            ASSERT_GE(var, 0.005) << "seed " << seed;
        }
    }
}

TEST(ApplyOp, ZeroIsBitwiseIdentity)
{
    const Image img = synth_image(5);
    for (OpName op : kAllOps) {
        EXPECT_TRUE(bit_identical(apply_op(img, {op, 0.0}), img)) << op_name(op);
    }
}

TEST(ApplyOp, HandEvaluatedPixels)
{
    EXPECT_NEAR(apply_op(constant_image(0.2f), {OpName::brightness, 1.0}).data[0], 0.7f, 1e-6);
    EXPECT_NEAR(apply_op(constant_image(0.2f), {OpName::brightness, -1.0}).data[0], 0.0f, 0.0);
    const Image flat = apply_op(constant_image(0.8f), {OpName::contrast, -1.0});
    for (float v : flat.data) {
        ASSERT_NEAR(v, 0.5f, 1e-6);
    }
    EXPECT_NEAR(apply_op(constant_image(0.25f), {OpName::gamma, 1.0}).data[0], 0.5f, 1e-6);
    EXPECT_NEAR(apply_op(constant_image(0.25f), {OpName::gamma, -1.0}).data[0], 0.0625f, 1e-6);
    EXPECT_NEAR(apply_op(constant_image(0.7f), {OpName::contrast, 0.5}).data[0], 0.8f, 1e-6);
}

TEST(ApplyOp, SaturationAroundLuma)
{
    const Image img = rgb_image(0.6f, 0.4f, 0.2f);
    const double luma = 0.299 * 0.6 + 0.587 * 0.4 + 0.114 * 0.2;
    const Image gray = apply_op(img, {OpName::saturation, -1.0});
    for (int c = 0; c < 3; ++c) {
        EXPECT_NEAR(gray.data[c], luma, 1e-6);
    }
    const Image boosted = apply_op(img, {OpName::saturation, 0.5});
    EXPECT_NEAR(boosted.data[0], luma + (0.6 - luma) * 1.5, 1e-6);
    EXPECT_NEAR(boosted.data[2], luma + (0.2 - luma) * 1.5, 1e-6);
}

TEST(ApplyOp, HueRotationKeepsLumaAndGray)
{
    const Image gray = constant_image(0.4f);
    const Image rotated = apply_op(gray, {OpName::hue, 0.7});
    for (int c = 0; c < 3; ++c) {
        EXPECT_NEAR(rotated.data[c], 0.4f, 1e-3);
    }
    // Independent YIQ round trip with numpy-style matrices.
    const double r = 0.6, g = 0.4, b = 0.3, theta = 0.5 * std::acos(-1.0) / 2.0;
    const double y = 0.299 * r + 0.587 * g + 0.114 * b;
    const double i = 0.596 * r - 0.274 * g - 0.322 * b;
    const double q = 0.211 * r - 0.523 * g + 0.312 * b;
    const double i2 = i * std::cos(theta) - q * std::sin(theta);
    const double q2 = i * std::sin(theta) + q * std::cos(theta);
    const Image out = apply_op(rgb_image(0.6f, 0.4f, 0.3f), {OpName::hue, 0.5});
    EXPECT_NEAR(out.data[0], y + 0.956 * i2 + 0.621 * q2, 1e-6);
    EXPECT_NEAR(out.data[1], y - 0.272 * i2 - 0.647 * q2, 1e-6);
    EXPECT_NEAR(out.data[2], y - 1.106 * i2 + 1.703 * q2, 1e-6);
}

TEST(ApplyOp, OutputsStayInUnitRange)
{
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        const Image img = synth_image(seed);
        for (OpName op : kAllOps) {
            for (double p : {-1.0, -0.5, 0.3, 1.0}) {
                for (float v : apply_op(img, {op, p}).data) {
                    ASSERT_TRUE(v >= 0.0f && v <= 1.0f);
                }
            }
        }
    }
}

TEST(ApplyOp, VisibleForLargeValues)
{
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const Image img = synth_image(seed);
        for (OpName op : kAllOps) {
            for (double p : {-0.1, 0.1, -1.0, 1.0}) {
                EXPECT_FALSE(bit_identical(apply_op(img, {op, p}), img)) << op_name(op) << " " << p;
            }
        }
    }
}

TEST(ApplyOp, RejectsBadInput)
{
    const Image img = synth_image(1);
    EXPECT_THROW(apply_op(img, {OpName::brightness, 1.5}), DataIntegrityError);
    EXPECT_THROW(apply_op(img, {static_cast<OpName>(9), 0.2}), UnknownOperationError);
    EXPECT_THROW(parse_op("blur"), UnknownOperationError);
    EXPECT_EQ(parse_op("gamma"), OpName::gamma);
}

TEST(ApplySpec, LeftFoldInListOrder)
{
    const Image img = synth_image(11);
    const EditSpec zero{{{OpName::brightness, 0.0}, {OpName::hue, 0.0}}};
    EXPECT_TRUE(bit_identical(apply_spec(img, zero), img));
    EXPECT_TRUE(bit_identical(apply_spec(img, EditSpec{{{OpName::brightness, 0.4}}}), apply_op(img, {OpName::brightness, 0.4})));
    const EditSpec ab{{{OpName::brightness, 0.4}, {OpName::contrast, -0.2}}};
    const EditSpec ba{{{OpName::contrast, -0.2}, {OpName::brightness, 0.4}}};
    EXPECT_TRUE(bit_identical(apply_spec(img, ab), apply_op(apply_op(img, ab.ops[0]), ab.ops[1])));
    EXPECT_FALSE(bit_identical(apply_spec(img, ab), apply_spec(img, ba)));
}

TEST(EditSpec, Validation)
{
    EXPECT_THROW(EditSpec{}.validate(), DataIntegrityError);
    EXPECT_THROW((EditSpec{{{OpName::hue, 0.2}, {OpName::hue, 0.3}}}.validate()), DataIntegrityError);
    EXPECT_NO_THROW((EditSpec{{{OpName::hue, 0.2}, {OpName::gamma, -0.3}}}.validate()));
}

TEST(PngIo, QuantizedRoundTrip)
{
    const Image img = synth_image(3);
    const auto path = std::filesystem::temp_directory_path() / "rdlab_png_roundtrip.png";
    write_png(path, img);
    EXPECT_EQ(read_png_bytes(path), quantize(img));
    const Image back = read_png(path);
    for (int i = 0; i < Image::kSize; ++i) {
        ASSERT_LE(std::abs(back.data[i] - img.data[i]), 0.5f / 255.0f + 1e-6f);
    }
    std::filesystem::remove(path);
}
