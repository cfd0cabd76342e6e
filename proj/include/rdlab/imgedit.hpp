#pragma once

// Closed vocabulary of global photo adjustments, their application to
// fixed-size RGB rasters, and a procedural source-image generator.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <numbers>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "rdlab/errors.hpp"
#include "rdlab/rng.hpp"

namespace rdlab {

/// 32x32 RGB raster, channels in [0,1], row-major with interleaved channels.
struct Image {
    static constexpr int kWidth = 32;
    static constexpr int kHeight = 32;
    static constexpr int kChannels = 3;
    static constexpr int kPixels = kWidth * kHeight;
    static constexpr int kSize = kPixels * kChannels;

    std::array<float, kSize> data{};

    float& at(int y, int x, int c) { return data[static_cast<std::size_t>((y * kWidth + x) * kChannels + c)]; }
    float at(int y, int x, int c) const { return data[static_cast<std::size_t>((y * kWidth + x) * kChannels + c)]; }
};

inline bool bit_identical(const Image& a, const Image& b)
{
    return std::memcmp(a.data.data(), b.data.data(), sizeof(float) * Image::kSize) == 0;
}

inline std::array<double, 3> channel_variance(const Image& img)
{
    std::array<double, 3> mean{}, var{};
    for (int i = 0; i < Image::kPixels; ++i) {
        for (int c = 0; c < 3; ++c) {
            mean[c] += img.data[i * 3 + c];
        }
    }
    for (auto& m : mean) {
        m /= Image::kPixels;
    }
    for (int i = 0; i < Image::kPixels; ++i) {
        for (int c = 0; c < 3; ++c) {
            const double d = img.data[i * 3 + c] - mean[c];
            var[c] += d * d;
        }
    }
    for (auto& v : var) {
        v /= Image::kPixels;
    }
    return var;
}

enum class OpName : std::uint8_t { brightness, contrast, saturation, hue, gamma };

inline constexpr int kNumOps = 5;
inline constexpr std::array<std::string_view, kNumOps> kOpNames = {
    "brightness", "contrast", "saturation", "hue", "gamma"};
inline constexpr std::array<OpName, kNumOps> kAllOps = {
    OpName::brightness, OpName::contrast, OpName::saturation, OpName::hue, OpName::gamma};

inline std::string_view op_name(OpName op)
{
    const auto i = static_cast<std::size_t>(op);
    if (i >= kOpNames.size()) {
        throw UnknownOperationError("unknown operation id " + std::to_string(i));
    }
    return kOpNames[i];
}

inline std::optional<OpName> find_op(std::string_view name)
{
    for (std::size_t i = 0; i < kOpNames.size(); ++i) {
        if (kOpNames[i] == name) {
            return static_cast<OpName>(i);
        }
    }
    return std::nullopt;
}

inline OpName parse_op(std::string_view name)
{
    if (auto op = find_op(name)) {
        return *op;
    }
    throw UnknownOperationError("unknown operation '" + std::string(name) + "'");
}

/// One adjustment with its normalized strength; 0 is the identity for every op.
struct EditOp {
    OpName name = OpName::brightness;
    double value = 0.0;

    friend bool operator==(const EditOp&, const EditOp&) = default;
};

/// Value in hundredths; the text grammar carries exactly two decimals.
inline long hundredths(double value) { return std::lround(value * 100.0); }

/// Ordered list of 1..3 ops with distinct names; applied left to right.
struct EditSpec {
    std::vector<EditOp> ops;

    friend bool operator==(const EditSpec&, const EditSpec&) = default;

    bool contains(OpName op) const
    {
        return std::any_of(ops.begin(), ops.end(), [op](const EditOp& e) { return e.name == op; });
    }

    void validate() const
    {
        if (ops.empty() || ops.size() > 3) {
            throw DataIntegrityError("edit spec must hold 1..3 ops, got " + std::to_string(ops.size()));
        }
        for (std::size_t i = 0; i < ops.size(); ++i) {
            op_name(ops[i].name);
            if (!(ops[i].value >= -1.0 && ops[i].value <= 1.0)) {
                throw DataIntegrityError("op value out of [-1,1]");
            }
            for (std::size_t j = 0; j < i; ++j) {
                if (ops[j].name == ops[i].name) {
                    throw DataIntegrityError("duplicate op '" + std::string(op_name(ops[i].name)) + "' in spec");
                }
            }
        }
    }
};

namespace detail {

inline float clamp01(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

} // namespace detail

inline Image apply_op(const Image& img, const EditOp& op)
{
    const double p = op.value;
    if (!(p >= -1.0 && p <= 1.0)) {
        throw DataIntegrityError("op value out of [-1,1]");
    }
    op_name(op.name);
    if (p == 0.0) {
        return img;
    }

    Image out;
    switch (op.name) {
    case OpName::brightness:
        for (int i = 0; i < Image::kSize; ++i) {
            out.data[i] = detail::clamp01(img.data[i] + 0.5 * p);
        }
        break;
    case OpName::contrast:
        for (int i = 0; i < Image::kSize; ++i) {
            out.data[i] = detail::clamp01((img.data[i] - 0.5) * (1.0 + p) + 0.5);
        }
        break;
    case OpName::saturation:
        for (int i = 0; i < Image::kPixels; ++i) {
            const double r = img.data[i * 3], g = img.data[i * 3 + 1], b = img.data[i * 3 + 2];
            const double luma = 0.299 * r + 0.587 * g + 0.114 * b;
            out.data[i * 3] = detail::clamp01(luma + (r - luma) * (1.0 + p));
            out.data[i * 3 + 1] = detail::clamp01(luma + (g - luma) * (1.0 + p));
            out.data[i * 3 + 2] = detail::clamp01(luma + (b - luma) * (1.0 + p));
        }
        break;
    case OpName::hue: {
        // YIQ hue rotation about the luma axis.
        const double theta = p * (std::numbers::pi / 2.0);
        const double cs = std::cos(theta), sn = std::sin(theta);
        for (int i = 0; i < Image::kPixels; ++i) {
            const double r = img.data[i * 3], g = img.data[i * 3 + 1], b = img.data[i * 3 + 2];
            const double y = 0.299 * r + 0.587 * g + 0.114 * b;
            const double ci = 0.596 * r - 0.274 * g - 0.322 * b;
            const double cq = 0.211 * r - 0.523 * g + 0.312 * b;
            const double ri = ci * cs - cq * sn;
            const double rq = ci * sn + cq * cs;
            out.data[i * 3] = detail::clamp01(y + 0.956 * ri + 0.621 * rq);
            out.data[i * 3 + 1] = detail::clamp01(y - 0.272 * ri - 0.647 * rq);
            out.data[i * 3 + 2] = detail::clamp01(y - 1.106 * ri + 1.703 * rq);
        }
        break;
    }
    case OpName::gamma: {
        const double exponent = std::exp2(-p);
        for (int i = 0; i < Image::kSize; ++i) {
            out.data[i] = detail::clamp01(std::pow(static_cast<double>(img.data[i]), exponent));
        }
        break;
    }
    }
    return out;
}

inline Image apply_spec(const Image& img, const EditSpec& spec)
{
    Image out = img;
    for (const auto& op : spec.ops) {
        out = apply_op(out, op);
    }
    return out;
}

/// Procedural source image: a two-color linear gradient with 1-3 filled
/// rectangles or discs. Draws are repeated until every channel has
/// variance >= 0.005 so that edits stay visible.
inline Image synth_image(std::uint64_t seed)
{
    constexpr double kMinVariance = 0.005;
    Rng rng(mix_seed(seed, 0x5eedULL));
    for (;;) {
        Image img;
        std::array<double, 3> c0{}, c1{};
        for (int c = 0; c < 3; ++c) {
            c0[c] = rng.uniform(0.05, 0.95);
            c1[c] = rng.uniform(0.05, 0.95);
        }
        const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
        const double ca = std::cos(angle), sa = std::sin(angle);
        const double span = std::abs(ca) + std::abs(sa);
        for (int y = 0; y < Image::kHeight; ++y) {
            for (int x = 0; x < Image::kWidth; ++x) {
                const double u = x / double(Image::kWidth - 1) - 0.5;
                const double v = y / double(Image::kHeight - 1) - 0.5;
                const double t = std::clamp(0.5 + (u * ca + v * sa) / span, 0.0, 1.0);
                for (int c = 0; c < 3; ++c) {
                    img.at(y, x, c) = static_cast<float>(c0[c] + (c1[c] - c0[c]) * t);
                }
            }
        }

        const int shapes = 1 + static_cast<int>(rng.below(3));
        for (int s = 0; s < shapes; ++s) {
            std::array<float, 3> color{};
            for (auto& v : color) {
                v = static_cast<float>(rng.uniform(0.05, 0.95));
            }
            if (rng.coin()) {
                const int w = 4 + static_cast<int>(rng.below(13));
                const int h = 4 + static_cast<int>(rng.below(13));
                const int x0 = static_cast<int>(rng.below(Image::kWidth - w + 1));
                const int y0 = static_cast<int>(rng.below(Image::kHeight - h + 1));
                for (int y = y0; y < y0 + h; ++y) {
                    for (int x = x0; x < x0 + w; ++x) {
                        for (int c = 0; c < 3; ++c) {
                            img.at(y, x, c) = color[c];
                        }
                    }
                }
            } else {
                const double cx = rng.uniform(0.0, Image::kWidth);
                const double cy = rng.uniform(0.0, Image::kHeight);
                const double r = rng.uniform(3.0, 10.0);
                for (int y = 0; y < Image::kHeight; ++y) {
                    for (int x = 0; x < Image::kWidth; ++x) {
                        const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
                        if (dx * dx + dy * dy <= r * r) {
                            for (int c = 0; c < 3; ++c) {
                                img.at(y, x, c) = color[c];
                            }
                        }
                    }
                }
            }
        }

        const auto var = channel_variance(img);
        if (var[0] >= kMinVariance && var[1] >= kMinVariance && var[2] >= kMinVariance) {
            return img;
        }
    }
}

} // namespace rdlab
