#pragma once

#include <png.h>

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>

#include "rdlab/errors.hpp"
#include "rdlab/imgedit.hpp"

namespace rdlab {

using ImageBytes = std::array<std::uint8_t, Image::kSize>;

/// 8-bit quantization used for PNG storage: round(v * 255).
inline ImageBytes quantize(const Image& img)
{
    ImageBytes out{};
    for (int i = 0; i < Image::kSize; ++i) {
        out[i] = static_cast<std::uint8_t>(std::lround(static_cast<double>(img.data[i]) * 255.0));
    }
    return out;
}

inline Image dequantize(const ImageBytes& bytes)
{
    Image img;
    for (int i = 0; i < Image::kSize; ++i) {
        img.data[i] = static_cast<float>(bytes[i] / 255.0);
    }
    return img;
}

inline void write_png(const std::filesystem::path& path, const Image& img)
{
    const ImageBytes bytes = quantize(img);
    png_image info{};
    info.version = PNG_IMAGE_VERSION;
    info.width = Image::kWidth;
    info.height = Image::kHeight;
    info.format = PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&info, path.c_str(), 0, bytes.data(), 0, nullptr)) {
        const std::string msg = info.message;
        png_image_free(&info);
        throw DataIntegrityError("cannot write " + path.string() + ": " + msg);
    }
}

inline ImageBytes read_png_bytes(const std::filesystem::path& path)
{
    png_image info{};
    info.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&info, path.c_str())) {
        throw DataIntegrityError("cannot read " + path.string() + ": " + info.message);
    }
    if (info.width != Image::kWidth || info.height != Image::kHeight) {
        png_image_free(&info);
        throw DataIntegrityError(path.string() + ": expected 32x32 image");
    }
    info.format = PNG_FORMAT_RGB;
    ImageBytes bytes{};
    if (!png_image_finish_read(&info, nullptr, bytes.data(), 0, nullptr)) {
        const std::string msg = info.message;
        png_image_free(&info);
        throw DataIntegrityError("cannot decode " + path.string() + ": " + msg);
    }
    return bytes;
}

inline Image read_png(const std::filesystem::path& path) { return dequantize(read_png_bytes(path)); }

} // namespace rdlab
