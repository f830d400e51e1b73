#pragma once

// Image file I/O (binary PPM, always available), bilinear resizing with
// intrinsics updates, and atomic file writes.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

#include "tsplat/geometry.hpp"
#include "tsplat/tensor.hpp"

namespace tsplat {

// Write-temp-then-rename so readers never observe a partial file.
inline void atomic_write_file(const std::string& path, const std::string& bytes) {
    namespace fs = std::filesystem;
    const fs::path target(path);
    if (target.has_parent_path()) fs::create_directories(target.parent_path());
    const fs::path tmp = target.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw std::runtime_error("cannot open for writing: " + tmp.string());
        os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!os) throw std::runtime_error("short write: " + tmp.string());
    }
    fs::rename(tmp, target);
}

inline std::string read_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open: " + path);
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

// ---------------------------------------------------------------------------
// PPM (P6, maxval 255).

inline std::string encode_ppm(const Tensor& image) {
    if (image.ndim() != 3 || image.dim(2) != 3)
        throw std::invalid_argument("encode_ppm: image must be [H, W, 3]");
    const std::size_t h = image.dim(0), w = image.dim(1);
    std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    out.reserve(out.size() + h * w * 3);
    for (std::size_t i = 0; i < h * w * 3; ++i) {
        const double v = std::clamp(image[i], 0.0, 1.0);
        out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
    }
    return out;
}

inline Tensor decode_ppm(const std::string& bytes) {
    std::istringstream is(bytes);
    std::string magic;
    is >> magic;
    if (magic != "P6") throw std::runtime_error("decode_ppm: not a P6 file");
    auto next_token = [&is]() {
        std::string tok;
        for (;;) {
            if (!(is >> tok)) throw std::runtime_error("decode_ppm: truncated header");
            if (tok[0] == '#') {
                std::string rest;
                std::getline(is, rest);
                continue;
            }
            return tok;
        }
    };
    const std::size_t w = std::stoul(next_token());
    const std::size_t h = std::stoul(next_token());
    const std::size_t maxval = std::stoul(next_token());
    if (maxval != 255) throw std::runtime_error("decode_ppm: only maxval 255 supported");
    is.get();  // single whitespace after maxval
    Tensor image(Shape{h, w, 3});
    const std::size_t offset = static_cast<std::size_t>(is.tellg());
    if (bytes.size() < offset + h * w * 3) throw std::runtime_error("decode_ppm: truncated body");
    for (std::size_t i = 0; i < h * w * 3; ++i)
        image[i] = static_cast<unsigned char>(bytes[offset + i]) / 255.0;
    return image;
}

inline void write_ppm(const std::string& path, const Tensor& image) {
    atomic_write_file(path, encode_ppm(image));
}

inline Tensor read_ppm(const std::string& path) { return decode_ppm(read_file(path)); }

// ---------------------------------------------------------------------------
// Resizing and the deterministic evaluation-time preprocessing used by the
// posed-image loader (synthetic data never passes through here).

inline Tensor resize_bilinear(const Tensor& image, std::size_t out_h, std::size_t out_w) {
    const std::size_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
    Tensor out(Shape{out_h, out_w, c});
    const double sy = static_cast<double>(h) / static_cast<double>(out_h);
    const double sx = static_cast<double>(w) / static_cast<double>(out_w);
    for (std::size_t y = 0; y < out_h; ++y)
        for (std::size_t x = 0; x < out_w; ++x) {
            const double fy = (static_cast<double>(y) + 0.5) * sy - 0.5;
            const double fx = (static_cast<double>(x) + 0.5) * sx - 0.5;
            const double cy = std::clamp(fy, 0.0, static_cast<double>(h - 1));
            const double cx = std::clamp(fx, 0.0, static_cast<double>(w - 1));
            const std::size_t y0 = static_cast<std::size_t>(cy);
            const std::size_t x0 = static_cast<std::size_t>(cx);
            const std::size_t y1 = std::min(y0 + 1, h - 1);
            const std::size_t x1 = std::min(x0 + 1, w - 1);
            const double wy = cy - static_cast<double>(y0);
            const double wx = cx - static_cast<double>(x0);
            for (std::size_t ch = 0; ch < c; ++ch) {
                const double v00 = image[(y0 * w + x0) * c + ch];
                const double v01 = image[(y0 * w + x1) * c + ch];
                const double v10 = image[(y1 * w + x0) * c + ch];
                const double v11 = image[(y1 * w + x1) * c + ch];
                out[(y * out_w + x) * c + ch] = (1 - wy) * ((1 - wx) * v00 + wx * v01) +
                                                wy * ((1 - wx) * v10 + wx * v11);
            }
        }
    return out;
}

// Resize to `target` height with the aspect preserved (width rounded to a
// multiple of the patch size), center-crop square, final resize to target.
// Intrinsics are updated after every step.
inline CameraView preprocess_view(const CameraView& view, std::size_t target,
                                  std::size_t patch_size) {
    CameraView out = view;
    const std::size_t h = view.image.dim(0), w = view.image.dim(1);

    const double r = static_cast<double>(target) / static_cast<double>(h);
    std::size_t new_w = static_cast<std::size_t>(std::lround(static_cast<double>(w) * r));
    new_w = std::max<std::size_t>(patch_size, (new_w / patch_size) * patch_size);
    out.image = resize_bilinear(view.image, target, new_w);
    out.intrinsics.fx *= static_cast<double>(new_w) / static_cast<double>(w);
    out.intrinsics.fy *= r;
    out.intrinsics.cx *= static_cast<double>(new_w) / static_cast<double>(w);
    out.intrinsics.cy *= r;
    out.intrinsics.width = new_w;
    out.intrinsics.height = target;

    if (new_w > target) {  // center square crop
        const std::size_t x0 = (new_w - target) / 2;
        Tensor cropped(Shape{target, target, 3});
        for (std::size_t y = 0; y < target; ++y)
            std::copy_n(out.image.data() + (y * new_w + x0) * 3, target * 3,
                        cropped.data() + y * target * 3);
        out.image = std::move(cropped);
        out.intrinsics.cx -= static_cast<double>(x0);
        out.intrinsics.width = target;
    } else if (new_w < target) {
        out.intrinsics.fx *= static_cast<double>(target) / static_cast<double>(new_w);
        out.intrinsics.cx *= static_cast<double>(target) / static_cast<double>(new_w);
        out.image = resize_bilinear(out.image, target, target);
        out.intrinsics.width = target;
    }
    return out;
}

}  // namespace tsplat
