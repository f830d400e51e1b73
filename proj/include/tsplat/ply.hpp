#pragma once

// Binary little-endian PLY in the standard splat-asset layout. Per-vertex
// float32 properties, in this exact order:
//   x, y, z, nx, ny, nz (zeros), f_dc_0..2, f_rest_0..44,
//   opacity (logit), scale_0..2 (log), rot_0..3 (unit quaternion, w first)
// f_dc/f_rest hold the raw SH coefficients channel-major (f_rest index
// c * 15 + k - 1 is channel c, band coefficient k). Viewers decode the DC
// path as color = 0.28209479177 * f_dc + 0.5, the inverse of sh_eval's
// degree-0 path.

#include <Eigen/Dense>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "tsplat/decoder.hpp"
#include "tsplat/image.hpp"
#include "tsplat/tensor.hpp"

namespace tsplat {

namespace detail {

inline const std::vector<std::string>& splat_ply_properties() {
    static const std::vector<std::string> props = [] {
        std::vector<std::string> p = {"x", "y", "z", "nx", "ny", "nz",
                                      "f_dc_0", "f_dc_1", "f_dc_2"};
        for (int i = 0; i < 45; ++i) p.push_back("f_rest_" + std::to_string(i));
        p.push_back("opacity");
        for (int i = 0; i < 3; ++i) p.push_back("scale_" + std::to_string(i));
        for (int i = 0; i < 4; ++i) p.push_back("rot_" + std::to_string(i));
        return p;
    }();
    return props;
}

inline void push_f32(std::string& out, float v) {
    static_assert(sizeof(float) == 4);
    if constexpr (std::endian::native == std::endian::big) {
        auto bits = std::bit_cast<std::uint32_t>(v);
        bits = __builtin_bswap32(bits);
        v = std::bit_cast<float>(bits);
    }
    char buf[4];
    std::memcpy(buf, &v, 4);
    out.append(buf, 4);
}

inline float read_f32(const std::string& bytes, std::size_t offset) {
    float v;
    std::memcpy(&v, bytes.data() + offset, 4);
    if constexpr (std::endian::native == std::endian::big) {
        auto bits = std::bit_cast<std::uint32_t>(v);
        bits = __builtin_bswap32(bits);
        v = std::bit_cast<float>(bits);
    }
    return v;
}

}  // namespace detail

// Inverse of sh_eval's degree-0 path: the DC coefficient reproducing a
// given color intent under the +0.5 offset.
inline double sh_dc_from_color(double color) { return (color - 0.5) / 0.28209479177387814; }
inline double color_from_sh_dc(double dc) { return 0.28209479177387814 * dc + 0.5; }

inline std::string write_splat_ply(const GaussianScene& scene) {
    if (scene.sh.ndim() != 3 || scene.sh.dim(1) != 3 || scene.sh.dim(2) != 16)
        throw std::invalid_argument("write_splat_ply: scene must carry degree-3 SH ([N, 3, 16])");
    const std::size_t n = scene.count();
    std::ostringstream header;
    header << "ply\nformat binary_little_endian 1.0\nelement vertex " << n << "\n";
    for (const std::string& p : detail::splat_ply_properties())
        header << "property float " << p << "\n";
    header << "end_header\n";

    std::string out = header.str();
    out.reserve(out.size() + n * detail::splat_ply_properties().size() * 4);
    for (std::size_t i = 0; i < n; ++i) {
        for (int a = 0; a < 3; ++a)
            detail::push_f32(out, static_cast<float>(scene.means[i * 3 + a]));
        for (int a = 0; a < 3; ++a) detail::push_f32(out, 0.0f);  // normals
        for (int c = 0; c < 3; ++c)
            detail::push_f32(out, static_cast<float>(scene.sh[(i * 3 + c) * 16]));
        for (int c = 0; c < 3; ++c)
            for (int k = 1; k < 16; ++k)
                detail::push_f32(out, static_cast<float>(scene.sh[(i * 3 + c) * 16 + k]));
        const double alpha = scene.opacities[i];
        detail::push_f32(out, static_cast<float>(std::log(alpha / (1.0 - alpha))));
        for (int a = 0; a < 3; ++a)
            detail::push_f32(out, static_cast<float>(std::log(scene.scales[i * 3 + a])));
        Eigen::Map<const Eigen::Matrix<double, 3, 3, Eigen::RowMajor>> rot(scene.rotations.data() +
                                                                           i * 9);
        Eigen::Quaterniond q(rot);
        q.normalize();
        detail::push_f32(out, static_cast<float>(q.w()));
        detail::push_f32(out, static_cast<float>(q.x()));
        detail::push_f32(out, static_cast<float>(q.y()));
        detail::push_f32(out, static_cast<float>(q.z()));
    }
    return out;
}

inline GaussianScene read_splat_ply(const std::string& bytes) {
    const std::string end_marker = "end_header\n";
    const std::size_t header_end = bytes.find(end_marker);
    if (header_end == std::string::npos)
        throw std::runtime_error("read_splat_ply: missing end_header");
    std::istringstream header(bytes.substr(0, header_end));

    std::string line;
    std::getline(header, line);
    if (line != "ply") throw std::runtime_error("read_splat_ply: not a PLY file");
    std::getline(header, line);
    if (line != "format binary_little_endian 1.0")
        throw std::runtime_error("read_splat_ply: unsupported format '" + line + "'");
    std::getline(header, line);
    const std::string vertex_prefix = "element vertex ";
    if (line.rfind(vertex_prefix, 0) != 0)
        throw std::runtime_error("read_splat_ply: expected vertex element, got '" + line + "'");
    const std::size_t n = std::stoul(line.substr(vertex_prefix.size()));

    const auto& props = detail::splat_ply_properties();
    for (const std::string& expected : props) {
        if (!std::getline(header, line))
            throw std::runtime_error("read_splat_ply: header ends before property list");
        if (line != "property float " + expected)
            throw std::runtime_error("read_splat_ply: wrong property order, expected '" +
                                     expected + "', got '" + line + "'");
    }
    if (std::getline(header, line) && !line.empty())
        throw std::runtime_error("read_splat_ply: unexpected header line '" + line + "'");

    const std::size_t body = header_end + end_marker.size();
    const std::size_t stride = props.size() * 4;
    if (bytes.size() < body + n * stride)
        throw std::runtime_error("read_splat_ply: truncated body");

    GaussianScene scene;
    scene.means = Tensor(Shape{n, 3});
    scene.scales = Tensor(Shape{n, 3});
    scene.rotations = Tensor(Shape{n, 3, 3});
    scene.opacities = Tensor(Shape{n, 1});
    scene.sh = Tensor(Shape{n, 3, 16});
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t at = body + i * stride;
        auto f = [&](std::size_t j) {
            return static_cast<double>(detail::read_f32(bytes, at + j * 4));
        };
        for (int a = 0; a < 3; ++a) scene.means[i * 3 + a] = f(a);
        for (int c = 0; c < 3; ++c) scene.sh[(i * 3 + c) * 16] = f(6 + c);
        for (int c = 0; c < 3; ++c)
            for (int k = 1; k < 16; ++k) scene.sh[(i * 3 + c) * 16 + k] = f(9 + c * 15 + k - 1);
        const double logit = f(54);
        scene.opacities[i] = 1.0 / (1.0 + std::exp(-logit));
        for (int a = 0; a < 3; ++a) scene.scales[i * 3 + a] = std::exp(f(55 + a));
        Eigen::Quaterniond q(f(58), f(59), f(60), f(61));  // w, x, y, z
        q.normalize();
        const Eigen::Matrix3d rot = q.toRotationMatrix();
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) scene.rotations[i * 9 + r * 3 + c] = rot(r, c);
    }
    return scene;
}

inline void export_splat_ply(const std::string& path, const GaussianScene& scene) {
    atomic_write_file(path, write_splat_ply(scene));
}

inline GaussianScene import_splat_ply(const std::string& path) {
    return read_splat_ply(read_file(path));
}

}  // namespace tsplat
