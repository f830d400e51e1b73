#pragma once

// Image quality metrics over [0, 1] images (values clamped before use).

#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "tsplat/tensor.hpp"

namespace tsplat {

// 10 log10(1 / MSE); identical images report the +infinity sentinel.
inline double psnr(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("psnr: shape mismatch");
    double mse = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        const double d = std::clamp(a[i], 0.0, 1.0) - std::clamp(b[i], 0.0, 1.0);
        mse += d * d;
    }
    mse /= static_cast<double>(a.numel());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(1.0 / mse);
}

// SSIM with an 11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03,
// evaluated over the valid (unpadded) region and averaged across channels.
inline double ssim(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b) || a.ndim() != 3) throw std::invalid_argument("ssim: bad inputs");
    const std::size_t h = a.dim(0), w = a.dim(1), c = a.dim(2);
    constexpr int kWin = 11;
    constexpr double kSigma = 1.5;
    if (h < kWin || w < kWin) throw std::invalid_argument("ssim: image smaller than the window");

    double window[kWin];
    double wsum = 0.0;
    for (int i = 0; i < kWin; ++i) {
        const double d = i - (kWin - 1) / 2.0;
        window[i] = std::exp(-d * d / (2.0 * kSigma * kSigma));
        wsum += window[i];
    }
    for (double& v : window) v /= wsum;

    const double c1 = 0.01 * 0.01;
    const double c2 = 0.03 * 0.03;
    double total = 0.0;
    for (std::size_t ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        std::size_t count = 0;
        for (std::size_t y = 0; y + kWin <= h; ++y)
            for (std::size_t x = 0; x + kWin <= w; ++x) {
                double mu_a = 0, mu_b = 0, var_a = 0, var_b = 0, cov = 0;
                for (int dy = 0; dy < kWin; ++dy)
                    for (int dx = 0; dx < kWin; ++dx) {
                        const double wgt = window[dy] * window[dx];
                        const double va =
                            std::clamp(a[((y + dy) * w + (x + dx)) * c + ch], 0.0, 1.0);
                        const double vb =
                            std::clamp(b[((y + dy) * w + (x + dx)) * c + ch], 0.0, 1.0);
                        mu_a += wgt * va;
                        mu_b += wgt * vb;
                        var_a += wgt * va * va;
                        var_b += wgt * vb * vb;
                        cov += wgt * va * vb;
                    }
                var_a -= mu_a * mu_a;
                var_b -= mu_b * mu_b;
                cov -= mu_a * mu_b;
                const double num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
                const double den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
                acc += num / den;
                ++count;
            }
        total += acc / static_cast<double>(count);
    }
    return total / static_cast<double>(c);
}

}  // namespace tsplat
