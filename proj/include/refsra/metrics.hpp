#pragma once

#include <cmath>
#include <vector>

#include "refsra/errors.hpp"
#include "refsra/image.hpp"

namespace refsra {

enum class ChannelMode { kRGB, kLuma };

namespace detail {

inline void require_same_dims(const ImagePlane& a, const ImagePlane& b, const char* op) {
    if (a.height != b.height || a.width != b.width)
        throw ShapeError(std::string(op) + ": image dims " + std::to_string(a.height) + "x" +
                         std::to_string(a.width) + " vs " + std::to_string(b.height) + "x" +
                         std::to_string(b.width));
}

/// ITU-R BT.601 luma.
inline std::vector<double> luma_plane(const ImagePlane& img) {
    std::vector<double> y(static_cast<size_t>(img.height) * img.width);
    for (size_t i = 0; i < y.size(); ++i) {
        const double* p = img.values.data() + i * 3;
        y[i] = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
    }
    return y;
}

inline std::vector<double> gaussian_window_1d(int size, double sigma) {
    std::vector<double> w(static_cast<size_t>(size));
    const int half = size / 2;
    double sum = 0.0;
    for (int i = 0; i < size; ++i) {
        w[static_cast<size_t>(i)] = std::exp(-0.5 * (i - half) * (i - half) / (sigma * sigma));
        sum += w[static_cast<size_t>(i)];
    }
    for (auto& v : w) v /= sum;
    return w;
}

/// Valid-region separable Gaussian filter of a single plane.
inline std::vector<double> gaussian_valid(const std::vector<double>& plane, int h, int w,
                                          const std::vector<double>& win) {
    const int k = static_cast<int>(win.size());
    const int oh = h - k + 1, ow = w - k + 1;
    std::vector<double> horiz(static_cast<size_t>(h) * ow);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < ow; ++x) {
            double acc = 0.0;
            const double* row = plane.data() + static_cast<size_t>(y) * w + x;
            for (int i = 0; i < k; ++i) acc += win[static_cast<size_t>(i)] * row[i];
            horiz[static_cast<size_t>(y) * ow + x] = acc;
        }
    }
    std::vector<double> out(static_cast<size_t>(oh) * ow);
    for (int y = 0; y < oh; ++y) {
        for (int x = 0; x < ow; ++x) {
            double acc = 0.0;
            for (int i = 0; i < k; ++i) acc += win[static_cast<size_t>(i)] * horiz[static_cast<size_t>(y + i) * ow + x];
            out[static_cast<size_t>(y) * ow + x] = acc;
        }
    }
    return out;
}

inline double ssim_plane(const std::vector<double>& a, const std::vector<double>& b, int h, int w) {
    constexpr int kWindow = 11;
    constexpr double kSigma = 1.5;
    constexpr double kC1 = 0.01 * 0.01;  // (K1 * L)^2, L = 1
    constexpr double kC2 = 0.03 * 0.03;
    static const std::vector<double> win = gaussian_window_1d(kWindow, kSigma);

    std::vector<double> aa(a.size()), bb(a.size()), ab(a.size());
    for (size_t i = 0; i < a.size(); ++i) {
        aa[i] = a[i] * a[i];
        bb[i] = b[i] * b[i];
        ab[i] = a[i] * b[i];
    }
    const auto mu_a = gaussian_valid(a, h, w, win);
    const auto mu_b = gaussian_valid(b, h, w, win);
    const auto m_aa = gaussian_valid(aa, h, w, win);
    const auto m_bb = gaussian_valid(bb, h, w, win);
    const auto m_ab = gaussian_valid(ab, h, w, win);

    double total = 0.0;
    for (size_t i = 0; i < mu_a.size(); ++i) {
        const double ma = mu_a[i], mb = mu_b[i];
        // Each product is a named intermediate so that ssim(a,b) and
        // ssim(b,a) round identically regardless of FMA contraction.
        const double ma2 = ma * ma;
        const double mb2 = mb * mb;
        const double mamb = ma * mb;
        const double va = m_aa[i] - ma2;
        const double vb = m_bb[i] - mb2;
        const double cov = m_ab[i] - mamb;
        const double lum = 2.0 * mamb + kC1;
        const double con = 2.0 * cov + kC2;
        const double den1 = ma2 + mb2 + kC1;
        const double den2 = va + vb + kC2;
        total += (lum * con) / (den1 * den2);
    }
    return total / static_cast<double>(mu_a.size());
}

}  // namespace detail

/// 10 * log10(1 / MSE) over all pixels and channels, capped at 100 dB when
/// MSE < 1e-10. Inputs are expected in [0,1].
inline double psnr(const ImagePlane& a, const ImagePlane& b, ChannelMode mode = ChannelMode::kRGB) {
    detail::require_same_dims(a, b, "psnr");
    double mse = 0.0;
    if (mode == ChannelMode::kRGB) {
        for (size_t i = 0; i < a.values.size(); ++i) {
            const double d = a.values[i] - b.values[i];
            mse += d * d;
        }
        mse /= static_cast<double>(a.values.size());
    } else {
        const auto ya = detail::luma_plane(a);
        const auto yb = detail::luma_plane(b);
        for (size_t i = 0; i < ya.size(); ++i) {
            const double d = ya[i] - yb[i];
            mse += d * d;
        }
        mse /= static_cast<double>(ya.size());
    }
    if (mse < 1e-10) return 100.0;
    return 10.0 * std::log10(1.0 / mse);
}

/// Single-scale SSIM: 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03,
/// dynamic range 1.0, valid-region statistics (no padding), computed per
/// channel and averaged.
inline double ssim(const ImagePlane& a, const ImagePlane& b, ChannelMode mode = ChannelMode::kRGB) {
    detail::require_same_dims(a, b, "ssim");
    if (a.height < 11 || a.width < 11)
        throw ShapeError("ssim: image " + std::to_string(a.height) + "x" + std::to_string(a.width) +
                         " smaller than the 11x11 window");
    if (mode == ChannelMode::kLuma)
        return detail::ssim_plane(detail::luma_plane(a), detail::luma_plane(b), a.height, a.width);

    const size_t n = static_cast<size_t>(a.height) * a.width;
    double acc = 0.0;
    for (int c = 0; c < 3; ++c) {
        std::vector<double> pa(n), pb(n);
        for (size_t i = 0; i < n; ++i) {
            pa[i] = a.values[i * 3 + static_cast<size_t>(c)];
            pb[i] = b.values[i * 3 + static_cast<size_t>(c)];
        }
        acc += detail::ssim_plane(pa, pb, a.height, a.width);
    }
    return acc / 3.0;
}

/// Per-sample quality summary: clean/adversarial output quality vs. GT,
/// their difference, and reference stealthiness.
struct QualityReport {
    double psnr_clean = 0.0;
    double ssim_clean = 0.0;
    double psnr_adv = 0.0;
    double ssim_adv = 0.0;
    double psnr_drop = 0.0;
    double ssim_drop = 0.0;
    double psnr_stealth = 0.0;
    double ssim_stealth = 0.0;
};

inline QualityReport evaluate_attack(const ImagePlane& gt, const ImagePlane& clean_sr,
                                     const ImagePlane& adv_sr, const ImagePlane& ref,
                                     const ImagePlane& adv_ref,
                                     ChannelMode mode = ChannelMode::kRGB) {
    QualityReport r;
    r.psnr_clean = psnr(clean_sr, gt, mode);
    r.ssim_clean = ssim(clean_sr, gt, mode);
    r.psnr_adv = psnr(adv_sr, gt, mode);
    r.ssim_adv = ssim(adv_sr, gt, mode);
    r.psnr_drop = r.psnr_clean - r.psnr_adv;
    r.ssim_drop = r.ssim_clean - r.ssim_adv;
    r.psnr_stealth = psnr(ref, adv_ref, mode);
    r.ssim_stealth = ssim(ref, adv_ref, mode);
    return r;
}

}  // namespace refsra
