#pragma once

// Synthetic haze generation via the atmospheric scattering model
// I = J*t + A*(1-t) with t = exp(-beta*depth), plus depth-field generation,
// P6 PPM I/O, and full-image RGB PSNR/SSIM.

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "deanet/archive.hpp"  // for the atomic file helpers
#include "deanet/tensor.hpp"

namespace deanet {

struct ImageError : public std::runtime_error {
    enum class Code { BadMagic, BadMaxval, Truncated, Io };

    ImageError(Code c, const std::string& msg) : std::runtime_error(msg), code(c) {}

    Code code;
};

// ---------------------------------------------------------------------------
// 8-bit RGB image buffer and PPM (P6) I/O

struct ImageBuffer {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> pixels;  // RGB, row-major

    static ImageBuffer blank(int w, int h) {
        ImageBuffer img;
        img.width = w;
        img.height = h;
        img.pixels.assign(std::size_t(w) * h * 3, 0);
        return img;
    }
};

/// [1,3,H,W] float view in [0,1].
template <typename T = float>
TensorPtrT<T> image_to_tensor(const ImageBuffer& img) {
    auto t = make_tensor<T>({1, 3, img.height, img.width});
    const std::size_t hw = std::size_t(img.height) * img.width;
    for (std::size_t i = 0; i < hw; ++i) {
        for (int c = 0; c < 3; ++c) {
            t->data[c * hw + i] = T(img.pixels[i * 3 + c]) / T(255);
        }
    }
    return t;
}

/// Quantize with round-half-up, clamped to [0,255].
template <typename T>
ImageBuffer tensor_to_image(const TensorT<T>& t) {
    if (t.shape.n != 1 || t.shape.c != 3) {
        throw DimensionError("tensor_to_image: expected [1,3,H,W], got " + t.shape.str());
    }
    ImageBuffer img = ImageBuffer::blank(t.shape.w, t.shape.h);
    const std::size_t hw = std::size_t(t.shape.h) * t.shape.w;
    for (std::size_t i = 0; i < hw; ++i) {
        for (int c = 0; c < 3; ++c) {
            const double v = std::floor(double(t.data[c * hw + i]) * 255.0 + 0.5);
            img.pixels[i * 3 + c] = std::uint8_t(std::min(255.0, std::max(0.0, v)));
        }
    }
    return img;
}

namespace detail {

struct PpmScanner {
    const std::uint8_t* base;
    std::size_t len;
    std::size_t pos = 0;

    // Whitespace between header tokens; '#' starts a comment to end of line.
    void skip_space_and_comments() {
        while (pos < len) {
            const char ch = char(base[pos]);
            if (ch == '#') {
                while (pos < len && base[pos] != '\n') ++pos;
            } else if (ch == ' ' || ch == '\t' || ch == '\r' || ch == '\n') {
                ++pos;
            } else {
                break;
            }
        }
    }

    int read_int(const char* what) {
        skip_space_and_comments();
        if (pos >= len || base[pos] < '0' || base[pos] > '9') {
            throw ImageError(ImageError::Code::Truncated,
                             std::string("ppm: expected integer for ") + what);
        }
        long v = 0;
        while (pos < len && base[pos] >= '0' && base[pos] <= '9') {
            v = v * 10 + (base[pos] - '0');
            if (v > 1 << 30) {
                throw ImageError(ImageError::Code::Truncated, "ppm: absurd header value");
            }
            ++pos;
        }
        return int(v);
    }
};

}  // namespace detail

inline ImageBuffer decode_ppm(const std::vector<std::uint8_t>& bytes) {
    detail::PpmScanner sc{bytes.data(), bytes.size()};
    if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') {
        throw ImageError(ImageError::Code::BadMagic, "ppm: bad magic (want P6)");
    }
    sc.pos = 2;
    const int w = sc.read_int("width");
    const int h = sc.read_int("height");
    const int maxval = sc.read_int("maxval");
    if (maxval != 255) {
        throw ImageError(ImageError::Code::BadMaxval,
                         "ppm: maxval " + std::to_string(maxval) + " unsupported (want 255)");
    }
    if (sc.pos >= sc.len) throw ImageError(ImageError::Code::Truncated, "ppm: missing payload");
    ++sc.pos;  // single whitespace byte after maxval
    const std::size_t need = std::size_t(w) * h * 3;
    if (sc.len - sc.pos < need) {
        throw ImageError(ImageError::Code::Truncated, "ppm: truncated payload");
    }
    ImageBuffer img = ImageBuffer::blank(w, h);
    std::copy_n(bytes.data() + sc.pos, need, img.pixels.data());
    return img;
}

inline std::vector<std::uint8_t> encode_ppm(const ImageBuffer& img) {
    const std::string header =
        "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.insert(out.end(), img.pixels.begin(), img.pixels.end());
    return out;
}

inline ImageBuffer read_ppm(const std::filesystem::path& path) {
    std::vector<std::uint8_t> bytes;
    try {
        bytes = WeightArchive::read_file(path);
    } catch (const ArchiveError& e) {
        throw ImageError(ImageError::Code::Io, e.what());
    }
    return decode_ppm(bytes);
}

inline void write_ppm(const ImageBuffer& img, const std::filesystem::path& path) {
    try {
        WeightArchive::write_file_atomic(path, encode_ppm(img));
    } catch (const ArchiveError& e) {
        throw ImageError(ImageError::Code::Io, e.what());
    }
}

// ---------------------------------------------------------------------------
// Atmospheric scattering model

template <typename T>
struct HazeParamsT {
    std::array<T, 3> airlight = {T(0.9), T(0.9), T(0.9)};
    T beta = T(1);
    TensorPtrT<T> depth;  // [1,1,H,W], non-negative
};

using HazeParams = HazeParamsT<float>;

/// I = clean*t + A*(1-t), t = exp(-beta*depth), clamped to [0,1].
template <typename T>
TensorPtrT<T> synthesize_haze(const TensorPtrT<T>& clean, const HazeParamsT<T>& hp) {
    const Shape s = clean->shape;
    if (s.n != 1 || s.c != 3) {
        throw DimensionError("synthesize_haze: clean must be [1,3,H,W]");
    }
    if (!hp.depth || hp.depth->shape != Shape{1, 1, s.h, s.w}) {
        throw DimensionError("synthesize_haze: depth must be [1,1,H,W] matching the image");
    }
    if (!(hp.beta >= T(0))) throw NumericError("synthesize_haze: beta must be >= 0");
    for (const T a : hp.airlight) {
        if (!std::isfinite(double(a))) throw NumericError("synthesize_haze: airlight not finite");
    }
    for (const T d : hp.depth->data) {
        if (!(d >= T(0))) throw NumericError("synthesize_haze: depth must be >= 0");
    }
    auto hazy = make_tensor<T>(s);
    const std::size_t hw = std::size_t(s.h) * s.w;
    for (std::size_t i = 0; i < hw; ++i) {
        const T t = std::exp(-hp.beta * hp.depth->data[i]);
        for (int c = 0; c < 3; ++c) {
            T v = clean->data[c * hw + i] * t + hp.airlight[c] * (T(1) - t);
            hazy->data[c * hw + i] = std::min(T(1), std::max(T(0), v));
        }
    }
    return hazy;
}

// ---------------------------------------------------------------------------
// Depth fields and procedural test scenes

enum class DepthKind { ramp, radial, smooth_noise };

inline DepthKind depth_kind_from_string(const std::string& s) {
    if (s == "ramp") return DepthKind::ramp;
    if (s == "radial") return DepthKind::radial;
    if (s == "smooth-noise") return DepthKind::smooth_noise;
    throw DimensionError("unknown depth kind '" + s + "'");
}

inline const char* depth_kind_name(DepthKind k) {
    switch (k) {
        case DepthKind::ramp: return "ramp";
        case DepthKind::radial: return "radial";
        default: return "smooth-noise";
    }
}

namespace detail {

// 7x7 box blur with border renormalization; keeps values in [0,1].
template <typename T>
void box_blur7(std::vector<T>& field, int h, int w) {
    std::vector<T> out(field.size());
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            int count = 0;
            for (int dy = -3; dy <= 3; ++dy) {
                const int yy = y + dy;
                if (yy < 0 || yy >= h) continue;
                for (int dx = -3; dx <= 3; ++dx) {
                    const int xx = x + dx;
                    if (xx < 0 || xx >= w) continue;
                    acc += double(field[std::size_t(yy) * w + xx]);
                    ++count;
                }
            }
            out[std::size_t(y) * w + x] = T(acc / count);
        }
    }
    field.swap(out);
}

template <typename T>
void normalize01(std::vector<T>& field) {
    T lo = field[0], hi = field[0];
    for (const T v : field) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const T span = hi - lo;
    if (span <= T(0)) {
        std::fill(field.begin(), field.end(), T(0));
        return;
    }
    for (auto& v : field) v = (v - lo) / span;
}

template <typename T>
std::vector<T> smooth_noise_field(int h, int w, std::mt19937& rng) {
    std::vector<T> field(std::size_t(h) * w);
    std::uniform_real_distribution<double> dist(0.0, 1.0);
    for (auto& v : field) v = T(dist(rng));
    for (int pass = 0; pass < 3; ++pass) box_blur7(field, h, w);
    normalize01(field);
    return field;
}

}  // namespace detail

/// Non-negative depth field normalized to [0,1]. Bitwise reproducible for a
/// fixed seed.
template <typename T = float>
TensorPtrT<T> gen_depth(DepthKind kind, int h, int w, std::uint64_t seed) {
    if (h < 1 || w < 1) throw DimensionError("gen_depth: dims must be positive");
    auto depth = make_tensor<T>({1, 1, h, w});
    switch (kind) {
        case DepthKind::ramp:
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x)
                    depth->at(0, 0, y, x) = w == 1 ? T(0) : T(x) / T(w - 1);
            break;
        case DepthKind::radial: {
            const double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
            const double rmax = std::max(1e-12, std::hypot(cy, cx));
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x)
                    depth->at(0, 0, y, x) = T(std::hypot(y - cy, x - cx) / rmax);
            break;
        }
        case DepthKind::smooth_noise: {
            std::mt19937 rng{std::uint32_t(seed)};
            auto field = detail::smooth_noise_field<T>(h, w, rng);
            std::copy(field.begin(), field.end(), depth->data.begin());
            break;
        }
    }
    return depth;
}

/// Seeded synthetic scene: smooth per-channel background with a handful of
/// solid rectangles and discs for edges and structure. Values in [0,1].
template <typename T = float>
TensorPtrT<T> gen_procedural_image(int h, int w, std::uint64_t seed) {
    if (h < 1 || w < 1) throw DimensionError("gen_procedural_image: dims must be positive");
    std::mt19937 rng{std::uint32_t(seed)};
    auto img = make_tensor<T>({1, 3, h, w});
    const std::size_t hw = std::size_t(h) * w;
    for (int c = 0; c < 3; ++c) {
        auto field = detail::smooth_noise_field<T>(h, w, rng);
        for (std::size_t i = 0; i < hw; ++i) {
            img->data[c * hw + i] = T(0.15) + T(0.7) * field[i];
        }
    }
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const int rects = 3 + int(rng() % 3);
    for (int r = 0; r < rects; ++r) {
        const int x0 = int(rng() % std::uint32_t(w));
        const int y0 = int(rng() % std::uint32_t(h));
        const int rw = 1 + int(rng() % std::uint32_t(std::max(1, w / 2)));
        const int rh = 1 + int(rng() % std::uint32_t(std::max(1, h / 2)));
        const std::array<T, 3> color = {T(unit(rng)), T(unit(rng)), T(unit(rng))};
        for (int y = y0; y < std::min(h, y0 + rh); ++y)
            for (int x = x0; x < std::min(w, x0 + rw); ++x)
                for (int c = 0; c < 3; ++c) img->data[c * hw + std::size_t(y) * w + x] = color[c];
    }
    const int discs = 2 + int(rng() % 3);
    for (int d = 0; d < discs; ++d) {
        const int cx = int(rng() % std::uint32_t(w));
        const int cy = int(rng() % std::uint32_t(h));
        const int radius = 1 + int(rng() % std::uint32_t(std::max(1, std::min(h, w) / 3)));
        const std::array<T, 3> color = {T(unit(rng)), T(unit(rng)), T(unit(rng))};
        for (int y = std::max(0, cy - radius); y < std::min(h, cy + radius + 1); ++y)
            for (int x = std::max(0, cx - radius); x < std::min(w, cx + radius + 1); ++x) {
                if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= radius * radius) {
                    for (int c = 0; c < 3; ++c) img->data[c * hw + std::size_t(y) * w + x] = color[c];
                }
            }
    }
    return img;
}

// ---------------------------------------------------------------------------
// Metrics (full image, no border cropping, dynamic range 1.0)

/// 10*log10(1/MSE) over all RGB pixels; +inf for identical inputs.
template <typename T>
double psnr(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.shape != b.shape) {
        throw DimensionError("psnr: shape " + a.shape.str() + " != " + b.shape.str());
    }
    if (a.numel() == 0) throw DimensionError("psnr: empty tensors");
    double mse = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        const double d = double(a.data[i]) - double(b.data[i]);
        mse += d * d;
    }
    mse /= double(a.numel());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(1.0 / mse);
}

namespace detail {

inline const std::vector<double>& ssim_window() {
    static const std::vector<double> win = [] {
        std::vector<double> w(11 * 11);
        const double sigma = 1.5;
        double total = 0.0;
        for (int y = 0; y < 11; ++y) {
            for (int x = 0; x < 11; ++x) {
                const double dy = y - 5, dx = x - 5;
                w[y * 11 + x] = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
                total += w[y * 11 + x];
            }
        }
        for (auto& v : w) v /= total;
        return w;
    }();
    return win;
}

}  // namespace detail

/// Mean SSIM with an 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03,
/// dynamic range 1.0. Computed per channel over valid windows (no padding),
/// then averaged across channels.
template <typename T>
double ssim(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.shape != b.shape) {
        throw DimensionError("ssim: shape " + a.shape.str() + " != " + b.shape.str());
    }
    const int h = a.shape.h, w = a.shape.w;
    if (h < 11 || w < 11) {
        throw DimensionError("ssim: image smaller than the 11x11 window");
    }
    const auto& win = detail::ssim_window();
    const double c1 = 0.01 * 0.01;
    const double c2 = 0.03 * 0.03;
    const std::size_t hw = std::size_t(h) * w;

    double channel_mean = 0.0;
    const int channels = a.shape.n * a.shape.c;
    for (int ch = 0; ch < channels; ++ch) {
        const T* pa = a.data.data() + std::size_t(ch) * hw;
        const T* pb = b.data.data() + std::size_t(ch) * hw;
        double acc = 0.0;
        std::size_t count = 0;
        for (int y = 0; y + 11 <= h; ++y) {
            for (int x = 0; x + 11 <= w; ++x) {
                double mu_a = 0, mu_b = 0, aa = 0, bb = 0, ab = 0;
                for (int wy = 0; wy < 11; ++wy) {
                    for (int wx = 0; wx < 11; ++wx) {
                        const double g = win[wy * 11 + wx];
                        const double va = double(pa[std::size_t(y + wy) * w + (x + wx)]);
                        const double vb = double(pb[std::size_t(y + wy) * w + (x + wx)]);
                        mu_a += g * va;
                        mu_b += g * vb;
                        aa += g * va * va;
                        bb += g * vb * vb;
                        ab += g * va * vb;
                    }
                }
                const double var_a = aa - mu_a * mu_a;
                const double var_b = bb - mu_b * mu_b;
                const double cov = ab - mu_a * mu_b;
                const double num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
                const double den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
                acc += num / den;
                ++count;
            }
        }
        channel_mean += acc / double(count);
    }
    return channel_mean / double(channels);
}

}  // namespace deanet
