#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "refsra/errors.hpp"
#include "refsra/tensor.hpp"

namespace refsra {

/// H x W x 3 image, values in [0,1], row-major with interleaved channels.
struct ImagePlane {
    int height = 0;
    int width = 0;
    std::vector<double> values;  // height * width * 3

    ImagePlane() = default;
    ImagePlane(int h, int w, double fill = 0.0)
        : height(h), width(w), values(static_cast<size_t>(h) * w * 3, fill) {}

    double& at(int y, int x, int c) { return values[(static_cast<size_t>(y) * width + x) * 3 + c]; }
    double at(int y, int x, int c) const {
        return values[(static_cast<size_t>(y) * width + x) * 3 + c];
    }
    bool in_unit_range() const {
        for (double v : values)
            if (!(v >= 0.0 && v <= 1.0)) return false;
        return true;
    }
};

inline Tensor to_tensor(const ImagePlane& img) {
    return Tensor::from({img.height, img.width, 3}, img.values);
}

/// Converts an HxWx3 tensor back to an image, clamping into [0,1].
inline ImagePlane image_from_tensor(const Tensor& t) {
    if (t.shape.size() != 3 || t.shape[2] != 3)
        throw ShapeError("image_from_tensor: expected HxWx3, got " + shape_str(t.shape));
    ImagePlane img(t.shape[0], t.shape[1]);
    const auto& v = t.values();
    for (size_t i = 0; i < v.size(); ++i) img.values[i] = std::clamp(v[i], 0.0, 1.0);
    return img;
}

namespace detail {

/// Reads one PNM token, skipping whitespace and '#' comments.
inline std::string pnm_token(std::istream& in) {
    std::string tok;
    int c;
    while ((c = in.get()) != EOF) {
        if (c == '#') {
            while ((c = in.get()) != EOF && c != '\n') {
            }
        } else if (!std::isspace(c)) {
            tok.push_back(static_cast<char>(c));
            while ((c = in.peek()) != EOF && !std::isspace(c) && c != '#')
                tok.push_back(static_cast<char>(in.get()));
            return tok;
        }
    }
    throw DataError("ppm: truncated header");
}

inline int pnm_int(std::istream& in, const char* what) {
    const std::string tok = pnm_token(in);
    try {
        size_t pos = 0;
        const int v = std::stoi(tok, &pos);
        if (pos != tok.size()) throw std::invalid_argument(tok);
        return v;
    } catch (const std::exception&) {
        throw DataError(std::string("ppm: malformed ") + what + " '" + tok + "'");
    }
}

}  // namespace detail

/// Loads a binary PPM (P6, maxval 255). 8-bit value v maps to v/255.
inline ImagePlane load_image(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open image file: " + path);
    if (detail::pnm_token(in) != "P6") throw DataError("ppm: not a P6 file: " + path);
    const int w = detail::pnm_int(in, "width");
    const int h = detail::pnm_int(in, "height");
    const int maxval = detail::pnm_int(in, "maxval");
    if (w <= 0 || h <= 0) throw DataError("ppm: non-positive dimensions in " + path);
    if (maxval != 255)
        throw DataError("ppm: unsupported maxval " + std::to_string(maxval) + " in " + path);
    in.get();  // single whitespace byte after the header
    std::vector<unsigned char> raw(static_cast<size_t>(h) * w * 3);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (static_cast<size_t>(in.gcount()) != raw.size())
        throw DataError("ppm: truncated payload in " + path);
    ImagePlane img(h, w);
    for (size_t i = 0; i < raw.size(); ++i) img.values[i] = raw[i] / 255.0;
    return img;
}

/// Saves as binary PPM (P6, maxval 255) with round-half-up quantization.
inline void save_image(const ImagePlane& img, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write image file: " + path);
    out << "P6\n" << img.width << " " << img.height << "\n255\n";
    std::vector<unsigned char> raw(img.values.size());
    for (size_t i = 0; i < raw.size(); ++i) {
        const double q = std::floor(img.values[i] * 255.0 + 0.5);
        raw[i] = static_cast<unsigned char>(std::clamp(q, 0.0, 255.0));
    }
    out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!out) throw DataError("ppm: short write to " + path);
}

/// size x size crop with top-left at (floor((H-size)/2), floor((W-size)/2)).
inline ImagePlane center_crop(const ImagePlane& img, int size) {
    if (size > img.height || size > img.width)
        throw ShapeError("center_crop: size " + std::to_string(size) + " exceeds image " +
                         std::to_string(img.height) + "x" + std::to_string(img.width));
    const int oy = (img.height - size) / 2;
    const int ox = (img.width - size) / 2;
    ImagePlane out(size, size);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = img.at(oy + y, ox + x, c);
    return out;
}

inline ImagePlane crop(const ImagePlane& img, int top, int left, int h, int w) {
    if (top < 0 || left < 0 || top + h > img.height || left + w > img.width)
        throw ShapeError("crop: window out of bounds");
    ImagePlane out(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = img.at(top + y, left + x, c);
    return out;
}

/// Catmull-Rom resampling with edge clamp, output clamped into [0,1].
/// Output dimensions are round(input * factor).
inline ImagePlane bicubic_resize(const ImagePlane& img, double factor) {
    const int oh = static_cast<int>(std::llround(img.height * factor));
    const int ow = static_cast<int>(std::llround(img.width * factor));
    if (oh < 1 || ow < 1)
        throw ShapeError("bicubic_resize: non-positive output size for factor " +
                         std::to_string(factor));
    Tensor t = bicubic_resize_op(to_tensor(img), oh, ow);
    return image_from_tensor(t);  // clamps into [0,1]
}

}  // namespace refsra
