#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "hitm/tensor.hpp"

// Binary PPM (P6) image I/O plus the byte<->tensor conversions shared with
// the stream module. Images are CHW tensors in [0,1]; bytes map in as b/255
// and out as round(clamp(v,0,1)*255).

namespace hitm {

inline std::vector<unsigned char> to_rgb24(const Tensor& image) {
    if (image.rank() != 3 || image.shape[0] != 3)
        throw std::invalid_argument("to_rgb24: need a 3xHxW tensor, got " +
                                    image.shape_string());
    const std::size_t h = image.shape[1], w = image.shape[2];
    std::vector<unsigned char> bytes(3 * h * w);
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                const double v = std::clamp(image.at3(c, y, x), 0.0, 1.0);
                bytes[(y * w + x) * 3 + c] =
                    static_cast<unsigned char>(std::lround(v * 255.0));
            }
    return bytes;
}

inline Tensor from_rgb24(const unsigned char* bytes, std::size_t width,
                         std::size_t height) {
    Tensor image({3, height, width});
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < height; ++y)
            for (std::size_t x = 0; x < width; ++x)
                image.at3(c, y, x) = bytes[(y * width + x) * 3 + c] / 255.0;
    return image;
}

namespace detail {

inline std::string ppm_token(std::istream& in) {
    // Whitespace-separated token; '#' starts a comment running to end of line.
    int ch = in.get();
    while (ch != EOF && (std::isspace(ch) || ch == '#')) {
        if (ch == '#')
            while (ch != EOF && ch != '\n') ch = in.get();
        ch = in.get();
    }
    std::string token;
    while (ch != EOF && !std::isspace(ch)) {
        token.push_back(static_cast<char>(ch));
        ch = in.get();
    }
    if (ch != EOF) in.unget();  // leave the delimiter for the separator check
    if (token.empty()) throw std::runtime_error("ppm: truncated header");
    return token;
}

inline std::size_t ppm_number(std::istream& in, const char* what) {
    const std::string token = ppm_token(in);
    std::size_t value = 0;
    for (char c : token) {
        if (c < '0' || c > '9')
            throw std::runtime_error(std::string("ppm: bad ") + what + " '" +
                                     token + "'");
        value = value * 10 + static_cast<std::size_t>(c - '0');
        if (value > (1u << 20))
            throw std::runtime_error(std::string("ppm: ") + what +
                                     " out of range");
    }
    return value;
}

}  // namespace detail

inline Tensor load_ppm(std::istream& in) {
    char magic[2] = {0, 0};
    in.read(magic, 2);
    if (in.gcount() != 2 || magic[0] != 'P' || magic[1] != '6')
        throw std::runtime_error("ppm: bad magic, expected P6");
    const std::size_t width = detail::ppm_number(in, "width");
    const std::size_t height = detail::ppm_number(in, "height");
    const std::size_t maxval = detail::ppm_number(in, "maxval");
    if (width == 0 || height == 0)
        throw std::runtime_error("ppm: zero dimension");
    if (maxval != 255)
        throw std::runtime_error("ppm: unsupported maxval " +
                                 std::to_string(maxval));
    if (width > std::numeric_limits<std::size_t>::max() / (3 * height))
        throw std::runtime_error("ppm: size overflow");
    // Exactly one whitespace byte separates the header from the payload.
    const int sep = in.get();
    if (sep == EOF || !std::isspace(sep))
        throw std::runtime_error("ppm: missing header separator");

    std::vector<unsigned char> bytes(3 * width * height);
    in.read(reinterpret_cast<char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    if (static_cast<std::size_t>(in.gcount()) != bytes.size())
        throw std::runtime_error("ppm: truncated payload, expected " +
                                 std::to_string(bytes.size()) + " bytes");
    return from_rgb24(bytes.data(), width, height);
}

inline Tensor load_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("ppm: cannot open " + path);
    try {
        return load_ppm(in);
    } catch (const std::runtime_error& e) {
        throw std::runtime_error(path + ": " + e.what());
    }
}

inline void save_ppm(std::ostream& out, const Tensor& image) {
    const std::vector<unsigned char> bytes = to_rgb24(image);
    out << "P6\n" << image.shape[2] << ' ' << image.shape[1] << "\n255\n";
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("ppm: write failed");
}

inline void save_ppm(const std::string& path, const Tensor& image) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("ppm: cannot open " + path + " for write");
    save_ppm(out, image);
}

}  // namespace hitm
