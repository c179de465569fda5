// SPDX-License-Identifier: Apache-2.0
#include "t4dg/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace t4dg {

void write_ppm(const std::string& path, const Image& img) {
    if (img.height <= 0 || img.width <= 0 ||
        img.rgb.size() != static_cast<size_t>(img.pixels()) * 3)
        throw IoError("write_ppm: malformed image");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("write_ppm: cannot open " + path);
    out << "P6\n" << img.width << " " << img.height << "\n255\n";
    std::vector<unsigned char> bytes(img.rgb.size());
    for (size_t i = 0; i < img.rgb.size(); ++i) {
        const float v = std::clamp(img.rgb[i], 0.0f, 1.0f);
        bytes[i] = static_cast<unsigned char>(std::lround(v * 255.0f));
    }
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write_ppm: short write to " + path);
}

namespace {

int read_ppm_token(std::istream& in, const std::string& path) {
    // Whitespace-separated decimal fields; '#' starts a comment to end of line.
    int ch = in.get();
    while (ch != EOF && (std::isspace(ch) || ch == '#')) {
        if (ch == '#')
            while (ch != EOF && ch != '\n') ch = in.get();
        ch = in.get();
    }
    if (ch == EOF || !std::isdigit(ch)) throw IoError("read_ppm: malformed header in " + path);
    int value = 0;
    while (ch != EOF && std::isdigit(ch)) {
        value = value * 10 + (ch - '0');
        ch = in.get();
    }
    return value;
}

} // namespace

Image read_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("read_ppm: cannot open " + path);
    char magic[2];
    in.read(magic, 2);
    if (!in || magic[0] != 'P' || magic[1] != '6')
        throw IoError("read_ppm: not a binary PPM: " + path);
    const int w = read_ppm_token(in, path);
    const int h = read_ppm_token(in, path);
    const int maxval = read_ppm_token(in, path);
    if (w <= 0 || h <= 0 || maxval != 255)
        throw IoError("read_ppm: unsupported PPM variant in " + path);
    std::vector<unsigned char> bytes(static_cast<size_t>(w) * h * 3);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!in) throw IoError("read_ppm: truncated pixel data in " + path);
    Image img(h, w);
    for (size_t i = 0; i < bytes.size(); ++i) img.rgb[i] = static_cast<float>(bytes[i]) / 255.0f;
    return img;
}

} // namespace t4dg
