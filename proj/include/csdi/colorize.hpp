#pragma once

// Two-domain colorized-digit dataset construction over ingested grayscale
// images: label-dependent allowed color sets (drop three consecutive
// prototypes, wrap-around), biased mixture sampling, digit / background
// colorization, and deterministic per-image RNG streams. Ingestion reads
// big-endian IDX image/label files or a directory of PNGs; output is one PNG
// directory per domain plus a CSV manifest.

#include <png.h>

#include <algorithm>
#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "csdi/common.hpp"
#include "csdi/rng.hpp"

namespace csdi {

struct Rgb {
    int r = 0, g = 0, b = 0;
};

// Prototype pools; digit pool order d0..d9, background pool b0..b9.
inline const std::array<Rgb, 10>& default_digit_pool() {
    static const std::array<Rgb, 10> pool{{{255, 50, 50},
                                           {50, 50, 255},
                                           {50, 255, 50},
                                           {255, 255, 50},
                                           {255, 50, 255},
                                           {50, 255, 255},
                                           {255, 140, 50},
                                           {140, 50, 255},
                                           {0, 170, 170},
                                           {180, 160, 20}}};
    return pool;
}

// The background pool reuses the same prototypes with the documented reverse
// pairing b0 = yellow-ish ... b9 = magenta-ish.
inline const std::array<Rgb, 10>& default_bg_pool() {
    static const std::array<Rgb, 10> pool = [] {
        const auto& d = default_digit_pool();
        std::array<Rgb, 10> b{};
        // d0<->b3, d1<->b2, d2<->b1, d3<->b0, d4<->b9, d5<->b8, d6<->b7, d7<->b6, d8<->b5, d9<->b4
        b[3] = d[0];
        b[2] = d[1];
        b[1] = d[2];
        b[0] = d[3];
        b[9] = d[4];
        b[8] = d[5];
        b[7] = d[6];
        b[6] = d[7];
        b[5] = d[8];
        b[4] = d[9];
        return b;
    }();
    return pool;
}

struct ColorizeConfig {
    std::array<Rgb, 10> digit_pool = default_digit_pool();
    std::array<Rgb, 10> bg_pool = default_bg_pool();
    double p_digit = 0.8;
    double p_bg = 0.8;
    int removal_width = 3;
    double bg_mask_threshold = 0.1;  // intensity below this counts as background
    std::uint64_t seed = 0;
    std::size_t out_size = 32;  // images are resized to out_size x out_size

    void validate() const {
        if (p_digit < 0.0 || p_digit > 1.0 || p_bg < 0.0 || p_bg > 1.0)
            throw ConfigError("ColorizeConfig: mixture weights must lie in [0,1]");
        if (removal_width != 3) throw ConfigError("ColorizeConfig: removal width is fixed at 3");
    }
};

struct LabeledImage {
    std::size_t h = 0, w = 0;
    std::vector<double> gray;  // h*w in [0,1]; empty when rgb is set
    std::vector<double> rgb;   // h*w*3 in [0,1]; empty when gray is set
    int label = 0;
    int domain = 0;
};

// Label-dependent allowed set: pool indices minus {y, y+1, y+2} mod 10.
inline std::vector<int> allowed_set(int label, int pool_size = 10, int removal_width = 3) {
    if (label < 0 || label >= pool_size) throw ConfigError("allowed_set: label out of range");
    std::vector<int> out;
    for (int i = 0; i < pool_size; ++i) {
        bool removed = false;
        for (int k = 0; k < removal_width; ++k)
            if (i == (label + k) % pool_size) removed = true;
        if (!removed) out.push_back(i);
    }
    return out;
}

// With probability p, uniform over the true label's allowed set; otherwise a
// wrong label j != y is drawn uniformly and the color comes from j's set.
inline int sample_biased_color(int label, double p, Rng& rng) {
    if (rng.uniform() < p) {
        std::vector<int> allowed = allowed_set(label);
        return allowed[static_cast<std::size_t>(rng.below(allowed.size()))];
    }
    std::uint64_t off = rng.below(9);
    int j = static_cast<int>((static_cast<std::uint64_t>(label) + 1 + off) % 10);
    std::vector<int> allowed = allowed_set(j);
    return allowed[static_cast<std::size_t>(rng.below(allowed.size()))];
}

enum class ColorizeMode { digit, background };

// Digit mode scales the prototype by the stroke intensity (background stays
// black); background mode fills near-zero pixels with the prototype and
// renders the stroke in grayscale-as-white.
inline LabeledImage colorize(const LabeledImage& img, ColorizeMode mode, Rgb color,
                             double bg_mask_threshold = 0.1) {
    if (img.gray.empty()) throw ConfigError("colorize: expects a grayscale image");
    LabeledImage out;
    out.h = img.h;
    out.w = img.w;
    out.label = img.label;
    out.domain = img.domain;
    out.rgb.resize(img.h * img.w * 3);
    const double pr = color.r / 255.0, pg = color.g / 255.0, pb = color.b / 255.0;
    for (std::size_t i = 0; i < img.gray.size(); ++i) {
        const double t = img.gray[i];
        double r, g, b;
        if (mode == ColorizeMode::digit) {
            r = t * pr;
            g = t * pg;
            b = t * pb;
        } else {
            if (t < bg_mask_threshold) {
                r = pr;
                g = pg;
                b = pb;
            } else {
                r = g = b = t;
            }
        }
        out.rgb[3 * i] = r;
        out.rgb[3 * i + 1] = g;
        out.rgb[3 * i + 2] = b;
    }
    return out;
}

// ---- IDX ingestion ----------------------------------------------------------

namespace detail {

inline std::uint32_t read_be_u32(std::istream& in, const std::string& path, std::size_t offset) {
    unsigned char buf[4];
    if (!in.read(reinterpret_cast<char*>(buf), 4))
        throw IoError(path + ": truncated at offset " + std::to_string(offset));
    return (static_cast<std::uint32_t>(buf[0]) << 24) | (static_cast<std::uint32_t>(buf[1]) << 16) |
           (static_cast<std::uint32_t>(buf[2]) << 8) | static_cast<std::uint32_t>(buf[3]);
}

}  // namespace detail

inline std::vector<LabeledImage> load_idx(const std::string& image_path,
                                          const std::string& label_path,
                                          std::size_t limit = 0) {
    std::ifstream img_in(image_path, std::ios::binary);
    if (!img_in) throw IoError("cannot open IDX image file: " + image_path);
    std::ifstream lbl_in(label_path, std::ios::binary);
    if (!lbl_in) throw IoError("cannot open IDX label file: " + label_path);

    std::uint32_t magic = detail::read_be_u32(img_in, image_path, 0);
    if (magic != 0x00000803)
        throw IoError(image_path + ": bad image magic at offset 0 (got " + std::to_string(magic) + ")");
    std::uint32_t count = detail::read_be_u32(img_in, image_path, 4);
    std::uint32_t rows = detail::read_be_u32(img_in, image_path, 8);
    std::uint32_t cols = detail::read_be_u32(img_in, image_path, 12);

    std::uint32_t lmagic = detail::read_be_u32(lbl_in, label_path, 0);
    if (lmagic != 0x00000801)
        throw IoError(label_path + ": bad label magic at offset 0 (got " + std::to_string(lmagic) + ")");
    std::uint32_t lcount = detail::read_be_u32(lbl_in, label_path, 4);
    if (lcount != count) throw IoError("IDX image/label counts differ");

    if (limit > 0) count = static_cast<std::uint32_t>(std::min<std::size_t>(count, limit));
    std::vector<LabeledImage> out;
    out.reserve(count);
    std::vector<unsigned char> buf(rows * cols);
    for (std::uint32_t i = 0; i < count; ++i) {
        if (!img_in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size())))
            throw IoError(image_path + ": truncated at image " + std::to_string(i) + " (offset " +
                          std::to_string(16 + static_cast<std::size_t>(i) * buf.size()) + ")");
        char lab = 0;
        if (!lbl_in.read(&lab, 1))
            throw IoError(label_path + ": truncated at label " + std::to_string(i));
        LabeledImage img;
        img.h = rows;
        img.w = cols;
        img.label = static_cast<unsigned char>(lab);
        if (img.label > 9) throw IoError(label_path + ": label out of range at " + std::to_string(i));
        img.gray.resize(buf.size());
        for (std::size_t px = 0; px < buf.size(); ++px) img.gray[px] = buf[px] / 255.0;
        out.push_back(std::move(img));
    }
    return out;
}

// ---- PNG io -----------------------------------------------------------------

inline void write_png_rgb8(const std::string& path, const LabeledImage& img) {
    if (img.rgb.empty()) throw ConfigError("write_png_rgb8: expects an RGB image");
    FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) throw IoError("cannot open for writing: " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
        std::fclose(fp);
        throw IoError("libpng write failure: " + path);
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.w), static_cast<png_uint_32>(img.h), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<unsigned char> row(img.w * 3);
    for (std::size_t y = 0; y < img.h; ++y) {
        for (std::size_t x = 0; x < img.w * 3; ++x) {
            double v = img.rgb[y * img.w * 3 + x];
            v = std::min(1.0, std::max(0.0, v));
            row[x] = static_cast<unsigned char>(std::lround(v * 255.0));
        }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

// Reads a PNG as grayscale in [0,1] (RGB inputs are averaged).
inline LabeledImage read_png_gray(const std::string& path) {
    FILE* fp = std::fopen(path.c_str(), "rb");
    if (!fp) throw IoError("cannot open: " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
        std::fclose(fp);
        throw IoError("libpng read failure: " + path);
    }
    png_init_io(png, fp);
    png_read_info(png, info);
    png_set_expand(png);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);
    const std::size_t h = png_get_image_height(png, info);
    const std::size_t w = png_get_image_width(png, info);
    const std::size_t channels = png_get_channels(png, info);
    std::vector<unsigned char> row(w * channels);
    LabeledImage img;
    img.h = h;
    img.w = w;
    img.gray.resize(h * w);
    for (std::size_t y = 0; y < h; ++y) {
        png_read_row(png, row.data(), nullptr);
        for (std::size_t x = 0; x < w; ++x) {
            double acc = 0.0;
            for (std::size_t ch = 0; ch < channels; ++ch) acc += row[x * channels + ch];
            img.gray[y * w + x] = acc / (255.0 * static_cast<double>(channels));
        }
    }
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    return img;
}

// Bilinear resize of a grayscale image.
inline LabeledImage resize_gray(const LabeledImage& img, std::size_t out_h, std::size_t out_w) {
    if (img.gray.empty()) throw ConfigError("resize_gray: expects grayscale");
    LabeledImage out;
    out.h = out_h;
    out.w = out_w;
    out.label = img.label;
    out.domain = img.domain;
    out.gray.resize(out_h * out_w);
    if (img.h == out_h && img.w == out_w) {
        out.gray = img.gray;
        return out;
    }
    for (std::size_t y = 0; y < out_h; ++y) {
        double sy = (static_cast<double>(y) + 0.5) * static_cast<double>(img.h) /
                        static_cast<double>(out_h) -
                    0.5;
        sy = std::max(0.0, std::min(sy, static_cast<double>(img.h - 1)));
        std::size_t y0 = static_cast<std::size_t>(sy);
        std::size_t y1 = std::min(y0 + 1, img.h - 1);
        double fy = sy - static_cast<double>(y0);
        for (std::size_t x = 0; x < out_w; ++x) {
            double sx = (static_cast<double>(x) + 0.5) * static_cast<double>(img.w) /
                            static_cast<double>(out_w) -
                        0.5;
            sx = std::max(0.0, std::min(sx, static_cast<double>(img.w - 1)));
            std::size_t x0 = static_cast<std::size_t>(sx);
            std::size_t x1 = std::min(x0 + 1, img.w - 1);
            double fx = sx - static_cast<double>(x0);
            double v00 = img.gray[y0 * img.w + x0], v01 = img.gray[y0 * img.w + x1];
            double v10 = img.gray[y1 * img.w + x0], v11 = img.gray[y1 * img.w + x1];
            out.gray[y * out_w + x] =
                (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11);
        }
    }
    return out;
}

struct DatasetManifestRow {
    std::string filename;
    int label = 0;
    int domain = 0;
    int color_index = 0;
};

struct TwoDomainResult {
    std::vector<DatasetManifestRow> manifest;
    std::size_t count_per_domain = 0;
};

// Builds both domains from the same source images: domain 1 recolors the
// digit, domain 2 the background. Per-image RNG streams are derived from
// (seed, image index, domain role), so output is deterministic under any
// processing order and D and B are conditionally independent given the label.
inline TwoDomainResult build_two_domain_set(const std::vector<LabeledImage>& source,
                                            const ColorizeConfig& cfg, const std::string& out_dir) {
    cfg.validate();
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(out_dir) / "domain1");
    fs::create_directories(fs::path(out_dir) / "domain2");
    TwoDomainResult result;
    result.count_per_domain = source.size();
    std::ofstream manifest(fs::path(out_dir) / "manifest.csv");
    if (!manifest) throw IoError("cannot write manifest in " + out_dir);
    manifest << "filename,label,domain,color_index\n";
    char name[64];
    for (std::size_t i = 0; i < source.size(); ++i) {
        const LabeledImage& raw = source[i];
        if (raw.gray.empty()) throw ConfigError("build_two_domain_set: source must be grayscale");
        LabeledImage img = resize_gray(raw, cfg.out_size, cfg.out_size);

        Rng digit_rng(derive_seed(cfg.seed, i, 0));
        Rng bg_rng(derive_seed(cfg.seed, i, 1));
        int d_idx = sample_biased_color(raw.label, cfg.p_digit, digit_rng);
        int b_idx = sample_biased_color(raw.label, cfg.p_bg, bg_rng);

        LabeledImage dom1 = colorize(img, ColorizeMode::digit,
                                     cfg.digit_pool[static_cast<std::size_t>(d_idx)],
                                     cfg.bg_mask_threshold);
        dom1.domain = 1;
        LabeledImage dom2 = colorize(img, ColorizeMode::background,
                                     cfg.bg_pool[static_cast<std::size_t>(b_idx)],
                                     cfg.bg_mask_threshold);
        dom2.domain = 2;

        std::snprintf(name, sizeof(name), "%06zu.png", i);
        std::string f1 = (fs::path(out_dir) / "domain1" / name).string();
        std::string f2 = (fs::path(out_dir) / "domain2" / name).string();
        write_png_rgb8(f1, dom1);
        write_png_rgb8(f2, dom2);
        result.manifest.push_back({std::string("domain1/") + name, raw.label, 1, d_idx});
        result.manifest.push_back({std::string("domain2/") + name, raw.label, 2, b_idx});
        manifest << "domain1/" << name << ',' << raw.label << ",1," << d_idx << '\n';
        manifest << "domain2/" << name << ',' << raw.label << ",2," << b_idx << '\n';
    }
    return result;
}

// Exact enumeration of P(color in allowed_set(label)) under the mixture: with
// probability p the color is always allowed; otherwise the overlap of the
// wrong label's set with the true one decides.
inline double allowed_probability_exact(int label, double p) {
    std::vector<int> mine = allowed_set(label);
    double wrong_term = 0.0;
    for (int j = 0; j < 10; ++j) {
        if (j == label) continue;
        std::vector<int> theirs = allowed_set(j);
        int overlap = 0;
        for (int c : theirs)
            if (std::find(mine.begin(), mine.end(), c) != mine.end()) ++overlap;
        wrong_term += static_cast<double>(overlap) / static_cast<double>(theirs.size());
    }
    return p + (1.0 - p) * wrong_term / 9.0;
}

}  // namespace csdi
