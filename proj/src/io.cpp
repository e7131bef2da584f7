#include "modseg/io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <memory>

#include <png.h>

#include "modseg/error.hpp"

namespace modseg::io {

std::uint64_t fnv1a(std::span<const std::uint8_t> bytes, std::uint64_t seed) {
    std::uint64_t h = seed;
    for (auto b : bytes) {
        h ^= b;
        h *= 0x100000001b3ull;
    }
    return h;
}

std::uint64_t fnv1a(const std::string& text) {
    return fnv1a({reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

std::string hex64(std::uint64_t value) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(value));
    return buf;
}

std::uint64_t hash_image(const Image& image) {
    const std::array<std::int64_t, 2> dims{image.height(), image.width()};
    std::uint64_t h = fnv1a({reinterpret_cast<const std::uint8_t*>(dims.data()), sizeof dims});
    for (int c = 0; c < 3; ++c)
        h = fnv1a({reinterpret_cast<const std::uint8_t*>(image[c].data()), image[c].size() * sizeof(float)}, h);
    return h;
}

std::uint64_t hash_mask(const BinaryMask& mask) {
    const std::array<std::int64_t, 2> dims{mask.rows(), mask.cols()};
    const auto h = fnv1a({reinterpret_cast<const std::uint8_t*>(dims.data()), sizeof dims});
    return fnv1a({mask.data(), static_cast<std::size_t>(mask.size())}, h);
}

namespace {

static_assert(std::endian::native == std::endian::little, "tensor files assume a little-endian host");

template <typename T>
void put(std::ostream& os, T value) {
    os.write(reinterpret_cast<const char*>(&value), sizeof value);
}

template <typename T>
T get(std::istream& is, const std::filesystem::path& path) {
    T value{};
    if (!is.read(reinterpret_cast<char*>(&value), sizeof value))
        throw Error(ErrorKind::Io, "truncated tensor file " + path.string());
    return value;
}

}  // namespace

void write_tensor(const std::filesystem::path& path, const Tensor& tensor) {
    std::uint64_t n = 1;
    for (auto d : tensor.shape) n *= d;
    if (n != tensor.data.size()) throw Error(ErrorKind::Validation, "tensor shape does not match its data");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error(ErrorKind::Io, "cannot write " + path.string());
    os.write("MSGT", 4);
    put<std::uint32_t>(os, 1);
    put<std::uint32_t>(os, static_cast<std::uint32_t>(tensor.shape.size()));
    for (auto d : tensor.shape) put<std::uint64_t>(os, d);
    os.write(reinterpret_cast<const char*>(tensor.data.data()), static_cast<std::streamsize>(n * sizeof(float)));
}

Tensor read_tensor(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error(ErrorKind::Io, "cannot read " + path.string());
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "MSGT", 4) != 0)
        throw Error(ErrorKind::Io, path.string() + " is not a tensor file");
    if (get<std::uint32_t>(is, path) != 1) throw Error(ErrorKind::Io, "unsupported tensor version in " + path.string());
    const auto rank = get<std::uint32_t>(is, path);
    if (rank > 8) throw Error(ErrorKind::Io, "implausible tensor rank in " + path.string());
    Tensor t;
    std::uint64_t n = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
        t.shape.push_back(get<std::uint64_t>(is, path));
        n *= t.shape.back();
    }
    t.data.resize(n);
    if (!is.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(n * sizeof(float))))
        throw Error(ErrorKind::Io, "truncated tensor file " + path.string());
    return t;
}

std::vector<std::uint8_t> pack_bits(const BinaryMask& mask) {
    std::vector<std::uint8_t> out((mask.size() + 7) / 8, 0);
    for (Eigen::Index i = 0; i < mask.size(); ++i)
        if (mask(i)) out[i / 8] |= static_cast<std::uint8_t>(0x80u >> (i % 8));
    return out;
}

BinaryMask unpack_bits(std::span<const std::uint8_t> bytes, Eigen::Index height, Eigen::Index width) {
    if (static_cast<Eigen::Index>(bytes.size()) * 8 < height * width)
        throw Error(ErrorKind::Validation, "bitfield too short for the mask size");
    BinaryMask mask(height, width);
    for (Eigen::Index i = 0; i < mask.size(); ++i) mask(i) = (bytes[i / 8] >> (7 - i % 8)) & 1u;
    return mask;
}

namespace {

struct PngWriter {
    std::FILE* file = nullptr;
    png_structp png = nullptr;
    png_infop info = nullptr;

    explicit PngWriter(const std::filesystem::path& path) {
        file = std::fopen(path.c_str(), "wb");
        if (!file) throw Error(ErrorKind::Io, "cannot write " + path.string());
        png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
        info = png ? png_create_info_struct(png) : nullptr;
        if (!info) throw Error(ErrorKind::Io, "libpng initialisation failed");
        png_init_io(png, file);
    }
    ~PngWriter() {
        png_destroy_write_struct(&png, &info);
        if (file) std::fclose(file);
    }
};

struct PngReader {
    std::FILE* file = nullptr;
    png_structp png = nullptr;
    png_infop info = nullptr;

    explicit PngReader(const std::filesystem::path& path) {
        file = std::fopen(path.c_str(), "rb");
        if (!file) throw Error(ErrorKind::Io, "cannot read " + path.string());
        png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
        info = png ? png_create_info_struct(png) : nullptr;
        if (!info) throw Error(ErrorKind::Io, "libpng initialisation failed");
        png_init_io(png, file);
    }
    ~PngReader() {
        png_destroy_read_struct(&png, &info, nullptr);
        if (file) std::fclose(file);
    }
};

void write_rows(PngWriter& w, std::vector<std::uint8_t>& buffer, std::size_t stride, Eigen::Index height) {
    std::vector<png_bytep> rows(height);
    for (Eigen::Index i = 0; i < height; ++i) rows[i] = buffer.data() + i * stride;
    png_write_info(w.png, w.info);
    png_write_image(w.png, rows.data());
    png_write_end(w.png, nullptr);
}

}  // namespace

void write_png(const std::filesystem::path& path, const Image& image) {
    PngWriter w(path);
    if (setjmp(png_jmpbuf(w.png))) throw Error(ErrorKind::Io, "libpng failed writing " + path.string());
    const auto h = image.height(), wd = image.width();
    png_set_IHDR(w.png, w.info, static_cast<png_uint_32>(wd), static_cast<png_uint_32>(h), 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    std::vector<std::uint8_t> buffer(static_cast<std::size_t>(h * wd * 3));
    for (Eigen::Index i = 0; i < h; ++i)
        for (Eigen::Index j = 0; j < wd; ++j)
            for (int c = 0; c < 3; ++c)
                buffer[(i * wd + j) * 3 + c] =
                    static_cast<std::uint8_t>(std::lround(std::clamp(image[c](i, j), 0.0f, 1.0f) * 255.0f));
    write_rows(w, buffer, static_cast<std::size_t>(wd * 3), h);
}

void write_indexed_png(const std::filesystem::path& path, const LabelGrid& labels,
                       const std::vector<std::array<std::uint8_t, 3>>& palette) {
    if (palette.empty() || palette.size() > 256) throw Error(ErrorKind::Validation, "palette must hold 1..256 colors");
    if (labels.size() && (labels.minCoeff() < 0 || labels.maxCoeff() >= static_cast<int>(palette.size())))
        throw Error(ErrorKind::Validation, "label outside the palette");
    PngWriter w(path);
    if (setjmp(png_jmpbuf(w.png))) throw Error(ErrorKind::Io, "libpng failed writing " + path.string());
    png_set_IHDR(w.png, w.info, static_cast<png_uint_32>(labels.cols()), static_cast<png_uint_32>(labels.rows()), 8,
                 PNG_COLOR_TYPE_PALETTE, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    std::vector<png_color> colors(palette.size());
    for (std::size_t k = 0; k < palette.size(); ++k) colors[k] = {palette[k][0], palette[k][1], palette[k][2]};
    png_set_PLTE(w.png, w.info, colors.data(), static_cast<int>(colors.size()));
    std::vector<std::uint8_t> buffer(static_cast<std::size_t>(labels.size()));
    for (Eigen::Index p = 0; p < labels.size(); ++p) buffer[p] = static_cast<std::uint8_t>(labels(p));
    write_rows(w, buffer, static_cast<std::size_t>(labels.cols()), labels.rows());
}

namespace {

// Decodes to 8-bit samples; keeps palette indices when `keep_palette` is set.
std::vector<std::uint8_t> decode(PngReader& r, bool keep_palette, png_uint_32& width, png_uint_32& height,
                                 int& channels) {
    png_read_info(r.png, r.info);
    const int color = png_get_color_type(r.png, r.info);
    const int depth = png_get_bit_depth(r.png, r.info);
    if (depth == 16) png_set_strip_16(r.png);
    if (depth < 8) png_set_packing(r.png);
    if (color == PNG_COLOR_TYPE_PALETTE && !keep_palette) png_set_palette_to_rgb(r.png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8 && !keep_palette) png_set_expand_gray_1_2_4_to_8(r.png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(r.png);
    if (!keep_palette && (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA))
        png_set_gray_to_rgb(r.png);
    png_read_update_info(r.png, r.info);
    width = png_get_image_width(r.png, r.info);
    height = png_get_image_height(r.png, r.info);
    channels = png_get_channels(r.png, r.info);
    const std::size_t stride = png_get_rowbytes(r.png, r.info);
    std::vector<std::uint8_t> buffer(stride * height);
    std::vector<png_bytep> rows(height);
    for (png_uint_32 i = 0; i < height; ++i) rows[i] = buffer.data() + i * stride;
    png_read_image(r.png, rows.data());
    png_read_end(r.png, nullptr);
    return buffer;
}

}  // namespace

Image read_png(const std::filesystem::path& path) {
    PngReader r(path);
    if (setjmp(png_jmpbuf(r.png))) throw Error(ErrorKind::Io, "libpng failed reading " + path.string());
    png_uint_32 w = 0, h = 0;
    int channels = 0;
    const auto buffer = decode(r, false, w, h, channels);
    if (channels != 3) throw Error(ErrorKind::Io, "unexpected channel count in " + path.string());
    Image img(h, w);
    for (png_uint_32 i = 0; i < h; ++i)
        for (png_uint_32 j = 0; j < w; ++j)
            for (int c = 0; c < 3; ++c) img[c](i, j) = float(buffer[(std::size_t(i) * w + j) * 3 + c]) / 255.0f;
    return img;
}

LabelGrid read_label_png(const std::filesystem::path& path) {
    PngReader r(path);
    if (setjmp(png_jmpbuf(r.png))) throw Error(ErrorKind::Io, "libpng failed reading " + path.string());
    png_uint_32 w = 0, h = 0;
    int channels = 0;
    const auto buffer = decode(r, true, w, h, channels);
    if (channels != 1) throw Error(ErrorKind::Validation, path.string() + " is not a single-channel label image");
    LabelGrid labels(h, w);
    for (Eigen::Index p = 0; p < labels.size(); ++p) labels(p) = buffer[p];
    return labels;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error(ErrorKind::Io, "cannot write " + path.string());
    os << text;
}

std::string read_text(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error(ErrorKind::Io, "cannot read " + path.string());
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error(ErrorKind::Io, "cannot write " + path.string());
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error(ErrorKind::Io, "cannot read " + path.string());
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

}  // namespace modseg::io
