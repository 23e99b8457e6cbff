// Copyright (C) 2026 The segguide Authors
// SPDX-License-Identifier: Apache-2.0

#include "segguide/image_io.hpp"

#include <csetjmp>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include <png.h>

namespace segguide {

namespace {

struct PngIo {
    Bytes* out = nullptr;
    std::span<const std::uint8_t> in;
    std::size_t offset = 0;
    char message[256] = {0};
};

void on_png_error(png_structp png, png_const_charp msg) {
    auto* io = static_cast<PngIo*>(png_get_error_ptr(png));
    std::snprintf(io->message, sizeof(io->message), "%s", msg);
    png_longjmp(png, 1);
}

void on_png_warning(png_structp, png_const_charp) {}

void on_png_write(png_structp png, png_bytep data, png_size_t length) {
    auto* io = static_cast<PngIo*>(png_get_io_ptr(png));
    io->out->insert(io->out->end(), data, data + length);
}

void on_png_flush(png_structp) {}

void on_png_read(png_structp png, png_bytep data, png_size_t length) {
    auto* io = static_cast<PngIo*>(png_get_io_ptr(png));
    if (io->offset + length > io->in.size()) {
        png_error(png, "truncated PNG stream");
    }
    std::memcpy(data, io->in.data() + io->offset, length);
    io->offset += length;
}

void check_raw(const RawImage& raw) {
    if (raw.width <= 0 || raw.height <= 0 || (raw.channels != 1 && raw.channels != 3)) {
        throw ShapeError("raster must have positive size and 1 or 3 channels");
    }
    if (raw.data.size() != static_cast<std::size_t>(raw.width) * raw.height * raw.channels) {
        throw ShapeError("raster byte count does not match its dimensions");
    }
}

std::uint8_t quantize(double v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace

Bytes encode_png(const RawImage& raw) {
    check_raw(raw);
    Bytes out;
    PngIo io;
    io.out = &out;
    std::vector<png_bytep> rows(static_cast<std::size_t>(raw.height));
    for (int y = 0; y < raw.height; ++y) {
        rows[static_cast<std::size_t>(y)] =
            const_cast<png_bytep>(raw.data.data() + static_cast<std::size_t>(y) * raw.width * raw.channels);
    }

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &io, on_png_error, on_png_warning);
    if (png == nullptr) {
        throw Error("png_create_write_struct failed");
    }
    png_infop info = png_create_info_struct(png);
    if (info == nullptr) {
        png_destroy_write_struct(&png, nullptr);
        throw Error("png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw Error(std::string("PNG encode failed: ") + io.message);
    }
    png_set_write_fn(png, &io, on_png_write, on_png_flush);
    png_set_IHDR(png, info, static_cast<png_uint_32>(raw.width), static_cast<png_uint_32>(raw.height), 8,
                 raw.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_set_compression_level(png, 9);
    png_set_rows(png, info, rows.data());
    png_write_png(png, info, PNG_TRANSFORM_IDENTITY, nullptr);
    png_destroy_write_struct(&png, &info);
    return out;
}

RawImage decode_png(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) {
        throw Error("not a PNG stream");
    }
    RawImage raw;
    PngIo io;
    io.in = bytes;
    std::vector<png_bytep> rows;

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &io, on_png_error, on_png_warning);
    if (png == nullptr) {
        throw Error("png_create_read_struct failed");
    }
    png_infop info = png_create_info_struct(png);
    if (info == nullptr) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw Error("png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw Error(std::string("PNG decode failed: ") + io.message);
    }
    png_set_read_fn(png, &io, on_png_read);
    png_read_info(png, info);

    const auto color_type = png_get_color_type(png, info);
    const auto bit_depth = png_get_bit_depth(png, info);
    // Palette images keep their raw indices: index-map masks are often
    // stored that way.
    if (bit_depth == 16) {
        png_set_strip_16(png);
    }
    if (bit_depth < 8) {
        png_set_packing(png);
        if (color_type == PNG_COLOR_TYPE_GRAY) {
            png_set_expand_gray_1_2_4_to_8(png);
        }
    }
    if (color_type & PNG_COLOR_MASK_ALPHA) {
        png_set_strip_alpha(png);
    }
    png_read_update_info(png, info);

    raw.width = static_cast<int>(png_get_image_width(png, info));
    raw.height = static_cast<int>(png_get_image_height(png, info));
    raw.channels = static_cast<int>(png_get_channels(png, info));
    raw.data.resize(static_cast<std::size_t>(png_get_rowbytes(png, info)) * raw.height);
    rows.resize(static_cast<std::size_t>(raw.height));
    for (int y = 0; y < raw.height; ++y) {
        rows[static_cast<std::size_t>(y)] = raw.data.data() + static_cast<std::size_t>(y) * png_get_rowbytes(png, info);
    }
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);

    if (raw.channels != 1 && raw.channels != 3) {
        throw ShapeError("unsupported PNG channel count " + std::to_string(raw.channels));
    }
    return raw;
}

Bytes encode_pgm(const RawImage& raw) {
    check_raw(raw);
    if (raw.channels != 1) {
        throw ShapeError("PGM holds single-channel rasters only");
    }
    const std::string header = "P5\n" + std::to_string(raw.width) + " " + std::to_string(raw.height) + "\n255\n";
    Bytes out(header.begin(), header.end());
    out.insert(out.end(), raw.data.begin(), raw.data.end());
    return out;
}

RawImage decode_pgm(std::span<const std::uint8_t> bytes) {
    std::size_t pos = 0;
    auto skip_space = [&] {
        while (pos < bytes.size()) {
            if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') {
                    ++pos;
                }
            } else if (std::isspace(bytes[pos])) {
                ++pos;
            } else {
                break;
            }
        }
    };
    auto read_int = [&] {
        skip_space();
        long value = 0;
        const std::size_t start = pos;
        while (pos < bytes.size() && std::isdigit(bytes[pos])) {
            value = value * 10 + (bytes[pos] - '0');
            if (value > 1'000'000) {
                throw Error("PGM header value too large");
            }
            ++pos;
        }
        if (pos == start) {
            throw Error("malformed PGM header");
        }
        return static_cast<int>(value);
    };
    if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') {
        throw Error("not a binary PGM stream");
    }
    pos = 2;
    RawImage raw;
    raw.width = read_int();
    raw.height = read_int();
    const int maxval = read_int();
    if (maxval <= 0 || maxval > 255) {
        throw Error("PGM maxval must be in 1..255");
    }
    ++pos;  // single whitespace before the raster
    raw.channels = 1;
    const auto count = static_cast<std::size_t>(raw.width) * raw.height;
    if (raw.width <= 0 || raw.height <= 0 || pos + count > bytes.size()) {
        throw Error("truncated PGM raster");
    }
    raw.data.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                    bytes.begin() + static_cast<std::ptrdiff_t>(pos + count));
    return raw;
}

RawImage decode_raster(std::span<const std::uint8_t> bytes) {
    if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '5') {
        return decode_pgm(bytes);
    }
    return decode_png(bytes);
}

Bytes encode_png(const Image& image) {
    RawImage raw;
    raw.width = image.width();
    raw.height = image.height();
    raw.channels = 3;
    raw.data.resize(static_cast<std::size_t>(image.pixel_count()) * 3);
    const auto& px = image.pixels();
    for (Eigen::Index p = 0; p < image.pixel_count(); ++p) {
        for (int c = 0; c < 3; ++c) {
            raw.data[static_cast<std::size_t>(p) * 3 + static_cast<std::size_t>(c)] = quantize(px(c, p));
        }
    }
    return encode_png(raw);
}

Image decode_image(std::span<const std::uint8_t> bytes) {
    const RawImage raw = decode_raster(bytes);
    Image::Pixels px(3, static_cast<Eigen::Index>(raw.width) * raw.height);
    for (Eigen::Index p = 0; p < px.cols(); ++p) {
        for (int c = 0; c < 3; ++c) {
            const int channel = raw.channels == 1 ? 0 : c;
            px(c, p) = raw.data[static_cast<std::size_t>(p) * raw.channels + static_cast<std::size_t>(channel)] / 255.0;
        }
    }
    return Image(raw.width, raw.height, std::move(px));
}

EncodedMask encode_mask(const SegMask& mask, const ClassVocabulary& vocab) {
    if (!mask.is_hard()) {
        throw RangeError("mask must be hard for serialization");
    }
    if (mask.num_classes() != vocab.size()) {
        throw ShapeError("mask has " + std::to_string(mask.num_classes()) + " planes but vocabulary has " +
                         std::to_string(vocab.size()) + " classes");
    }
    RawImage raw;
    raw.width = mask.width();
    raw.height = mask.height();
    raw.channels = 1;
    const auto labels = mask.labels();
    raw.data.assign(labels.begin(), labels.end());
    return EncodedMask{encode_png(raw), vocab.to_json()};
}

SegMask decode_mask(std::span<const std::uint8_t> index_map, const ClassVocabulary& vocab) {
    const RawImage raw = decode_raster(index_map);
    if (raw.channels != 1) {
        throw ShapeError("mask index map must be single-channel");
    }
    std::vector<int> labels(raw.data.begin(), raw.data.end());
    for (int l : labels) {
        if (l >= vocab.size()) {
            throw RangeError("mask pixel value " + std::to_string(l) + " is not a class id (vocabulary size " +
                             std::to_string(vocab.size()) + ")");
        }
    }
    return SegMask::from_labels(raw.width, raw.height, vocab.size(), labels);
}

Bytes read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw NotFoundError("cannot open " + path.string());
    }
    return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw Error("cannot write " + path.string());
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw Error("short write to " + path.string());
    }
}

void write_file(const std::filesystem::path& path, std::string_view text) {
    write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

}  // namespace segguide
