// Copyright (C) 2026 The segguide Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "segguide/core.hpp"

namespace segguide {

using Bytes = std::vector<std::uint8_t>;

struct RawImage {
    int width = 0;
    int height = 0;
    int channels = 0;  // 1 (gray) or 3 (RGB)
    Bytes data;        // row-major, interleaved
};

/// Deterministic 8-bit PNG encoder (no timestamps or text chunks).
Bytes encode_png(const RawImage& raw);
RawImage decode_png(std::span<const std::uint8_t> bytes);

/// Binary PGM (P5, maxval <= 255).
Bytes encode_pgm(const RawImage& raw);
RawImage decode_pgm(std::span<const std::uint8_t> bytes);

/// PNG or PGM, chosen by magic bytes.
RawImage decode_raster(std::span<const std::uint8_t> bytes);

/// RGB PNG with channel values round(v * 255).
Bytes encode_png(const Image& image);
Image decode_image(std::span<const std::uint8_t> bytes);

struct EncodedMask {
    Bytes index_map;         // 8-bit single-channel PNG, pixel = class id
    std::string vocabulary;  // sidecar JSON
};

/// Lossless serialization of a hard mask.
EncodedMask encode_mask(const SegMask& mask, const ClassVocabulary& vocab);
SegMask decode_mask(std::span<const std::uint8_t> index_map, const ClassVocabulary& vocab);

Bytes read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_file(const std::filesystem::path& path, std::string_view text);

}  // namespace segguide
