#pragma once

// File and little-endian helpers shared by the on-disk formats.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace deformpic::io {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
std::string read_text(const std::filesystem::path& path);

/// Writes to `path.tmp` and renames over `path`.
void write_file_atomic(const std::filesystem::path& path, const void* data, std::size_t size);
void write_text_atomic(const std::filesystem::path& path, std::string_view text);

/// %.9g, or "nan".
std::string format_double(double v);

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v);
std::uint32_t get_u32(const std::uint8_t* p);

void put_f32s(std::vector<std::uint8_t>& out, std::span<const float> values);
void get_f32s(const std::uint8_t* p, std::span<float> out);

}  // namespace deformpic::io
