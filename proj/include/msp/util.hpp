// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <string_view>

namespace msp {

using Rng = std::mt19937_64;

// SplitMix64 finalizer; used to derive independent stream seeds from a base
// seed and a stream index.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream);

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t v);
std::string file_digest(const std::filesystem::path& path);

std::string fixed6(double v);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view contents);

// Reads MSP_LOG_LEVEL (debug, info, warn, error) and configures the default
// spdlog logger accordingly. Safe to call more than once.
void init_logging();

} // namespace msp
