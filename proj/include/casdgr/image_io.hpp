#pragma once

#include "casdgr/tensor.hpp"

#include <filesystem>
#include <stdexcept>

namespace casdgr::io {

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Reads an 8- or 16-bit PNG into a C x H x W tensor scaled to [0, 1].
/// Grayscale (with or without alpha) yields C = 1, colour yields C = 3;
/// palette images are expanded and any alpha channel is dropped.
Tensor load_image(const std::filesystem::path& path);

/// Writes a 1 x H x W (grayscale) or 3 x H x W (RGB) tensor, clamped to
/// [0, 1] and rounded to the nearest code. bit_depth is 8 or 16.
void save_image(const Tensor& image, const std::filesystem::path& path, int bit_depth = 8);

}  // namespace casdgr::io
