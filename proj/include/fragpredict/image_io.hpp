#pragma once

#include <filesystem>

#include "fragpredict/imaging.hpp"

namespace fragpredict {

// Decodes an 8-bit grayscale or RGB PNG, or a binary PGM (P5, maxval 255).
// RGB input is converted with ToGrayscale. The format is sniffed from the
// file's magic bytes, not its extension.
GrayImage ReadGrayImage(const std::filesystem::path& path);

void WritePgm(const std::filesystem::path& path, const GrayImage& img);
void WritePng(const std::filesystem::path& path, const GrayImage& img);
void WritePng(const std::filesystem::path& path, const RgbImage& img);

}  // namespace fragpredict
