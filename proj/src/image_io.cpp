#include "fragpredict/image_io.hpp"

#include <png.h>

#include <array>
#include <cctype>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "fragpredict/error.hpp"

namespace fragpredict {

namespace {

std::vector<unsigned char> ReadAll(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIo, "cannot open image " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

GrayImage DecodePng(const std::vector<unsigned char>& bytes, const std::string& name) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
    throw Error(ErrorKind::kIo, "invalid PNG " + name + ": " + image.message);
  }
  if (image.format & PNG_FORMAT_FLAG_LINEAR) {
    png_image_free(&image);
    throw Error(ErrorKind::kIo, "unsupported PNG " + name + ": only 8-bit channels are accepted");
  }
  const bool color = (image.format & PNG_FORMAT_FLAG_COLOR) != 0;
  image.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  std::vector<png_byte> buffer(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw Error(ErrorKind::kIo, "failed to decode PNG " + name + ": " + msg);
  }
  const int w = static_cast<int>(image.width);
  const int h = static_cast<int>(image.height);
  if (color) {
    RgbImage rgb(w, h);
    rgb.data.assign(buffer.begin(), buffer.end());
    return ToGrayscale(rgb);
  }
  GrayImage gray(w, h);
  std::memcpy(gray.pixels.data(), buffer.data(), buffer.size());
  return gray;
}

GrayImage DecodePgm(const std::vector<unsigned char>& bytes, const std::string& name) {
  std::size_t pos = 2;
  auto next_int = [&]() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    long value = 0;
    const std::size_t start = pos;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      value = value * 10 + (bytes[pos] - '0');
      if (value > 1'000'000) throw Error(ErrorKind::kIo, "PGM header value too large in " + name);
      ++pos;
    }
    if (pos == start) throw Error(ErrorKind::kIo, "malformed PGM header in " + name);
    return static_cast<int>(value);
  };
  const int w = next_int();
  const int h = next_int();
  const int maxval = next_int();
  if (maxval != 255) {
    throw Error(ErrorKind::kIo, "unsupported PGM maxval " + std::to_string(maxval) + " in " + name);
  }
  ++pos;  // single whitespace before raster
  const std::size_t needed = static_cast<std::size_t>(w) * h;
  if (w < 1 || h < 1) throw Error(ErrorKind::kDimension, "zero-dimension PGM " + name);
  if (bytes.size() < pos + needed) throw Error(ErrorKind::kIo, "truncated PGM raster in " + name);
  GrayImage img(w, h);
  std::memcpy(img.pixels.data(), bytes.data() + pos, needed);
  return img;
}

void WritePngRaw(const std::filesystem::path& path, int w, int h, bool color, const void* data) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(w);
  image.height = static_cast<png_uint_32>(h);
  image.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&image, path.string().c_str(), 0, data, 0, nullptr)) {
    throw Error(ErrorKind::kIo, "failed to write PNG " + path.string() + ": " + image.message);
  }
}

}  // namespace

GrayImage ReadGrayImage(const std::filesystem::path& path) {
  const auto bytes = ReadAll(path);
  static constexpr std::array<unsigned char, 8> kPngMagic = {0x89, 'P', 'N', 'G', 0x0D, 0x0A, 0x1A, 0x0A};
  if (bytes.size() >= 8 && std::equal(kPngMagic.begin(), kPngMagic.end(), bytes.begin())) {
    return DecodePng(bytes, path.string());
  }
  if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '5') return DecodePgm(bytes, path.string());
  throw Error(ErrorKind::kIo, "unrecognized image format (expected PNG or P5 PGM): " + path.string());
}

void WritePgm(const std::filesystem::path& path, const GrayImage& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::kIo, "cannot write " + path.string());
  out << "P5\n" << img.width() << ' ' << img.height() << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()), img.pixels.size());
  if (!out) throw Error(ErrorKind::kIo, "short write to " + path.string());
}

void WritePng(const std::filesystem::path& path, const GrayImage& img) {
  WritePngRaw(path, img.width(), img.height(), false, img.pixels.data());
}

void WritePng(const std::filesystem::path& path, const RgbImage& img) {
  WritePngRaw(path, img.width, img.height, true, img.data.data());
}

}  // namespace fragpredict
