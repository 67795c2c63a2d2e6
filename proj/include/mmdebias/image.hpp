#pragma once

#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include <jpeglib.h>
#include <png.h>

#include "mmdebias/errors.hpp"
#include "mmdebias/io.hpp"

namespace mmdebias {

// 8-bit interleaved RGB, row-major. All decoding converts to this layout so
// downstream blending never branches on source format.
struct Image {
  int width = 0;
  int height = 0;
  static constexpr int channels = 3;
  std::vector<std::uint8_t> pixels;

  std::size_t size_bytes() const { return pixels.size(); }
  std::uint8_t* row(int y) {
    return pixels.data() + static_cast<std::size_t>(y) * static_cast<std::size_t>(width) * 3;
  }
  const std::uint8_t* row(int y) const {
    return pixels.data() + static_cast<std::size_t>(y) * static_cast<std::size_t>(width) * 3;
  }
};

inline Image make_image(int width, int height, std::uint8_t fill = 0) {
  if (width <= 0 || height <= 0) throw ConfigError("make_image: non-positive dimensions");
  Image im;
  im.width = width;
  im.height = height;
  im.pixels.assign(static_cast<std::size_t>(width) * static_cast<std::size_t>(height) * 3, fill);
  return im;
}

namespace detail {

struct JpegErrorTrap {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX] = {0};
};

inline void jpeg_error_trap(j_common_ptr cinfo) {
  auto* trap = reinterpret_cast<JpegErrorTrap*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, trap->message);
  std::longjmp(trap->jump, 1);
}

inline Image read_jpeg(const std::filesystem::path& path) {
  std::FILE* f = std::fopen(path.string().c_str(), "rb");
  if (!f) throw DataError("cannot open image: " + path.string());

  jpeg_decompress_struct cinfo;
  JpegErrorTrap trap;
  cinfo.err = jpeg_std_error(&trap.mgr);
  trap.mgr.error_exit = jpeg_error_trap;

  Image im;
  if (setjmp(trap.jump)) {
    jpeg_destroy_decompress(&cinfo);
    std::fclose(f);
    throw DataError("jpeg decode failed for " + path.string() + ": " + trap.message);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, f);
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  im.width = static_cast<int>(cinfo.output_width);
  im.height = static_cast<int>(cinfo.output_height);
  im.pixels.resize(static_cast<std::size_t>(im.width) * static_cast<std::size_t>(im.height) * 3);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW rows[1] = {im.row(static_cast<int>(cinfo.output_scanline))};
    jpeg_read_scanlines(&cinfo, rows, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  std::fclose(f);
  return im;
}

inline Image read_png(const std::filesystem::path& path) {
  png_image png;
  std::memset(&png, 0, sizeof png);
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.string().c_str()))
    throw DataError("png decode failed for " + path.string() + ": " + png.message);
  png.format = PNG_FORMAT_RGB;
  Image im;
  im.width = static_cast<int>(png.width);
  im.height = static_cast<int>(png.height);
  im.pixels.resize(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, im.pixels.data(), 0, nullptr)) {
    std::string msg = png.message;
    png_image_free(&png);
    throw DataError("png decode failed for " + path.string() + ": " + msg);
  }
  return im;
}

}  // namespace detail

// Dispatches on magic bytes, not extension.
inline Image read_image(const std::filesystem::path& path) {
  std::FILE* f = std::fopen(path.string().c_str(), "rb");
  if (!f) throw DataError("cannot open image: " + path.string());
  unsigned char magic[8] = {0};
  std::size_t got = std::fread(magic, 1, sizeof magic, f);
  std::fclose(f);
  if (got >= 8 && png_sig_cmp(magic, 0, 8) == 0) return detail::read_png(path);
  if (got >= 2 && magic[0] == 0xFF && magic[1] == 0xD8) return detail::read_jpeg(path);
  throw DataError("unrecognized image format: " + path.string());
}

// Counterfactual images are always written lossless so repeated pipeline runs
// produce byte-identical outputs.
inline void write_png(const std::filesystem::path& path, const Image& im) {
  if (im.width <= 0 || im.height <= 0 ||
      im.pixels.size() != static_cast<std::size_t>(im.width) * static_cast<std::size_t>(im.height) * 3)
    throw ShapeError("write_png: inconsistent image buffer");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  png_image png;
  std::memset(&png, 0, sizeof png);
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(im.width);
  png.height = static_cast<png_uint_32>(im.height);
  png.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&png, path.string().c_str(), 0, im.pixels.data(), 0, nullptr))
    throw DataError("png encode failed for " + path.string() + ": " + png.message);
}

// Output path for a sample's counterfactual image: original stem plus a fixed
// suffix, alongside the original file.
inline std::filesystem::path counterfactual_image_path(const std::filesystem::path& original) {
  std::filesystem::path out = original;
  out.replace_extension();
  out += ".cf.png";
  return out;
}

}  // namespace mmdebias
