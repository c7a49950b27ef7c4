#include "gammadesk/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <sstream>

#include "gammadesk/errors.hpp"

namespace gammadesk::data {

namespace fs = std::filesystem;

Tensor raster_to_tensor(const Raster& r) {
  if (r.channels != 3) throw IngestionError("expected 3 channels, got " + std::to_string(r.channels));
  const std::size_t hw = r.width * r.height;
  Tensor t = Tensor::zeros({3, r.height, r.width});
  for (std::size_t i = 0; i < hw; ++i)
    for (std::size_t c = 0; c < 3; ++c) t[c * hw + i] = static_cast<double>(r.pixels[i * 3 + c]) / 127.5 - 1.0;
  return t;
}

Raster tensor_to_raster(const Tensor& image) {
  if (image.rank() != 3 || (image.dim(0) != 3 && image.dim(0) != 1))
    throw ShapeError("expected a [3,H,W] or [1,H,W] image, got " + shape_str(image.shape()));
  Raster r{image.dim(2), image.dim(1), image.dim(0), {}};
  const std::size_t hw = r.width * r.height;
  r.pixels.resize(hw * r.channels);
  for (std::size_t i = 0; i < hw; ++i)
    for (std::size_t c = 0; c < r.channels; ++c) {
      const double v = std::clamp(image[c * hw + i], -1.0, 1.0);
      r.pixels[i * r.channels + c] = static_cast<std::uint8_t>(std::lround((v + 1.0) * 127.5));
    }
  return r;
}

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};

}  // namespace

Raster read_png(const fs::path& path) {
  std::unique_ptr<std::FILE, FileCloser> fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw IngestionError(path.string() + ": cannot open");
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0)
    throw IngestionError(path.string() + ": not a PNG file");

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IngestionError(path.string() + ": libpng init failed");
  }
  Raster r;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IngestionError(path.string() + ": corrupt PNG data");
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const auto color = png_get_color_type(png, info);
  const auto depth = png_get_bit_depth(png, info);
  if (depth != 8 || (color != PNG_COLOR_TYPE_RGB && color != PNG_COLOR_TYPE_GRAY)) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IngestionError(path.string() + ": only 8-bit RGB or gray PNG is supported");
  }
  r.width = png_get_image_width(png, info);
  r.height = png_get_image_height(png, info);
  r.channels = color == PNG_COLOR_TYPE_RGB ? 3 : 1;
  r.pixels.resize(r.width * r.height * r.channels);
  rows.resize(r.height);
  for (std::size_t y = 0; y < r.height; ++y) rows[y] = r.pixels.data() + y * r.width * r.channels;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return r;
}

void write_png(const fs::path& path, const Raster& r) {
  if (r.channels != 3 && r.channels != 1) throw ContractError("write_png: 1 or 3 channels only");
  std::unique_ptr<std::FILE, FileCloser> fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw IngestionError(path.string() + ": cannot open for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IngestionError(path.string() + ": libpng init failed");
  }
  std::vector<png_bytep> rows(r.height);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IngestionError(path.string() + ": PNG encoding failed");
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(r.width), static_cast<png_uint_32>(r.height), 8,
               r.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < r.height; ++y)
    rows[y] = const_cast<png_bytep>(r.pixels.data() + y * r.width * r.channels);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Raster read_ppm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError(path.string() + ": cannot open");
  auto token = [&]() {
    std::string t;
    char c;
    while (in.get(c)) {
      if (c == '#') {
        std::string skip;
        std::getline(in, skip);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(c))) {
        if (!t.empty()) break;
        continue;
      }
      t.push_back(c);
    }
    return t;
  };
  const std::string magic = token();
  if (magic != "P6") throw IngestionError(path.string() + ": only binary P6 PPM is supported");
  Raster r;
  try {
    r.width = std::stoul(token());
    r.height = std::stoul(token());
    if (std::stoul(token()) != 255) throw IngestionError(path.string() + ": maxval must be 255");
  } catch (const std::logic_error&) {
    throw IngestionError(path.string() + ": malformed PPM header");
  }
  r.channels = 3;
  r.pixels.resize(r.width * r.height * 3);
  in.read(reinterpret_cast<char*>(r.pixels.data()), static_cast<std::streamsize>(r.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(r.pixels.size()))
    throw IngestionError(path.string() + ": truncated PPM payload");
  return r;
}

void write_ppm(const fs::path& path, const Raster& r) {
  if (r.channels != 3) throw ContractError("write_ppm: RGB only");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IngestionError(path.string() + ": cannot open for writing");
  out << "P6\n" << r.width << ' ' << r.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(r.pixels.data()), static_cast<std::streamsize>(r.pixels.size()));
}

namespace {

bool is_ppm(const fs::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".ppm";
}

}  // namespace

Tensor load_image(const fs::path& path) {
  Raster r = is_ppm(path) ? read_ppm(path) : read_png(path);
  if (r.channels != 3)
    throw IngestionError(path.string() + ": expected 3 channels, got " + std::to_string(r.channels));
  return raster_to_tensor(r);
}

void save_image(const fs::path& path, const Tensor& image) {
  Raster r = tensor_to_raster(image);
  if (is_ppm(path))
    write_ppm(path, r);
  else
    write_png(path, r);
}

Tensor resize_bilinear(const Tensor& image, std::size_t out_h, std::size_t out_w) {
  if (image.rank() != 3) throw ShapeError("resize expects [C,H,W], got " + shape_str(image.shape()));
  if (out_h == 0 || out_w == 0) throw ContractError("resize target must be positive");
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (h == out_h && w == out_w) return image;
  Tensor out = Tensor::zeros({c, out_h, out_w});
  const double sy = static_cast<double>(h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(w) / static_cast<double>(out_w);
  for (std::size_t oy = 0; oy < out_h; ++oy) {
    const double fy = std::clamp((static_cast<double>(oy) + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
    const std::size_t y0 = static_cast<std::size_t>(fy), y1 = std::min(y0 + 1, h - 1);
    const double ly = fy - static_cast<double>(y0);
    for (std::size_t ox = 0; ox < out_w; ++ox) {
      const double fx = std::clamp((static_cast<double>(ox) + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
      const std::size_t x0 = static_cast<std::size_t>(fx), x1 = std::min(x0 + 1, w - 1);
      const double lx = fx - static_cast<double>(x0);
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double* p = image.ptr() + ch * h * w;
        out[(ch * out_h + oy) * out_w + ox] = (1 - ly) * ((1 - lx) * p[y0 * w + x0] + lx * p[y0 * w + x1]) +
                                              ly * ((1 - lx) * p[y1 * w + x0] + lx * p[y1 * w + x1]);
      }
    }
  }
  return out;
}

std::pair<std::size_t, std::size_t> shorter_side_size(std::size_t h, std::size_t w, std::size_t target) {
  if (target == 0) throw ContractError("resize_shorter_side: target must be >= 1");
  if (h <= w) {
    const auto nw = static_cast<std::size_t>(std::llround(static_cast<double>(w) * target / static_cast<double>(h)));
    return {target, std::max<std::size_t>(nw, 1)};
  }
  const auto nh = static_cast<std::size_t>(std::llround(static_cast<double>(h) * target / static_cast<double>(w)));
  return {std::max<std::size_t>(nh, 1), target};
}

Tensor resize_shorter_side(const Tensor& image, std::size_t target) {
  if (image.rank() != 3) throw ShapeError("resize expects [C,H,W], got " + shape_str(image.shape()));
  auto [h, w] = shorter_side_size(image.dim(1), image.dim(2), target);
  return resize_bilinear(image, h, w);
}

}  // namespace gammadesk::data
