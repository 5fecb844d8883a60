#include "dcv/flow_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <numbers>
#include <string>

#include "dcv/detail/binary_io.hpp"
#include "dcv/errors.hpp"

namespace dcv {

FlowField FlowField::make(Tensor data, std::optional<Tensor> valid) {
  if (data.rank() != 3 || data.dim(0) != 2) {
    throw ShapeError("flow field must be [2 x H x W], got " + shape_string(data.shape()));
  }
  if (!data.all_finite()) throw NumericalError("flow field contains non-finite values");
  if (valid && valid->shape() != Shape{data.dim(1), data.dim(2)}) {
    throw ShapeError("flow mask shape " + shape_string(valid->shape()) + " does not match flow " +
                     shape_string(data.shape()));
  }
  return FlowField{std::move(data), std::move(valid)};
}

FlowField FlowField::constant(std::size_t height, std::size_t width, double u, double v) {
  Tensor t({2, height, width});
  std::fill_n(t.ptr(), height * width, u);
  std::fill_n(t.ptr() + height * width, height * width, v);
  return FlowField{std::move(t), std::nullopt};
}

namespace {

constexpr std::size_t kMaxPixels = std::size_t{1} << 28;

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  return is;
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open for writing: " + path.string());
  return os;
}

// libpng reports errors through longjmp; the state lives outside the frame
// that calls setjmp so nothing with a destructor is skipped.
struct PngState {
  std::FILE* fp = nullptr;
  png_structp png = nullptr;
  png_infop info = nullptr;
  bool writing = false;
  char message[256] = {};
  png_uint_32 width = 0;
  png_uint_32 height = 0;
  int bit_depth = 0;
  int color_type = 0;
  std::size_t rowbytes = 0;
  std::vector<png_byte> pixels;
  std::vector<png_bytep> rows;

  ~PngState() {
    if (png) {
      if (writing) {
        png_destroy_write_struct(&png, info ? &info : nullptr);
      } else {
        png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
      }
    }
    if (fp) std::fclose(fp);
  }
};

void on_png_error(png_structp png, png_const_charp msg) {
  auto* st = static_cast<PngState*>(png_get_error_ptr(png));
  std::snprintf(st->message, sizeof st->message, "%s", msg);
  std::longjmp(png_jmpbuf(png), 1);
}

void on_png_warning(png_structp, png_const_charp) {}

/// Reads the whole image. With `to_rgb8` every colour type and bit depth is
/// converted to 8-bit RGB; otherwise samples are left untouched.
bool png_read_all(PngState* st, bool to_rgb8) {
  if (setjmp(png_jmpbuf(st->png))) return false;
  png_init_io(st->png, st->fp);
  png_read_info(st->png, st->info);
  st->width = png_get_image_width(st->png, st->info);
  st->height = png_get_image_height(st->png, st->info);
  if (to_rgb8) {
    png_set_expand(st->png);
    png_set_strip_16(st->png);
    png_set_strip_alpha(st->png);
    png_set_gray_to_rgb(st->png);
    png_set_interlace_handling(st->png);
  }
  png_read_update_info(st->png, st->info);
  st->bit_depth = png_get_bit_depth(st->png, st->info);
  st->color_type = png_get_color_type(st->png, st->info);
  st->rowbytes = png_get_rowbytes(st->png, st->info);
  if (static_cast<std::size_t>(st->width) * st->height > kMaxPixels) {
    std::snprintf(st->message, sizeof st->message, "image too large");
    return false;
  }
  st->pixels.resize(st->rowbytes * st->height);
  st->rows.resize(st->height);
  for (png_uint_32 y = 0; y < st->height; ++y) st->rows[y] = st->pixels.data() + y * st->rowbytes;
  png_read_image(st->png, st->rows.data());
  png_read_end(st->png, nullptr);
  return true;
}

bool png_write_all(PngState* st) {
  if (setjmp(png_jmpbuf(st->png))) return false;
  png_init_io(st->png, st->fp);
  png_set_IHDR(st->png, st->info, st->width, st->height, st->bit_depth, st->color_type, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(st->png, st->info);
  png_write_image(st->png, st->rows.data());
  png_write_end(st->png, nullptr);
  return true;
}

void read_png(PngState& st, const std::filesystem::path& path, bool to_rgb8) {
  st.fp = std::fopen(path.c_str(), "rb");
  if (!st.fp) throw FormatError("cannot open " + path.string());
  png_byte sig[8];
  if (std::fread(sig, 1, 8, st.fp) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw FormatError("not a PNG file: " + path.string());
  }
  st.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &st, on_png_error, on_png_warning);
  if (!st.png) throw FormatError("libpng initialization failed");
  st.info = png_create_info_struct(st.png);
  if (!st.info) throw FormatError("libpng initialization failed");
  png_set_sig_bytes(st.png, 8);
  if (!png_read_all(&st, to_rgb8)) throw FormatError("PNG read failed for " + path.string() + ": " + st.message);
}

void write_png_rows(PngState& st, const std::filesystem::path& path) {
  st.writing = true;
  st.fp = std::fopen(path.c_str(), "wb");
  if (!st.fp) throw FormatError("cannot open for writing: " + path.string());
  st.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &st, on_png_error, on_png_warning);
  if (!st.png) throw FormatError("libpng initialization failed");
  st.info = png_create_info_struct(st.png);
  if (!st.info) throw FormatError("libpng initialization failed");
  st.rows.resize(st.height);
  for (png_uint_32 y = 0; y < st.height; ++y) st.rows[y] = st.pixels.data() + y * st.rowbytes;
  if (!png_write_all(&st)) throw FormatError("PNG write failed for " + path.string() + ": " + st.message);
}

std::string lower_extension(const std::filesystem::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext;
}

Tensor read_ppm(const std::filesystem::path& path) {
  std::ifstream is = open_in(path);
  auto token = [&]() {
    std::string t;
    char c;
    while (is.get(c)) {
      if (c == '#') {
        std::string skip;
        std::getline(is, skip);
      } else if (!std::isspace(static_cast<unsigned char>(c))) {
        t.push_back(c);
        break;
      }
    }
    while (is.get(c) && !std::isspace(static_cast<unsigned char>(c))) t.push_back(c);
    return t;
  };
  if (token() != "P6") throw FormatError("not a binary PPM (P6): " + path.string());
  long long w = 0;
  long long h = 0;
  long long maxval = 0;
  try {
    w = std::stoll(token());
    h = std::stoll(token());
    maxval = std::stoll(token());
  } catch (const std::exception&) {
    throw FormatError("malformed PPM header: " + path.string());
  }
  if (w <= 0 || h <= 0 || static_cast<std::size_t>(w * h) > kMaxPixels) {
    throw FormatError("invalid PPM dimensions in " + path.string());
  }
  if (maxval <= 0 || maxval > 65535) throw FormatError("invalid PPM maxval in " + path.string());
  const std::size_t bytes = maxval > 255 ? 2 : 1;
  const auto W = static_cast<std::size_t>(w);
  const auto H = static_cast<std::size_t>(h);
  std::vector<unsigned char> raw(W * H * 3 * bytes);
  if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
    throw FormatError("truncated PPM payload: " + path.string());
  }
  Tensor img({3, H, W});
  for (std::size_t p = 0; p < W * H; ++p) {
    for (std::size_t c = 0; c < 3; ++c) {
      const std::size_t i = (p * 3 + c) * bytes;
      const double v = bytes == 2 ? raw[i] * 256.0 + raw[i + 1] : raw[i];
      img[c * W * H + p] = 2.0 * v / static_cast<double>(maxval) - 1.0;
    }
  }
  return img;
}

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp((v + 1.0) * 127.5, 0.0, 255.0)));
}

}  // namespace

FlowField read_flo(const std::filesystem::path& path) {
  std::ifstream is = open_in(path);
  const auto tag = detail::read_le<float>(is, ".flo tag");
  if (tag != kFloTag) throw FormatError("bad .flo magic in " + path.string());
  const auto w = detail::read_le<std::int32_t>(is, ".flo width");
  const auto h = detail::read_le<std::int32_t>(is, ".flo height");
  if (w <= 0 || h <= 0) {
    throw FormatError("nonpositive .flo dimensions " + std::to_string(w) + "x" + std::to_string(h));
  }
  const auto W = static_cast<std::size_t>(w);
  const auto H = static_cast<std::size_t>(h);
  if (W * H > kMaxPixels) throw FormatError(".flo dimensions too large in " + path.string());
  std::vector<float> raw(W * H * 2);
  if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size() * sizeof(float)))) {
    throw FormatError("truncated .flo payload in " + path.string());
  }
  Tensor t({2, H, W});
  for (std::size_t p = 0; p < W * H; ++p) {
    t[p] = detail::to_little_endian(raw[2 * p]);
    t[W * H + p] = detail::to_little_endian(raw[2 * p + 1]);
  }
  return FlowField::make(std::move(t));
}

void write_flo(const FlowField& field, const std::filesystem::path& path) {
  const std::size_t H = field.height();
  const std::size_t W = field.width();
  std::ofstream os = open_out(path);
  detail::write_le<float>(os, kFloTag);
  detail::write_le<std::int32_t>(os, static_cast<std::int32_t>(W));
  detail::write_le<std::int32_t>(os, static_cast<std::int32_t>(H));
  for (std::size_t p = 0; p < W * H; ++p) {
    detail::write_le<float>(os, static_cast<float>(field.data[p]));
    detail::write_le<float>(os, static_cast<float>(field.data[W * H + p]));
  }
  if (!os) throw FormatError("failed writing " + path.string());
}

FlowField read_kitti_png(const std::filesystem::path& path) {
  PngState st;
  read_png(st, path, false);
  if (st.bit_depth != 16 || st.color_type != PNG_COLOR_TYPE_RGB) {
    throw FormatError("KITTI flow PNG must be 16-bit RGB: " + path.string() + " has bit depth " +
                      std::to_string(st.bit_depth) + ", colour type " + std::to_string(st.color_type));
  }
  const std::size_t H = st.height;
  const std::size_t W = st.width;
  Tensor t({2, H, W});
  Tensor valid({H, W});
  for (std::size_t y = 0; y < H; ++y) {
    const png_byte* row = st.rows[y];
    for (std::size_t x = 0; x < W; ++x) {
      auto sample = [&](std::size_t c) { return (row[6 * x + 2 * c] << 8) | row[6 * x + 2 * c + 1]; };
      const std::size_t p = y * W + x;
      const bool ok = sample(2) > 0;
      valid[p] = ok ? 1.0 : 0.0;
      t[p] = ok ? (sample(0) - 32768.0) / 64.0 : 0.0;
      t[H * W + p] = ok ? (sample(1) - 32768.0) / 64.0 : 0.0;
    }
  }
  return FlowField::make(std::move(t), std::move(valid));
}

void write_kitti_png(const FlowField& field, const std::filesystem::path& path) {
  PngState st;
  st.width = static_cast<png_uint_32>(field.width());
  st.height = static_cast<png_uint_32>(field.height());
  st.bit_depth = 16;
  st.color_type = PNG_COLOR_TYPE_RGB;
  st.rowbytes = 6 * field.width();
  st.pixels.resize(st.rowbytes * st.height);
  auto encode = [](double v) {
    return static_cast<unsigned>(std::clamp(std::lround(v * 64.0 + 32768.0), 0L, 65535L));
  };
  for (std::size_t y = 0; y < field.height(); ++y) {
    for (std::size_t x = 0; x < field.width(); ++x) {
      const bool ok = field.is_valid(y, x);
      const unsigned s[3] = {ok ? encode(field.u(y, x)) : 0u, ok ? encode(field.v(y, x)) : 0u, ok ? 1u : 0u};
      png_byte* px = st.pixels.data() + y * st.rowbytes + 6 * x;
      for (std::size_t c = 0; c < 3; ++c) {
        px[2 * c] = static_cast<png_byte>(s[c] >> 8);
        px[2 * c + 1] = static_cast<png_byte>(s[c] & 0xff);
      }
    }
  }
  write_png_rows(st, path);
}

void write_png(const RgbImage& image, const std::filesystem::path& path) {
  if (image.pixels.size() != image.width * image.height * 3 || image.width == 0 || image.height == 0) {
    throw ShapeError("write_png: pixel buffer does not match dimensions");
  }
  PngState st;
  st.width = static_cast<png_uint_32>(image.width);
  st.height = static_cast<png_uint_32>(image.height);
  st.bit_depth = 8;
  st.color_type = PNG_COLOR_TYPE_RGB;
  st.rowbytes = 3 * image.width;
  st.pixels.assign(image.pixels.begin(), image.pixels.end());
  write_png_rows(st, path);
}

Tensor read_image(const std::filesystem::path& path) {
  const std::string ext = lower_extension(path);
  if (ext == ".ppm") return read_ppm(path);
  if (ext != ".png") throw FormatError("unsupported image format '" + ext + "' (expected .png or .ppm)");
  PngState st;
  read_png(st, path, true);
  const std::size_t H = st.height;
  const std::size_t W = st.width;
  Tensor img({3, H, W});
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      for (std::size_t c = 0; c < 3; ++c) img[(c * H + y) * W + x] = st.rows[y][3 * x + c] / 127.5 - 1.0;
    }
  }
  return img;
}

void write_image(const Tensor& image, const std::filesystem::path& path) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw ShapeError("write_image: expected [3 x H x W], got " + shape_string(image.shape()));
  }
  const std::size_t H = image.dim(1);
  const std::size_t W = image.dim(2);
  RgbImage rgb{W, H, std::vector<std::uint8_t>(W * H * 3)};
  for (std::size_t p = 0; p < W * H; ++p) {
    for (std::size_t c = 0; c < 3; ++c) rgb.pixels[3 * p + c] = to_byte(image[c * W * H + p]);
  }
  const std::string ext = lower_extension(path);
  if (ext == ".png") {
    write_png(rgb, path);
  } else if (ext == ".ppm") {
    std::ofstream os = open_out(path);
    os << "P6\n" << W << " " << H << "\n255\n";
    os.write(reinterpret_cast<const char*>(rgb.pixels.data()), static_cast<std::streamsize>(rgb.pixels.size()));
    if (!os) throw FormatError("failed writing " + path.string());
  } else {
    throw FormatError("unsupported image format '" + ext + "' (expected .png or .ppm)");
  }
}

const std::vector<std::array<std::uint8_t, 3>>& color_wheel() {
  static const std::vector<std::array<std::uint8_t, 3>> wheel = [] {
    constexpr int RY = 15, YG = 6, GC = 4, CB = 11, BM = 13, MR = 6;
    std::vector<std::array<std::uint8_t, 3>> w;
    auto ramp = [](int i, int n) { return static_cast<std::uint8_t>(255 * i / n); };
    for (int i = 0; i < RY; ++i) w.push_back({255, ramp(i, RY), 0});
    for (int i = 0; i < YG; ++i) w.push_back({static_cast<std::uint8_t>(255 - ramp(i, YG)), 255, 0});
    for (int i = 0; i < GC; ++i) w.push_back({0, 255, ramp(i, GC)});
    for (int i = 0; i < CB; ++i) w.push_back({0, static_cast<std::uint8_t>(255 - ramp(i, CB)), 255});
    for (int i = 0; i < BM; ++i) w.push_back({ramp(i, BM), 0, 255});
    for (int i = 0; i < MR; ++i) w.push_back({255, 0, static_cast<std::uint8_t>(255 - ramp(i, MR))});
    return w;
  }();
  return wheel;
}

RgbImage flow_to_color(const FlowField& field, std::optional<double> max_magnitude) {
  const std::size_t H = field.height();
  const std::size_t W = field.width();
  double scale = 1.0;
  if (max_magnitude) {
    if (!(*max_magnitude > 0.0)) throw ConfigError("flow_to_color: max magnitude must be positive");
    scale = *max_magnitude;
  } else {
    std::vector<double> mags;
    mags.reserve(H * W);
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        if (field.is_valid(y, x)) mags.push_back(std::hypot(field.u(y, x), field.v(y, x)));
      }
    }
    if (!mags.empty()) {
      auto nth = mags.begin() + static_cast<long>(0.99 * static_cast<double>(mags.size() - 1));
      std::nth_element(mags.begin(), nth, mags.end());
      if (*nth > 0.0) scale = *nth;
    }
  }
  const auto& wheel = color_wheel();
  const int ncols = static_cast<int>(wheel.size());
  RgbImage img{W, H, std::vector<std::uint8_t>(W * H * 3, 0)};
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      if (!field.is_valid(y, x)) continue;
      const double fu = field.u(y, x) / scale;
      const double fv = field.v(y, x) / scale;
      const double rad = std::sqrt(fu * fu + fv * fv);
      const double a = std::atan2(-fv, -fu) / std::numbers::pi;
      const double fk = (a + 1.0) / 2.0 * (ncols - 1);
      const int k0 = static_cast<int>(fk);
      const int k1 = (k0 + 1) % ncols;
      const double f = fk - k0;
      std::uint8_t* px = img.pixels.data() + 3 * (y * W + x);
      for (int c = 0; c < 3; ++c) {
        double col = (1.0 - f) * wheel[k0][c] / 255.0 + f * wheel[k1][c] / 255.0;
        col = rad <= 1.0 ? 1.0 - rad * (1.0 - col) : col * 0.75;
        px[c] = static_cast<std::uint8_t>(255.0 * col);
      }
    }
  }
  return img;
}

}  // namespace dcv
