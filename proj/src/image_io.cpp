// SPDX-License-Identifier: Apache-2.0
#include "chimera/image_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>

#include "chimera/errors.hpp"

namespace chimera {

namespace {

struct Raster {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> bytes;
};

void write_raster(const std::filesystem::path& file, const char* magic, std::size_t w,
                  std::size_t h, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  out << magic << "\n" << w << " " << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("short write to " + file.string());
}

Raster read_raster(const std::filesystem::path& file, const std::string& magic,
                   std::size_t channels) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw FormatError("cannot open " + file.string());
  const std::vector<std::uint8_t> data((std::istreambuf_iterator<char>(in)),
                                       std::istreambuf_iterator<char>());
  std::size_t pos = 0;
  auto token = [&]() {
    for (;;) {
      while (pos < data.size() && std::isspace(data[pos])) ++pos;
      if (pos < data.size() && data[pos] == '#') {
        while (pos < data.size() && data[pos] != '\n') ++pos;
        continue;
      }
      break;
    }
    std::string t;
    while (pos < data.size() && !std::isspace(data[pos])) t.push_back(static_cast<char>(data[pos++]));
    return t;
  };
  auto number = [&](const char* what) {
    const std::string t = token();
    if (t.empty() || !std::all_of(t.begin(), t.end(), ::isdigit))
      throw FormatError(file.string() + ": bad " + what + " '" + t + "'");
    return static_cast<std::size_t>(std::stoul(t));
  };
  if (token() != magic) throw FormatError(file.string() + ": expected " + magic + " raster");
  Raster r;
  r.width = number("width");
  r.height = number("height");
  if (number("maxval") != 255) throw FormatError(file.string() + ": only maxval 255 is supported");
  ++pos;  // single whitespace byte before the pixel data
  const std::size_t need = r.width * r.height * channels;
  if (data.size() < pos || data.size() - pos != need)
    throw FormatError(file.string() + ": expected " + std::to_string(need) + " pixel bytes");
  r.bytes.assign(data.begin() + static_cast<std::ptrdiff_t>(pos), data.end());
  return r;
}

}  // namespace

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

void write_ppm(const std::filesystem::path& file, const Image& image) {
  if (image.dim() != 3 || image.size(2) != 3)
    throw std::invalid_argument("write_ppm: image must be [H, W, 3], got " + shape_to_string(image.shape()));
  std::vector<std::uint8_t> bytes(image.numel());
  for (std::size_t i = 0; i < image.numel(); ++i) bytes[i] = to_byte(image[i]);
  write_raster(file, "P6", image.size(1), image.size(0), bytes);
}

Image read_ppm(const std::filesystem::path& file) {
  const Raster r = read_raster(file, "P6", 3);
  Image img({r.height, r.width, 3});
  for (std::size_t i = 0; i < r.bytes.size(); ++i) img[i] = r.bytes[i] / 255.0;
  return img;
}

void write_pgm(const std::filesystem::path& file, const LabelMap& labels) {
  std::vector<std::uint8_t> bytes(labels.labels.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    const int v = labels.labels[i];
    if (v < 0 || v > 255) throw std::invalid_argument("write_pgm: label " + std::to_string(v) + " out of byte range");
    bytes[i] = static_cast<std::uint8_t>(v);
  }
  write_raster(file, "P5", labels.width, labels.height, bytes);
}

LabelMap read_pgm(const std::filesystem::path& file) {
  const Raster r = read_raster(file, "P5", 1);
  LabelMap m(r.height, r.width);
  for (std::size_t i = 0; i < r.bytes.size(); ++i) m.labels[i] = r.bytes[i];
  return m;
}

std::array<std::uint8_t, 3> viridis(double t) {
  // Polynomial fit of the matplotlib viridis map.
  t = std::clamp(t, 0.0, 1.0);
  static constexpr double c[7][3] = {
      {0.2777273272234177, 0.005407344544966578, 0.3340998053353061},
      {0.1050930431085774, 1.404613529898575, 1.384590162594685},
      {-0.3308618287255563, 0.214847559468213, 0.09509516302823659},
      {-4.634230498983486, -5.799100973351585, -19.33244095627987},
      {6.228269936347081, 14.17993336680509, 56.69055260068105},
      {4.776384997670288, -13.74514537774601, -65.35303263337234},
      {-5.435455855934631, 4.645852612178535, 26.3124352495832}};
  std::array<std::uint8_t, 3> rgb{};
  for (int ch = 0; ch < 3; ++ch) {
    double v = c[6][ch];
    for (int k = 5; k >= 0; --k) v = v * t + c[k][ch];
    rgb[static_cast<std::size_t>(ch)] = to_byte(v);
  }
  return rgb;
}

}  // namespace chimera
