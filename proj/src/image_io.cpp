#include "pcmoe/image_io.hpp"

#include <cctype>
#include <fstream>
#include <string>

#include "pcmoe/errors.hpp"

namespace pcmoe {

namespace {

void write_netpbm(const std::filesystem::path& path, const char* magic, int width, int height,
                  const std::vector<std::uint8_t>& bytes) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open for writing: " + path.string());
  os << magic << '\n' << width << ' ' << height << "\n255\n";
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw DataError("failed writing: " + path.string());
}

int read_header_int(std::istream& is, const std::filesystem::path& path) {
  int c = is.get();
  while (c != EOF) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = is.get();
    } else if (!std::isspace(c)) {
      break;
    }
    c = is.get();
  }
  if (c == EOF || !std::isdigit(c)) throw DataError("malformed netpbm header: " + path.string());
  int v = 0;
  while (c != EOF && std::isdigit(c)) {
    v = v * 10 + (c - '0');
    c = is.get();
  }
  return v;  // the single whitespace after maxval has been consumed
}

std::vector<std::uint8_t> read_netpbm(const std::filesystem::path& path, const char* magic,
                                      int channels, int& width, int& height) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open: " + path.string());
  char m[2];
  is.read(m, 2);
  if (is.gcount() != 2 || m[0] != magic[0] || m[1] != magic[1]) {
    throw DataError("expected " + std::string(magic) + " file: " + path.string());
  }
  width = read_header_int(is, path);
  height = read_header_int(is, path);
  const int maxval = read_header_int(is, path);
  if (width < 1 || height < 1 || maxval != 255) {
    throw DataError("unsupported netpbm geometry or maxval: " + path.string());
  }
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(width) * height * channels);
  is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (static_cast<std::size_t>(is.gcount()) != bytes.size()) {
    throw DataError("truncated image data: " + path.string());
  }
  return bytes;
}

}  // namespace

void write_ppm(const std::filesystem::path& path, const RgbImage& image) {
  if (image.pixels.size() != static_cast<std::size_t>(image.width) * image.height * 3) {
    throw UsageError("RGB buffer size does not match image geometry");
  }
  write_netpbm(path, "P6", image.width, image.height, image.pixels);
}

void write_pgm(const std::filesystem::path& path, const GrayImage& image) {
  if (image.pixels.size() != static_cast<std::size_t>(image.width) * image.height) {
    throw UsageError("gray buffer size does not match image geometry");
  }
  write_netpbm(path, "P5", image.width, image.height, image.pixels);
}

RgbImage read_ppm(const std::filesystem::path& path) {
  RgbImage img;
  img.pixels = read_netpbm(path, "P6", 3, img.width, img.height);
  return img;
}

GrayImage read_pgm(const std::filesystem::path& path) {
  GrayImage img;
  img.pixels = read_netpbm(path, "P5", 1, img.width, img.height);
  return img;
}

}  // namespace pcmoe
