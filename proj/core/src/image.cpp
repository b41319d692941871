// Copyright 2026 The capdet Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "capdet/image.hpp"

#include <cctype>
#include <fstream>
#include <sstream>

#include "capdet/error.hpp"
#include "capdet/geometry.hpp"

namespace capdet {

std::string to_string(const Box& b) {
  std::ostringstream os;
  os << '[' << b.x_min << ", " << b.y_min << ", " << b.x_max << ", " << b.y_max
     << ')';
  return os.str();
}

Image::Image(int width, int height, Rgb fill) : width_(width), height_(height) {
  if (width < 0 || height < 0) throw InvalidInput("negative image size");
  data_.resize(static_cast<std::size_t>(width) * height * 3);
  for (std::size_t i = 0; i < data_.size(); i += 3) {
    data_[i] = fill.r;
    data_[i + 1] = fill.g;
    data_[i + 2] = fill.b;
  }
}

namespace {

// Next whitespace-delimited header token, skipping '#' comments.
std::string header_token(std::istream& in) {
  std::string tok;
  while (in) {
    int c = in.peek();
    if (c == '#') {
      std::string ignored;
      std::getline(in, ignored);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      break;
    }
  }
  in >> tok;
  return tok;
}

}  // namespace

Image read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image " + path.string());
  const std::string magic = header_token(in);
  if (magic != "P6" && magic != "P3")
    throw FormatError(path.string() + ": not a PPM image");
  int w = 0, h = 0, maxval = 0;
  try {
    w = std::stoi(header_token(in));
    h = std::stoi(header_token(in));
    maxval = std::stoi(header_token(in));
  } catch (const std::exception&) {
    throw FormatError(path.string() + ": bad PPM header");
  }
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255)
    throw FormatError(path.string() + ": unsupported PPM dimensions or depth");
  Image img(w, h);
  auto scale = [maxval](int v) {
    return static_cast<std::uint8_t>((v * 255 + maxval / 2) / maxval);
  };
  if (magic == "P6") {
    in.get();  // single whitespace after maxval
    std::vector<unsigned char> raw(static_cast<std::size_t>(w) * h * 3);
    in.read(reinterpret_cast<char*>(raw.data()),
            static_cast<std::streamsize>(raw.size()));
    if (in.gcount() != static_cast<std::streamsize>(raw.size()))
      throw FormatError(path.string() + ": truncated PPM data");
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const auto i = (static_cast<std::size_t>(y) * w + x) * 3;
        img.set(x, y, {scale(raw[i]), scale(raw[i + 1]), scale(raw[i + 2])});
      }
  } else {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        int r, g, b;
        if (!(in >> r >> g >> b))
          throw FormatError(path.string() + ": truncated PPM data");
        img.set(x, y, {scale(r), scale(g), scale(b)});
      }
  }
  return img;
}

void write_ppm(const Image& image, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write image " + path.string());
  out << "P6\n" << image.width() << ' ' << image.height() << "\n255\n";
  const auto bytes = image.bytes();
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing image " + path.string());
}

}  // namespace capdet
