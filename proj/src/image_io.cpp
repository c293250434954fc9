#include "dvd/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace dvd {

namespace fs = std::filesystem;

namespace {

unsigned char to_byte(double v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

void skip_ws_and_comments(std::istream& in) {
  while (true) {
    int c = in.peek();
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      return;
    }
  }
}

}  // namespace

void write_ppm(const Tensor& image, const fs::path& path) {
  require_rank3(image, "write_ppm");
  if (image.dim(0) != 3) throw ValidationError("write_ppm expects 3 channels");
  const Index H = image.dim(1), W = image.dim(2);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write " + path.string());
  out << "P6\n" << W << ' ' << H << "\n255\n";
  std::string buf(static_cast<std::size_t>(3 * H * W), '\0');
  for (Index y = 0; y < H; ++y)
    for (Index x = 0; x < W; ++x)
      for (Index c = 0; c < 3; ++c)
        buf[static_cast<std::size_t>((y * W + x) * 3 + c)] = static_cast<char>(to_byte(image(c, y, x)));
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw ValidationError("failed writing " + path.string());
}

Tensor read_ppm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::string magic;
  in >> magic;
  if (magic != "P6") throw ValidationError(path.string() + ": only binary PPM (P6) is supported");
  Index W = 0, H = 0, maxval = 0;
  skip_ws_and_comments(in);
  in >> W;
  skip_ws_and_comments(in);
  in >> H;
  skip_ws_and_comments(in);
  in >> maxval;
  in.get();
  if (!in || W <= 0 || H <= 0 || maxval != 255) throw ValidationError(path.string() + ": unsupported PPM header");
  std::string buf(static_cast<std::size_t>(3 * H * W), '\0');
  in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (in.gcount() != static_cast<std::streamsize>(buf.size())) throw ValidationError(path.string() + ": truncated");
  Tensor img({3, H, W});
  for (Index y = 0; y < H; ++y)
    for (Index x = 0; x < W; ++x)
      for (Index c = 0; c < 3; ++c)
        img(c, y, x) = static_cast<unsigned char>(buf[static_cast<std::size_t>((y * W + x) * 3 + c)]) / 255.0;
  return img;
}

Tensor quantize8(const Tensor& image) {
  Tensor out(image.shape());
  for (Index i = 0; i < image.size(); ++i) out[i] = to_byte(image[i]) / 255.0;
  return out;
}

std::string frame_name(Index index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%05lld.ppm", static_cast<long long>(index));
  return buf;
}

void write_sequence(const FrameSequence& seq, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw ValidationError("cannot create directory " + dir.string() + ": " + ec.message());
  for (Index i = 0; i < seq.size(); ++i) write_ppm(seq[i], dir / frame_name(i));
}

FrameSequence read_sequence(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw ValidationError("frame directory does not exist: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".ppm") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  FrameSequence seq;
  seq.label = dir.filename().string();
  for (const auto& f : files) seq.push_back(read_ppm(f));
  return seq;
}

}  // namespace dvd
