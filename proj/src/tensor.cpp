#include "dvd/tensor.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

namespace dvd {

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

constexpr char kMagic[4] = {'D', 'V', 'D', 'T'};

template <typename T>
void put_le(std::string& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.append(bytes, sizeof(T));
}

template <typename T>
T get_le(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw ValidationError("tensor file truncated");
  char bytes[sizeof(T)];
  std::memcpy(bytes, in.data() + pos, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  pos += sizeof(T);
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

}  // namespace

std::string encode_tensor(const Tensor& tensor) {
  std::string out(kMagic, 4);
  out.reserve(8 + 4 * tensor.shape().size() + 8 * static_cast<std::size_t>(tensor.size()));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensor.rank()));
  for (Index e : tensor.shape()) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e));
  for (Index i = 0; i < tensor.size(); ++i) put_le<double>(out, tensor[i]);
  return out;
}

Tensor decode_tensor(const std::string& bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw ValidationError("not a DVDT tensor file (bad magic)");
  }
  std::size_t pos = 4;
  const auto rank = get_le<std::uint32_t>(bytes, pos);
  if (rank == 0 || rank > 16) throw ValidationError("tensor file has invalid rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& e : shape) e = get_le<std::uint32_t>(bytes, pos);
  Tensor t(shape);
  for (Index i = 0; i < t.size(); ++i) t[i] = get_le<double>(bytes, pos);
  if (pos != bytes.size()) throw ValidationError("tensor file has trailing bytes");
  return t;
}

void save_tensor(const Tensor& tensor, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write tensor file " + path.string());
  const std::string bytes = encode_tensor(tensor);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ValidationError("failed writing tensor file " + path.string());
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open tensor file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_tensor(ss.str());
}

}  // namespace dvd
