#include "cosy/binio.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <vector>

#include "cosy/errors.hpp"

namespace cosy {

static_assert(std::endian::native == std::endian::little, "binary container assumes a little-endian host");

namespace {

void put_u32(std::ostream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }

std::uint32_t get_u32(std::istream& in) {
  std::uint32_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), 4)) throw DataError("binary matrix: truncated header");
  return v;
}

}  // namespace

void write_matrix(std::ostream& out, const Tensor& t) {
  const std::size_t rows = t.rows(), cols = t.cols();
  if (rows > std::numeric_limits<std::uint32_t>::max() || cols > std::numeric_limits<std::uint32_t>::max())
    throw std::invalid_argument("binary matrix: dimensions exceed uint32");
  put_u32(out, static_cast<std::uint32_t>(rows));
  put_u32(out, static_cast<std::uint32_t>(cols));
  std::vector<float> buf(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) buf[i] = static_cast<float>(t[i]);
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
}

Tensor read_matrix(std::istream& in) {
  const std::uint32_t rows = get_u32(in);
  const std::uint32_t cols = get_u32(in);
  std::vector<float> buf(static_cast<std::size_t>(rows) * cols);
  if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float))))
    throw DataError("binary matrix: truncated payload");
  Tensor t({rows, cols});
  for (std::size_t i = 0; i < buf.size(); ++i) t[i] = buf[i];
  return t;
}

void write_matrix_file(const std::filesystem::path& path, const Tensor& t) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  write_matrix(out, t);
  if (!out) throw DataError("write failed for " + path.string());
}

Tensor read_matrix_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open feature file " + path.string());
  try {
    Tensor t = read_matrix(in);
    if (in.peek() != std::ifstream::traits_type::eof()) throw DataError("trailing bytes");
    return t;
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

}  // namespace cosy
