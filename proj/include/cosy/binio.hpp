#pragma once

#include <filesystem>
#include <iosfwd>

#include "cosy/tensor.hpp"

namespace cosy {

// Binary matrix container: 8-byte header (uint32 rows, uint32 cols, little
// endian) followed by rows*cols float32 values in row-major order. Tensors of
// higher rank are written as rows x (product of trailing dims).
void write_matrix(std::ostream& out, const Tensor& t);
Tensor read_matrix(std::istream& in);

void write_matrix_file(const std::filesystem::path& path, const Tensor& t);
// Throws DataError when the file is missing, truncated, or inconsistent.
Tensor read_matrix_file(const std::filesystem::path& path);

}  // namespace cosy
