#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "milfuse/matrix.hpp"

namespace milfuse {

/// Ordered named-tensor container, stored as "MBPF" v1: magic, u32 version,
/// u32 tensor count, then per tensor u16 name length, name bytes, u32 rows,
/// u32 cols, rows*cols float64 row-major. Little-endian throughout.
using TensorFile = std::vector<std::pair<std::string, Matrix>>;

void write_tensor_file(const TensorFile& tensors, const std::filesystem::path& path);
TensorFile read_tensor_file(const std::filesystem::path& path);

/// Lookup helper; throws ValidationError when absent.
const Matrix& find_tensor(const TensorFile& tensors, const std::string& name);
bool has_tensor(const TensorFile& tensors, const std::string& name);

}  // namespace milfuse
