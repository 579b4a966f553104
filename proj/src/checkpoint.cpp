#include "milfuse/checkpoint.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "milfuse/errors.hpp"

namespace milfuse {

namespace fs = std::filesystem;

namespace {

constexpr char kMagic[4] = {'M', 'B', 'P', 'F'};
constexpr std::uint32_t kVersion = 1;

void put_u16(std::string& out, std::uint16_t v) {
  char b[2];
  std::memcpy(b, &v, 2);
  out.append(b, 2);
}

void put_u32(std::string& out, std::uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  out.append(b, 4);
}

}  // namespace

void write_tensor_file(const TensorFile& tensors, const fs::path& path) {
  std::map<std::string, int> names;
  for (const auto& [name, mat] : tensors) {
    if (name.empty() || name.size() > 0xffff)
      throw ValidationError("write_tensor_file: bad tensor name length for '" + name + "'");
    if (++names[name] > 1)
      throw ValidationError("write_tensor_file: duplicate tensor '" + name + "'");
    if (mat.rows() == 0 || mat.cols() == 0)
      throw ValidationError("write_tensor_file: empty tensor '" + name + "'");
    if (!mat.all_finite())
      throw NumericError("write_tensor_file: non-finite value in tensor '" + name + "'");
  }

  std::string out;
  out.append(kMagic, 4);
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, mat] : tensors) {
    put_u16(out, static_cast<std::uint16_t>(name.size()));
    out.append(name);
    put_u32(out, static_cast<std::uint32_t>(mat.rows()));
    put_u32(out, static_cast<std::uint32_t>(mat.cols()));
    out.append(reinterpret_cast<const char*>(mat.data()), mat.size() * 8);
  }

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ValidationError("cannot open " + path.string() + " for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw ValidationError("short write to " + path.string());
}

TensorFile read_tensor_file(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path.string(), 0);
  std::ostringstream ss;
  ss << f.rdbuf();
  const std::string bytes = std::move(ss).str();

  std::size_t pos = 0;
  auto need = [&](std::size_t n, const char* what) {
    if (pos + n > bytes.size())
      throw FormatError(path.string() + ": truncated while reading " + std::string(what), pos);
  };
  auto get_u16 = [&](const char* what) {
    need(2, what);
    std::uint16_t v;
    std::memcpy(&v, bytes.data() + pos, 2);
    pos += 2;
    return v;
  };
  auto get_u32 = [&](const char* what) {
    need(4, what);
    std::uint32_t v;
    std::memcpy(&v, bytes.data() + pos, 4);
    pos += 4;
    return v;
  };

  need(4, "magic");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw FormatError(path.string() + ": bad magic (expected MBPF)", 0);
  pos = 4;
  const std::uint32_t version = get_u32("version");
  if (version != kVersion)
    throw FormatError(path.string() + ": unsupported version " + std::to_string(version), 4);
  const std::uint32_t count = get_u32("tensor count");

  TensorFile tensors;
  tensors.reserve(count);
  std::map<std::string, int> names;
  for (std::uint32_t t = 0; t < count; ++t) {
    const std::uint16_t name_len = get_u16("tensor name length");
    if (name_len == 0) throw FormatError(path.string() + ": empty tensor name", pos - 2);
    need(name_len, "tensor name");
    std::string name(bytes.data() + pos, name_len);
    pos += name_len;
    const std::size_t shape_pos = pos;
    const std::uint32_t rows = get_u32("rows");
    const std::uint32_t cols = get_u32("cols");
    if (rows == 0 || cols == 0)
      throw FormatError(path.string() + ": tensor '" + name + "' has zero dimension",
                        shape_pos);
    if (++names[name] > 1)
      throw FormatError(path.string() + ": duplicate tensor '" + name + "'", shape_pos);
    const std::size_t n = static_cast<std::size_t>(rows) * cols;
    need(n * 8, "tensor data");
    Matrix mat(rows, cols);
    std::memcpy(mat.data(), bytes.data() + pos, n * 8);
    for (std::size_t i = 0; i < n; ++i)
      if (!std::isfinite(mat.data()[i]))
        throw FormatError(path.string() + ": non-finite value in tensor '" + name + "'",
                          pos + i * 8);
    pos += n * 8;
    tensors.emplace_back(std::move(name), std::move(mat));
  }
  if (pos != bytes.size())
    throw FormatError(path.string() + ": trailing data after last tensor", pos);
  return tensors;
}

const Matrix& find_tensor(const TensorFile& tensors, const std::string& name) {
  for (const auto& [n, m] : tensors)
    if (n == name) return m;
  throw ValidationError("missing tensor '" + name + "'");
}

bool has_tensor(const TensorFile& tensors, const std::string& name) {
  for (const auto& [n, m] : tensors)
    if (n == name) return true;
  return false;
}

}  // namespace milfuse
