// SPDX-License-Identifier: Apache-2.0

#include "dropin/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "dropin/error.hpp"

namespace dropin {

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes little-endian host");

namespace {

constexpr char kMagic[4] = {'D', 'P', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw Error(ErrorKind::kIo, "truncated checkpoint");
  return v;
}

std::string take_string(std::istream& is, std::uint64_t len) {
  std::string s(len, '\0');
  if (len) is.read(s.data(), static_cast<std::streamsize>(len));
  if (!is) throw Error(ErrorKind::kIo, "truncated checkpoint");
  return s;
}

}  // namespace

void ensure_directory(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorKind::kIo, "cannot create directory '" + dir.string() + "': " + ec.message());
}

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw Error(ErrorKind::kIo, "cannot open '" + tmp.string() + "' for writing");
    os.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    os.flush();
    if (!os) throw Error(ErrorKind::kIo, "write failed for '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error(ErrorKind::kIo, "cannot rename '" + tmp.string() + "': " + ec.message());
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ostringstream os(std::ios::binary);
  os.write(kMagic, 4);
  put<std::uint32_t>(os, kVersion);
  put<std::uint64_t>(os, ckpt.params.num_tensors());
  for (const auto& [id, t] : ckpt.params.entries()) {
    put<std::uint64_t>(os, id.size());
    os.write(id.data(), static_cast<std::streamsize>(id.size()));
    put<std::uint8_t>(os, ckpt.params.is_trainable(id) ? 1 : 0);
    put<std::uint64_t>(os, t.rank());
    for (std::size_t d : t.shape()) put<std::uint64_t>(os, d);
    os.write(reinterpret_cast<const char*>(t.data().data()),
             static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  put<std::uint64_t>(os, ckpt.meta.size());
  os.write(ckpt.meta.data(), static_cast<std::streamsize>(ckpt.meta.size()));
  write_file_atomic(path, os.str());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorKind::kIo, "cannot open checkpoint '" + path.string() + "'");
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) {
    throw Error(ErrorKind::kIo, "'" + path.string() + "' is not a checkpoint");
  }
  if (take<std::uint32_t>(is) != kVersion) throw Error(ErrorKind::kIo, "unsupported checkpoint version");
  Checkpoint ckpt;
  const auto n = take<std::uint64_t>(is);
  for (std::uint64_t i = 0; i < n; ++i) {
    std::string id = take_string(is, take<std::uint64_t>(is));
    const bool trainable = take<std::uint8_t>(is) != 0;
    const auto rank = take<std::uint64_t>(is);
    Shape shape(rank);
    for (auto& d : shape) d = take<std::uint64_t>(is);
    std::vector<double> values(shape_size(shape));
    is.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)));
    if (!is) throw Error(ErrorKind::kIo, "truncated checkpoint");
    ckpt.params.add(id, Tensor(std::move(shape), std::move(values)), trainable);
  }
  ckpt.meta = take_string(is, take<std::uint64_t>(is));
  return ckpt;
}

}  // namespace dropin
