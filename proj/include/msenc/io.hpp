#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <system_error>
#include <vector>

#include <unistd.h>

#include <json.hpp>

#include "msenc/error.hpp"

namespace msenc {

namespace fs = std::filesystem;
using json = nlohmann::json;

static_assert(std::endian::native == std::endian::little, "blob I/O assumes a little-endian host");

namespace io {

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::IoError, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline fs::path temp_sibling(const fs::path& target) {
  return target.parent_path() / (target.filename().string() + ".tmp-" + std::to_string(::getpid()));
}

// Writes through a temp file in the same directory and renames over `path`.
inline void write_bytes_atomic(const fs::path& path, std::span<const char> bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = temp_sibling(path);
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), ErrorKind::IoError, "cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    require(static_cast<bool>(out), ErrorKind::IoError, "short write to " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  require(!ec, ErrorKind::IoError, "rename " + tmp.string() + " -> " + path.string() + ": " + ec.message());
}

inline void write_text_atomic(const fs::path& path, const std::string& text) {
  write_bytes_atomic(path, std::span<const char>(text.data(), text.size()));
}

inline void write_json(const fs::path& path, const json& value) { write_text_atomic(path, value.dump(2) + "\n"); }

inline json read_json(const fs::path& path) {
  try {
    return json::parse(read_text(path));
  } catch (const json::exception& e) {
    fail(ErrorKind::IoError, path.string() + ": " + e.what());
  }
}

template <typename T>
void write_blob(const fs::path& path, std::span<const T> values) {
  static_assert(std::is_trivially_copyable_v<T>);
  write_bytes_atomic(path, std::span<const char>(reinterpret_cast<const char*>(values.data()), values.size_bytes()));
}

inline void write_f32(const fs::path& path, std::span<const float> values) { write_blob<float>(path, values); }
inline void write_u8(const fs::path& path, std::span<const std::uint8_t> values) {
  write_blob<std::uint8_t>(path, values);
}

// Reads a headerless blob and checks its byte length against the element
// count the caller expects.
template <typename T>
std::vector<T> read_blob(const fs::path& path, std::size_t expected_count, const std::string& what) {
  require(fs::exists(path), ErrorKind::MissingBlob, what + " (" + path.string() + ")");
  const auto bytes = fs::file_size(path);
  require(bytes == expected_count * sizeof(T), ErrorKind::ShapeMismatch,
          what + " (" + path.string() + "): " + std::to_string(bytes) + " bytes, expected " +
              std::to_string(expected_count * sizeof(T)));
  std::vector<T> values(expected_count);
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::IoError, "cannot open " + path.string());
  in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(bytes));
  require(static_cast<bool>(in), ErrorKind::IoError, "short read from " + path.string());
  return values;
}

inline std::size_t element_count(const std::vector<std::int64_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t acc, std::int64_t d) { return acc * static_cast<std::size_t>(d); });
}

// Replaces `target` with the directory `staged` in one rename when possible.
inline void commit_directory(const fs::path& staged, const fs::path& target) {
  std::error_code ec;
  if (fs::exists(target)) fs::remove_all(target, ec);
  fs::rename(staged, target, ec);
  require(!ec, ErrorKind::IoError, "rename " + staged.string() + " -> " + target.string() + ": " + ec.message());
}

}  // namespace io

// Named float32 arrays plus JSON metadata, stored as a directory holding
// params.json and one .f32 blob per array.
class ParamsContainer {
 public:
  struct Array {
    std::vector<std::int64_t> shape;
    std::vector<float> values;
  };

  static constexpr int kVersion = 1;

  template <typename T>
  void put(const std::string& name, std::vector<std::int64_t> shape, std::span<const T> values) {
    require(io::element_count(shape) == values.size(), ErrorKind::ShapeMismatch,
            "array " + name + ": shape does not match value count");
    Array& a = arrays_[name];
    a.shape = std::move(shape);
    a.values.assign(values.begin(), values.end());
  }

  bool contains(const std::string& name) const { return arrays_.count(name) != 0; }

  const Array& get(const std::string& name) const {
    auto it = arrays_.find(name);
    require(it != arrays_.end(), ErrorKind::MissingBlob, "array " + name + " not in container");
    return it->second;
  }

  const Array& get(const std::string& name, const std::vector<std::int64_t>& shape) const {
    const Array& a = get(name);
    require(a.shape == shape, ErrorKind::ShapeMismatch, "array " + name + ": unexpected shape");
    return a;
  }

  const std::map<std::string, Array>& arrays() const { return arrays_; }
  json& metadata() { return metadata_; }
  const json& metadata() const { return metadata_; }

  void save(const fs::path& dir) const {
    const fs::path staged = io::temp_sibling(dir);
    fs::remove_all(staged);
    fs::create_directories(staged);
    json index;
    index["format"] = "msenc-params";
    index["version"] = kVersion;
    index["arrays"] = json::array();
    for (const auto& [name, array] : arrays_) {
      const std::string file = name + ".f32";
      io::write_f32(staged / file, array.values);
      index["arrays"].push_back({{"name", name}, {"file", file}, {"shape", array.shape}, {"dtype", "f32"}});
    }
    index["metadata"] = metadata_;
    io::write_json(staged / "params.json", index);
    io::commit_directory(staged, dir);
  }

  static ParamsContainer load(const fs::path& dir) {
    const fs::path index_path = dir / "params.json";
    require(fs::exists(index_path), ErrorKind::MissingBlob, "params index " + index_path.string());
    const json index = io::read_json(index_path);
    require(index.value("format", "") == "msenc-params", ErrorKind::VersionUnsupported,
            index_path.string() + ": not a params container");
    require(index.value("version", 0) == kVersion, ErrorKind::VersionUnsupported,
            index_path.string() + ": version " + std::to_string(index.value("version", 0)));
    ParamsContainer out;
    for (const auto& entry : index.at("arrays")) {
      const auto name = entry.at("name").get<std::string>();
      Array a;
      a.shape = entry.at("shape").get<std::vector<std::int64_t>>();
      a.values = io::read_blob<float>(dir / entry.at("file").get<std::string>(), io::element_count(a.shape),
                                      "array " + name);
      out.arrays_.emplace(name, std::move(a));
    }
    out.metadata_ = index.value("metadata", json::object());
    return out;
  }

 private:
  std::map<std::string, Array> arrays_;
  json metadata_ = json::object();
};

}  // namespace msenc
