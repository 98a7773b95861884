#pragma once

// Little-endian byte buffers with a CRC32 trailer, shared by the checkpoint
// and codebook formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mshubert/errors.hpp"

namespace mshubert {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

std::uint32_t crc32_of(const void* data, std::size_t size);

class ByteWriter {
 public:
  template <typename T>
  void put(T v) {
    const auto n = bytes_.size();
    bytes_.resize(n + sizeof(T));
    std::memcpy(bytes_.data() + n, &v, sizeof(T));
  }
  void put_bytes(const void* data, std::size_t size) {
    const auto* p = static_cast<const char*>(data);
    bytes_.insert(bytes_.end(), p, p + size);
  }
  void put_string(std::string_view s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    put_bytes(s.data(), s.size());
  }
  /// Appends the CRC32 of everything written so far.
  void seal() { put<std::uint32_t>(crc32_of(bytes_.data(), bytes_.size())); }

  const std::vector<char>& bytes() const { return bytes_; }

 private:
  std::vector<char> bytes_;
};

class ByteReader {
 public:
  ByteReader(const std::vector<char>& bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

  /// Verifies and strips the CRC32 trailer.
  void check_crc() {
    if (bytes_.size() < 4) throw FormatError(what_ + ": file too short");
    std::uint32_t stored;
    std::memcpy(&stored, bytes_.data() + bytes_.size() - 4, 4);
    end_ = bytes_.size() - 4;
    if (crc32_of(bytes_.data(), end_) != stored) throw FormatError(what_ + ": CRC mismatch (corrupt or truncated file)");
  }

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  void get_bytes(void* out, std::size_t size) {
    need(size);
    std::memcpy(out, bytes_.data() + pos_, size);
    pos_ += size;
  }
  std::string get_string() {
    const auto n = get<std::uint32_t>();
    std::string s(n, '\0');
    get_bytes(s.data(), n);
    return s;
  }
  bool done() const { return pos_ == limit(); }

 private:
  std::size_t limit() const { return end_ == 0 ? bytes_.size() : end_; }
  void need(std::size_t n) const {
    if (pos_ + n > limit()) throw FormatError(what_ + ": unexpected end of data");
  }

  const std::vector<char>& bytes_;
  std::string what_;
  std::size_t pos_ = 0;
  std::size_t end_ = 0;
};

std::vector<char> read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, const std::vector<char>& bytes);

}  // namespace mshubert
