#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "paco/errors.hpp"

namespace paco {

// Little binary writer/reader pair for the versioned cache/model files.
// Doubles are stored as raw bit patterns so round-trips are exact.

class BinaryWriter {
 public:
  explicit BinaryWriter(const std::string &path)
      : out_(path, std::ios::binary), path_(path) {
    if (!out_) throw DataError("cannot open for write: " + path);
  }

  void u8(uint8_t v) { raw(&v, 1); }
  void u32(uint32_t v) { raw(&v, 4); }
  void u64(uint64_t v) { raw(&v, 8); }
  void f64(double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    u64(bits);
  }
  void str(const std::string &s) {
    u64(s.size());
    raw(s.data(), s.size());
  }
  void magic(const char tag[9]) { raw(tag, 8); }

  void close() {
    out_.close();
    if (!out_) throw DataError("write failed: " + path_);
  }

 private:
  void raw(const void *p, size_t n) {
    out_.write(static_cast<const char *>(p), static_cast<std::streamsize>(n));
    if (!out_) throw DataError("write failed: " + path_);
  }
  std::ofstream out_;
  std::string path_;
};

class BinaryReader {
 public:
  explicit BinaryReader(const std::string &path)
      : in_(path, std::ios::binary), path_(path) {
    if (!in_) throw DataError("cannot open for read: " + path);
  }

  uint8_t u8() {
    uint8_t v;
    raw(&v, 1);
    return v;
  }
  uint32_t u32() {
    uint32_t v;
    raw(&v, 4);
    return v;
  }
  uint64_t u64() {
    uint64_t v;
    raw(&v, 8);
    return v;
  }
  double f64() {
    uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  std::string str() {
    uint64_t n = u64();
    if (n > (1ULL << 32)) throw DataError("bad format (string length) in " + path_);
    std::string s(n, '\0');
    raw(s.data(), n);
    return s;
  }
  void expect_magic(const char tag[9]) {
    char got[8];
    raw(got, 8);
    if (std::memcmp(got, tag, 8) != 0)
      throw DataError("bad format: wrong magic in " + path_ + " (expected " +
                      std::string(tag, 8) + ")");
  }

 private:
  void raw(void *p, size_t n) {
    in_.read(static_cast<char *>(p), static_cast<std::streamsize>(n));
    if (static_cast<size_t>(in_.gcount()) != n)
      throw DataError("truncated file: " + path_);
  }
  std::ifstream in_;
  std::string path_;
};

}  // namespace paco
