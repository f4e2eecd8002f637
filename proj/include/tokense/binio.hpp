#pragma once

// Little-endian binary serialization helpers for checkpoint files.

#include "tokense/common.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <type_traits>
#include <vector>

namespace tokense::binio {

class Writer {
 public:
  template <typename T>
    requires std::is_arithmetic_v<T>
  void put(T v) {
    char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    buf_.append(b, sizeof(T));
  }

  void put_bytes(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }

  void put_string(const std::string& s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    buf_ += s;
  }

  template <typename S>
  void put_matrix(const Mat<S>& m) {
    put<std::uint32_t>(static_cast<std::uint32_t>(m.rows()));
    put<std::uint32_t>(static_cast<std::uint32_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.size(); ++i) put<float>(static_cast<float>(m.data()[i]));
  }

  const std::string& bytes() const { return buf_; }

  void save(const std::string& path, std::string_view module) const {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error(module, "cannot write '" + path + "'");
    f.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
    if (!f) throw Error(module, "write failed for '" + path + "'");
  }

 private:
  std::string buf_;
};

class Reader {
 public:
  Reader(std::string bytes, std::string_view module) : buf_(std::move(bytes)), module_(module) {}

  static Reader from_file(const std::string& path, std::string_view module) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error(module, "cannot open '" + path + "'");
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return Reader(std::move(bytes), module);
  }

  template <typename T>
    requires std::is_arithmetic_v<T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string get_string() {
    const auto n = get<std::uint32_t>();
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::string get_fixed(std::size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  template <typename S>
  Mat<S> get_matrix() {
    const auto rows = get<std::uint32_t>();
    const auto cols = get<std::uint32_t>();
    Mat<S> m(rows, cols);
    need(static_cast<std::size_t>(rows) * cols * sizeof(float));
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(get<float>());
    return m;
  }

  bool at_end() const { return pos_ == buf_.size(); }
  std::size_t remaining() const { return buf_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > buf_.size())
      throw Error(module_, "truncated file: needed " + std::to_string(n) + " bytes at offset " +
                               std::to_string(pos_) + " of " + std::to_string(buf_.size()));
  }

  std::string buf_;
  std::string module_;
  std::size_t pos_ = 0;
};

}  // namespace tokense::binio
