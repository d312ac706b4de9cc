#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>
#include <vector>

#include "grpolab/common.hpp"

namespace grpolab::io {

/// Little-endian binary writer. Doubles are stored as their IEEE-754 bit pattern.
class Writer {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }

  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }

  void i64(std::int64_t v) { u64(static_cast<std::uint64_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

  void str(std::string_view s) {
    u64(s.size());
    buf_.append(s);
  }

  void magic(std::string_view m) { buf_.append(m); }

  void f64s(const std::vector<double>& v) {
    u64(v.size());
    for (double x : v) f64(x);
  }

  void i64s(const std::vector<int>& v) {
    u64(v.size());
    for (int x : v) i64(x);
  }

  const std::string& bytes() const { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(std::string_view data) : data_(data) {}

  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(data_[pos_++]);
  }

  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(data_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }

  std::int64_t i64() { return static_cast<std::int64_t>(u64()); }
  double f64() { return std::bit_cast<double>(u64()); }

  std::string str() {
    const auto n = count(1);
    std::string s(data_.substr(pos_, n));
    pos_ += n;
    return s;
  }

  void expect_magic(std::string_view m) {
    need(m.size());
    if (data_.substr(pos_, m.size()) != m) throw DomainError("bad magic, expected '" + std::string(m) + "'");
    pos_ += m.size();
  }

  std::vector<double> f64s() {
    const auto n = count(8);
    std::vector<double> v(n);
    for (auto& x : v) x = f64();
    return v;
  }

  std::vector<int> i64s() {
    const auto n = count(8);
    std::vector<int> v(n);
    for (auto& x : v) x = static_cast<int>(i64());
    return v;
  }

  bool done() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw DomainError("truncated binary record");
  }

  // Reads a length prefix and checks that elem_size * n bytes remain.
  std::size_t count(std::size_t elem_size) {
    const auto n = u64();
    if (n > (data_.size() - pos_) / elem_size) throw DomainError("truncated binary record");
    return static_cast<std::size_t>(n);
  }

  std::string_view data_;
  std::size_t pos_ = 0;
};

std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view bytes);

}  // namespace grpolab::io
