#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace eopd::config {

// Malformed or unknown configuration; the message carries source:line.
struct ConfigParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Flat `key = value` text. '#' starts a comment; blank lines are ignored.
// Duplicate keys are errors.
struct Entry {
  std::string value;
  std::size_t line = 0;  // 0 when the value did not come from a text file
};

class KeyValues {
 public:
  static KeyValues parse(std::istream& is, const std::string& source);
  static KeyValues from_map(const std::map<std::string, std::string>& values,
                            const std::string& source);

  const std::map<std::string, Entry>& entries() const { return entries_; }
  const std::string& source() const { return source_; }
  void set(const std::string& key, const std::string& value) {
    entries_[key] = Entry{value, 0};
  }

 private:
  std::string source_;
  std::map<std::string, Entry> entries_;
};

// Typed, defaulted reads. Every read records the canonical value so that
// resolved() holds the full configuration with defaults materialized.
// finish() rejects keys that were never read.
class Reader {
 public:
  explicit Reader(KeyValues kv) : kv_(std::move(kv)) {}

  double get_double(const std::string& key, double fallback);
  std::size_t get_size(const std::string& key, std::size_t fallback);
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback);
  bool get_bool(const std::string& key, bool fallback);
  std::string get_string(const std::string& key, const std::string& fallback);
  std::vector<double> get_doubles(const std::string& key,
                                  const std::vector<double>& fallback);
  std::vector<std::uint64_t> get_u64s(const std::string& key,
                                      const std::vector<std::uint64_t>& fallback);

  void finish() const;
  const std::map<std::string, std::string>& resolved() const { return resolved_; }

  [[noreturn]] void fail(const std::string& key, const std::string& why) const;

 private:
  const Entry* find(const std::string& key);

  KeyValues kv_;
  std::map<std::string, std::string> resolved_;
  std::map<std::string, bool> used_;
};

std::vector<std::string> split_list(const std::string& text);
std::string format_double(double v);

}  // namespace eopd::config
