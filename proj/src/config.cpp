#include "eopd/config.hpp"

#include <cerrno>
#include <cmath>
#include <cstdlib>
#include <istream>

#include <fmt/format.h>

namespace eopd::config {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

bool parse_double(const std::string& text, double& out) {
  if (text.empty()) return false;
  errno = 0;
  char* end = nullptr;
  out = std::strtod(text.c_str(), &end);
  return end == text.c_str() + text.size() && errno != ERANGE && !std::isnan(out);
}

bool parse_u64(const std::string& text, std::uint64_t& out) {
  if (text.empty() || text[0] == '-' || text[0] == '+') return false;
  errno = 0;
  char* end = nullptr;
  out = std::strtoull(text.c_str(), &end, 10);
  return end == text.c_str() + text.size() && errno != ERANGE;
}

template <typename T>
std::string join(const std::vector<T>& xs) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i > 0) out += ",";
    if constexpr (std::is_same_v<T, double>) {
      out += format_double(xs[i]);
    } else {
      out += fmt::format("{}", xs[i]);
    }
  }
  return out;
}

}  // namespace

std::string format_double(double v) { return fmt::format("{}", v); }

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto comma = text.find(',', start);
    const std::string item =
        trim(text.substr(start, comma == std::string::npos ? std::string::npos
                                                           : comma - start));
    if (!item.empty()) out.push_back(item);
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

KeyValues KeyValues::parse(std::istream& is, const std::string& source) {
  KeyValues kv;
  kv.source_ = source;
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(is, raw)) {
    ++line_no;
    const auto hash = raw.find('#');
    const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigParseError(
          fmt::format("{}:{}: expected 'key = value'", source, line_no));
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw ConfigParseError(fmt::format("{}:{}: empty key", source, line_no));
    if (kv.entries_.count(key) != 0)
      throw ConfigParseError(fmt::format("{}:{}: duplicate key '{}' (first on line {})",
                                         source, line_no, key, kv.entries_[key].line));
    kv.entries_[key] = Entry{value, line_no};
  }
  return kv;
}

KeyValues KeyValues::from_map(const std::map<std::string, std::string>& values,
                              const std::string& source) {
  KeyValues kv;
  kv.source_ = source;
  for (const auto& [k, v] : values) kv.entries_[k] = Entry{v, 0};
  return kv;
}

const Entry* Reader::find(const std::string& key) {
  used_[key] = true;
  const auto it = kv_.entries().find(key);
  return it == kv_.entries().end() ? nullptr : &it->second;
}

void Reader::fail(const std::string& key, const std::string& why) const {
  const auto it = kv_.entries().find(key);
  if (it != kv_.entries().end() && it->second.line > 0)
    throw ConfigParseError(
        fmt::format("{}:{}: {}: {}", kv_.source(), it->second.line, key, why));
  throw ConfigParseError(fmt::format("{}: {}: {}", kv_.source(), key, why));
}

double Reader::get_double(const std::string& key, double fallback) {
  double v = fallback;
  if (const Entry* e = find(key); e != nullptr && !parse_double(e->value, v))
    fail(key, "expected a real number, got '" + e->value + "'");
  resolved_[key] = format_double(v);
  return v;
}

std::uint64_t Reader::get_u64(const std::string& key, std::uint64_t fallback) {
  std::uint64_t v = fallback;
  if (const Entry* e = find(key); e != nullptr && !parse_u64(e->value, v))
    fail(key, "expected a nonnegative integer, got '" + e->value + "'");
  resolved_[key] = fmt::format("{}", v);
  return v;
}

std::size_t Reader::get_size(const std::string& key, std::size_t fallback) {
  return static_cast<std::size_t>(get_u64(key, fallback));
}

bool Reader::get_bool(const std::string& key, bool fallback) {
  bool v = fallback;
  if (const Entry* e = find(key)) {
    if (e->value == "true" || e->value == "1") {
      v = true;
    } else if (e->value == "false" || e->value == "0") {
      v = false;
    } else {
      fail(key, "expected true or false, got '" + e->value + "'");
    }
  }
  resolved_[key] = v ? "true" : "false";
  return v;
}

std::string Reader::get_string(const std::string& key, const std::string& fallback) {
  std::string v = fallback;
  if (const Entry* e = find(key)) v = e->value;
  resolved_[key] = v;
  return v;
}

std::vector<double> Reader::get_doubles(const std::string& key,
                                        const std::vector<double>& fallback) {
  std::vector<double> v = fallback;
  if (const Entry* e = find(key)) {
    v.clear();
    for (const std::string& item : split_list(e->value)) {
      double d = 0.0;
      if (!parse_double(item, d)) fail(key, "bad list element '" + item + "'");
      v.push_back(d);
    }
  }
  resolved_[key] = join(v);
  return v;
}

std::vector<std::uint64_t> Reader::get_u64s(const std::string& key,
                                            const std::vector<std::uint64_t>& fallback) {
  std::vector<std::uint64_t> v = fallback;
  if (const Entry* e = find(key)) {
    v.clear();
    for (const std::string& item : split_list(e->value)) {
      std::uint64_t u = 0;
      if (!parse_u64(item, u)) fail(key, "bad list element '" + item + "'");
      v.push_back(u);
    }
  }
  resolved_[key] = join(v);
  return v;
}

void Reader::finish() const {
  for (const auto& [key, entry] : kv_.entries()) {
    if (used_.count(key) == 0) {
      if (entry.line > 0)
        throw ConfigParseError(
            fmt::format("{}:{}: unknown key '{}'", kv_.source(), entry.line, key));
      throw ConfigParseError(fmt::format("{}: unknown key '{}'", kv_.source(), key));
    }
  }
}

}  // namespace eopd::config
