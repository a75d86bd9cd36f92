#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace gabformer {

// Plain-text "key=value" records, one per line. Blank lines and lines
// starting with '#' are ignored; whitespace around keys and values is trimmed.
class KeyValues {
 public:
  static KeyValues parse(const std::string& text);
  static KeyValues load(const std::filesystem::path& path);

  bool contains(const std::string& key) const { return values_.count(key) != 0; }
  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  void erase(const std::string& key) { values_.erase(key); }
  const std::map<std::string, std::string>& entries() const& { return values_; }
  // Rvalue overload so `for (... : make_kv().entries())` does not dangle.
  std::map<std::string, std::string> entries() && { return std::move(values_); }

  // Throws std::invalid_argument naming the key when missing or malformed.
  std::string get_string(const std::string& key) const;
  double get_double(const std::string& key) const;
  std::uint64_t get_uint(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::vector<double> get_doubles(const std::string& key) const;
  std::vector<std::uint64_t> get_uints(const std::string& key) const;

  // Sorted by key.
  std::string to_text() const;
  void save(const std::filesystem::path& path) const;

 private:
  std::map<std::string, std::string> values_;
};

// Shortest decimal text that parses back to the same double.
std::string format_double(double v);
std::string join_doubles(const std::vector<double>& v);

}  // namespace gabformer
