#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "evanet/error.hpp"

namespace evanet {

// `key = value` configuration with `#` comments. Flags override file values;
// render() echoes the fully resolved set for the run directory.
class KeyValueConfig {
 public:
  static KeyValueConfig parse_file(const std::string& path);
  static KeyValueConfig parse_string(const std::string& text, const std::string& origin = "<string>");

  void set(const std::string& key, const std::string& value);
  bool has(const std::string& key) const;
  std::vector<std::string> keys() const;

  std::string get_string(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key, double fallback) const;
  std::size_t get_size(const std::string& key, std::size_t fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<double> get_double_list(const std::string& key,
                                      const std::vector<double>& fallback) const;

  std::string render() const;

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace evanet
