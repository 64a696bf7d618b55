#pragma once

#include "homolab/common.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace homolab {

/// INI text: `[section]` headers, `key = value` lines, `#` or `;` comments on their own line.
class Config {
 public:
  struct Entry {
    std::string value;
    int line = 0;
  };

  /// Throws ParseError for ill-formed lines, keys outside a section and duplicate keys.
  static Config parse(const std::string& text);
  static Config load(const std::string& path);

  bool has_section(const std::string& section) const { return sections_.count(section) != 0; }
  bool has(const std::string& section, const std::string& key) const;
  const std::string* get(const std::string& section, const std::string& key) const;
  std::map<std::string, std::string> section(const std::string& section) const;
  std::vector<std::string> section_names() const;
  void set(const std::string& section, const std::string& key, const std::string& value);

  /// Sorted `section.key=value` lines; independent of order and formatting of the source.
  std::string canonical() const;
  /// FNV-1a of canonical().
  std::uint64_t hash() const;

 private:
  std::map<std::string, std::map<std::string, Entry>> sections_;
};

std::string hex64(std::uint64_t v);

}  // namespace homolab
