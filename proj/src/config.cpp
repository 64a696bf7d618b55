#include "homolab/config.hpp"

#include <cctype>
#include <fstream>
#include <sstream>

namespace homolab {

namespace {

bool name_char(char c) {
  return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.';
}

std::size_t first_non_space(const std::string& s) {
  std::size_t i = 0;
  while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
  return i;
}

std::string rtrim(std::string s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.pop_back();
  return s;
}

}  // namespace

Config Config::parse(const std::string& text) {
  Config cfg;
  std::istringstream is(text);
  std::string raw;
  std::string current;
  bool in_section = false;
  int line_no = 0;
  while (std::getline(is, raw)) {
    ++line_no;
    if (!raw.empty() && raw.back() == '\r') raw.pop_back();
    const std::size_t b = first_non_space(raw);
    const int col = static_cast<int>(b) + 1;
    if (b == raw.size() || raw[b] == '#' || raw[b] == ';') continue;
    if (raw[b] == '[') {
      const std::size_t close = raw.find(']', b);
      if (close == std::string::npos) throw ParseError("expected ']'", line_no, static_cast<int>(raw.size()) + 1);
      const std::string name = raw.substr(b + 1, close - b - 1);
      if (name.empty()) throw ParseError("empty section name", line_no, col + 1);
      for (std::size_t i = 0; i < name.size(); ++i)
        if (!name_char(name[i]))
          throw ParseError("invalid character in section name", line_no, col + 1 + static_cast<int>(i));
      const std::size_t rest = close + 1 + first_non_space(raw.substr(close + 1));
      if (rest < raw.size() && raw[rest] != '#' && raw[rest] != ';')
        throw ParseError("unexpected text after section header", line_no, static_cast<int>(rest) + 1);
      if (cfg.sections_.count(name)) throw ParseError("duplicate section [" + name + "]", line_no, col);
      cfg.sections_[name];
      current = name;
      in_section = true;
      continue;
    }
    const std::size_t eq = raw.find('=', b);
    if (eq == std::string::npos) throw ParseError("expected 'key = value'", line_no, col);
    const std::string key = rtrim(raw.substr(b, eq - b));
    if (key.empty()) throw ParseError("empty key", line_no, col);
    for (std::size_t i = 0; i < key.size(); ++i)
      if (!name_char(key[i])) throw ParseError("invalid character in key", line_no, col + static_cast<int>(i));
    if (!in_section) throw ParseError("key '" + key + "' outside any section", line_no, col);
    std::string value = raw.substr(eq + 1);
    value = rtrim(value.substr(first_non_space(value)));
    auto& sec = cfg.sections_[current];
    if (sec.count(key))
      throw ParseError("duplicate key '" + key + "' (first on line " + std::to_string(sec[key].line) + ")", line_no,
                       col);
    sec[key] = Entry{value, line_no};
  }
  return cfg;
}

Config Config::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidParameter("cannot read config file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

bool Config::has(const std::string& section, const std::string& key) const { return get(section, key) != nullptr; }

const std::string* Config::get(const std::string& section, const std::string& key) const {
  auto s = sections_.find(section);
  if (s == sections_.end()) return nullptr;
  auto k = s->second.find(key);
  return k == s->second.end() ? nullptr : &k->second.value;
}

std::map<std::string, std::string> Config::section(const std::string& section) const {
  std::map<std::string, std::string> out;
  auto s = sections_.find(section);
  if (s != sections_.end())
    for (const auto& [k, e] : s->second) out[k] = e.value;
  return out;
}

std::vector<std::string> Config::section_names() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : sections_) out.push_back(k);
  return out;
}

void Config::set(const std::string& section, const std::string& key, const std::string& value) {
  sections_[section][key] = Entry{value, 0};
}

std::string Config::canonical() const {
  std::string out;
  for (const auto& [s, keys] : sections_)
    for (const auto& [k, e] : keys) out += s + "." + k + "=" + e.value + "\n";
  return out;
}

std::uint64_t Config::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : canonical()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 15];
  return s;
}

}  // namespace homolab
