#pragma once

// key=value config files: '#' comments, blank lines ignored. Unknown keys are
// hard errors at the call site via ConfigView, which tracks what was read.

#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "e3pose/common.hpp"

namespace e3pose {

inline std::map<std::string, std::string> parse_config_text(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw FormatError("config line " + std::to_string(lineno) + ": expected key=value");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty())
      throw FormatError("config line " + std::to_string(lineno) + ": empty key");
    if (kv.count(key))
      throw FormatError("config line " + std::to_string(lineno) + ": duplicate key " + key);
    kv[key] = trim(line.substr(eq + 1));
  }
  return kv;
}

inline std::map<std::string, std::string> parse_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw FormatError("cannot open config file " + path);
  std::stringstream buf;
  buf << f.rdbuf();
  return parse_config_text(buf.str());
}

// Read-tracking view; finish() rejects keys nobody consumed.
class ConfigView {
 public:
  explicit ConfigView(std::map<std::string, std::string> kv) : kv_(std::move(kv)) {}

  bool has(const std::string& key) const { return kv_.count(key) > 0; }

  std::string get(const std::string& key, const std::string& fallback) {
    used_.insert(key);
    const auto it = kv_.find(key);
    return it == kv_.end() ? fallback : it->second;
  }
  std::string require(const std::string& key) {
    used_.insert(key);
    const auto it = kv_.find(key);
    if (it == kv_.end()) throw FormatError("config: missing required key " + key);
    return it->second;
  }
  long get_int(const std::string& key, long fallback) {
    if (!has(key)) {
      used_.insert(key);
      return fallback;
    }
    return parse_int(key, require(key));
  }
  double get_double(const std::string& key, double fallback) {
    if (!has(key)) {
      used_.insert(key);
      return fallback;
    }
    const std::string v = require(key);
    try {
      size_t at = 0;
      const double d = std::stod(v, &at);
      if (at != v.size()) throw std::invalid_argument(v);
      return d;
    } catch (const std::exception&) {
      throw FormatError("config: key " + key + " is not a number: " + v);
    }
  }
  std::vector<long> get_int_list(const std::string& key) {
    std::vector<long> out;
    std::istringstream in(require(key));
    std::string item;
    while (std::getline(in, item, ',')) out.push_back(parse_int(key, item));
    return out;
  }

  void finish() const {
    for (const auto& [k, v] : kv_)
      if (!used_.count(k)) throw FormatError("config: unknown key " + k);
  }

 private:
  long parse_int(const std::string& key, const std::string& v) const {
    try {
      size_t at = 0;
      const long n = std::stol(v, &at);
      if (at != v.size()) throw std::invalid_argument(v);
      return n;
    } catch (const std::exception&) {
      throw FormatError("config: key " + key + " is not an integer: " + v);
    }
  }

  std::map<std::string, std::string> kv_;
  std::set<std::string> used_;
};

}  // namespace e3pose
