#include "uasr/kv.hpp"

#include <cstdlib>
#include <sstream>

namespace uasr {

namespace {

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace

KvMap kv_parse(const std::string& text) {
  KvMap kv;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) +
                        ": expected key=value, got '" + line + "'");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw ConfigError("line " + std::to_string(lineno) + ": empty key");
    if (!kv.emplace(key, value).second)
      throw ConfigError("line " + std::to_string(lineno) + ": duplicate key '" +
                        key + "'");
  }
  return kv;
}

std::string kv_serialize(const KvMap& kv) {
  std::ostringstream os;
  for (const auto& [k, v] : kv) os << k << "=" << v << "\n";
  return os.str();
}

int64_t kv_get_int(const KvMap& kv, const std::string& key) {
  const std::string& s = kv_get_string(kv, key);
  char* end = nullptr;
  long long v = std::strtoll(s.c_str(), &end, 10);
  if (end == s.c_str() || *end != '\0')
    throw ConfigError(key + ": expected an integer, got '" + s + "'");
  return v;
}

double kv_get_double(const KvMap& kv, const std::string& key) {
  const std::string& s = kv_get_string(kv, key);
  char* end = nullptr;
  double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0')
    throw ConfigError(key + ": expected a number, got '" + s + "'");
  return v;
}

std::vector<int64_t> kv_get_int_list(const KvMap& kv, const std::string& key) {
  const std::string& s = kv_get_string(kv, key);
  std::vector<int64_t> out;
  std::istringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    char* end = nullptr;
    long long v = std::strtoll(item.c_str(), &end, 10);
    if (end == item.c_str() || *end != '\0')
      throw ConfigError(key + ": expected comma-separated integers, got '" +
                        s + "'");
    out.push_back(v);
  }
  if (out.empty())
    throw ConfigError(key + ": expected a non-empty integer list");
  return out;
}

std::string kv_get_string(const KvMap& kv, const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end()) throw ConfigError("missing key '" + key + "'");
  return it->second;
}

std::string int_list_str(const std::vector<int64_t>& v) {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) os << ",";
    os << v[i];
  }
  return os.str();
}

}  // namespace uasr
