#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "uasr/error.hpp"

namespace uasr {

// Flat `key=value` text, one pair per line, `#` starts a comment. Used for
// model configs, dataset manifests and the config block inside checkpoints.
using KvMap = std::map<std::string, std::string>;

KvMap kv_parse(const std::string& text);
std::string kv_serialize(const KvMap& kv);

// Typed readers; each throws ConfigError naming the key on bad input.
int64_t kv_get_int(const KvMap& kv, const std::string& key);
double kv_get_double(const KvMap& kv, const std::string& key);
std::vector<int64_t> kv_get_int_list(const KvMap& kv, const std::string& key);
std::string kv_get_string(const KvMap& kv, const std::string& key);

std::string int_list_str(const std::vector<int64_t>& v);

}  // namespace uasr
