#include "maskdiff/config.hpp"

#include <cctype>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace maskdiff {

namespace {

void trim(std::string& s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.erase(s.begin());
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.pop_back();
}

}  // namespace

KeyValueConfig KeyValueConfig::parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_text(ss.str(), path);
}

KeyValueConfig KeyValueConfig::parse_text(const std::string& text, const std::string& origin) {
    KeyValueConfig cfg;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error("config: " + origin + ":" + std::to_string(lineno) +
                                     ": expected 'key = value', got '" + line + "'");
        std::string key = line.substr(0, eq), val = line.substr(eq + 1);
        trim(key);
        trim(val);
        if (key.empty())
            throw std::runtime_error("config: " + origin + ":" + std::to_string(lineno) + ": empty key");
        cfg.values_[key] = val;
    }
    return cfg;
}

void KeyValueConfig::set_double(const std::string& key, double v) {
    std::ostringstream ss;
    ss.precision(17);
    ss << v;
    values_[key] = ss.str();
}

std::string KeyValueConfig::get_string(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw std::runtime_error("config: missing required key '" + key + "'");
    return it->second;
}

std::string KeyValueConfig::get_string(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
}

int64_t KeyValueConfig::get_int(const std::string& key) const {
    const std::string v = get_string(key);
    try {
        size_t pos = 0;
        const int64_t r = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw std::runtime_error("config: key '" + key + "' is not an integer: '" + v + "'");
    }
}

int64_t KeyValueConfig::get_int(const std::string& key, int64_t fallback) const {
    return has(key) ? get_int(key) : fallback;
}

double KeyValueConfig::get_double(const std::string& key) const {
    const std::string v = get_string(key);
    try {
        size_t pos = 0;
        const double r = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw std::runtime_error("config: key '" + key + "' is not a number: '" + v + "'");
    }
}

double KeyValueConfig::get_double(const std::string& key, double fallback) const {
    return has(key) ? get_double(key) : fallback;
}

bool KeyValueConfig::get_bool(const std::string& key, bool fallback) const {
    if (!has(key)) return fallback;
    const std::string v = get_string(key);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw std::runtime_error("config: key '" + key + "' is not a boolean: '" + v + "'");
}

std::vector<std::string> KeyValueConfig::get_list(const std::string& key,
                                                  const std::vector<std::string>& fallback) const {
    if (!has(key)) return fallback;
    std::vector<std::string> out;
    std::stringstream ss(get_string(key));
    std::string item;
    while (std::getline(ss, item, ',')) {
        trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

void KeyValueConfig::set_list(const std::string& key, const std::vector<std::string>& v) {
    std::string joined;
    for (const auto& s : v) joined += (joined.empty() ? "" : ",") + s;
    values_[key] = joined;
}

std::string KeyValueConfig::serialize() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
    return out;
}

uint64_t KeyValueConfig::hash() const {
    // FNV-1a over the canonical serialization
    uint64_t h = 1469598103934665603ULL;
    for (char c : serialize()) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ULL;
    }
    return h;
}

std::string KeyValueConfig::hash_hex() const {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(hash()));
    return buf;
}

void KeyValueConfig::merge_overrides(const KeyValueConfig& overrides) {
    for (const auto& [k, v] : overrides.values_) values_[k] = v;
}

}  // namespace maskdiff
