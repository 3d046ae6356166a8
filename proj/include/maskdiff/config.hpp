#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace maskdiff {

// Flat "key = value" config with '#' comments. Parse errors name the line
// and key; typed getters name the offending field.
class KeyValueConfig {
public:
    KeyValueConfig() = default;

    static KeyValueConfig parse_file(const std::string& path);
    static KeyValueConfig parse_text(const std::string& text, const std::string& origin = "<string>");

    bool has(const std::string& key) const { return values_.count(key) > 0; }
    void set(const std::string& key, const std::string& value) { values_[key] = value; }
    void set_int(const std::string& key, int64_t v) { values_[key] = std::to_string(v); }
    void set_double(const std::string& key, double v);

    std::string get_string(const std::string& key) const;
    std::string get_string(const std::string& key, const std::string& fallback) const;
    int64_t get_int(const std::string& key) const;
    int64_t get_int(const std::string& key, int64_t fallback) const;
    double get_double(const std::string& key) const;
    double get_double(const std::string& key, double fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;
    std::vector<std::string> get_list(const std::string& key, const std::vector<std::string>& fallback) const;
    void set_list(const std::string& key, const std::vector<std::string>& v);

    // Deterministic canonical text (sorted keys); also the hash input.
    std::string serialize() const;
    uint64_t hash() const;
    std::string hash_hex() const;

    const std::map<std::string, std::string>& values() const { return values_; }
    void merge_overrides(const KeyValueConfig& overrides);

private:
    std::map<std::string, std::string> values_;
};

}  // namespace maskdiff
