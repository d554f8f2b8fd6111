#pragma once

// Plain-text config: `[section]` headers, `key = value` lines, `#` comments.
// Lists are comma-separated. Sections map 1:1 to modules.

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace propdec {

class Config {
public:
    Config() = default;

    static Config parse(const std::string& text);
    static Config load(const std::string& path);
    std::string serialize() const;
    void save(const std::string& path) const;

    bool has(const std::string& section, const std::string& key) const;

    std::string get_str(const std::string& section, const std::string& key,
                        const std::string& fallback) const;
    long long get_int(const std::string& section, const std::string& key,
                      long long fallback) const;
    double get_double(const std::string& section, const std::string& key,
                      double fallback) const;
    bool get_bool(const std::string& section, const std::string& key,
                  bool fallback) const;
    std::vector<std::string> get_list(const std::string& section,
                                      const std::string& key) const;

    void set(const std::string& section, const std::string& key,
             const std::string& value);
    void set_list(const std::string& section, const std::string& key,
                  const std::vector<std::string>& values);

    // merge other's keys over this one's
    void overlay(const Config& other);

    const std::map<std::string, std::map<std::string, std::string>>& sections() const {
        return sections_;
    }

private:
    std::map<std::string, std::map<std::string, std::string>> sections_;
};

} // namespace propdec
