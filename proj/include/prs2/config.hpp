#pragma once

// Flat key=value configuration files: one pair per line, '#' starts a comment.

#include <fstream>
#include <map>
#include <set>
#include <stdexcept>
#include <string>

namespace prs2 {

class ConfigFileError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline std::string trim(const std::string& s)
{
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

/// Parses `text`; keys outside `allowed` are rejected with their name.
inline std::map<std::string, std::string> parse_key_values(const std::string& text, const std::set<std::string>& allowed,
                                                           const std::string& origin = "config")
{
    std::map<std::string, std::string> out;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        const auto nl = text.find('\n', pos);
        std::string line = text.substr(pos, nl == std::string::npos ? std::string::npos : nl - pos);
        pos = nl == std::string::npos ? text.size() + 1 : nl + 1;
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigFileError(origin + ":" + std::to_string(line_no) + ": expected key=value");
        }
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (!allowed.count(key)) {
            throw ConfigFileError(origin + ":" + std::to_string(line_no) + ": unknown key '" + key + "'");
        }
        out[key] = value;
    }
    return out;
}

inline std::map<std::string, std::string> read_key_value_file(const std::string& path,
                                                              const std::set<std::string>& allowed)
{
    std::ifstream is(path);
    if (!is) throw ConfigFileError("cannot open config file " + path);
    std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return parse_key_values(text, allowed, path);
}

} // namespace prs2
