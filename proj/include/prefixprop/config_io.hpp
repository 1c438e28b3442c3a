#pragma once

#include <initializer_list>
#include <string>
#include <string_view>

#include <json.hpp>

#include "prefixprop/errors.hpp"

namespace prefixprop {

// Reads j[key] into dst when present; type errors become ConfigError naming the key.
template <typename T>
void read_field(const nlohmann::json& j, const char* key, T& dst) {
    if (!j.contains(key)) {
        return;
    }
    try {
        j.at(key).get_to(dst);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string(key) + ": " + e.what());
    }
}

// Throws ConfigError for the first key of object j not in `known`.
inline void reject_unknown_fields(const nlohmann::json& j, std::initializer_list<std::string_view> known) {
    if (!j.is_object()) {
        throw ConfigError("expected a JSON object");
    }
    for (const auto& item : j.items()) {
        bool found = false;
        for (std::string_view k : known) {
            found = found || k == item.key();
        }
        if (!found) {
            throw ConfigError(item.key() + ": unknown field");
        }
    }
}

// Runs fn, prefixing any ConfigError or JSON error with "section.".
template <typename Fn>
void with_field_path(std::string_view section, Fn&& fn) {
    try {
        fn();
    } catch (const ConfigError& e) {
        throw ConfigError(std::string(section) + "." + e.what());
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string(section) + ": " + e.what());
    }
}

}  // namespace prefixprop
