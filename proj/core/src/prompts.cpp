#include "psyforge/prompts.hpp"

#include <fstream>
#include <sstream>

#include "embedded_templates.hpp"
#include "psyforge/error.hpp"

namespace psyforge {

PromptTemplates PromptTemplates::defaults() {
    PromptTemplates t;
    for (const auto& [name, text] : detail::kEmbeddedTemplates) t.templates_.emplace(name, text);
    return t;
}

PromptTemplates PromptTemplates::with_overrides(const std::filesystem::path& dir) {
    PromptTemplates t = defaults();
    if (!std::filesystem::is_directory(dir)) throw IoError("template directory not found: " + dir.string());
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (entry.path().extension() != ".txt") continue;
        std::ifstream in(entry.path(), std::ios::binary);
        std::ostringstream ss;
        ss << in.rdbuf();
        t.templates_[entry.path().stem().string()] = ss.str();
    }
    return t;
}

const std::string& PromptTemplates::get(std::string_view name) const {
    auto it = templates_.find(name);
    if (it == templates_.end()) throw ValidationError("unknown prompt template '" + std::string(name) + "'");
    return it->second;
}

void PromptTemplates::set(std::string name, std::string text) { templates_[std::move(name)] = std::move(text); }

std::string render(std::string_view tmpl, const std::map<std::string, std::string, std::less<>>& vars) {
    std::string out;
    out.reserve(tmpl.size());
    std::size_t i = 0;
    while (i < tmpl.size()) {
        const char c = tmpl[i];
        if (c == '{' && i + 1 < tmpl.size() && tmpl[i + 1] == '{') {
            out.push_back('{');
            i += 2;
            continue;
        }
        if (c == '}' && i + 1 < tmpl.size() && tmpl[i + 1] == '}') {
            out.push_back('}');
            i += 2;
            continue;
        }
        if (c == '{') {
            const auto close = tmpl.find('}', i + 1);
            if (close != std::string_view::npos) {
                auto it = vars.find(tmpl.substr(i + 1, close - i - 1));
                if (it != vars.end()) {
                    out += it->second;
                    i = close + 1;
                    continue;
                }
            }
        }
        out.push_back(c);
        ++i;
    }
    return out;
}

} // namespace psyforge
