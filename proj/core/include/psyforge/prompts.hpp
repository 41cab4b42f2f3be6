#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>

namespace psyforge {

/// Named prompt templates. Defaults are compiled in from core/templates/;
/// a directory of `<name>.txt` files overrides individual entries.
class PromptTemplates {
public:
    static PromptTemplates defaults();
    /// Defaults with every `<name>.txt` found in `dir` replacing its entry.
    static PromptTemplates with_overrides(const std::filesystem::path& dir);

    /// Throws ValidationError for an unknown name.
    const std::string& get(std::string_view name) const;
    void set(std::string name, std::string text);
    const std::map<std::string, std::string, std::less<>>& all() const { return templates_; }

private:
    std::map<std::string, std::string, std::less<>> templates_;
};

/// Substitutes `{name}` placeholders present in `vars`; unknown placeholders
/// are left untouched. `{{` and `}}` produce literal braces.
std::string render(std::string_view tmpl, const std::map<std::string, std::string, std::less<>>& vars);

} // namespace psyforge
