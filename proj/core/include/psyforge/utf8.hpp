#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

namespace psyforge::utf8 {

/// Decodes UTF-8. Invalid bytes decode to U+FFFD one byte at a time.
std::u32string decode(std::string_view text);
std::string encode(std::u32string_view text);
void append(std::string& out, char32_t cp);

/// Number of code points.
std::size_t length(std::string_view text);

/// Han ideographs, kana, hangul and the CJK compatibility blocks.
bool is_cjk(char32_t cp);
bool is_ascii_alnum(char32_t cp);
/// Full-width Latin letters and digits (U+FF10..FF19, FF21..FF3A, FF41..FF5A).
bool is_fullwidth_alnum(char32_t cp);
/// Unicode white space plus the ideographic space.
bool is_space(char32_t cp);

/// Trims ASCII and ideographic white space from both ends.
std::string trim(std::string_view text);

} // namespace psyforge::utf8
