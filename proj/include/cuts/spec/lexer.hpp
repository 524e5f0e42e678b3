#ifndef CUTS_SPEC_LEXER_HPP
#define CUTS_SPEC_LEXER_HPP

#include <cctype>
#include <string>
#include <vector>

#include "cuts/common.hpp"
#include "cuts/spec/ast.hpp"

namespace cuts::spec {

struct Token {
    enum class Kind { Ident, Number, Symbol, End };
    Kind kind = Kind::End;
    std::string text;
    double number = 0.0;
    Span span;
};

// Keywords are matched case-insensitively at parse time; the lexer only
// distinguishes identifiers, numbers, and punctuation.
inline std::vector<Token> lex(const std::string& text) {
    std::vector<Token> out;
    int line = 1, col = 1;
    std::size_t i = 0;
    auto make_span = [&]() { return Span{line, col}; };

    while (i < text.size()) {
        const char c = text[i];
        if (c == '\n') {
            ++line;
            col = 1;
            ++i;
            continue;
        }
        if (std::isspace(static_cast<unsigned char>(c))) {
            ++col;
            ++i;
            continue;
        }
        if (c == '#') {  // comment to end of line
            while (i < text.size() && text[i] != '\n') ++i;
            continue;
        }
        Span span = make_span();
        if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
            std::size_t j = i;
            while (j < text.size() &&
                   (std::isalnum(static_cast<unsigned char>(text[j])) || text[j] == '_')) {
                ++j;
            }
            out.push_back(Token{Token::Kind::Ident, text.substr(i, j - i), 0.0, span});
            col += static_cast<int>(j - i);
            i = j;
            continue;
        }
        if (std::isdigit(static_cast<unsigned char>(c)) ||
            (c == '.' && i + 1 < text.size() &&
             std::isdigit(static_cast<unsigned char>(text[i + 1])))) {
            std::size_t j = i;
            while (j < text.size() &&
                   (std::isdigit(static_cast<unsigned char>(text[j])) || text[j] == '.')) {
                ++j;
            }
            if (j < text.size() && (text[j] == 'e' || text[j] == 'E')) {
                std::size_t k = j + 1;
                if (k < text.size() && (text[k] == '+' || text[k] == '-')) ++k;
                if (k < text.size() && std::isdigit(static_cast<unsigned char>(text[k]))) {
                    ++k;
                    while (k < text.size() && std::isdigit(static_cast<unsigned char>(text[k]))) ++k;
                    j = k;
                }
            }
            std::string num = text.substr(i, j - i);
            Token t{Token::Kind::Number, num, 0.0, span};
            t.number = std::strtod(num.c_str(), nullptr);
            out.push_back(std::move(t));
            col += static_cast<int>(j - i);
            i = j;
            continue;
        }
        // multi-character operators first
        auto two = text.substr(i, 2);
        if (two == "==" || two == "!=" || two == "<=" || two == ">=") {
            out.push_back(Token{Token::Kind::Symbol, two, 0.0, span});
            i += 2;
            col += 2;
            continue;
        }
        const std::string singles = "<>=+-*/(){},:;[]|";
        if (singles.find(c) != std::string::npos) {
            out.push_back(Token{Token::Kind::Symbol, std::string(1, c), 0.0, span});
            ++i;
            ++col;
            continue;
        }
        fail(ErrorCode::SyntaxError,
             "unexpected character '" + std::string(1, c) + "' at " + span.to_string());
    }
    out.push_back(Token{Token::Kind::End, "", 0.0, make_span()});
    return out;
}

}  // namespace cuts::spec

#endif  // CUTS_SPEC_LEXER_HPP
