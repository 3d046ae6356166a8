#include "maskdiff/vocab.hpp"

#include <stdexcept>

namespace maskdiff {

Vocabulary::Vocabulary(std::vector<std::string> classes, std::vector<std::string> colors)
    : classes_(std::move(classes)), colors_(std::move(colors)) {
    tokens_.push_back("<null>");
    for (const auto& c : classes_) tokens_.push_back(c);
    for (const auto& col : colors_)
        for (const auto& c : classes_) tokens_.push_back("a " + col + " " + c);
}

Vocabulary Vocabulary::standard() {
    return Vocabulary({"circle", "square", "triangle", "cross", "ring"},
                      {"red", "green", "blue", "yellow", "magenta", "cyan"});
}

int Vocabulary::class_token(const std::string& cls) const {
    return 1 + class_index(cls);
}

int Vocabulary::class_index(const std::string& cls) const {
    for (size_t i = 0; i < classes_.size(); ++i)
        if (classes_[i] == cls) return static_cast<int>(i);
    throw std::invalid_argument("Vocabulary: unknown class '" + cls + "'");
}

int Vocabulary::caption_token(const std::string& color, const std::string& cls) const {
    int ci = -1;
    for (size_t i = 0; i < colors_.size(); ++i)
        if (colors_[i] == color) ci = static_cast<int>(i);
    if (ci < 0) throw std::invalid_argument("Vocabulary: unknown color '" + color + "'");
    return 1 + static_cast<int>(classes_.size()) + ci * static_cast<int>(classes_.size()) + class_index(cls);
}

const std::string& Vocabulary::token_text(int id) const {
    if (id < 0 || id >= size()) throw std::out_of_range("Vocabulary: token id out of range");
    return tokens_[static_cast<size_t>(id)];
}

int Vocabulary::lookup(const std::string& text) const {
    for (size_t i = 0; i < tokens_.size(); ++i)
        if (tokens_[i] == text) return static_cast<int>(i);
    return -1;
}

}  // namespace maskdiff
