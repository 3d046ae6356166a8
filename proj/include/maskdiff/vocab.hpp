#pragma once

#include <string>
#include <vector>

namespace maskdiff {

// Closed conditioning vocabulary shared by the dataset generator and the
// denoiser's embedding table: a reserved null token, one token per class
// label, and one per templated "a <color> <class>" phrase.
class Vocabulary {
public:
    Vocabulary(std::vector<std::string> classes, std::vector<std::string> colors);

    static Vocabulary standard();  // 5 shape classes x 6 colors

    int size() const { return static_cast<int>(tokens_.size()); }
    int null_id() const { return 0; }
    int class_token(const std::string& cls) const;
    int caption_token(const std::string& color, const std::string& cls) const;
    const std::string& token_text(int id) const;
    int lookup(const std::string& text) const;  // -1 when absent

    const std::vector<std::string>& classes() const { return classes_; }
    const std::vector<std::string>& colors() const { return colors_; }
    int class_index(const std::string& cls) const;

private:
    std::vector<std::string> classes_, colors_;
    std::vector<std::string> tokens_;
};

}  // namespace maskdiff
