#pragma once

#include <cstddef>
#include <string>

#include "dfmad/tensor.hpp"

namespace dfmad {

enum class Label : int { BonaFide = 0, Morph = 1 };

// "bonafide" / "morph", the spelling used in every CSV file.
std::string to_string(Label label);
Label parse_label(const std::string& text);

inline int label_value(Label label)
{
    return static_cast<int>(label);
}

inline constexpr const char* kBonaFideTag = "bonafide";

// One detection unit: the suspected (document) image, the trusted live capture,
// the ground-truth label and the generator tag of the suspected image.
class PairSample {
public:
    PairSample() = default;
    PairSample(std::string pair_id, Tensor suspected, Tensor live, Label label, std::string tool_tag);

    const std::string& pair_id() const noexcept { return pair_id_; }
    const Tensor& suspected() const noexcept { return suspected_; }
    // Counted in live_image_reads() so tests can prove a code path never
    // touches the live capture.
    const Tensor& live() const noexcept;
    Label label() const noexcept { return label_; }
    const std::string& tool_tag() const noexcept { return tool_tag_; }

    // Number of live() calls made on the current thread.
    static std::size_t live_image_reads() noexcept;

private:
    std::string pair_id_;
    Tensor suspected_;
    Tensor live_;
    Label label_ = Label::BonaFide;
    std::string tool_tag_;
};

} // namespace dfmad
