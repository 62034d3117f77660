#include "dfmad/sample.hpp"

#include "dfmad/error.hpp"

namespace dfmad {

namespace {
thread_local std::size_t g_live_reads = 0;
}

std::string to_string(Label label)
{
    return label == Label::Morph ? "morph" : "bonafide";
}

Label parse_label(const std::string& text)
{
    if (text == "morph" || text == "1") {
        return Label::Morph;
    }
    if (text == "bonafide" || text == "0") {
        return Label::BonaFide;
    }
    throw ValidationError("unknown label '" + text + "' (expected bonafide or morph)");
}

PairSample::PairSample(std::string pair_id, Tensor suspected, Tensor live, Label label, std::string tool_tag)
    : pair_id_(std::move(pair_id)),
      suspected_(std::move(suspected)),
      live_(std::move(live)),
      label_(label),
      tool_tag_(std::move(tool_tag))
{
    if (suspected_.shape() != live_.shape()) {
        throw ShapeError("pair " + pair_id_ + ": suspected " + shape_str(suspected_.shape()) + " and live " +
                         shape_str(live_.shape()) + " differ in shape");
    }
}

const Tensor& PairSample::live() const noexcept
{
    ++g_live_reads;
    return live_;
}

std::size_t PairSample::live_image_reads() noexcept
{
    return g_live_reads;
}

} // namespace dfmad
