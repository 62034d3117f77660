#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "dfmad/sample.hpp"
#include "dfmad/synth.hpp"
#include "dfmad/tensor.hpp"

namespace dfmad {

// Image files on disk:
//   .dfi  flat binary: "DFIMG1\0\0", u32 channels, u32 height, u32 width,
//         then channels*height*width little-endian f64 values (lossless).
//   .png  8-bit grayscale (1 channel) or RGB (3 channels); values are
//         quantised to k/255 on write.
enum class ImageFormat { Binary, Png };

std::string to_string(ImageFormat format);
ImageFormat parse_image_format(const std::string& text);
const char* extension(ImageFormat format);

void write_image(const std::filesystem::path& path, const Tensor& image);
Tensor read_image(const std::filesystem::path& path);

inline constexpr const char* kManifestHeader = "pair_id,suspected_path,live_path,label,tool_tag,split";

struct Dataset {
    std::vector<PairSample> train;
    std::vector<PairSample> test;
};

// Writes <dir>/manifest.csv and <dir>/images/<pair_id>_{s,l}.<ext>. Paths in
// the manifest are relative to <dir>.
void write_dataset(const std::filesystem::path& dir, const ProtocolSplit& split, ImageFormat format);

// Reads a manifest; image paths are resolved relative to the manifest's
// directory. Every image must share one shape.
Dataset read_dataset(const std::filesystem::path& manifest);

} // namespace dfmad
