#include "dfmad/dataset_io.hpp"

#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>

#include "dfmad/error.hpp"

namespace dfmad {

namespace fs = std::filesystem;

namespace {

constexpr char kImageMagic[8] = {'D', 'F', 'I', 'M', 'G', '1', '\0', '\0'};

static_assert(std::endian::native == std::endian::little, "binary image format assumes a little-endian host");

void check_image_shape(const Tensor& image, const fs::path& path)
{
    if (image.rank() != 3) {
        throw ShapeError("image for " + path.string() + " must be [C x H x W], got " + shape_str(image.shape()));
    }
}

void write_binary(const fs::path& path, const Tensor& image)
{
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot open " + path.string() + " for writing");
    }
    out.write(kImageMagic, sizeof(kImageMagic));
    for (std::size_t axis = 0; axis < 3; ++axis) {
        const auto d = static_cast<std::uint32_t>(image.dim(axis));
        out.write(reinterpret_cast<const char*>(&d), sizeof(d));
    }
    out.write(reinterpret_cast<const char*>(image.data().data()),
              static_cast<std::streamsize>(image.numel() * sizeof(double)));
    if (!out) {
        throw IoError("failed writing " + path.string());
    }
}

Tensor read_binary(const fs::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open image " + path.string());
    }
    char magic[sizeof(kImageMagic)];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kImageMagic, sizeof(magic)) != 0) {
        throw IoError(path.string() + " is not a DFIMG1 image");
    }
    Shape shape(3);
    for (auto& d : shape) {
        std::uint32_t v = 0;
        in.read(reinterpret_cast<char*>(&v), sizeof(v));
        if (!in || v == 0) {
            throw IoError("bad image header in " + path.string());
        }
        d = v;
    }
    std::vector<double> data(shape_numel(shape));
    in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
    if (!in) {
        throw IoError("truncated image " + path.string());
    }
    return Tensor(std::move(shape), std::move(data));
}

struct FileCloser {
    void operator()(std::FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void write_png(const fs::path& path, const Tensor& image)
{
    const std::size_t channels = image.dim(0);
    if (channels != 1 && channels != 3) {
        throw IoError("PNG output supports 1 or 3 channels, got " + std::to_string(channels));
    }
    const std::size_t h = image.dim(1);
    const std::size_t w = image.dim(2);
    FilePtr file(std::fopen(path.c_str(), "wb"));
    if (!file) {
        throw IoError("cannot open " + path.string() + " for writing");
    }
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw IoError("libpng initialisation failed");
    }
    std::vector<png_byte> pixels(h * w * channels);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            for (std::size_t c = 0; c < channels; ++c) {
                const double v = std::clamp(image[(c * h + y) * w + x], 0.0, 1.0);
                pixels[(y * w + x) * channels + c] = static_cast<png_byte>(std::lround(v * 255.0));
            }
        }
    }
    std::vector<png_bytep> rows(h);
    for (std::size_t y = 0; y < h; ++y) {
        rows[y] = pixels.data() + y * w * channels;
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("libpng failed writing " + path.string());
    }
    png_init_io(png, file.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
                 channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

Tensor read_png(const fs::path& path)
{
    FilePtr file(std::fopen(path.c_str(), "rb"));
    if (!file) {
        throw IoError("cannot open image " + path.string());
    }
    png_byte signature[8];
    if (std::fread(signature, 1, sizeof(signature), file.get()) != sizeof(signature) ||
        png_sig_cmp(signature, 0, sizeof(signature)) != 0) {
        throw IoError(path.string() + " is not a PNG file");
    }
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw IoError("libpng initialisation failed");
    }
    std::vector<png_byte> pixels;
    std::vector<png_bytep> rows;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("libpng failed reading " + path.string());
    }
    png_init_io(png, file.get());
    png_set_sig_bytes(png, sizeof(signature));
    png_read_info(png, info);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_palette_to_rgb(png);
    png_set_expand_gray_1_2_4_to_8(png);
    png_read_update_info(png, info);
    const std::size_t w = png_get_image_width(png, info);
    const std::size_t h = png_get_image_height(png, info);
    const std::size_t channels = png_get_channels(png, info);
    pixels.resize(h * w * channels);
    rows.resize(h);
    for (std::size_t y = 0; y < h; ++y) {
        rows[y] = pixels.data() + y * w * channels;
    }
    png_read_image(png, rows.data());
    png_destroy_read_struct(&png, &info, nullptr);

    Tensor image({channels, h, w});
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            for (std::size_t c = 0; c < channels; ++c) {
                image[(c * h + y) * w + x] = pixels[(y * w + x) * channels + c] / 255.0;
            }
        }
    }
    return image;
}

std::vector<std::string> split_csv_line(const std::string& line)
{
    std::vector<std::string> fields;
    std::string field;
    std::istringstream in(line);
    while (std::getline(in, field, ',')) {
        fields.push_back(field);
    }
    if (!line.empty() && line.back() == ',') {
        fields.emplace_back();
    }
    return fields;
}

void write_split(std::ofstream& manifest, const fs::path& dir, const std::vector<PairSample>& samples,
                 const char* split, ImageFormat format)
{
    for (const auto& sample : samples) {
        const fs::path suspected = fs::path("images") / (sample.pair_id() + "_s" + extension(format));
        const fs::path live = fs::path("images") / (sample.pair_id() + "_l" + extension(format));
        write_image(dir / suspected, sample.suspected());
        write_image(dir / live, sample.live());
        manifest << sample.pair_id() << ',' << suspected.generic_string() << ',' << live.generic_string() << ','
                 << to_string(sample.label()) << ',' << sample.tool_tag() << ',' << split << '\n';
    }
}

} // namespace

std::string to_string(ImageFormat format)
{
    return format == ImageFormat::Png ? "png" : "binary";
}

ImageFormat parse_image_format(const std::string& text)
{
    if (text == "png") {
        return ImageFormat::Png;
    }
    if (text == "binary" || text == "dfi") {
        return ImageFormat::Binary;
    }
    throw ValidationError("unknown image format '" + text + "' (expected binary or png)");
}

const char* extension(ImageFormat format)
{
    return format == ImageFormat::Png ? ".png" : ".dfi";
}

void write_image(const fs::path& path, const Tensor& image)
{
    check_image_shape(image, path);
    if (path.extension() == ".png") {
        write_png(path, image);
    } else if (path.extension() == ".dfi") {
        write_binary(path, image);
    } else {
        throw IoError("unsupported image extension for " + path.string() + " (use .dfi or .png)");
    }
}

Tensor read_image(const fs::path& path)
{
    if (path.extension() == ".png") {
        return read_png(path);
    }
    if (path.extension() == ".dfi") {
        return read_binary(path);
    }
    throw IoError("unsupported image extension for " + path.string() + " (use .dfi or .png)");
}

void write_dataset(const fs::path& dir, const ProtocolSplit& split, ImageFormat format)
{
    fs::create_directories(dir / "images");
    std::ofstream manifest(dir / "manifest.csv");
    if (!manifest) {
        throw IoError("cannot write " + (dir / "manifest.csv").string());
    }
    manifest << kManifestHeader << '\n';
    write_split(manifest, dir, split.train, "train", format);
    write_split(manifest, dir, split.test, "test", format);
    if (!manifest) {
        throw IoError("failed writing " + (dir / "manifest.csv").string());
    }
}

Dataset read_dataset(const fs::path& manifest)
{
    std::ifstream in(manifest);
    if (!in) {
        throw IoError("cannot open dataset manifest " + manifest.string());
    }
    std::string line;
    if (!std::getline(in, line) || line != kManifestHeader) {
        throw IoError(manifest.string() + ": expected header '" + std::string(kManifestHeader) + "'");
    }
    const fs::path root = manifest.parent_path();
    Dataset dataset;
    Shape shape;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        const auto fields = split_csv_line(line);
        const std::string where = manifest.string() + ":" + std::to_string(line_no);
        if (fields.size() != 6) {
            throw IoError(where + ": expected 6 fields, got " + std::to_string(fields.size()));
        }
        Tensor suspected = read_image(root / fields[1]);
        Tensor live = read_image(root / fields[2]);
        if (shape.empty()) {
            shape = suspected.shape();
        }
        if (suspected.shape() != shape || live.shape() != shape) {
            throw ShapeError(where + ": image shape differs from " + shape_str(shape));
        }
        PairSample sample(fields[0], std::move(suspected), std::move(live), parse_label(fields[3]), fields[4]);
        if (fields[5] == "train") {
            dataset.train.push_back(std::move(sample));
        } else if (fields[5] == "test") {
            dataset.test.push_back(std::move(sample));
        } else {
            throw ValidationError(where + ": split must be train or test, got '" + fields[5] + "'");
        }
    }
    return dataset;
}

} // namespace dfmad
