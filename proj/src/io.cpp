#include <featpipe/io.hpp>

#include <png.h>
#include <jpeglib.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <csetjmp>
#include <cstring>
#include <fstream>
#include <sstream>
#include <thread>

namespace featpipe {

namespace fs = std::filesystem;

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open '" + path.string() + "' for reading");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_atomic(const fs::path& path, std::span<const std::uint8_t> bytes) {
    static std::atomic<unsigned> counter{0};
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ostringstream suffix;
    suffix << ".tmp-" << std::hash<std::thread::id>{}(std::this_thread::get_id()) << "-" << counter++;
    fs::path tmp = path;
    tmp += suffix.str();
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open '" + tmp.string() + "' for writing");
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) {
            out.close();
            fs::remove(tmp);
            throw std::runtime_error("write to '" + tmp.string() + "' failed");
        }
    }
    fs::rename(tmp, path);
}

void write_atomic(const fs::path& path, const std::string& text) {
    write_atomic(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

namespace {

struct PngReadState {
    std::span<const std::uint8_t> bytes;
    std::size_t offset = 0;
};

void png_read_span(png_structp png, png_bytep out, png_size_t len) {
    auto* st = static_cast<PngReadState*>(png_get_io_ptr(png));
    if (st->offset + len > st->bytes.size()) png_error(png, "unexpected end of PNG data");
    std::memcpy(out, st->bytes.data() + st->offset, len);
    st->offset += len;
}

void png_write_vec(png_structp png, png_bytep data, png_size_t len) {
    auto* out = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(png));
    out->insert(out->end(), data, data + len);
}

void png_flush_noop(png_structp) {}

[[noreturn]] void png_error_throw(png_structp, png_const_charp msg) { throw ImageDecodeError(msg); }
void png_warning_ignore(png_structp, png_const_charp) {}

bool is_png(std::span<const std::uint8_t> bytes) {
    return bytes.size() >= 8 && png_sig_cmp(bytes.data(), 0, 8) == 0;
}

bool is_jpeg(std::span<const std::uint8_t> bytes) {
    return bytes.size() >= 3 && bytes[0] == 0xFF && bytes[1] == 0xD8 && bytes[2] == 0xFF;
}

// RAII wrapper; libpng errors are converted to exceptions by png_error_throw.
class PngReader {
public:
    explicit PngReader(std::span<const std::uint8_t> bytes) : state_{bytes, 0} {
        png_ = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_throw, png_warning_ignore);
        if (png_ == nullptr) throw ImageDecodeError("png_create_read_struct failed");
        info_ = png_create_info_struct(png_);
        if (info_ == nullptr) {
            png_destroy_read_struct(&png_, nullptr, nullptr);
            throw ImageDecodeError("png_create_info_struct failed");
        }
        png_set_read_fn(png_, &state_, png_read_span);
    }
    ~PngReader() { png_destroy_read_struct(&png_, &info_, nullptr); }
    PngReader(const PngReader&) = delete;
    PngReader& operator=(const PngReader&) = delete;

    png_structp png() { return png_; }
    png_infop info() { return info_; }

    std::vector<std::uint8_t> read_rows(int height, std::size_t rowbytes) {
        std::vector<std::uint8_t> buf(rowbytes * height);
        std::vector<png_bytep> rows(height);
        for (int y = 0; y < height; ++y) rows[y] = buf.data() + rowbytes * y;
        png_read_image(png_, rows.data());
        png_read_end(png_, nullptr);
        return buf;
    }

private:
    PngReadState state_;
    png_structp png_ = nullptr;
    png_infop info_ = nullptr;
};

Image decode_png(std::span<const std::uint8_t> bytes) {
    PngReader r(bytes);
    png_read_info(r.png(), r.info());
    const int w = static_cast<int>(png_get_image_width(r.png(), r.info()));
    const int h = static_cast<int>(png_get_image_height(r.png(), r.info()));
    const int color = png_get_color_type(r.png(), r.info());
    const int depth = png_get_bit_depth(r.png(), r.info());
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(r.png());
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(r.png());
    if (depth == 16) png_set_strip_16(r.png());
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(r.png());
    png_read_update_info(r.png(), r.info());
    const int channels = png_get_channels(r.png(), r.info());
    const auto rowbytes = png_get_rowbytes(r.png(), r.info());
    auto buf = r.read_rows(h, rowbytes);
    if (channels != 1 && channels != 3) throw ImageDecodeError("unsupported PNG channel count");
    std::vector<std::uint8_t> data;
    data.reserve(static_cast<std::size_t>(w) * h * channels);
    for (int y = 0; y < h; ++y) {
        data.insert(data.end(), buf.begin() + rowbytes * y, buf.begin() + rowbytes * y + w * channels);
    }
    return Image(h, w, channels, std::move(data));
}

struct JpegErrorMgr {
    jpeg_error_mgr base;
    std::jmp_buf jump;
    char message[JMSG_LENGTH_MAX];
};

void jpeg_error_exit(j_common_ptr cinfo) {
    auto* err = reinterpret_cast<JpegErrorMgr*>(cinfo->err);
    (*cinfo->err->format_message)(cinfo, err->message);
    std::longjmp(err->jump, 1);
}

Image decode_jpeg(std::span<const std::uint8_t> bytes) {
    jpeg_decompress_struct cinfo{};
    JpegErrorMgr err{};
    cinfo.err = jpeg_std_error(&err.base);
    err.base.error_exit = jpeg_error_exit;
    // Only trivially destructible locals live across the setjmp boundary.
    std::vector<std::uint8_t>* data = new std::vector<std::uint8_t>();
    int w = 0, h = 0, channels = 0;
    if (setjmp(err.jump)) {
        jpeg_destroy_decompress(&cinfo);
        delete data;
        throw ImageDecodeError(std::string("JPEG decode failed: ") + err.message);
    }
    jpeg_create_decompress(&cinfo);
    jpeg_mem_src(&cinfo, bytes.data(), static_cast<unsigned long>(bytes.size()));
    jpeg_read_header(&cinfo, TRUE);
    if (cinfo.num_components != 1) cinfo.out_color_space = JCS_RGB;
    jpeg_start_decompress(&cinfo);
    w = static_cast<int>(cinfo.output_width);
    h = static_cast<int>(cinfo.output_height);
    channels = cinfo.output_components;
    data->resize(static_cast<std::size_t>(w) * h * channels);
    while (cinfo.output_scanline < cinfo.output_height) {
        JSAMPROW row = data->data() + static_cast<std::size_t>(cinfo.output_scanline) * w * channels;
        jpeg_read_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_decompress(&cinfo);
    jpeg_destroy_decompress(&cinfo);
    std::vector<std::uint8_t> owned = std::move(*data);
    delete data;
    return Image(h, w, channels, std::move(owned));
}

std::vector<std::uint8_t> encode_png_rows(int width, int height, int color_type, const std::uint8_t* pixels,
                                          std::size_t rowbytes, const std::vector<png_color>* palette) {
    std::vector<std::uint8_t> out;
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_throw, png_warning_ignore);
    if (png == nullptr) throw std::runtime_error("png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    if (info == nullptr) {
        png_destroy_write_struct(&png, nullptr);
        throw std::runtime_error("png_create_info_struct failed");
    }
    try {
        png_set_write_fn(png, &out, png_write_vec, png_flush_noop);
        png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, color_type,
                     PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
        if (palette != nullptr) {
            png_set_PLTE(png, info, palette->data(), static_cast<int>(palette->size()));
        }
        png_write_info(png, info);
        for (int y = 0; y < height; ++y) {
            png_write_row(png, const_cast<png_bytep>(pixels + rowbytes * y));
        }
        png_write_end(png, nullptr);
    } catch (...) {
        png_destroy_write_struct(&png, &info);
        throw;
    }
    png_destroy_write_struct(&png, &info);
    return out;
}

}  // namespace

Image decode_image(std::span<const std::uint8_t> bytes) {
    if (is_png(bytes)) return decode_png(bytes);
    if (is_jpeg(bytes)) return decode_jpeg(bytes);
    throw ImageDecodeError("unrecognised image format (expected PNG or JPEG)");
}

Image read_image(const fs::path& path) {
    try {
        return decode_image(read_bytes(path));
    } catch (const ImageDecodeError& e) {
        throw ImageDecodeError(path.string() + ": " + e.what());
    }
}

std::vector<std::uint8_t> encode_png(const Image& image) {
    if (image.channels() != 1 && image.channels() != 3) {
        throw std::invalid_argument("PNG encoding supports 1 or 3 channels");
    }
    return encode_png_rows(image.width(), image.height(),
                           image.channels() == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, image.data().data(),
                           static_cast<std::size_t>(image.width()) * image.channels(), nullptr);
}

void write_png(const fs::path& path, const Image& image) { write_atomic(path, encode_png(image)); }

std::array<std::uint8_t, 3> palette_color(int index) {
    if (index == 0) return {0, 0, 0};
    // Golden-angle hue walk gives well-separated colours for small indices.
    const double hue = std::fmod(index * 137.508, 360.0) / 60.0;
    const int sector = static_cast<int>(hue) % 6;
    const double f = hue - static_cast<int>(hue);
    const double v = 0.95, s = 0.75;
    const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
    double r = 0, g = 0, b = 0;
    switch (sector) {
        case 0: r = v; g = t; b = p; break;
        case 1: r = q; g = v; b = p; break;
        case 2: r = p; g = v; b = t; break;
        case 3: r = p; g = q; b = v; break;
        case 4: r = t; g = p; b = v; break;
        default: r = v; g = p; b = q; break;
    }
    return {static_cast<std::uint8_t>(r * 255), static_cast<std::uint8_t>(g * 255),
            static_cast<std::uint8_t>(b * 255)};
}

std::vector<std::uint8_t> encode_indexed_png(const LabelRaster& labels) {
    if (labels.channels() != 1) throw std::invalid_argument("indexed PNG needs a single-channel raster");
    int max_index = 0;
    std::vector<std::uint8_t> idx(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const auto v = labels.data()[i];
        if (v < 0 || v > 255) throw std::invalid_argument("indexed PNG values must be in [0, 255]");
        idx[i] = static_cast<std::uint8_t>(v);
        max_index = std::max(max_index, v);
    }
    std::vector<png_color> palette(static_cast<std::size_t>(max_index) + 1);
    for (int i = 0; i <= max_index; ++i) {
        const auto c = palette_color(i);
        palette[i] = png_color{c[0], c[1], c[2]};
    }
    return encode_png_rows(labels.width(), labels.height(), PNG_COLOR_TYPE_PALETTE, idx.data(),
                           static_cast<std::size_t>(labels.width()), &palette);
}

LabelRaster decode_indexed_png(std::span<const std::uint8_t> bytes) {
    if (!is_png(bytes)) throw ImageDecodeError("label mask is not a PNG");
    PngReader r(bytes);
    png_read_info(r.png(), r.info());
    const int w = static_cast<int>(png_get_image_width(r.png(), r.info()));
    const int h = static_cast<int>(png_get_image_height(r.png(), r.info()));
    const int color = png_get_color_type(r.png(), r.info());
    const int depth = png_get_bit_depth(r.png(), r.info());
    if (color != PNG_COLOR_TYPE_PALETTE && color != PNG_COLOR_TYPE_GRAY) {
        throw ImageDecodeError("label mask must be an indexed or 8-bit grayscale PNG");
    }
    if (depth == 16) png_set_strip_16(r.png());
    if (depth < 8) png_set_packing(r.png());
    png_read_update_info(r.png(), r.info());
    const auto rowbytes = png_get_rowbytes(r.png(), r.info());
    auto buf = r.read_rows(h, rowbytes);
    LabelRaster out(h, w, 1);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) out(y, x) = buf[rowbytes * y + x];
    }
    return out;
}

LabelRaster read_indexed_png(const fs::path& path) {
    try {
        return decode_indexed_png(read_bytes(path));
    } catch (const ImageDecodeError& e) {
        throw ImageDecodeError(path.string() + ": " + e.what());
    }
}

void write_indexed_png(const fs::path& path, const LabelRaster& labels) {
    write_atomic(path, encode_indexed_png(labels));
}

}  // namespace featpipe
