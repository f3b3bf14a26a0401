#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace featpipe {

/// Dense H x W x C raster stored row-major, channels innermost.
template <typename T>
class Raster {
public:
    using value_type = T;

    Raster() = default;
    Raster(int height, int width, int channels, T fill = T{})
        : height_(height), width_(width), channels_(channels) {
        if (height < 0 || width < 0 || channels < 0) {
            throw std::invalid_argument("raster dimensions must be non-negative");
        }
        data_.assign(static_cast<std::size_t>(height) * width * channels, fill);
    }
    Raster(int height, int width, int channels, std::vector<T> data)
        : height_(height), width_(width), channels_(channels), data_(std::move(data)) {
        if (data_.size() != static_cast<std::size_t>(height) * width * channels) {
            throw std::invalid_argument("raster payload size does not match " +
                                        std::to_string(height) + "x" + std::to_string(width) +
                                        "x" + std::to_string(channels));
        }
    }

    int height() const noexcept { return height_; }
    int width() const noexcept { return width_; }
    int channels() const noexcept { return channels_; }
    std::size_t pixels() const noexcept { return static_cast<std::size_t>(height_) * width_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::size_t index(int y, int x, int c = 0) const noexcept {
        return (static_cast<std::size_t>(y) * width_ + x) * channels_ + c;
    }
    T& operator()(int y, int x, int c = 0) noexcept { return data_[index(y, x, c)]; }
    const T& operator()(int y, int x, int c = 0) const noexcept { return data_[index(y, x, c)]; }

    std::span<T> pixel(int y, int x) noexcept {
        return {data_.data() + index(y, x), static_cast<std::size_t>(channels_)};
    }
    std::span<const T> pixel(int y, int x) const noexcept {
        return {data_.data() + index(y, x), static_cast<std::size_t>(channels_)};
    }
    std::span<const T> pixel(std::size_t flat) const noexcept {
        return {data_.data() + flat * channels_, static_cast<std::size_t>(channels_)};
    }

    std::vector<T>& data() noexcept { return data_; }
    const std::vector<T>& data() const noexcept { return data_; }

    bool same_shape(const Raster& o) const noexcept {
        return height_ == o.height_ && width_ == o.width_ && channels_ == o.channels_;
    }
    friend bool operator==(const Raster&, const Raster&) = default;

private:
    int height_ = 0;
    int width_ = 0;
    int channels_ = 0;
    std::vector<T> data_;
};

using Image = Raster<std::uint8_t>;
using FloatRaster = Raster<float>;
/// Integer class raster. For label masks 0 means unlabeled.
using LabelRaster = Raster<std::int32_t>;

}  // namespace featpipe
