#include <featpipe/fmap.hpp>
#include <featpipe/io.hpp>

#include <bit>
#include <cmath>
#include <cstring>

namespace featpipe {

namespace {

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <typename U>
U get_le(std::span<const std::uint8_t> bytes, std::size_t offset) {
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(bytes[offset + i]) << (8 * i);
    return v;
}

}  // namespace

std::uint16_t float_to_half(float value) {
    const auto bits = std::bit_cast<std::uint32_t>(value);
    const std::uint32_t sign = (bits >> 16) & 0x8000u;
    const std::uint32_t abs = bits & 0x7FFFFFFFu;
    if (abs >= 0x7F800000u) {  // inf or nan
        return static_cast<std::uint16_t>(sign | 0x7C00u | (abs > 0x7F800000u ? 0x200u : 0u));
    }
    if (abs >= 0x477FF000u) return static_cast<std::uint16_t>(sign | 0x7C00u);  // overflow
    if (abs < 0x38800000u) {  // subnormal or zero in half precision
        if (abs < 0x33000000u) return static_cast<std::uint16_t>(sign);
        const std::uint32_t mant = (abs & 0x007FFFFFu) | 0x00800000u;
        const int shift = 126 - static_cast<int>(abs >> 23);
        std::uint32_t half = mant >> shift;
        const std::uint32_t rem = mant & ((1u << shift) - 1u);
        const std::uint32_t halfway = 1u << (shift - 1);
        if (rem > halfway || (rem == halfway && (half & 1u))) ++half;
        return static_cast<std::uint16_t>(sign | half);
    }
    std::uint32_t half = ((abs - 0x38000000u) >> 13);
    const std::uint32_t rem = abs & 0x1FFFu;
    if (rem > 0x1000u || (rem == 0x1000u && (half & 1u))) ++half;
    return static_cast<std::uint16_t>(sign | half);
}

float half_to_float(std::uint16_t h) {
    const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
    const std::uint32_t exp = (h >> 10) & 0x1Fu;
    std::uint32_t mant = h & 0x3FFu;
    if (exp == 0) {
        if (mant == 0) return std::bit_cast<float>(sign);
        int e = -1;
        do {
            ++e;
            mant <<= 1;
        } while ((mant & 0x400u) == 0);
        mant &= 0x3FFu;
        return std::bit_cast<float>(sign | (static_cast<std::uint32_t>(112 - e) << 23) | (mant << 13));
    }
    if (exp == 0x1F) return std::bit_cast<float>(sign | 0x7F800000u | (mant << 13));
    return std::bit_cast<float>(sign | ((exp + 112) << 23) | (mant << 13));
}

std::vector<std::uint8_t> encode_fmap(const FloatRaster& data, const nlohmann::json* provenance, FmapDtype dtype) {
    std::vector<std::uint8_t> out;
    const std::size_t elem = dtype == FmapDtype::f32 ? 4 : 2;
    out.reserve(kFmapHeaderSize + data.size() * elem);
    out.insert(out.end(), {'F', 'M', 'A', 'P'});
    put_le<std::uint32_t>(out, kFmapVersion);
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(data.height()));
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(data.width()));
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(data.channels()));
    out.push_back(static_cast<std::uint8_t>(dtype));
    out.insert(out.end(), {0, 0, 0});
    for (float v : data.data()) {
        if (dtype == FmapDtype::f32) {
            put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
        } else {
            put_le<std::uint16_t>(out, float_to_half(v));
        }
    }
    if (provenance != nullptr) {
        const auto text = provenance->dump();
        put_le<std::uint64_t>(out, text.size());
        out.insert(out.end(), text.begin(), text.end());
    }
    return out;
}

FmapRecord decode_fmap(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < kFmapHeaderSize || std::memcmp(bytes.data(), "FMAP", 4) != 0) {
        throw FmapError("not an FMAP stream (bad magic or truncated header)");
    }
    const auto version = get_le<std::uint32_t>(bytes, 4);
    if (version != kFmapVersion) throw FmapError("unsupported FMAP version " + std::to_string(version));
    const auto h = get_le<std::uint32_t>(bytes, 8);
    const auto w = get_le<std::uint32_t>(bytes, 12);
    const auto d = get_le<std::uint32_t>(bytes, 16);
    const auto dtype_byte = bytes[20];
    if (dtype_byte > 1) throw FmapError("unknown FMAP dtype " + std::to_string(dtype_byte));
    const auto dtype = static_cast<FmapDtype>(dtype_byte);
    const std::size_t elem = dtype == FmapDtype::f32 ? 4 : 2;
    const std::size_t count = static_cast<std::size_t>(h) * w * d;
    const std::size_t payload_end = kFmapHeaderSize + count * elem;
    if (bytes.size() < payload_end) throw FmapError("FMAP payload truncated");

    std::vector<float> values(count);
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t off = kFmapHeaderSize + i * elem;
        values[i] = dtype == FmapDtype::f32 ? std::bit_cast<float>(get_le<std::uint32_t>(bytes, off))
                                            : half_to_float(get_le<std::uint16_t>(bytes, off));
    }
    FmapRecord rec{FloatRaster(static_cast<int>(h), static_cast<int>(w), static_cast<int>(d), std::move(values)),
                   std::nullopt, dtype};
    if (bytes.size() > payload_end) {
        if (bytes.size() < payload_end + 8) throw FmapError("FMAP provenance length truncated");
        const auto len = get_le<std::uint64_t>(bytes, payload_end);
        if (bytes.size() != payload_end + 8 + len) throw FmapError("FMAP provenance block size mismatch");
        const auto* start = reinterpret_cast<const char*>(bytes.data() + payload_end + 8);
        try {
            rec.provenance = nlohmann::json::parse(start, start + len);
        } catch (const nlohmann::json::exception& e) {
            throw FmapError(std::string("FMAP provenance is not valid JSON: ") + e.what());
        }
    }
    return rec;
}

void write_fmap(const std::filesystem::path& path, const FloatRaster& data, const nlohmann::json* provenance,
                FmapDtype dtype) {
    write_atomic(path, encode_fmap(data, provenance, dtype));
}

FmapRecord read_fmap(const std::filesystem::path& path) { return decode_fmap(read_bytes(path)); }

}  // namespace featpipe
