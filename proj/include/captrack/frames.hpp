#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "captrack/common.hpp"

namespace captrack {

/// Sensor and padding geometry of the capacitive panel. The mm<->pixel
/// mapping uses pixel centers: integer pixel c maps to the center of cell c.
struct ScreenGeometry {
    double width_mm = 345.0;
    double height_mm = 195.0;
    int cols = 71;
    int rows = 41;
    int padded_cols = 128;
    int padded_rows = 96;
    int pad_left = 28;   // 28 + 71 + 29 = 128
    int pad_top = 27;    // 27 + 41 + 28 = 96

    double pitch_x() const { return width_mm / cols; }
    double pitch_y() const { return height_mm / rows; }

    double pixel_to_mm_x(double col) const { return (col - pad_left + 0.5) * pitch_x(); }
    double pixel_to_mm_y(double row) const { return (row - pad_top + 0.5) * pitch_y(); }
    double mm_to_pixel_x(double x_mm) const { return x_mm / pitch_x() + pad_left - 0.5; }
    double mm_to_pixel_y(double y_mm) const { return y_mm / pitch_y() + pad_top - 0.5; }

    /// Reflection constant of the padded grid: flipping pixel column c to
    /// padded_cols-1-c maps x to mirror_x_mm() - x.
    double mirror_x_mm() const { return (padded_cols - 2.0 * pad_left) * pitch_x(); }
};

/// One raw capacitive frame: 71x41 8-bit readings, row-major.
struct CapFrame {
    int cols = 71;
    int rows = 41;
    uint64_t timestamp_ms = 0;
    std::vector<uint8_t> grid;  // rows*cols, row-major

    uint8_t at(int r, int c) const { return grid[static_cast<size_t>(r) * cols + c]; }
    uint8_t& at(int r, int c) { return grid[static_cast<size_t>(r) * cols + c]; }
};

inline CapFrame make_cap_frame(uint64_t timestamp_ms = 0, uint8_t fill = 0) {
    CapFrame f;
    f.timestamp_ms = timestamp_ms;
    f.grid.assign(static_cast<size_t>(f.rows) * f.cols, fill);
    return f;
}

/// Normalized, noise-clamped, padded frame. Channel 0 holds values in
/// {0} U (0.6, 1]; channel 1 marks original sensor pixels with 1.
struct NormFrame {
    int cols = 128;
    int rows = 96;
    std::vector<double> values;    // rows*cols
    std::vector<double> validity;  // rows*cols

    double value(int r, int c) const { return values[static_cast<size_t>(r) * cols + c]; }
    double valid(int r, int c) const { return validity[static_cast<size_t>(r) * cols + c]; }
};

/// Normalize to [0,1], clamp the noise band (0, 0.6] to zero, and center the
/// sensor area in the padded grid with the validity channel set.
inline NormFrame preprocess(const CapFrame& frame, const ScreenGeometry& geom = {}) {
    require(frame.cols == geom.cols && frame.rows == geom.rows &&
                frame.grid.size() == static_cast<size_t>(geom.cols) * geom.rows,
            "preprocess: frame dimensions must be " + std::to_string(geom.cols) + "x" +
                std::to_string(geom.rows));
    NormFrame out;
    out.cols = geom.padded_cols;
    out.rows = geom.padded_rows;
    out.values.assign(static_cast<size_t>(out.rows) * out.cols, 0.0);
    out.validity.assign(static_cast<size_t>(out.rows) * out.cols, 0.0);
    for (int r = 0; r < geom.rows; ++r) {
        for (int c = 0; c < geom.cols; ++c) {
            double v = frame.at(r, c) / 255.0;
            if (v <= 0.6) v = 0.0;
            size_t idx = static_cast<size_t>(r + geom.pad_top) * out.cols + (c + geom.pad_left);
            out.values[idx] = v;
            out.validity[idx] = 1.0;
        }
    }
    return out;
}

/// Re-quantize the valid region of a NormFrame back to a raw frame.
inline CapFrame reconstruct_cap_frame(const NormFrame& norm, const ScreenGeometry& geom = {},
                                      uint64_t timestamp_ms = 0) {
    CapFrame f = make_cap_frame(timestamp_ms);
    for (int r = 0; r < geom.rows; ++r)
        for (int c = 0; c < geom.cols; ++c) {
            double v = norm.value(r + geom.pad_top, c + geom.pad_left);
            f.at(r, c) = static_cast<uint8_t>(std::lround(v * 255.0));
        }
    return f;
}

// ---------------------------------------------------------------------------
// .capv sequence files. Little-endian throughout:
//   "CAPV" | version u16 | cols u16 | rows u16 | frame count u32 | fps f32
//   per frame: timestamp_ms u64, then rows*cols raw bytes row-major.
// ---------------------------------------------------------------------------

inline constexpr uint16_t kCapvVersion = 1;

namespace detail {

template <typename T>
void put_le(std::string& out, T v) {
    for (size_t i = 0; i < sizeof(T); ++i)
        out.push_back(static_cast<char>((static_cast<uint64_t>(v) >> (8 * i)) & 0xff));
}

inline void put_le_f32(std::string& out, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_le(out, bits);
}

template <typename T>
T get_le(const std::string& buf, size_t& pos) {
    if (pos + sizeof(T) > buf.size()) fail("capv: truncated file");
    uint64_t v = 0;
    for (size_t i = 0; i < sizeof(T); ++i)
        v |= static_cast<uint64_t>(static_cast<uint8_t>(buf[pos + i])) << (8 * i);
    pos += sizeof(T);
    return static_cast<T>(v);
}

inline float get_le_f32(const std::string& buf, size_t& pos) {
    uint32_t bits = get_le<uint32_t>(buf, pos);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail("cannot open file: " + path);
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return buf;
}

inline void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail("cannot open file for writing: " + path);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail("write failed: " + path);
}

}  // namespace detail

struct CapSequence {
    float fps = 15.0f;
    std::vector<CapFrame> frames;
};

inline std::string encode_capv(const CapSequence& seq) {
    std::string out;
    out += "CAPV";
    detail::put_le<uint16_t>(out, kCapvVersion);
    int cols = seq.frames.empty() ? 71 : seq.frames.front().cols;
    int rows = seq.frames.empty() ? 41 : seq.frames.front().rows;
    detail::put_le<uint16_t>(out, static_cast<uint16_t>(cols));
    detail::put_le<uint16_t>(out, static_cast<uint16_t>(rows));
    detail::put_le<uint32_t>(out, static_cast<uint32_t>(seq.frames.size()));
    detail::put_le_f32(out, seq.fps);
    uint64_t prev_ts = 0;
    bool first = true;
    for (const CapFrame& f : seq.frames) {
        require(f.cols == cols && f.rows == rows, "capv: inconsistent frame dimensions");
        require(first || f.timestamp_ms >= prev_ts, "capv: timestamps must not decrease");
        first = false;
        prev_ts = f.timestamp_ms;
        detail::put_le<uint64_t>(out, f.timestamp_ms);
        out.append(reinterpret_cast<const char*>(f.grid.data()), f.grid.size());
    }
    return out;
}

inline void write_capv(const std::string& path, const CapSequence& seq) {
    detail::write_file(path, encode_capv(seq));
}

inline CapSequence decode_capv(const std::string& buf) {
    size_t pos = 0;
    if (buf.size() < 4 || buf.compare(0, 4, "CAPV") != 0) fail("capv: bad magic");
    pos = 4;
    uint16_t version = detail::get_le<uint16_t>(buf, pos);
    require(version == kCapvVersion, "capv: unsupported version " + std::to_string(version));
    int cols = detail::get_le<uint16_t>(buf, pos);
    int rows = detail::get_le<uint16_t>(buf, pos);
    uint32_t count = detail::get_le<uint32_t>(buf, pos);
    CapSequence seq;
    seq.fps = detail::get_le_f32(buf, pos);
    size_t cells = static_cast<size_t>(cols) * rows;
    uint64_t prev_ts = 0;
    for (uint32_t i = 0; i < count; ++i) {
        CapFrame f;
        f.cols = cols;
        f.rows = rows;
        f.timestamp_ms = detail::get_le<uint64_t>(buf, pos);
        require(i == 0 || f.timestamp_ms >= prev_ts, "capv: timestamps must not decrease");
        prev_ts = f.timestamp_ms;
        if (pos + cells > buf.size()) fail("capv: truncated frame data");
        f.grid.assign(buf.begin() + static_cast<long>(pos), buf.begin() + static_cast<long>(pos + cells));
        pos += cells;
        seq.frames.push_back(std::move(f));
    }
    return seq;
}

inline CapSequence read_capv(const std::string& path) {
    return decode_capv(detail::read_file(path));
}

}  // namespace captrack
