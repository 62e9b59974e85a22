#pragma once

#include <Eigen/Core>
#include <array>
#include <cstdio>
#include <fstream>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "captrack/estimator.hpp"
#include "captrack/frames.hpp"
#include "captrack/joints.hpp"

// Classification-regression decoding: hard argmax over each heatmap for the
// planar position, probability-weighted expectation over depth bins for the
// height, 0.5 threshold on the existence pair.

namespace captrack {

/// Height below which a fingertip can count as touching (also the
/// non-penetration floor used by the IK solver).
inline constexpr double kTouchHeightMm = 5.0;

struct JointSet {
    std::array<bool, 2> present{false, false};
    std::array<std::array<Vec3, kNumJoints>, 2> joints;  // [hand][joint] mm
    std::array<std::array<double, kNumJoints>, 2> confidence{};

    JointSet() {  // Eigen vectors do not zero themselves
        for (auto& hand : joints) hand.fill(Vec3::Zero());
    }
};

struct TimedJointSet {
    uint64_t t_ms = 0;
    JointSet js;
};

inline JointSet decode(const EstimatorOutput& out, const ScreenGeometry& geom,
                       const EstimatorConfig& cfg = {}) {
    JointSet js;
    const int rows = out.heat.dim(1), cols = out.heat.dim(2);
    const size_t plane = static_cast<size_t>(rows) * cols;
    for (int hd = 0; hd < 2; ++hd) {
        js.present[static_cast<size_t>(hd)] = out.exist(hd) > 0.5;
        if (!js.present[static_cast<size_t>(hd)]) continue;  // absent: sentinel zeros
        for (int j = 0; j < kNumJoints; ++j) {
            int ch = hd * kNumJoints + j;
            const double* h = out.heat.data.data() + static_cast<size_t>(ch) * plane;
            size_t best = 0;
            for (size_t i = 1; i < plane; ++i)
                if (h[i] > h[best]) best = i;  // ties keep the lowest index
            int r = static_cast<int>(best) / cols;
            int c = static_cast<int>(best) % cols;
            double z = 0.0;
            for (int k = 0; k < cfg.depth_bins; ++k) z += out.depth(ch, k) * cfg.bin_center(k);
            js.joints[static_cast<size_t>(hd)][static_cast<size_t>(j)] =
                Vec3(geom.pixel_to_mm_x(c), geom.pixel_to_mm_y(r), z);
            js.confidence[static_cast<size_t>(hd)][static_cast<size_t>(j)] = h[best];
        }
    }
    return js;
}

/// Mirror of a decoded joint set: hands swap and x reflects across the
/// padded-grid midline. Decoded x values lie on pixel centers, so the
/// reflection is computed on the recovered pixel column, making
/// decode(mirror(output)) == mirror(decode(output)) exact.
inline JointSet mirror_decoded(const JointSet& js, const ScreenGeometry& geom) {
    JointSet m;
    m.present = {js.present[1], js.present[0]};
    for (int hd = 0; hd < 2; ++hd) {
        int src = 1 - hd;
        if (!js.present[static_cast<size_t>(src)]) continue;
        for (int j = 0; j < kNumJoints; ++j) {
            Vec3 p = js.joints[static_cast<size_t>(src)][static_cast<size_t>(j)];
            long c = std::lround(geom.mm_to_pixel_x(p.x()));
            p.x() = geom.pixel_to_mm_x(static_cast<double>(geom.padded_cols - 1 - c));
            m.joints[static_cast<size_t>(hd)][static_cast<size_t>(j)] = p;
            m.confidence[static_cast<size_t>(hd)][static_cast<size_t>(j)] =
                js.confidence[static_cast<size_t>(src)][static_cast<size_t>(j)];
        }
    }
    return m;
}

/// Fingertips at a decoded height of at most kTouchHeightMm whose heatmap
/// peak sits over active capacitance. Returns flags per [hand][finger].
inline std::array<std::array<bool, kNumFingers>, 2> touching_fingertips(
    const JointSet& js, const NormFrame& norm, const ScreenGeometry& geom) {
    std::array<std::array<bool, kNumFingers>, 2> touch{};
    for (int hd = 0; hd < 2; ++hd) {
        if (!js.present[static_cast<size_t>(hd)]) continue;
        for (int f = 0; f < kNumFingers; ++f) {
            const Vec3& tip = js.joints[static_cast<size_t>(hd)][static_cast<size_t>(kFingertips[static_cast<size_t>(f)])];
            if (tip.z() > kTouchHeightMm) continue;
            int c = static_cast<int>(std::lround(geom.mm_to_pixel_x(tip.x())));
            int r = static_cast<int>(std::lround(geom.mm_to_pixel_y(tip.y())));
            bool active = false;
            for (int dr = -1; dr <= 1 && !active; ++dr)
                for (int dc = -1; dc <= 1 && !active; ++dc) {
                    int rr = r + dr, cc = c + dc;
                    if (rr < 0 || rr >= norm.rows || cc < 0 || cc >= norm.cols) continue;
                    if (norm.value(rr, cc) > 0.0) active = true;
                }
            touch[static_cast<size_t>(hd)][static_cast<size_t>(f)] = active;
        }
    }
    return touch;
}

inline bool all_fingertips_touching(const std::array<bool, kNumFingers>& t) {
    for (bool b : t)
        if (!b) return false;
    return true;
}

// ---------------------------------------------------------------------------
// Line-delimited serialization, numbers fixed to 6 decimals (golden files).
// ---------------------------------------------------------------------------

namespace detail {

inline void append_f6(std::string& out, double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    out += buf;
}

inline void append_joint_array(std::string& out, const std::array<Vec3, kNumJoints>& joints) {
    out += "[";
    for (int j = 0; j < kNumJoints; ++j) {
        if (j) out += ",";
        out += "[";
        append_f6(out, joints[static_cast<size_t>(j)].x());
        out += ",";
        append_f6(out, joints[static_cast<size_t>(j)].y());
        out += ",";
        append_f6(out, joints[static_cast<size_t>(j)].z());
        out += "]";
    }
    out += "]";
}

}  // namespace detail

inline std::string jointset_to_line(const TimedJointSet& rec) {
    std::string out = "{\"t\":" + std::to_string(rec.t_ms) + ",\"hands\":[";
    for (int hd = 0; hd < 2; ++hd) {
        if (hd) out += ",";
        const bool present = rec.js.present[static_cast<size_t>(hd)];
        out += std::string("{\"present\":") + (present ? "true" : "false");
        out += ",\"joints\":";
        detail::append_joint_array(out, rec.js.joints[static_cast<size_t>(hd)]);
        out += ",\"conf\":[";
        for (int j = 0; j < kNumJoints; ++j) {
            if (j) out += ",";
            detail::append_f6(out, rec.js.confidence[static_cast<size_t>(hd)][static_cast<size_t>(j)]);
        }
        out += "]}";
    }
    out += "]}";
    return out;
}

inline void write_jointset_stream(const std::string& path, const std::vector<TimedJointSet>& recs) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) fail("cannot write joint stream: " + path);
    for (const auto& r : recs) out << jointset_to_line(r) << "\n";
}

inline TimedJointSet jointset_from_json(const nlohmann::json& j) {
    TimedJointSet rec;
    rec.t_ms = j.at("t").get<uint64_t>();
    const auto& hands = j.at("hands");
    require(hands.size() == 2, "joint stream: expected two hands per record");
    for (int hd = 0; hd < 2; ++hd) {
        const auto& h = hands[static_cast<size_t>(hd)];
        rec.js.present[static_cast<size_t>(hd)] = h.at("present").get<bool>();
        const auto& joints = h.at("joints");
        require(joints.size() == kNumJoints, "joint stream: expected 21 joints");
        for (int jj = 0; jj < kNumJoints; ++jj)
            rec.js.joints[static_cast<size_t>(hd)][static_cast<size_t>(jj)] =
                Vec3(joints[static_cast<size_t>(jj)][0], joints[static_cast<size_t>(jj)][1],
                     joints[static_cast<size_t>(jj)][2]);
        if (h.contains("conf"))
            for (int jj = 0; jj < kNumJoints; ++jj)
                rec.js.confidence[static_cast<size_t>(hd)][static_cast<size_t>(jj)] =
                    h["conf"][static_cast<size_t>(jj)];
    }
    return rec;
}

/// Reads any line-delimited pose stream that carries t/hands/present/joints
/// (decoded streams, ground-truth files, tracker output).
inline std::vector<TimedJointSet> read_jointset_stream(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail("cannot open joint stream: " + path);
    std::vector<TimedJointSet> recs;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded())
            fail("joint stream: malformed json at " + path + ":" + std::to_string(lineno));
        recs.push_back(jointset_from_json(j));
    }
    return recs;
}

}  // namespace captrack
