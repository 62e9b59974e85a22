#pragma once

#include <Eigen/Dense>
#include <array>
#include <algorithm>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "captrack/common.hpp"
#include "captrack/joints.hpp"

// Ground-truth construction math: pinhole cameras with radial/tangential
// distortion, cross-view hand consistency filtering, least-squares point
// triangulation, and 30->15 fps stream alignment.

namespace captrack {

using Vec3 = Eigen::Vector3d;
using Vec2 = Eigen::Vector2d;

struct Camera {
    int id = 0;
    double fx = 0, fy = 0, cx = 0, cy = 0;
    std::array<double, 5> dist{};  // k1, k2, p1, p2, k3
    Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();  // world -> camera
    Vec3 translation = Vec3::Zero();

    Vec3 optical_center() const { return -rotation.transpose() * translation; }
};

struct CameraRig {
    std::vector<Camera> cameras;
};

inline void validate(const Camera& cam) {
    require(cam.fx > 0 && cam.fy > 0, "camera " + std::to_string(cam.id) + ": fx, fy must be positive");
    Eigen::Matrix3d should_be_identity = cam.rotation * cam.rotation.transpose();
    require((should_be_identity - Eigen::Matrix3d::Identity()).norm() < 1e-9,
            "camera " + std::to_string(cam.id) + ": rotation is not orthonormal");
}

struct Ray {
    Vec3 origin;
    Vec3 dir;  // unit
};

struct ObservedHand2D {
    int camera_id = 0;
    Hand handedness = Hand::kRight;
    std::array<Vec2, kNumJoints> joints;  // pixels
    double confidence = 1.0;

    ObservedHand2D() { joints.fill(Vec2::Zero()); }
};

namespace detail {

inline Vec2 distort(const Camera& cam, const Vec2& norm) {
    const double k1 = cam.dist[0], k2 = cam.dist[1], p1 = cam.dist[2], p2 = cam.dist[3],
                 k3 = cam.dist[4];
    const double x = norm.x(), y = norm.y();
    const double r2 = x * x + y * y;
    const double radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3));
    return Vec2(x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x),
                y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y);
}

/// Fixed-point inversion of the distortion model (10 iterations).
inline Vec2 undistort(const Camera& cam, const Vec2& distorted) {
    const double k1 = cam.dist[0], k2 = cam.dist[1], p1 = cam.dist[2], p2 = cam.dist[3],
                 k3 = cam.dist[4];
    Vec2 u = distorted;
    for (int it = 0; it < 10; ++it) {
        const double x = u.x(), y = u.y();
        const double r2 = x * x + y * y;
        const double radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3));
        const double dx = 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x);
        const double dy = p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y;
        u = Vec2((distorted.x() - dx) / radial, (distorted.y() - dy) / radial);
    }
    return u;
}

}  // namespace detail

/// Projects a world point (mm) to pixels; empty if the point lies behind the
/// camera.
inline std::optional<Vec2> project(const Camera& cam, const Vec3& world) {
    Vec3 pc = cam.rotation * world + cam.translation;
    if (pc.z() <= 1e-9) return std::nullopt;
    Vec2 d = detail::distort(cam, Vec2(pc.x() / pc.z(), pc.y() / pc.z()));
    return Vec2(cam.fx * d.x() + cam.cx, cam.fy * d.y() + cam.cy);
}

/// Back-projects a pixel through the intrinsics and distortion into a world
/// ray anchored at the optical center.
inline Ray unproject(const Camera& cam, const Vec2& pixel) {
    require(std::isfinite(pixel.x()) && std::isfinite(pixel.y()), "unproject: pixel must be finite");
    Vec2 norm((pixel.x() - cam.cx) / cam.fx, (pixel.y() - cam.cy) / cam.fy);
    Vec2 u = detail::undistort(cam, norm);
    Vec3 dir_cam(u.x(), u.y(), 1.0);
    Vec3 dir = cam.rotation.transpose() * dir_cam;
    return Ray{cam.optical_center(), dir.normalized()};
}

/// Mean cross-view distance between same-joint rays, skipping near-parallel
/// pairs. Throws when every pair is degenerate. The arguments are ordered
/// canonically first: the quantity is symmetric, and evaluating it in a
/// fixed operand order keeps D(a,b) == D(b,a) bit-exact under FP contraction.
inline double ray_consistency(const std::array<Ray, kNumJoints>& a,
                              const std::array<Ray, kNumJoints>& b) {
    auto key = [](const std::array<Ray, kNumJoints>& r) {
        return std::make_tuple(r[0].origin.x(), r[0].origin.y(), r[0].origin.z(), r[0].dir.x(),
                               r[0].dir.y(), r[0].dir.z());
    };
    const auto& first = key(a) <= key(b) ? a : b;
    const auto& second = key(a) <= key(b) ? b : a;
    double sum = 0.0;
    int used = 0;
    for (int k = 0; k < kNumJoints; ++k) {
        Vec3 cross = first[static_cast<size_t>(k)].dir.cross(second[static_cast<size_t>(k)].dir);
        double n = cross.norm();
        if (n < 1e-6) continue;
        sum += std::fabs(
            (first[static_cast<size_t>(k)].origin - second[static_cast<size_t>(k)].origin)
                .dot(cross / n));
        ++used;
    }
    if (used == 0) fail("ray_consistency: all joint ray pairs are near-parallel");
    return sum / used;
}

struct TriangulationResult {
    Vec3 point;
    double residual_mm;  // RMS point-to-ray distance
};

/// Least-squares point minimizing summed squared distances to the rays.
inline TriangulationResult triangulate(const std::vector<Ray>& rays) {
    require(rays.size() >= 2, "triangulate: needs at least two rays");
    Eigen::Matrix3d a = Eigen::Matrix3d::Zero();
    Vec3 rhs = Vec3::Zero();
    for (const Ray& r : rays) {
        Eigen::Matrix3d proj = Eigen::Matrix3d::Identity() - r.dir * r.dir.transpose();
        a += proj;
        rhs += proj * r.origin;
    }
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(a);
    require(es.eigenvalues()(0) > 1e-9 * std::max(es.eigenvalues()(2), 1e-300),
            "triangulate: degenerate geometry, rays are parallel");
    Vec3 p = es.eigenvectors() *
             (es.eigenvalues().cwiseInverse().asDiagonal() * (es.eigenvectors().transpose() * rhs));
    double ss = 0.0;
    for (const Ray& r : rays) ss += ((p - r.origin).cross(r.dir)).squaredNorm();
    return {p, std::sqrt(ss / static_cast<double>(rays.size()))};
}

/// Rays for all 21 joints of one observation.
inline std::array<Ray, kNumJoints> hand_rays(const Camera& cam, const ObservedHand2D& obs) {
    std::array<Ray, kNumJoints> rays;
    for (int k = 0; k < kNumJoints; ++k)
        rays[static_cast<size_t>(k)] = unproject(cam, obs.joints[static_cast<size_t>(k)]);
    return rays;
}

/// Keeps an observation iff at least `min_consistent` same-handedness
/// observations from other cameras agree within `threshold_mm`.
inline std::vector<ObservedHand2D> filter_hands(const CameraRig& rig,
                                                const std::vector<ObservedHand2D>& hands,
                                                double threshold_mm = 10.0,
                                                int min_consistent = 3) {
    std::vector<std::array<Ray, kNumJoints>> rays(hands.size());
    for (size_t i = 0; i < hands.size(); ++i) {
        const Camera* cam = nullptr;
        for (const Camera& c : rig.cameras)
            if (c.id == hands[i].camera_id) cam = &c;
        require(cam != nullptr, "filter_hands: unknown camera id " +
                                    std::to_string(hands[i].camera_id));
        rays[i] = hand_rays(*cam, hands[i]);
    }
    std::vector<ObservedHand2D> kept;
    for (size_t i = 0; i < hands.size(); ++i) {
        int consistent = 0;
        for (size_t j = 0; j < hands.size(); ++j) {
            if (i == j || hands[i].camera_id == hands[j].camera_id ||
                hands[i].handedness != hands[j].handedness)
                continue;
            double d;
            try {
                d = ray_consistency(rays[i], rays[j]);
            } catch (const Error&) {
                continue;  // fully degenerate pair cannot vouch for anything
            }
            if (d < threshold_mm) ++consistent;
        }
        if (consistent >= min_consistent) kept.push_back(hands[i]);
    }
    return kept;
}

// ---------------------------------------------------------------------------
// Stream alignment (30 fps observations onto 15 fps capacitive timestamps)
// ---------------------------------------------------------------------------

template <typename T>
struct Timed {
    uint64_t t_ms = 0;
    T value;
};

struct AlignedFrame {
    uint64_t t_ms = 0;
    bool valid = false;  // false: outside the source range, excluded
    std::vector<Vec3> joints;
};

/// Linear interpolation of joint tracks onto capacitive timestamps. Exact
/// timestamp matches pass through; targets outside the source range come
/// back flagged invalid.
inline std::vector<AlignedFrame> align_streams(const std::vector<Timed<std::vector<Vec3>>>& src,
                                               const std::vector<uint64_t>& cap_timestamps) {
    require(!src.empty(), "align_streams: empty source track");
    for (size_t i = 1; i < src.size(); ++i)
        require(src[i].t_ms >= src[i - 1].t_ms, "align_streams: source timestamps must not decrease");
    std::vector<AlignedFrame> out;
    out.reserve(cap_timestamps.size());
    for (uint64_t t : cap_timestamps) {
        AlignedFrame frame;
        frame.t_ms = t;
        if (t < src.front().t_ms || t > src.back().t_ms) {
            out.push_back(std::move(frame));  // refuse to extrapolate
            continue;
        }
        auto up = std::lower_bound(src.begin(), src.end(), t,
                                   [](const Timed<std::vector<Vec3>>& s, uint64_t v) {
                                       return s.t_ms < v;
                                   });
        frame.valid = true;
        if (up->t_ms == t) {
            frame.joints = up->value;  // exact match passes through
        } else {
            auto lo = up - 1;
            double alpha = static_cast<double>(t - lo->t_ms) /
                           static_cast<double>(up->t_ms - lo->t_ms);
            require(lo->value.size() == up->value.size(),
                    "align_streams: bracketing frames disagree on joint count");
            frame.joints.resize(lo->value.size());
            for (size_t k = 0; k < frame.joints.size(); ++k)
                frame.joints[k] = (1.0 - alpha) * lo->value[k] + alpha * up->value[k];
        }
        out.push_back(std::move(frame));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Rig and observation files
// ---------------------------------------------------------------------------

inline nlohmann::json rig_to_json(const CameraRig& rig) {
    nlohmann::json j;
    j["units"] = {{"length", "mm"}};
    for (const Camera& c : rig.cameras) {
        nlohmann::json jc;
        jc["id"] = c.id;
        jc["intrinsics"] = {{"fx", c.fx}, {"fy", c.fy}, {"cx", c.cx}, {"cy", c.cy}};
        jc["distortion"] = c.dist;
        std::vector<double> r(9);
        for (int a = 0; a < 3; ++a)
            for (int b = 0; b < 3; ++b) r[static_cast<size_t>(3 * a + b)] = c.rotation(a, b);
        jc["rotation"] = r;
        jc["translation"] = {c.translation.x(), c.translation.y(), c.translation.z()};
        j["cameras"].push_back(jc);
    }
    return j;
}

inline CameraRig rig_from_json(const nlohmann::json& j) {
    CameraRig rig;
    for (const auto& jc : j.at("cameras")) {
        Camera c;
        c.id = jc.at("id");
        c.fx = jc.at("intrinsics").at("fx");
        c.fy = jc.at("intrinsics").at("fy");
        c.cx = jc.at("intrinsics").at("cx");
        c.cy = jc.at("intrinsics").at("cy");
        c.dist = jc.at("distortion");
        for (int a = 0; a < 3; ++a)
            for (int b = 0; b < 3; ++b)
                c.rotation(a, b) = jc.at("rotation")[static_cast<size_t>(3 * a + b)];
        c.translation = Vec3(jc.at("translation")[0], jc.at("translation")[1],
                             jc.at("translation")[2]);
        validate(c);
        rig.cameras.push_back(c);
    }
    return rig;
}

inline void save_rig(const std::string& path, const CameraRig& rig) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) fail("cannot write rig: " + path);
    out << rig_to_json(rig).dump(1) << "\n";
}

inline CameraRig load_rig(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail("cannot open rig: " + path);
    nlohmann::json j;
    in >> j;
    return rig_from_json(j);
}

/// Observation records: one line per detected hand per camera per frame.
struct ObservationFrame {
    uint64_t t_ms = 0;
    int frame = 0;
    std::vector<ObservedHand2D> hands;
};

inline void write_observations(const std::string& path, const std::vector<ObservationFrame>& frames) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) fail("cannot write observations: " + path);
    char buf[64];
    for (const auto& f : frames) {
        for (const auto& h : f.hands) {
            std::string line = "{\"frame\":" + std::to_string(f.frame) +
                               ",\"t\":" + std::to_string(f.t_ms) +
                               ",\"camera\":" + std::to_string(h.camera_id) + ",\"hand\":\"" +
                               (h.handedness == Hand::kLeft ? "left" : "right") + "\",\"px\":[";
            for (int k = 0; k < kNumJoints; ++k) {
                if (k) line += ",";
                std::snprintf(buf, sizeof(buf), "[%.4f,%.4f]", h.joints[static_cast<size_t>(k)].x(),
                              h.joints[static_cast<size_t>(k)].y());
                line += buf;
            }
            std::snprintf(buf, sizeof(buf), "],\"conf\":%.4f}", h.confidence);
            line += buf;
            out << line << "\n";
        }
    }
}

inline std::vector<ObservationFrame> read_observations(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail("cannot open observations: " + path);
    std::map<int, ObservationFrame> by_frame;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded())
            fail("observations: malformed json at " + path + ":" + std::to_string(lineno));
        int frame = j.at("frame");
        ObservationFrame& of = by_frame[frame];
        of.frame = frame;
        of.t_ms = j.at("t");
        ObservedHand2D h;
        h.camera_id = j.at("camera");
        std::string hand = j.at("hand");
        require(hand == "left" || hand == "right",
                "observations: hand must be left or right at line " + std::to_string(lineno));
        h.handedness = hand == "left" ? Hand::kLeft : Hand::kRight;
        const auto& px = j.at("px");
        require(px.size() == kNumJoints, "observations: expected 21 joints per record");
        for (int k = 0; k < kNumJoints; ++k)
            h.joints[static_cast<size_t>(k)] = Vec2(px[static_cast<size_t>(k)][0], px[static_cast<size_t>(k)][1]);
        h.confidence = j.value("conf", 1.0);
        of.hands.push_back(h);
    }
    std::vector<ObservationFrame> frames;
    frames.reserve(by_frame.size());
    for (auto& [id, f] : by_frame) frames.push_back(std::move(f));
    return frames;
}

}  // namespace captrack
