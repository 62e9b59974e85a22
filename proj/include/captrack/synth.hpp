#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "captrack/decode.hpp"
#include "captrack/frames.hpp"
#include "captrack/hand_model.hpp"
#include "captrack/mvs.hpp"

// Synthetic scenes: smooth feasible pose trajectories per gesture class, a
// capacitance forward model (exponential falloff over mesh-to-cell distance)
// and simulated multi-camera 2D observations. These are test oracles, not
// physics; the pipeline is exercised end to end without hardware.

namespace captrack {

enum class GestureClass { kPalm, kFingers, kKnuckles, kWriting, kFree };

inline const char* gesture_name(GestureClass g) {
    switch (g) {
        case GestureClass::kPalm: return "palm";
        case GestureClass::kFingers: return "fingers";
        case GestureClass::kKnuckles: return "knuckles";
        case GestureClass::kWriting: return "writing";
        case GestureClass::kFree: return "free";
    }
    return "?";
}

inline GestureClass gesture_from_name(const std::string& s) {
    if (s == "palm") return GestureClass::kPalm;
    if (s == "fingers") return GestureClass::kFingers;
    if (s == "knuckles") return GestureClass::kKnuckles;
    if (s == "writing") return GestureClass::kWriting;
    if (s == "free") return GestureClass::kFree;
    fail("unknown gesture class: " + s);
}

inline constexpr std::array<GestureClass, 5> kAllGestures = {
    GestureClass::kPalm, GestureClass::kFingers, GestureClass::kKnuckles, GestureClass::kWriting,
    GestureClass::kFree};

struct SynthScenario {
    uint64_t seed = 0;
    GestureClass gesture = GestureClass::kPalm;
    std::array<bool, 2> hands{false, true};  // left, right
    int frames = 450;
    double fps = 15.0;
    double cap_noise_sigma = 2.0;  // 8-bit counts
    double px_noise_sigma = 0.5;   // camera pixels
    int keyframe_interval = 15;
    double beta_scale = 0.5;  // per-sequence shape draw, uniform in +-beta_scale
};

struct SynthFrame {
    uint64_t t_ms = 0;
    std::array<std::optional<HandPose>, 2> poses;
    GroundTruthFrame gt;
};

namespace detail {

/// Shifts the root height so the minimum z over `joints_of_interest` equals
/// `target_z`.
inline void settle_height(HandPose& pose, const HandTemplate& tmpl,
                          const std::vector<int>& joints_of_interest, double target_z) {
    auto joints = fk(pose, tmpl);
    double minz = std::numeric_limits<double>::infinity();
    for (int j : joints_of_interest) minz = std::min(minz, joints[static_cast<size_t>(j)].z());
    pose.theta[2] += target_z - minz;
}

inline HandPose sample_keypose(Rng& rng, const HandTemplate& tmpl, GestureClass gesture,
                               Hand hand, const std::array<double, kBetaDim>& beta,
                               const ScreenGeometry& geom) {
    GestureClass g = gesture;
    if (g == GestureClass::kFree)
        g = kAllGestures[static_cast<size_t>(rng.uniform_int(4))];

    HandPose p;
    p.handedness = hand;
    p.beta = beta;
    double margin = 60.0;
    p.theta[0] = rng.uniform(margin, geom.width_mm - margin);
    p.theta[1] = rng.uniform(margin, geom.height_mm - margin + 60.0);
    p.theta[3] = rng.uniform(-0.12, 0.12);
    p.theta[4] = rng.uniform(-0.12, 0.12);
    p.theta[5] = rng.uniform(-0.5, 0.5);

    auto deg = [](double d) { return d * M_PI / 180.0; };
    auto flex = [&](int dof, double lo_deg, double hi_deg) {
        p.theta[static_cast<size_t>(6 + dof)] =
            std::clamp(deg(rng.uniform(lo_deg, hi_deg)), tmpl.theta_min[static_cast<size_t>(dof)],
                       tmpl.theta_max[static_cast<size_t>(dof)]);
    };
    // dof indices: 0,1 thumb CMC; 2k,2k+1 MCP flex/abd for finger k; 10,11
    // thumb MCP/IP; 12..19 PIP/DIP pairs.
    const int mcp_flex[4] = {2, 4, 6, 8};
    const int mcp_abd[4] = {3, 5, 7, 9};
    const int pip[4] = {12, 14, 16, 18};
    const int dip[4] = {13, 15, 17, 19};

    std::vector<int> contact;
    double contact_z = 2.0;
    switch (g) {
        case GestureClass::kPalm: {
            // Flat hand: one shared curl with small per-finger jitter keeps
            // the fingertip heights within a couple of millimeters.
            double curl = rng.uniform(-1.0, 2.0);
            for (int f = 0; f < 4; ++f) {
                flex(mcp_flex[f], curl - 0.5, curl + 0.5);
                flex(mcp_abd[f], -8, 8);
                flex(pip[f], 0, 1.5);
                flex(dip[f], 0, 1.0);
            }
            flex(0, -1, 1);
            flex(1, -10, 15);
            flex(10, 0, 1);
            flex(11, 0, 1);
            p.theta[3] = rng.uniform(-0.008, 0.008);
            p.theta[4] = rng.uniform(-0.008, 0.008);
            contact = {4, 8, 12, 16, 20};
            contact_z = 1.0;
            break;
        }
        case GestureClass::kFingers: {
            int touching = 1 + rng.uniform_int(3);
            for (int f = 0; f < 4; ++f) {
                bool down = f < touching;
                if (down) {
                    flex(mcp_flex[f], 15, 35);
                    flex(pip[f], 5, 20);
                    flex(dip[f], 0, 10);
                    contact.push_back(kFingertips[static_cast<size_t>(f + 1)]);
                } else {
                    flex(mcp_flex[f], 40, 70);
                    flex(pip[f], 70, 100);
                    flex(dip[f], 40, 70);
                }
                flex(mcp_abd[f], -6, 6);
            }
            flex(0, 10, 40);
            flex(1, -10, 20);
            flex(10, 20, 60);
            flex(11, 20, 60);
            p.theta[3] = rng.uniform(-0.35, -0.15);  // pitch so tips reach down
            break;
        }
        case GestureClass::kKnuckles:
            for (int f = 0; f < 4; ++f) {
                flex(mcp_flex[f], 70, 95);
                flex(mcp_abd[f], -4, 4);
                flex(pip[f], 85, 108);
                flex(dip[f], 30, 60);
            }
            flex(0, 20, 50);
            flex(1, 0, 30);
            flex(10, 30, 70);
            flex(11, 30, 70);
            p.theta[3] = rng.uniform(-0.45, -0.25);
            contact = {6, 7, 10, 11, 14, 15, 18, 19};  // finger middle joints
            contact_z = 6.0;
            break;
        case GestureClass::kWriting:
            flex(0, 25, 50);
            flex(1, 10, 35);
            flex(10, 25, 55);
            flex(11, 20, 45);
            flex(mcp_flex[0], 30, 50);
            flex(pip[0], 25, 45);
            flex(dip[0], 10, 25);
            for (int f = 1; f < 4; ++f) {
                flex(mcp_flex[f], 50, 75);
                flex(pip[f], 75, 105);
                flex(dip[f], 40, 70);
            }
            p.theta[5] = rng.uniform(-0.7, -0.3);  // rolled writing posture
            p.theta[3] = rng.uniform(-0.3, -0.1);
            contact = {4, 8, 20};  // pen pinch plus resting pinky side
            contact_z = 3.0;
            break;
        case GestureClass::kFree:
            break;  // handled above
    }
    if (contact.empty()) contact = {4, 8, 12, 16, 20};
    detail::settle_height(p, tmpl, contact, contact_z);
    return p;
}

inline double smoothstep(double u) { return u * u * (3.0 - 2.0 * u); }

inline HandPose blend(const HandPose& a, const HandPose& b, double s) {
    HandPose out = a;
    for (int i = 0; i < kThetaDim; ++i)
        out.theta[static_cast<size_t>(i)] =
            a.theta[static_cast<size_t>(i)] +
            (b.theta[static_cast<size_t>(i)] - a.theta[static_cast<size_t>(i)]) * s;
    return out;
}

}  // namespace detail

/// Smooth feasible trajectory: keyposes sampled per gesture class, blended
/// with a C1 smoothstep; ground truth derives from forward kinematics.
inline std::vector<SynthFrame> generate_trajectory(const SynthScenario& sc,
                                                   const HandTemplate& tmpl,
                                                   const ScreenGeometry& geom = {}) {
    require(sc.frames > 0, "generate_trajectory: frames must be positive");
    require(sc.hands[0] || sc.hands[1], "generate_trajectory: at least one hand required");
    Rng rng(sc.seed);
    std::array<std::array<double, kBetaDim>, 2> beta{};
    for (int hd = 0; hd < 2; ++hd)
        for (int m = 0; m < kBetaDim; ++m)
            beta[static_cast<size_t>(hd)][static_cast<size_t>(m)] =
                rng.uniform(-sc.beta_scale, sc.beta_scale);

    const int interval = std::max(1, sc.keyframe_interval);
    const int keys = sc.frames / interval + 2;
    std::array<std::vector<HandPose>, 2> keyposes;
    for (int hd = 0; hd < 2; ++hd) {
        if (!sc.hands[static_cast<size_t>(hd)]) continue;
        for (int k = 0; k < keys; ++k)
            keyposes[static_cast<size_t>(hd)].push_back(detail::sample_keypose(
                rng, tmpl, sc.gesture, hd == 0 ? Hand::kLeft : Hand::kRight,
                beta[static_cast<size_t>(hd)], geom));
    }

    std::vector<SynthFrame> out;
    out.reserve(static_cast<size_t>(sc.frames));
    for (int i = 0; i < sc.frames; ++i) {
        SynthFrame frame;
        frame.t_ms = static_cast<uint64_t>(std::llround(i * 1000.0 / sc.fps));
        for (int hd = 0; hd < 2; ++hd) {
            if (!sc.hands[static_cast<size_t>(hd)]) continue;
            int seg = i / interval;
            double u = static_cast<double>(i - seg * interval) / interval;
            HandPose pose = detail::blend(keyposes[static_cast<size_t>(hd)][static_cast<size_t>(seg)],
                                          keyposes[static_cast<size_t>(hd)][static_cast<size_t>(seg + 1)],
                                          detail::smoothstep(u));
            frame.poses[static_cast<size_t>(hd)] = pose;
            frame.gt.present[static_cast<size_t>(hd)] = true;
            frame.gt.joints[static_cast<size_t>(hd)] = fk(pose, tmpl);
        }
        out.push_back(std::move(frame));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Capacitance forward model
// ---------------------------------------------------------------------------

inline constexpr double kCapBaseline = 128.0;
inline constexpr double kCapGain = 127.0;
inline constexpr double kCapFalloffMm = 3.0;

/// Surface sample points for proximity: mesh vertices plus triangle
/// centroids of the contact-flattened skin.
inline std::vector<Vec3> capacitance_sample_points(const HandMesh& flattened) {
    std::vector<Vec3> pts = flattened.vertices;
    for (const auto& t : flattened.triangles)
        pts.push_back((flattened.vertices[static_cast<size_t>(t[0])] +
                       flattened.vertices[static_cast<size_t>(t[1])] +
                       flattened.vertices[static_cast<size_t>(t[2])]) /
                      3.0);
    return pts;
}

/// raw = clamp(128 + 127*exp(-delta/3mm) + noise), delta = distance from the
/// hand surface to the cell center on the screen plane.
inline CapFrame simulate_capacitance(const std::vector<const HandMesh*>& meshes,
                                     const ScreenGeometry& geom, double noise_sigma, Rng& rng,
                                     uint64_t t_ms = 0) {
    CapFrame frame = make_cap_frame(t_ms);
    std::vector<double> min_d2(static_cast<size_t>(geom.rows) * geom.cols,
                               std::numeric_limits<double>::infinity());
    const double reach = 6.0 * kCapFalloffMm;  // contributions beyond are sub-quantization
    for (const HandMesh* mesh : meshes) {
        if (!mesh) continue;
        for (const Vec3& p : capacitance_sample_points(*mesh)) {
            int c0 = std::max(0, static_cast<int>(std::floor(geom.mm_to_pixel_x(p.x() - reach))) -
                                     geom.pad_left);
            int c1 = std::min(geom.cols - 1,
                              static_cast<int>(std::ceil(geom.mm_to_pixel_x(p.x() + reach))) -
                                  geom.pad_left);
            int r0 = std::max(0, static_cast<int>(std::floor(geom.mm_to_pixel_y(p.y() - reach))) -
                                     geom.pad_top);
            int r1 = std::min(geom.rows - 1,
                              static_cast<int>(std::ceil(geom.mm_to_pixel_y(p.y() + reach))) -
                                  geom.pad_top);
            for (int r = r0; r <= r1; ++r) {
                double cy = geom.pixel_to_mm_y(r + geom.pad_top);
                for (int c = c0; c <= c1; ++c) {
                    double cx = geom.pixel_to_mm_x(c + geom.pad_left);
                    double d2 = (p.x() - cx) * (p.x() - cx) + (p.y() - cy) * (p.y() - cy) +
                                p.z() * p.z();
                    size_t idx = static_cast<size_t>(r) * geom.cols + c;
                    min_d2[idx] = std::min(min_d2[idx], d2);
                }
            }
        }
    }
    for (int r = 0; r < geom.rows; ++r)
        for (int c = 0; c < geom.cols; ++c) {
            size_t idx = static_cast<size_t>(r) * geom.cols + c;
            double signal = kCapBaseline;
            if (std::isfinite(min_d2[idx]))
                signal += kCapGain * std::exp(-std::sqrt(min_d2[idx]) / kCapFalloffMm);
            if (noise_sigma > 0.0) signal += noise_sigma * rng.normal();
            frame.grid[idx] = static_cast<uint8_t>(std::clamp(std::lround(signal), 0L, 255L));
        }
    return frame;
}

inline CapFrame simulate_capacitance_for(const SynthFrame& frame, const HandTemplate& tmpl,
                                         const ScreenGeometry& geom, double noise_sigma,
                                         Rng& rng) {
    std::array<std::optional<HandMesh>, 2> meshes;
    std::vector<const HandMesh*> ptrs;
    for (int hd = 0; hd < 2; ++hd)
        if (frame.poses[static_cast<size_t>(hd)]) {
            meshes[static_cast<size_t>(hd)] =
                flatten_contact(skin(*frame.poses[static_cast<size_t>(hd)], tmpl));
            ptrs.push_back(&*meshes[static_cast<size_t>(hd)]);
        }
    return simulate_capacitance(ptrs, geom, noise_sigma, rng, frame.t_ms);
}

// ---------------------------------------------------------------------------
// Camera simulation
// ---------------------------------------------------------------------------

struct CameraCorruption {
    int flip_handedness_camera = -1;  // observations of this camera get the wrong label
    double outlier_prob = 0.0;        // per-observation chance of one wild joint
    double outlier_px = 120.0;
};

/// Default nine-camera rig around the panel: five above, four below,
/// 600-800 mm range, 1080p with mild distortion.
inline CameraRig default_rig() {
    CameraRig rig;
    const Vec3 center(172.5, 97.5, 0.0);
    int id = 0;
    auto add = [&](const Vec3& pos) {
        Camera cam;
        cam.id = id++;
        cam.fx = 1100.0;
        cam.fy = 1100.0;
        cam.cx = 960.0;
        cam.cy = 540.0;
        cam.dist = {-0.03, 0.005, 0.0002, -0.0001, 0.0};
        Vec3 fwd = (center - pos).normalized();
        Vec3 upish = std::fabs(fwd.z()) > 0.95 ? Vec3(0, 1, 0) : Vec3(0, 0, 1);
        Vec3 right = fwd.cross(upish).normalized();
        Vec3 down = fwd.cross(right).normalized();
        Eigen::Matrix3d r;
        r.row(0) = right;
        r.row(1) = down;
        r.row(2) = fwd;
        cam.rotation = r;
        cam.translation = -r * pos;
        rig.cameras.push_back(cam);
    };
    add(center + Vec3(0, 0, 700));
    add(center + Vec3(420, 260, 640));
    add(center + Vec3(-420, 260, 660));
    add(center + Vec3(420, -260, 680));
    add(center + Vec3(-420, -260, 620));
    add(center + Vec3(330, 210, -650));
    add(center + Vec3(-330, 210, -670));
    add(center + Vec3(330, -210, -630));
    add(center + Vec3(-330, -210, -690));
    return rig;
}

/// Projects the ground-truth joints into every camera with pixel noise.
/// Hands with any joint behind a camera are omitted from that camera.
inline std::vector<ObservedHand2D> simulate_cameras(const GroundTruthFrame& gt,
                                                    const CameraRig& rig, double px_noise_sigma,
                                                    Rng& rng, const CameraCorruption& corrupt = {}) {
    std::vector<ObservedHand2D> out;
    for (const Camera& cam : rig.cameras) {
        for (int hd = 0; hd < 2; ++hd) {
            if (!gt.present[static_cast<size_t>(hd)]) continue;
            ObservedHand2D obs;
            obs.camera_id = cam.id;
            obs.handedness = hd == 0 ? Hand::kLeft : Hand::kRight;
            bool ok = true;
            for (int j = 0; j < kNumJoints && ok; ++j) {
                auto px = project(cam, gt.joints[static_cast<size_t>(hd)][static_cast<size_t>(j)]);
                if (!px) {
                    ok = false;
                    break;
                }
                obs.joints[static_cast<size_t>(j)] =
                    *px + Vec2(px_noise_sigma * rng.normal(), px_noise_sigma * rng.normal());
            }
            if (!ok) continue;
            if (cam.id == corrupt.flip_handedness_camera)
                obs.handedness = other_hand(obs.handedness);
            if (corrupt.outlier_prob > 0.0 && rng.uniform() < corrupt.outlier_prob) {
                int j = rng.uniform_int(kNumJoints);
                obs.joints[static_cast<size_t>(j)] +=
                    Vec2(corrupt.outlier_px * rng.normal(), corrupt.outlier_px * rng.normal());
            }
            out.push_back(std::move(obs));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Ground-truth pose stream (decode format plus theta/beta)
// ---------------------------------------------------------------------------

inline std::string gt_to_line(const SynthFrame& frame) {
    std::string out = "{\"t\":" + std::to_string(frame.t_ms) + ",\"hands\":[";
    char buf[40];
    for (int hd = 0; hd < 2; ++hd) {
        if (hd) out += ",";
        bool present = frame.gt.present[static_cast<size_t>(hd)];
        out += std::string("{\"present\":") + (present ? "true" : "false");
        out += ",\"joints\":";
        detail::append_joint_array(out, frame.gt.joints[static_cast<size_t>(hd)]);
        if (present && frame.poses[static_cast<size_t>(hd)]) {
            const HandPose& p = *frame.poses[static_cast<size_t>(hd)];
            out += ",\"theta\":[";
            for (int i = 0; i < kThetaDim; ++i) {
                if (i) out += ",";
                std::snprintf(buf, sizeof(buf), "%.9g", p.theta[static_cast<size_t>(i)]);
                out += buf;
            }
            out += "],\"beta\":[";
            for (int i = 0; i < kBetaDim; ++i) {
                if (i) out += ",";
                std::snprintf(buf, sizeof(buf), "%.9g", p.beta[static_cast<size_t>(i)]);
                out += buf;
            }
            out += "]";
        }
        out += "}";
    }
    out += "]}";
    return out;
}

inline void write_gt_stream(const std::string& path, const std::vector<SynthFrame>& frames) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) fail("cannot write ground-truth stream: " + path);
    for (const auto& f : frames) out << gt_to_line(f) << "\n";
}

}  // namespace captrack
