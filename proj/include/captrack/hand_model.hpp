#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <array>
#include <fstream>
#include <iomanip>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "captrack/common.hpp"
#include "captrack/joints.hpp"

// Simplified parametric hand: 26-DoF pose (6 root + 20 articulation), 10
// shape coefficients scaling bone lengths, low-poly skinned mesh. The
// template is a right-hand canonical; the left hand runs the same FK on a
// mirrored template, which makes left/right symmetry exact.

namespace captrack {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

inline constexpr int kThetaDim = 26;
inline constexpr int kBetaDim = 10;
inline constexpr int kArtDofs = 20;  // theta[6..25]

// sin/cos helpers that are exactly odd/even in their argument, so mirrored
// angles produce exactly sign-flipped matrix entries.
inline double sym_sin(double x) { return std::copysign(std::sin(std::fabs(x)), x); }
inline double sym_cos(double x) { return std::cos(std::fabs(x)); }

struct HandPose {
    std::array<double, kThetaDim> theta{};  // [0:3) translation mm, [3:6) XYZ Euler rad
    std::array<double, kBetaDim> beta{};
    Hand handedness = Hand::kRight;
};

/// One articulation DoF: a rotation axis anchored at a joint, acting on the
/// bones leaving that joint.
struct HandDof {
    int joint;
    Vec3 axis;
};

struct SkinWeight {
    int bone;
    double w;
};

struct HandTemplate {
    std::array<Vec3, kNumJoints> rest;  // right-hand canonical, wrist at origin
    std::array<HandDof, kArtDofs> dofs;
    std::array<double, kArtDofs> theta_min{}, theta_max{};
    double beta_min = -3.0, beta_max = 3.0;
    // shape_basis(m, b): d(bone b length scale)/d(beta m); zero beta = scale 1.
    Eigen::Matrix<double, kBetaDim, kNumBones> shape_basis;
    std::vector<Vec3> mesh_vertices;  // rest positions
    std::vector<std::array<int, 3>> mesh_triangles;
    std::vector<std::vector<SkinWeight>> mesh_weights;  // <=3 bones, sum 1

    Vec3 bone_offset(int bone) const { return rest[bone_child(bone)] - rest[bone_parent(bone)]; }
    double bone_rest_length(int bone) const { return bone_offset(bone).norm(); }
};

struct HandMesh {
    std::vector<Vec3> vertices;
    std::vector<std::array<int, 3>> triangles;
};

namespace detail {

inline Mat3 axis_angle(const Vec3& a, double t) {
    double c = sym_cos(t), s = sym_sin(t);
    Mat3 k;
    k << 0, -a.z(), a.y(), a.z(), 0, -a.x(), -a.y(), a.x(), 0;
    return c * Mat3::Identity() + (1.0 - c) * (a * a.transpose()) + s * k;
}

inline Mat3 rot_x(double t) {
    double c = sym_cos(t), s = sym_sin(t);
    Mat3 m;
    m << 1, 0, 0, 0, c, -s, 0, s, c;
    return m;
}
inline Mat3 rot_y(double t) {
    double c = sym_cos(t), s = sym_sin(t);
    Mat3 m;
    m << c, 0, s, 0, 1, 0, -s, 0, c;
    return m;
}
inline Mat3 rot_z(double t) {
    double c = sym_cos(t), s = sym_sin(t);
    Mat3 m;
    m << c, -s, 0, s, c, 0, 0, 0, 1;
    return m;
}

/// Mirror the canonical template across x for the left hand. Axes map to
/// -S*a so the same theta values articulate the mirrored chain.
inline HandTemplate mirrored(const HandTemplate& t) {
    HandTemplate m = t;
    for (auto& p : m.rest) p.x() = -p.x();
    for (auto& d : m.dofs) d.axis = Vec3(d.axis.x(), -d.axis.y(), -d.axis.z());
    for (auto& v : m.mesh_vertices) v.x() = -v.x();
    for (auto& tri : m.mesh_triangles) std::swap(tri[1], tri[2]);  // keep winding
    return m;
}

}  // namespace detail

/// Mirror map on poses: fk(left, theta) == x-mirror of fk(right, mirror_theta(theta)).
inline HandPose mirror_pose(const HandPose& p) {
    HandPose m = p;
    m.handedness = other_hand(p.handedness);
    m.theta[0] = -p.theta[0];
    m.theta[4] = -p.theta[4];
    m.theta[5] = -p.theta[5];
    return m;
}

/// Per-bone length scales 1 + B^T beta.
inline std::array<double, kNumBones> bone_scales(const HandPose& pose, const HandTemplate& tmpl) {
    std::array<double, kNumBones> s;
    for (int b = 0; b < kNumBones; ++b) {
        double d = 0.0;
        for (int m = 0; m < kBetaDim; ++m) d += tmpl.shape_basis(m, b) * pose.beta[m];
        s[static_cast<size_t>(b)] = 1.0 + d;
    }
    return s;
}

/// Everything forward kinematics produces, including the per-DoF world axes
/// and anchors the Jacobian needs.
struct FkResult {
    std::array<Vec3, kNumJoints> joints;
    std::array<Mat3, kNumJoints> rot;      // orientation of the bone arriving at each joint
    std::array<Vec3, kArtDofs> dof_axis;   // world axes of articulation DoFs
    std::array<Vec3, kArtDofs> dof_anchor;
    std::array<Vec3, 3> root_axis;         // world axes of the XYZ Euler root rotation
    std::array<Vec3, kNumJoints> unscaled_world_offset;  // R * template bone offset per joint
};

inline FkResult fk_full(const HandPose& pose, const HandTemplate& canonical) {
    const HandTemplate tmpl =
        pose.handedness == Hand::kLeft ? detail::mirrored(canonical) : canonical;
    FkResult out;
    const Vec3 t(pose.theta[0], pose.theta[1], pose.theta[2]);
    const Mat3 rx = detail::rot_x(pose.theta[3]);
    const Mat3 ry = detail::rot_y(pose.theta[4]);
    const Mat3 rz = detail::rot_z(pose.theta[5]);
    const Mat3 r_root = rx * ry * rz;
    out.root_axis[0] = Vec3::UnitX();
    out.root_axis[1] = rx * Vec3::UnitY();
    out.root_axis[2] = (rx * ry) * Vec3::UnitZ();

    auto scales = bone_scales(pose, tmpl);

    out.joints[0] = t;
    out.rot[0] = r_root;
    out.unscaled_world_offset[0].setZero();

    // Joints are numbered so parents precede children; DoFs at one joint
    // compose left to right in ascending theta index.
    for (int j = 1; j < kNumJoints; ++j) {
        int q = kJointParent[static_cast<size_t>(j)];
        // Rotation entering j = rotation entering q composed with q's DoFs.
        Mat3 rq = out.rot[static_cast<size_t>(q)];
        Mat3 acc = rq;
        for (int d = 0; d < kArtDofs; ++d) {
            if (tmpl.dofs[static_cast<size_t>(d)].joint != q) continue;
            out.dof_axis[static_cast<size_t>(d)] = acc * tmpl.dofs[static_cast<size_t>(d)].axis;
            out.dof_anchor[static_cast<size_t>(d)] = out.joints[static_cast<size_t>(q)];
            acc = acc * detail::axis_angle(tmpl.dofs[static_cast<size_t>(d)].axis,
                                           pose.theta[static_cast<size_t>(6 + d)]);
        }
        out.rot[static_cast<size_t>(j)] = acc;
        int bone = j - 1;
        Vec3 off = acc * tmpl.bone_offset(bone);
        out.unscaled_world_offset[static_cast<size_t>(j)] = off;
        out.joints[static_cast<size_t>(j)] =
            out.joints[static_cast<size_t>(q)] + scales[static_cast<size_t>(bone)] * off;
    }
    return out;
}

/// 21 joint positions in screen-frame millimeters.
inline std::array<Vec3, kNumJoints> fk(const HandPose& pose, const HandTemplate& tmpl) {
    return fk_full(pose, tmpl).joints;
}

inline std::array<double, kNumBones> bone_lengths_of(const std::array<Vec3, kNumJoints>& joints) {
    std::array<double, kNumBones> l;
    for (int b = 0; b < kNumBones; ++b)
        l[static_cast<size_t>(b)] =
            (joints[static_cast<size_t>(bone_child(b))] - joints[static_cast<size_t>(bone_parent(b))]).norm();
    return l;
}

/// Is a DoF an ancestor of joint j (i.e. does rotating it move j)?
inline bool dof_moves_joint(const HandTemplate& tmpl, int dof, int j) {
    int q = tmpl.dofs[static_cast<size_t>(dof)].joint;
    int a = j;
    while (a != -1) {
        if (a == q) return j != q;  // the joint itself does not move
        a = kJointParent[static_cast<size_t>(a)];
    }
    return false;
}

/// Jacobian of the 63 stacked joint coordinates w.r.t. [theta(26), beta(10)].
inline Eigen::Matrix<double, 3 * kNumJoints, kThetaDim + kBetaDim> fk_jacobian(
    const HandPose& pose, const HandTemplate& canonical) {
    const HandTemplate tmpl =
        pose.handedness == Hand::kLeft ? detail::mirrored(canonical) : canonical;
    FkResult f = fk_full(pose, canonical);
    Eigen::Matrix<double, 3 * kNumJoints, kThetaDim + kBetaDim> jac;
    jac.setZero();
    const Vec3 root(pose.theta[0], pose.theta[1], pose.theta[2]);

    // beta derivatives accumulate down the chain: d p_j / d beta_m =
    // d p_parent / d beta_m + B(m, bone) * (R * offset).
    std::array<std::array<Vec3, kBetaDim>, kNumJoints> dbeta;
    for (auto& row : dbeta[0]) row.setZero();

    for (int j = 0; j < kNumJoints; ++j) {
        const Vec3 p = f.joints[static_cast<size_t>(j)];
        jac.block<3, 3>(3 * j, 0).setIdentity();
        for (int e = 0; e < 3; ++e)
            jac.block<3, 1>(3 * j, 3 + e) = f.root_axis[static_cast<size_t>(e)].cross(p - root);
        if (j > 0) {
            int q = kJointParent[static_cast<size_t>(j)];
            int bone = j - 1;
            for (int m = 0; m < kBetaDim; ++m) {
                dbeta[static_cast<size_t>(j)][static_cast<size_t>(m)] =
                    dbeta[static_cast<size_t>(q)][static_cast<size_t>(m)] +
                    tmpl.shape_basis(m, bone) * f.unscaled_world_offset[static_cast<size_t>(j)];
                jac.block<3, 1>(3 * j, kThetaDim + m) =
                    dbeta[static_cast<size_t>(j)][static_cast<size_t>(m)];
            }
            for (int d = 0; d < kArtDofs; ++d) {
                if (!dof_moves_joint(tmpl, d, j)) continue;
                jac.block<3, 1>(3 * j, 6 + d) =
                    f.dof_axis[static_cast<size_t>(d)].cross(p - f.dof_anchor[static_cast<size_t>(d)]);
            }
        }
    }
    return jac;
}

/// Linear blend skinning against the posed skeleton.
inline HandMesh skin(const HandPose& pose, const HandTemplate& canonical) {
    const HandTemplate tmpl =
        pose.handedness == Hand::kLeft ? detail::mirrored(canonical) : canonical;
    FkResult f = fk_full(pose, canonical);
    auto scales = bone_scales(pose, tmpl);
    HandMesh mesh;
    mesh.triangles = tmpl.mesh_triangles;
    mesh.vertices.resize(tmpl.mesh_vertices.size());
    for (size_t v = 0; v < tmpl.mesh_vertices.size(); ++v) {
        Vec3 out = Vec3::Zero();
        for (const SkinWeight& sw : tmpl.mesh_weights[v]) {
            int child = bone_child(sw.bone);
            int parent = bone_parent(sw.bone);
            Vec3 local = tmpl.mesh_vertices[v] - tmpl.rest[static_cast<size_t>(parent)];
            out += sw.w * (f.joints[static_cast<size_t>(parent)] +
                           scales[static_cast<size_t>(sw.bone)] *
                               (f.rot[static_cast<size_t>(child)] * local));
        }
        mesh.vertices[v] = out;
    }
    return mesh;
}

/// Screen-contact flattening: project penetrating vertices onto z = 0.
inline HandMesh flatten_contact(HandMesh mesh) {
    for (Vec3& v : mesh.vertices)
        if (v.z() < 0.0) v.z() = 0.0;
    return mesh;
}

inline bool pose_within_limits(const HandPose& pose, const HandTemplate& tmpl, double tol = 0.0) {
    for (int d = 0; d < kArtDofs; ++d) {
        double v = pose.theta[static_cast<size_t>(6 + d)];
        if (v < tmpl.theta_min[static_cast<size_t>(d)] - tol ||
            v > tmpl.theta_max[static_cast<size_t>(d)] + tol)
            return false;
    }
    for (double b : pose.beta)
        if (b < tmpl.beta_min - tol || b > tmpl.beta_max + tol) return false;
    return true;
}

// ---------------------------------------------------------------------------
// Default template: digitized mean adult right hand (177 mm length).
// ---------------------------------------------------------------------------

namespace detail {

inline void add_bone_box(HandTemplate& t, int bone, double radius) {
    const Vec3 a = t.rest[static_cast<size_t>(bone_parent(bone))];
    const Vec3 b = t.rest[static_cast<size_t>(bone_child(bone))];
    Vec3 d = (b - a).normalized();
    Vec3 u = d.cross(Vec3::UnitZ());
    if (u.norm() < 1e-6) u = d.cross(Vec3::UnitY());
    u.normalize();
    Vec3 w = d.cross(u).normalized();
    int base = static_cast<int>(t.mesh_vertices.size());
    // near ring blends toward the parent bone when one exists
    int parent_joint = bone_parent(bone);
    int parent_bone = parent_joint > 0 ? parent_joint - 1 : -1;
    for (int end = 0; end < 2; ++end) {
        Vec3 c = end == 0 ? a : b;
        for (int k = 0; k < 4; ++k) {
            double su = (k == 0 || k == 3) ? 1.0 : -1.0;
            double sw = (k < 2) ? 1.0 : -1.0;
            t.mesh_vertices.push_back(c + radius * (su * u + sw * w));
            std::vector<SkinWeight> weights;
            if (end == 0 && parent_bone >= 0)
                weights = {{bone, 0.6}, {parent_bone, 0.4}};
            else
                weights = {{bone, 1.0}};
            t.mesh_weights.push_back(weights);
        }
    }
    auto quad = [&](int i0, int i1, int i2, int i3) {
        t.mesh_triangles.push_back({base + i0, base + i1, base + i2});
        t.mesh_triangles.push_back({base + i0, base + i2, base + i3});
    };
    quad(0, 1, 5, 4);
    quad(1, 2, 6, 5);
    quad(2, 3, 7, 6);
    quad(3, 0, 4, 7);
    quad(3, 2, 1, 0);  // near cap
    quad(4, 5, 6, 7);  // far cap
}

}  // namespace detail

inline HandTemplate default_hand_template() {
    HandTemplate t;
    auto deg = [](double d) { return d * M_PI / 180.0; };
    const double xy[kNumJoints][2] = {
        {0, 0},                                              // wrist
        {-24, -26},  {-47, -49},  {-62, -64},  {-74, -75},   // thumb
        {-25, -84},  {-28, -124}, {-30, -149}, {-32, -169},  // index
        {-4, -88},   {-4, -130},  {-4, -156},  {-4, -177},   // middle
        {16, -85},   {18, -124},  {19, -148},  {20, -168},   // ring
        {34, -77},   {38, -107},  {40, -126},  {42, -142},   // pinky
    };
    for (int j = 0; j < kNumJoints; ++j) t.rest[static_cast<size_t>(j)] = Vec3(xy[j][0], xy[j][1], 0.0);

    const Vec3 flex_axis = Vec3::UnitX();        // curls toward the screen
    const Vec3 abd_axis = Vec3::UnitZ();         // spreads in the palm plane
    const Vec3 thumb_flex = Vec3(1, -1, 0).normalized();
    // theta[6..25]; see HandPose layout.
    t.dofs = {{
        {1, thumb_flex}, {1, abd_axis},                       // thumb CMC flex/abd
        {5, flex_axis},  {5, abd_axis},                       // index MCP
        {9, flex_axis},  {9, abd_axis},                       // middle MCP
        {13, flex_axis}, {13, abd_axis},                      // ring MCP
        {17, flex_axis}, {17, abd_axis},                      // pinky MCP
        {2, thumb_flex}, {3, thumb_flex},                     // thumb MCP, IP
        {6, flex_axis},  {7, flex_axis},                      // index PIP, DIP
        {10, flex_axis}, {11, flex_axis},                     // middle PIP, DIP
        {14, flex_axis}, {15, flex_axis},                     // ring PIP, DIP
        {18, flex_axis}, {19, flex_axis},                     // pinky PIP, DIP
    }};
    const double lim[kArtDofs][2] = {
        {-30, 60}, {-30, 60},                    // thumb CMC
        {-15, 100}, {-25, 25},                   // index MCP
        {-15, 100}, {-25, 25},                   // middle MCP
        {-15, 100}, {-25, 25},                   // ring MCP
        {-15, 100}, {-25, 25},                   // pinky MCP
        {0, 90},   {0, 90},                      // thumb MCP, IP
        {0, 110},  {0, 90},                      // index PIP, DIP
        {0, 110},  {0, 90},                      // middle PIP, DIP
        {0, 110},  {0, 90},                      // ring PIP, DIP
        {0, 110},  {0, 90},                      // pinky PIP, DIP
    };
    for (int d = 0; d < kArtDofs; ++d) {
        t.theta_min[static_cast<size_t>(d)] = deg(lim[d][0]);
        t.theta_max[static_cast<size_t>(d)] = deg(lim[d][1]);
    }

    t.shape_basis.setZero();
    for (int b = 0; b < kNumBones; ++b) t.shape_basis(0, b) = 0.1;  // uniform scale
    for (int b = 0; b < kNumBones; ++b) {
        int digit = kFingerOfJoint[static_cast<size_t>(bone_child(b))];
        t.shape_basis(1 + digit, b) += 0.1;  // per-digit length
    }
    // palm-shape modes act on the five palm bones (children are the MCPs/CMC)
    const int palm_bones[5] = {0, 4, 8, 12, 16};
    for (int pb : palm_bones) t.shape_basis(6, pb) = 0.1;  // palm size
    t.shape_basis(7, 4) = 0.1;                             // radial/ulnar skew
    t.shape_basis(7, 16) = -0.1;
    for (int f = 0; f < 4; ++f) t.shape_basis(8, 5 + 4 * f) = 0.1;   // proximal emphasis
    for (int f = 0; f < 4; ++f) t.shape_basis(9, 7 + 4 * f) = 0.1;   // distal emphasis

    const double radii[kNumBones] = {
        11, 9, 8, 7,      // thumb chain
        12, 7, 6.5, 6,    // index
        13, 7, 6.5, 6,    // middle
        12, 7, 6.5, 6,    // ring
        11, 6, 5.5, 5,    // pinky
    };
    for (int b = 0; b < kNumBones; ++b) detail::add_bone_box(t, b, radii[b]);
    return t;
}

/// Neutral pose: flat hand hovering at the given height.
inline HandPose neutral_pose(Hand hand, double root_z_mm = 40.0) {
    HandPose p;
    p.handedness = hand;
    p.theta[2] = root_z_mm;
    return p;
}

// ---------------------------------------------------------------------------
// Template asset io (units: mm, radians) and OBJ export
// ---------------------------------------------------------------------------

inline nlohmann::json template_to_json(const HandTemplate& t) {
    nlohmann::json j;
    j["units"] = {{"length", "mm"}, {"angle", "radians"}};
    for (const auto& p : t.rest) j["rest_joints"].push_back({p.x(), p.y(), p.z()});
    for (const auto& d : t.dofs)
        j["dofs"].push_back({{"joint", d.joint}, {"axis", {d.axis.x(), d.axis.y(), d.axis.z()}}});
    j["theta_min"] = t.theta_min;
    j["theta_max"] = t.theta_max;
    j["beta_range"] = {t.beta_min, t.beta_max};
    for (int m = 0; m < kBetaDim; ++m) {
        std::vector<double> row(kNumBones);
        for (int b = 0; b < kNumBones; ++b) row[static_cast<size_t>(b)] = t.shape_basis(m, b);
        j["shape_basis"].push_back(row);
    }
    for (const auto& v : t.mesh_vertices) j["mesh"]["vertices"].push_back({v.x(), v.y(), v.z()});
    for (const auto& tri : t.mesh_triangles) j["mesh"]["triangles"].push_back(tri);
    for (const auto& ws : t.mesh_weights) {
        nlohmann::json jw = nlohmann::json::array();
        for (const auto& w : ws) jw.push_back({{"bone", w.bone}, {"w", w.w}});
        j["mesh"]["weights"].push_back(jw);
    }
    return j;
}

inline HandTemplate template_from_json(const nlohmann::json& j) {
    HandTemplate t;
    require(j.contains("rest_joints") && j["rest_joints"].size() == kNumJoints,
            "hand template: rest_joints must list 21 joints");
    for (int i = 0; i < kNumJoints; ++i) {
        auto& p = j["rest_joints"][static_cast<size_t>(i)];
        t.rest[static_cast<size_t>(i)] = Vec3(p[0], p[1], p[2]);
    }
    require(j["dofs"].size() == kArtDofs, "hand template: expected 20 dofs");
    for (int i = 0; i < kArtDofs; ++i) {
        auto& d = j["dofs"][static_cast<size_t>(i)];
        t.dofs[static_cast<size_t>(i)] = {d["joint"].get<int>(),
                                          Vec3(d["axis"][0], d["axis"][1], d["axis"][2])};
    }
    for (int i = 0; i < kArtDofs; ++i) {
        t.theta_min[static_cast<size_t>(i)] = j["theta_min"][static_cast<size_t>(i)];
        t.theta_max[static_cast<size_t>(i)] = j["theta_max"][static_cast<size_t>(i)];
    }
    t.beta_min = j["beta_range"][0];
    t.beta_max = j["beta_range"][1];
    t.shape_basis.setZero();
    for (int m = 0; m < kBetaDim; ++m)
        for (int b = 0; b < kNumBones; ++b)
            t.shape_basis(m, b) = j["shape_basis"][static_cast<size_t>(m)][static_cast<size_t>(b)];
    if (j.contains("mesh")) {
        for (auto& v : j["mesh"]["vertices"]) t.mesh_vertices.emplace_back(v[0], v[1], v[2]);
        for (auto& tri : j["mesh"]["triangles"])
            t.mesh_triangles.push_back({tri[0].get<int>(), tri[1].get<int>(), tri[2].get<int>()});
        for (auto& jw : j["mesh"]["weights"]) {
            std::vector<SkinWeight> ws;
            for (auto& w : jw) ws.push_back({w["bone"].get<int>(), w["w"].get<double>()});
            t.mesh_weights.push_back(ws);
        }
    }
    return t;
}

inline void save_template(const std::string& path, const HandTemplate& t) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) fail("cannot write hand template: " + path);
    out << template_to_json(t).dump(1) << "\n";
}

inline HandTemplate load_template(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail("cannot open hand template: " + path);
    nlohmann::json j;
    in >> j;
    return template_from_json(j);
}

/// ASCII OBJ-compatible vertex/face listing.
inline void export_obj(const std::string& path, const HandMesh& mesh) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) fail("cannot write mesh: " + path);
    out << std::setprecision(6) << std::fixed;
    for (const Vec3& v : mesh.vertices)
        out << "v " << v.x() << " " << v.y() << " " << v.z() << "\n";
    for (const auto& t : mesh.triangles)
        out << "f " << t[0] + 1 << " " << t[1] + 1 << " " << t[2] + 1 << "\n";
}

}  // namespace captrack
