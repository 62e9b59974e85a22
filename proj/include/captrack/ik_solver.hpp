#pragma once

#include <Eigen/Dense>
#include <optional>
#include <vector>

#include "captrack/decode.hpp"
#include "captrack/hand_model.hpp"

// Constrained inverse kinematics: per-frame weighted least-squares fit of the
// hand pose to target joints, subject to joint-angle limits and the
// non-penetration floor, solved by damped Gauss-Newton with an active-set QP
// on each linearization.

namespace captrack {

struct IkProblem {
    std::array<Vec3, kNumJoints> targets;
    std::array<double, kNumJoints> weights{};  // 1, or 2 for touching fingertips
    double z0 = kTouchHeightMm;
    bool beta_locked = true;
    std::array<double, kBetaDim> beta{};  // initial / locked shape
    HandPose init;
    double beta_trust = 0.1;  // per-frame |delta beta| bound during calibration

    IkProblem() {
        targets.fill(Vec3::Zero());
        weights.fill(1.0);
    }
};

enum class ConstraintKind { kThetaMin, kThetaMax, kZFloor, kBetaMin, kBetaMax };

struct ActiveConstraint {
    ConstraintKind kind;
    int index;  // articulation dof, joint, or beta component
};

struct IkSolution {
    HandPose pose;
    double residual_rms_mm = 0.0;  // weighted RMS joint error
    int iterations = 0;
    bool converged = false;
    std::vector<ActiveConstraint> active;
};

namespace detail {

/// min 1/2 x'Hx + g'x subject to rows of A: a_i' x >= b_i, starting from the
/// feasible x = 0. Primal active set; KKT systems are tiny (n <= 36).
struct QpResult {
    Eigen::VectorXd x;
    std::vector<int> active;  // row indices of A
};

inline QpResult solve_qp(const Eigen::MatrixXd& h, const Eigen::VectorXd& g,
                         const Eigen::MatrixXd& a, const Eigen::VectorXd& b) {
    const int n = static_cast<int>(h.rows());
    const int m = static_cast<int>(a.rows());
    Eigen::VectorXd x = Eigen::VectorXd::Zero(n);
    std::vector<int> work;
    std::vector<char> in_work(static_cast<size_t>(m), 0);

    for (int iter = 0; iter < 200; ++iter) {
        const int k = static_cast<int>(work.size());
        Eigen::MatrixXd kkt(n + k, n + k);
        kkt.setZero();
        kkt.topLeftCorner(n, n) = h;
        for (int i = 0; i < k; ++i) {
            kkt.block(n + i, 0, 1, n) = a.row(work[static_cast<size_t>(i)]);
            kkt.block(0, n + i, n, 1) = a.row(work[static_cast<size_t>(i)]).transpose();
        }
        Eigen::VectorXd rhs(n + k);
        rhs.head(n) = -(g + h * x);
        for (int i = 0; i < k; ++i)
            rhs(n + i) = b(work[static_cast<size_t>(i)]) - a.row(work[static_cast<size_t>(i)]).dot(x);
        Eigen::VectorXd sol = kkt.fullPivLu().solve(rhs);
        Eigen::VectorXd p = sol.head(n);

        if (p.norm() < 1e-11) {
            // At the working-set minimizer; check multipliers.
            int worst = -1;
            double worst_nu = -1e-9;
            for (int i = 0; i < k; ++i) {
                double nu = sol(n + i);
                if (nu < worst_nu) {
                    worst_nu = nu;
                    worst = i;
                }
            }
            if (worst < 0) return {x, work};
            in_work[static_cast<size_t>(work[static_cast<size_t>(worst)])] = 0;
            work.erase(work.begin() + worst);
            continue;
        }

        double alpha = 1.0;
        int blocking = -1;
        for (int i = 0; i < m; ++i) {
            if (in_work[static_cast<size_t>(i)]) continue;
            double ap = a.row(i).dot(p);
            if (ap >= -1e-13) continue;  // moving away from or along the boundary
            double gap = a.row(i).dot(x) - b(i);
            double ai = gap / (-ap);
            if (ai < alpha) {
                alpha = ai;
                blocking = i;
            }
        }
        x += std::max(0.0, alpha) * p;
        if (blocking >= 0) {
            work.push_back(blocking);
            in_work[static_cast<size_t>(blocking)] = 1;
        }
        if (blocking < 0) {
            // Full step taken; loop once more to verify optimality.
        }
    }
    return {x, work};
}

inline double weighted_objective(const std::array<Vec3, kNumJoints>& fkj, const IkProblem& prob) {
    double s = 0.0;
    for (int j = 0; j < kNumJoints; ++j) {
        double w = prob.weights[static_cast<size_t>(j)];
        s += w * w * (fkj[static_cast<size_t>(j)] - prob.targets[static_cast<size_t>(j)]).squaredNorm();
    }
    return s;
}

}  // namespace detail

/// Minimizes || w o (targets - fk(theta, beta)) || subject to joint limits
/// and fk_z >= z0 at every joint. Levenberg-damped Gauss-Newton; every
/// linearized subproblem is an active-set QP. Returns the best iterate with
/// converged=false when the step norm never drops below 1e-3.
inline IkSolution solve(const IkProblem& prob, const HandTemplate& tmpl, int max_iters = 50) {
    for (const Vec3& t : prob.targets)
        require(t.allFinite(), "ik solve: targets must be finite");

    HandPose pose = prob.init;
    pose.beta = prob.beta;
    // Restore feasibility of the starting point: clamp angles, lift the root.
    for (int d = 0; d < kArtDofs; ++d)
        pose.theta[static_cast<size_t>(6 + d)] =
            std::clamp(pose.theta[static_cast<size_t>(6 + d)], tmpl.theta_min[static_cast<size_t>(d)],
                       tmpl.theta_max[static_cast<size_t>(d)]);
    for (double& bcomp : pose.beta) bcomp = std::clamp(bcomp, tmpl.beta_min, tmpl.beta_max);
    auto joints = fk(pose, tmpl);
    {
        double minz = joints[0].z();
        for (const Vec3& p : joints) minz = std::min(minz, p.z());
        if (minz < prob.z0) {
            pose.theta[2] += prob.z0 - minz;
            joints = fk(pose, tmpl);
        }
    }

    const bool with_beta = !prob.beta_locked;
    const int n = kThetaDim + (with_beta ? kBetaDim : 0);
    double lambda = 1e-3;
    double objective = detail::weighted_objective(joints, prob);
    IkSolution best;
    best.pose = pose;

    int iter = 0;
    for (; iter < max_iters; ++iter) {
        auto jac_full = fk_jacobian(pose, tmpl);
        Eigen::MatrixXd jac(3 * kNumJoints, n);
        jac.leftCols(kThetaDim) = jac_full.leftCols(kThetaDim);
        if (with_beta) jac.rightCols(kBetaDim) = jac_full.rightCols(kBetaDim);

        Eigen::VectorXd err(3 * kNumJoints);
        Eigen::VectorXd wsq(3 * kNumJoints);
        for (int j = 0; j < kNumJoints; ++j) {
            double w = prob.weights[static_cast<size_t>(j)];
            for (int c = 0; c < 3; ++c) {
                err(3 * j + c) = joints[static_cast<size_t>(j)](c) - prob.targets[static_cast<size_t>(j)](c);
                wsq(3 * j + c) = w * w;
            }
        }
        Eigen::MatrixXd jw = wsq.asDiagonal() * jac;
        Eigen::MatrixXd h_base = jac.transpose() * jw;
        Eigen::VectorXd g = jac.transpose() * (wsq.asDiagonal() * err);

        // Linear constraints a'x >= b on the step.
        std::vector<Eigen::RowVectorXd> rows;
        std::vector<double> lb;
        auto add = [&](const Eigen::RowVectorXd& a, double b, ConstraintKind, int) {
            rows.push_back(a);
            lb.push_back(b);
        };
        for (int d = 0; d < kArtDofs; ++d) {
            Eigen::RowVectorXd a = Eigen::RowVectorXd::Zero(n);
            a(6 + d) = 1.0;
            add(a, tmpl.theta_min[static_cast<size_t>(d)] - pose.theta[static_cast<size_t>(6 + d)],
                ConstraintKind::kThetaMin, d);
            a(6 + d) = -1.0;
            add(a, pose.theta[static_cast<size_t>(6 + d)] - tmpl.theta_max[static_cast<size_t>(d)],
                ConstraintKind::kThetaMax, d);
        }
        for (int j = 0; j < kNumJoints; ++j) {
            Eigen::RowVectorXd a = jac.row(3 * j + 2);
            add(a, prob.z0 - joints[static_cast<size_t>(j)].z(), ConstraintKind::kZFloor, j);
        }
        if (with_beta) {
            for (int mcomp = 0; mcomp < kBetaDim; ++mcomp) {
                Eigen::RowVectorXd a = Eigen::RowVectorXd::Zero(n);
                a(kThetaDim + mcomp) = 1.0;
                add(a, std::max(tmpl.beta_min - pose.beta[static_cast<size_t>(mcomp)], -prob.beta_trust),
                    ConstraintKind::kBetaMin, mcomp);
                a(kThetaDim + mcomp) = -1.0;
                add(a, std::max(pose.beta[static_cast<size_t>(mcomp)] - tmpl.beta_max, -prob.beta_trust),
                    ConstraintKind::kBetaMax, mcomp);
            }
        }
        Eigen::MatrixXd amat(static_cast<int>(rows.size()), n);
        Eigen::VectorXd bvec(static_cast<int>(rows.size()));
        for (size_t i = 0; i < rows.size(); ++i) {
            amat.row(static_cast<int>(i)) = rows[i];
            bvec(static_cast<int>(i)) = lb[i];
        }

        // Levenberg loop on this linearization.
        bool accepted = false;
        double step_norm = 0.0;
        for (int attempt = 0; attempt < 10; ++attempt) {
            Eigen::MatrixXd h = h_base + lambda * Eigen::MatrixXd::Identity(n, n);
            detail::QpResult qp = detail::solve_qp(h, g, amat, bvec);
            HandPose trial = pose;
            for (int i = 0; i < kThetaDim; ++i) trial.theta[static_cast<size_t>(i)] += qp.x(i);
            if (with_beta)
                for (int mcomp = 0; mcomp < kBetaDim; ++mcomp)
                    trial.beta[static_cast<size_t>(mcomp)] += qp.x(kThetaDim + mcomp);
            auto trial_joints = fk(trial, tmpl);
            double trial_obj = detail::weighted_objective(trial_joints, prob);
            if (trial_obj <= objective) {
                pose = trial;
                joints = trial_joints;
                objective = trial_obj;
                lambda = std::max(lambda / 10.0, 1e-9);
                step_norm = qp.x.norm();
                accepted = true;
                break;
            }
            lambda = std::min(lambda * 10.0, 1e9);
        }
        if (!accepted) break;  // damping exhausted: keep the best iterate
        if (step_norm < 1e-3) {
            best.converged = true;
            ++iter;
            break;
        }
    }

    // Exact snap-back for roundoff on the box, exact lift for the floor.
    for (int d = 0; d < kArtDofs; ++d)
        pose.theta[static_cast<size_t>(6 + d)] =
            std::clamp(pose.theta[static_cast<size_t>(6 + d)], tmpl.theta_min[static_cast<size_t>(d)],
                       tmpl.theta_max[static_cast<size_t>(d)]);
    for (double& bcomp : pose.beta) bcomp = std::clamp(bcomp, tmpl.beta_min, tmpl.beta_max);
    joints = fk(pose, tmpl);
    double minz = joints[0].z();
    for (const Vec3& p : joints) minz = std::min(minz, p.z());
    if (minz < prob.z0) {
        pose.theta[2] += prob.z0 - minz;
        joints = fk(pose, tmpl);
    }

    best.pose = pose;
    best.iterations = iter;
    // Report constraints binding at the returned pose.
    best.active.clear();
    for (int d = 0; d < kArtDofs; ++d) {
        double v = pose.theta[static_cast<size_t>(6 + d)];
        if (v - tmpl.theta_min[static_cast<size_t>(d)] <= 1e-9)
            best.active.push_back({ConstraintKind::kThetaMin, d});
        else if (tmpl.theta_max[static_cast<size_t>(d)] - v <= 1e-9)
            best.active.push_back({ConstraintKind::kThetaMax, d});
    }
    for (int j = 0; j < kNumJoints; ++j)
        if (joints[static_cast<size_t>(j)].z() - prob.z0 <= 1e-6)
            best.active.push_back({ConstraintKind::kZFloor, j});
    if (with_beta) {
        for (int mcomp = 0; mcomp < kBetaDim; ++mcomp) {
            double v = pose.beta[static_cast<size_t>(mcomp)];
            if (v - tmpl.beta_min <= 1e-9)
                best.active.push_back({ConstraintKind::kBetaMin, mcomp});
            else if (tmpl.beta_max - v <= 1e-9)
                best.active.push_back({ConstraintKind::kBetaMax, mcomp});
        }
    }
    double num = 0.0, den = 0.0;
    for (int j = 0; j < kNumJoints; ++j) {
        double w = prob.weights[static_cast<size_t>(j)];
        num += w * w * (joints[static_cast<size_t>(j)] - prob.targets[static_cast<size_t>(j)]).squaredNorm();
        den += w * w;
    }
    best.residual_rms_mm = std::sqrt(num / den);
    return best;
}

// ---------------------------------------------------------------------------
// Per-stream tracking with warm starts and shape calibration
// ---------------------------------------------------------------------------

struct HandTrack {
    bool has_prev = false;
    HandPose prev;
    int absent_frames = 0;
    int calibration_frames = 0;  // frames with all five fingertips touching
    bool beta_locked = false;
    std::array<double, kBetaDim> beta{};
};

struct TrackerSession {
    std::array<HandTrack, 2> hands;
    int64_t frame_index = 0;
    int reappear_grace = 5;  // absent frames before the warm start resets
    int calibration_target = 20;
};

struct TrackFrameResult {
    std::array<std::optional<IkSolution>, 2> solutions;
};

/// Builds the per-joint weight vector: 2 for fingertips flagged touching.
inline std::array<double, kNumJoints> touch_weights(const std::array<bool, kNumFingers>& touching) {
    std::array<double, kNumJoints> w;
    w.fill(1.0);
    for (int f = 0; f < kNumFingers; ++f)
        if (touching[static_cast<size_t>(f)]) w[static_cast<size_t>(kFingertips[static_cast<size_t>(f)])] = 2.0;
    return w;
}

/// Fits both present hands, carrying the previous solution as the initial
/// value. Shape updates run on all-fingertips-touching frames until
/// calibration_target such frames lock beta for the rest of the session.
inline TrackFrameResult track_frame(TrackerSession& session, const JointSet& js,
                                    const std::array<std::array<bool, kNumFingers>, 2>& touching,
                                    const HandTemplate& tmpl) {
    TrackFrameResult out;
    for (int hd = 0; hd < 2; ++hd) {
        HandTrack& track = session.hands[static_cast<size_t>(hd)];
        if (!js.present[static_cast<size_t>(hd)]) {
            if (track.has_prev && ++track.absent_frames > session.reappear_grace)
                track.has_prev = false;
            continue;
        }
        track.absent_frames = 0;
        const bool all_touch = all_fingertips_touching(touching[static_cast<size_t>(hd)]);
        IkProblem prob;
        prob.targets = js.joints[static_cast<size_t>(hd)];
        prob.weights = touch_weights(touching[static_cast<size_t>(hd)]);
        prob.beta = track.beta;
        prob.beta_locked = track.beta_locked || !all_touch;
        prob.init = track.has_prev
                        ? track.prev
                        : neutral_pose(hd == 0 ? Hand::kLeft : Hand::kRight);
        IkSolution sol = solve(prob, tmpl);
        track.prev = sol.pose;
        track.has_prev = true;
        if (!track.beta_locked && all_touch) {
            track.beta = sol.pose.beta;
            if (++track.calibration_frames >= session.calibration_target) track.beta_locked = true;
        }
        out.solutions[static_cast<size_t>(hd)] = std::move(sol);
    }
    ++session.frame_index;
    return out;
}

}  // namespace captrack
