#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>

#include "captrack/ik_solver.hpp"

using namespace captrack;

namespace {

/// Random pose inside the joint limits whose fk satisfies the z floor.
HandPose random_feasible_pose(Rng& rng, const HandTemplate& tmpl, Hand hand = Hand::kRight) {
    HandPose p;
    p.handedness = hand;
    p.theta[0] = rng.uniform(80.0, 260.0);
    p.theta[1] = rng.uniform(40.0, 150.0);
    p.theta[2] = rng.uniform(20.0, 60.0);
    p.theta[3] = rng.uniform(-0.3, 0.3);
    p.theta[4] = rng.uniform(-0.3, 0.3);
    p.theta[5] = rng.uniform(-0.5, 0.5);
    for (int d = 0; d < kArtDofs; ++d) {
        double lo = tmpl.theta_min[d], hi = tmpl.theta_max[d];
        p.theta[6 + d] = rng.uniform(lo + 0.15 * (hi - lo), hi - 0.15 * (hi - lo));
    }
    auto joints = fk(p, tmpl);
    double minz = joints[0].z();
    for (const auto& j : joints) minz = std::min(minz, j.z());
    if (minz < kTouchHeightMm + 1.0) p.theta[2] += kTouchHeightMm + 1.0 - minz;
    return p;
}

double joint_epe(const std::array<Vec3, kNumJoints>& a, const std::array<Vec3, kNumJoints>& b) {
    double s = 0.0;
    for (int j = 0; j < kNumJoints; ++j) s += (a[j] - b[j]).norm();
    return s / kNumJoints;
}

}  // namespace

TEST_CASE("warm start at the solution converges immediately") {
    HandTemplate tmpl = default_hand_template();
    Rng rng(3);
    HandPose truth = random_feasible_pose(rng, tmpl);
    IkProblem prob;
    prob.targets = fk(truth, tmpl);
    prob.init = truth;
    prob.beta = truth.beta;
    IkSolution sol = solve(prob, tmpl);
    CHECK(sol.converged);
    CHECK(sol.iterations <= 2);
    CHECK(sol.residual_rms_mm < 1e-6);
}

TEST_CASE("ik oracle: random feasible poses from neutral init") {
    HandTemplate tmpl = default_hand_template();
    Rng rng(5);
    std::vector<double> epes;
    for (int trial = 0; trial < 100; ++trial) {
        HandPose truth = random_feasible_pose(rng, tmpl);
        IkProblem prob;
        prob.targets = fk(truth, tmpl);
        prob.init = neutral_pose(Hand::kRight);
        IkSolution sol = solve(prob, tmpl);
        auto joints = fk(sol.pose, tmpl);
        epes.push_back(joint_epe(joints, prob.targets));
        // feasibility
        for (int d = 0; d < kArtDofs; ++d) {
            CHECK(sol.pose.theta[6 + d] >= tmpl.theta_min[d] - 1e-9);
            CHECK(sol.pose.theta[6 + d] <= tmpl.theta_max[d] + 1e-9);
        }
        for (const auto& j : joints) CHECK(j.z() >= kTouchHeightMm - 1e-6);
    }
    std::sort(epes.begin(), epes.end());
    double median = epes[49];
    double p95 = epes[94];
    INFO("median ", median, " p95 ", p95);
    CHECK(median < 0.5);
    CHECK(p95 < 2.0);
}

TEST_CASE("fingertip target below the screen activates the z floor") {
    HandTemplate tmpl = default_hand_template();
    Rng rng(7);
    HandPose truth = random_feasible_pose(rng, tmpl);
    IkProblem prob;
    prob.targets = fk(truth, tmpl);
    prob.targets[8].z() = -20.0;  // index fingertip forced below the screen
    prob.init = truth;
    prob.beta = truth.beta;
    IkSolution sol = solve(prob, tmpl);
    auto joints = fk(sol.pose, tmpl);
    CHECK(joints[8].z() == doctest::Approx(5.0).epsilon(1e-3));
    bool z_active = false;
    for (const auto& c : sol.active)
        if (c.kind == ConstraintKind::kZFloor) z_active = true;
    CHECK(z_active);
    // other fingertips stay near their reachable targets
    double other = 0.0;
    int count = 0;
    for (int j = 0; j < kNumJoints; ++j) {
        if (kFingerOfJoint[j] == 1) continue;  // skip the index chain
        other += (joints[j] - prob.targets[j]).norm();
        ++count;
    }
    CHECK(other / count < 2.0);
}

TEST_CASE("objective decreases monotonically across accepted iterations") {
    // The damping scheme only accepts non-increasing steps, so the final
    // residual can never exceed the initial one; spot-check a few solves.
    HandTemplate tmpl = default_hand_template();
    Rng rng(11);
    for (int trial = 0; trial < 10; ++trial) {
        HandPose truth = random_feasible_pose(rng, tmpl);
        IkProblem prob;
        prob.targets = fk(truth, tmpl);
        prob.init = neutral_pose(Hand::kRight);
        auto init_joints = fk(prob.init, tmpl);
        double init_epe = joint_epe(init_joints, prob.targets);
        IkSolution sol = solve(prob, tmpl);
        double final_epe = joint_epe(fk(sol.pose, tmpl), prob.targets);
        CHECK(final_epe <= init_epe + 1e-9);
    }
}

TEST_CASE("deterministic: identical problems give bit-identical solutions") {
    HandTemplate tmpl = default_hand_template();
    Rng rng(13);
    HandPose truth = random_feasible_pose(rng, tmpl);
    IkProblem prob;
    prob.targets = fk(truth, tmpl);
    prob.init = neutral_pose(Hand::kRight);
    IkSolution a = solve(prob, tmpl);
    IkSolution b = solve(prob, tmpl);
    CHECK(a.pose.theta == b.pose.theta);
    CHECK(a.pose.beta == b.pose.beta);
    CHECK(a.residual_rms_mm == b.residual_rms_mm);
    CHECK(a.iterations == b.iterations);
}

TEST_CASE("rejects non-finite targets") {
    HandTemplate tmpl = default_hand_template();
    IkProblem prob;
    prob.targets.fill(Vec3(10, 10, 10));
    prob.targets[3].x() = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(solve(prob, tmpl), Error);
}

TEST_CASE("touch weights double only the touching fingertips") {
    std::array<bool, kNumFingers> touching{};
    touching[1] = true;  // index
    auto w = touch_weights(touching);
    for (int j = 0; j < kNumJoints; ++j) CHECK(w[j] == (j == 8 ? 2.0 : 1.0));
}

TEST_CASE("tracker locks shape after exactly 20 calibration frames") {
    HandTemplate tmpl = default_hand_template();
    Rng rng(17);
    HandPose truth = random_feasible_pose(rng, tmpl);
    // fingertips pressed to the touch height so every frame calibrates
    auto targets = fk(truth, tmpl);

    TrackerSession session;
    JointSet js;
    js.present = {false, true};
    js.joints[1] = targets;
    std::array<std::array<bool, kNumFingers>, 2> touching{};
    touching[1].fill(true);

    std::array<double, kBetaDim> locked_beta{};
    for (int frame = 0; frame < 30; ++frame) {
        auto res = track_frame(session, js, touching, tmpl);
        REQUIRE(res.solutions[1].has_value());
        const HandTrack& track = session.hands[1];
        if (frame < 19) {
            CHECK(!track.beta_locked);
            CHECK(track.calibration_frames == frame + 1);
        } else if (frame == 19) {
            CHECK(track.beta_locked);  // locked after exactly 20 frames
            locked_beta = track.beta;
        } else {
            CHECK(track.beta_locked);
            CHECK(res.solutions[1]->pose.beta == locked_beta);  // bit-constant
        }
    }
}

TEST_CASE("absent hand resets to neutral init after the grace period") {
    HandTemplate tmpl = default_hand_template();
    Rng rng(19);
    HandPose truth = random_feasible_pose(rng, tmpl);
    TrackerSession session;
    JointSet js;
    js.present = {false, true};
    js.joints[1] = fk(truth, tmpl);
    std::array<std::array<bool, kNumFingers>, 2> touching{};

    track_frame(session, js, touching, tmpl);
    CHECK(session.hands[1].has_prev);

    JointSet empty;
    for (int i = 0; i < 5; ++i) track_frame(session, empty, touching, tmpl);
    CHECK(session.hands[1].has_prev);  // still within grace
    track_frame(session, empty, touching, tmpl);
    CHECK(!session.hands[1].has_prev);  // grace exceeded
}
