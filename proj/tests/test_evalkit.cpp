#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "captrack/evalkit.hpp"

using namespace captrack;

namespace {

std::vector<TimedJointSet> random_stream(Rng& rng, int frames, bool both_hands) {
    std::vector<TimedJointSet> out;
    for (int f = 0; f < frames; ++f) {
        TimedJointSet rec;
        rec.t_ms = static_cast<uint64_t>(f) * 67;
        rec.js.present = {both_hands, true};
        for (int hd = 0; hd < 2; ++hd)
            for (int j = 0; j < kNumJoints; ++j)
                rec.js.joints[hd][j] = Vec3(rng.uniform(0.0, 345.0), rng.uniform(0.0, 195.0),
                                            rng.uniform(0.0, 100.0));
        out.push_back(rec);
    }
    return out;
}

}  // namespace

TEST_CASE("identical streams give zero error and perfect HEA") {
    Rng rng(1);
    auto gt = random_stream(rng, 10, true);
    MetricsReport rep = compute_metrics(gt, gt);
    CHECK(rep.overall.epe == 0.0);
    CHECK(rep.overall.epe_xy == 0.0);
    CHECK(rep.overall.epe_z == 0.0);
    CHECK(rep.overall.hea == 1.0);
    CHECK(rep.overall.frames == 10);
    CHECK(rep.overall.matched_hand_frames == 20);
}

TEST_CASE("3-4-5 joint offset decomposes exactly") {
    Rng rng(2);
    auto gt = random_stream(rng, 1, false);
    auto pred = gt;
    pred[0].js.joints[1][5] += Vec3(3.0, 4.0, 0.0);
    MetricsReport rep = compute_metrics(pred, gt);
    // one joint of 21 moved by 5mm in-plane
    CHECK(rep.overall.epe == doctest::Approx(5.0 / 21.0));
    CHECK(rep.overall.epe_xy == doctest::Approx(5.0 / 21.0));
    CHECK(rep.overall.epe_z == 0.0);
}

TEST_CASE("per-joint epe decomposition epe^2 = epe_xy^2 + epe_z^2") {
    Rng rng(3);
    for (int i = 0; i < 100; ++i) {
        Vec3 d(rng.normal(), rng.normal(), rng.normal());
        double e = d.norm();
        double exy = std::sqrt(d.x() * d.x() + d.y() * d.y());
        double ez = std::fabs(d.z());
        CHECK(e * e == doctest::Approx(exy * exy + ez * ez).epsilon(1e-12));
    }
}

TEST_CASE("visible-finger subset can be exact while overall epe is not") {
    Rng rng(4);
    auto gt = random_stream(rng, 1, false);
    // right hand: index finger visible (touching), others high
    for (int j = 0; j < kNumJoints; ++j) gt[0].js.joints[1][j].z() = 60.0;
    for (int j : {5, 6, 7, 8}) gt[0].js.joints[1][j] = Vec3(100.0 + j, 80.0, 2.0);
    auto pred = gt;
    // corrupt only invisible fingers
    for (int j = 0; j < kNumJoints; ++j)
        if (kFingerOfJoint[j] != 1) pred[0].js.joints[1][j] += Vec3(8.0, 0.0, 3.0);
    MetricsReport rep = compute_metrics(pred, gt);
    CHECK(rep.overall.epe_v == 0.0);
    CHECK(rep.overall.epe > 0.0);
}

TEST_CASE("hea counts absent-hand agreement while epe skips absent hands") {
    Rng rng(5);
    auto gt = random_stream(rng, 4, false);  // left hand absent everywhere
    auto pred = gt;
    pred[1].js.present[0] = true;  // false positive on one frame
    pred[2].js.present[1] = false; // miss on another
    MetricsReport rep = compute_metrics(pred, gt);
    CHECK(rep.overall.hea == doctest::Approx(6.0 / 8.0));
    CHECK(rep.overall.matched_hand_frames == 3);
}

TEST_CASE("metrics scale exactly with a power-of-two coordinate scale") {
    Rng rng(6);
    auto gt = random_stream(rng, 5, true);
    auto pred = random_stream(rng, 5, true);
    MetricsReport base = compute_metrics(pred, gt);
    auto scale = [](std::vector<TimedJointSet> v) {
        for (auto& r : v)
            for (int hd = 0; hd < 2; ++hd)
                for (int j = 0; j < kNumJoints; ++j) r.js.joints[hd][j] *= 2.0;
        return v;
    };
    MetricsReport doubled = compute_metrics(scale(pred), scale(gt));
    CHECK(doubled.overall.epe == 2.0 * base.overall.epe);
    CHECK(doubled.overall.epe_xy == 2.0 * base.overall.epe_xy);
    CHECK(doubled.overall.epe_z == 2.0 * base.overall.epe_z);
    // permutation invariance over frames
    auto shuffled_pred = pred;
    auto shuffled_gt = gt;
    std::swap(shuffled_pred[0], shuffled_pred[4]);
    std::swap(shuffled_gt[0], shuffled_gt[4]);
    std::swap(shuffled_pred[1], shuffled_pred[3]);
    std::swap(shuffled_gt[1], shuffled_gt[3]);
    MetricsReport perm = compute_metrics(shuffled_pred, shuffled_gt);
    CHECK(perm.overall.epe == base.overall.epe);
}

TEST_CASE("length mismatch is rejected") {
    Rng rng(7);
    auto gt = random_stream(rng, 4, true);
    auto pred = random_stream(rng, 5, true);
    CHECK_THROWS_AS(compute_metrics(pred, gt), Error);
}

TEST_CASE("protocol splits partition the dataset") {
    std::vector<DatasetEntry> entries;
    int id = 0;
    for (int participant = 0; participant < 4; ++participant)
        for (int session = 0; session < 4; ++session)
            for (int g = 0; g < 5; ++g) {
                DatasetEntry e;
                e.meta.id = "seq" + std::to_string(id++);
                e.meta.participant = participant;
                e.meta.session = session;
                e.meta.gesture = kAllGestures[g];
                entries.push_back(e);
            }

    auto check_partition = [&](Protocol p, int folds) {
        std::map<std::string, int> seen;
        for (int fold = 0; fold < folds; ++fold) {
            Split s = build_protocol_splits(entries, p, fold);
            CHECK(s.train.size() + s.test.size() == entries.size());
            CHECK(!s.test.empty());
            for (const auto& e : s.test) seen[e.meta.id]++;
        }
        CHECK(seen.size() == entries.size());  // union of test folds = everything
        for (const auto& [id_, count] : seen) CHECK(count == 1);  // pairwise disjoint
    };
    check_partition(Protocol::kP1, 4);
    check_partition(Protocol::kP2, 3);
    check_partition(Protocol::kP3, 5);

    // P1 fold 0 holds out session 0
    Split s = build_protocol_splits(entries, Protocol::kP1, 0);
    for (const auto& e : s.test) CHECK(e.meta.session == 0);
    for (const auto& e : s.train) CHECK(e.meta.session != 0);
    // P3 test folds contain exactly one gesture class
    Split s3 = build_protocol_splits(entries, Protocol::kP3, 2);
    for (const auto& e : s3.test) CHECK(e.meta.gesture == kAllGestures[2]);
    CHECK_THROWS_AS(build_protocol_splits(entries, Protocol::kP1, 7), Error);
}

TEST_CASE("index round trip and report output") {
    std::vector<DatasetEntry> entries(2);
    entries[0].meta = {"a", 1, 2, GestureClass::kPalm, "right"};
    entries[0].capv = "a.capv";
    entries[0].gt = "a_gt.jsonl";
    entries[0].frames = 10;
    entries[1].meta = {"b", 0, 1, GestureClass::kFree, "both"};
    entries[1].capv = "b.capv";
    entries[1].gt = "b_gt.jsonl";
    auto dir = std::filesystem::temp_directory_path() / "captrack_eval_test";
    std::filesystem::create_directories(dir);
    save_index((dir / "index.json").string(), entries);
    auto back = load_index((dir / "index.json").string());
    REQUIRE(back.size() == 2);
    CHECK(back[0].meta.participant == 1);
    CHECK(back[1].meta.gesture == GestureClass::kFree);
    CHECK(back[0].capv == "a.capv");

    Rng rng(8);
    auto gt = random_stream(rng, 3, true);
    MetricsReport rep = compute_metrics(gt, gt);
    auto j = report_to_json(rep);
    CHECK(j["overall"]["hea"] == 1.0);
    CHECK(j["reference"]["avg_epe_mm"] == 11.8);
    write_report_csv((dir / "report.csv").string(), rep);
    std::ifstream csv(dir / "report.csv");
    std::string header;
    std::getline(csv, header);
    CHECK(header.rfind("block,epe_mm", 0) == 0);
    std::filesystem::remove_all(dir);
}
